//! Retrieval scoring: similarity grids, dual-softmax re-weighting, Recall@K,
//! AVG-R, and the frame-level quality classifier.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, softmax_scaled, Matrix};

/// Which side issues the queries. Rows of a similarity grid are videos and
/// columns are texts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t2v" | "text_to_video" | "text-to-video" => Ok(Self::TextToVideo),
            "v2t" | "video_to_text" | "video-to-text" => Ok(Self::VideoToText),
            other => Err(Error::Config(format!("unknown direction {other:?}; expected t2v or v2t"))),
        }
    }

    pub fn short(&self) -> &'static str {
        match self {
            Self::TextToVideo => "t2v",
            Self::VideoToText => "v2t",
        }
    }
}

/// `S_ij = v_i · t_j`.
pub fn similarity_matrix(videos: &Matrix, texts: &Matrix) -> Result<Matrix> {
    if videos.cols() != texts.cols() {
        return Err(Error::shape("similarity_matrix", videos.shape(), texts.shape()));
    }
    matmul_nt(videos, texts)
}

/// Dual-softmax re-weighting. For text-to-video queries each entry is
/// multiplied by the softmax over videos of its column; for video-to-text
/// queries, by the softmax over texts of its row.
pub fn apply_dsl(s: &Matrix, beta: f64, direction: Direction) -> Result<Matrix> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::domain(format!("dual-softmax temperature must be positive, got {beta}")));
    }
    if s.rows() == 0 || s.cols() == 0 {
        return Ok(s.clone());
    }
    let mut out = s.clone();
    match direction {
        Direction::TextToVideo => {
            for j in 0..s.cols() {
                let col: Vec<f64> = (0..s.rows()).map(|i| s.get(i, j)).collect();
                let w = softmax_scaled(&col, beta)?;
                for (i, wi) in w.iter().enumerate() {
                    out.set(i, j, s.get(i, j) * wi);
                }
            }
        }
        Direction::VideoToText => {
            for i in 0..s.rows() {
                let w = softmax_scaled(s.row(i), beta)?;
                for (j, wj) in w.iter().enumerate() {
                    out.set(i, j, s.get(i, j) * wj);
                }
            }
        }
    }
    Ok(out)
}

/// Queries as rows of candidate scores, so both directions share one code path.
fn query_rows(s: &Matrix, direction: Direction) -> Matrix {
    match direction {
        Direction::VideoToText => s.clone(),
        Direction::TextToVideo => s.transpose(),
    }
}

/// 0-based rank of the diagonal candidate: candidates scoring strictly higher,
/// plus equal-scoring candidates with a lower index.
pub fn rank_of_truth(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > t || (x == t && j < truth))
        .count()
}

/// Ranks of the true match for every query.
pub fn truth_ranks(s: &Matrix, direction: Direction) -> Result<Vec<usize>> {
    if s.rows() != s.cols() {
        return Err(Error::shape("recall ground truth is the diagonal", s.shape(), (s.rows(), s.rows())));
    }
    if !s.is_finite() {
        return Err(Error::Numeric("similarity matrix is not finite".into()));
    }
    let q = query_rows(s, direction);
    Ok((0..q.rows()).map(|i| rank_of_truth(q.row(i), i)).collect())
}

/// Percentage of queries whose true match ranks within the top `k`.
pub fn recall_at_k(s: &Matrix, k: usize, direction: Direction) -> Result<f64> {
    if k == 0 {
        return Err(Error::domain("recall@k needs k >= 1"));
    }
    let ranks = truth_ranks(s, direction)?;
    if ranks.is_empty() {
        return Err(Error::domain("recall over zero queries"));
    }
    let candidates = s.rows();
    if k > candidates {
        log::warn!("recall@{k} requested with only {candidates} candidates; clamping to {candidates}");
    }
    let hits = ranks.iter().filter(|&&r| r < k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Mean of R@1, R@5 and R@10.
pub fn avg_r(r1: f64, r5: f64, r10: f64) -> Result<f64> {
    for r in [r1, r5, r10] {
        if !(0.0..=100.0).contains(&r) {
            return Err(Error::domain(format!("recall {r} outside [0, 100]")));
        }
    }
    Ok((r1 + r5 + r10) / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub avg_r: f64,
}

pub fn retrieval_metrics(s: &Matrix, direction: Direction) -> Result<RetrievalMetrics> {
    let r1 = recall_at_k(s, 1, direction)?;
    let r5 = recall_at_k(s, 5, direction)?;
    let r10 = recall_at_k(s, 10, direction)?;
    Ok(RetrievalMetrics {
        r1,
        r5,
        r10,
        avg_r: avg_r(r1, r5, r10)?,
    })
}

/// Machine-readable metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub avg_r: f64,
    pub dsl: bool,
}

impl MetricsRecord {
    pub fn new(dataset: &str, direction: Direction, m: RetrievalMetrics, dsl: bool) -> Self {
        Self {
            dataset: dataset.to_string(),
            direction,
            r1: m.r1,
            r5: m.r5,
            r10: m.r10,
            avg_r: m.avg_r,
            dsl,
        }
    }
}

/// Aligned human table with one-decimal percentages.
pub fn metrics_table(rows: &[(String, MetricsRecord)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>4}  {:>5}  {:>5}  {:>5}  {:>5}  {:>5}\n",
        "config", "dir", "dsl", "R@1", "R@5", "R@10", "AVG-R"
    );
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>4}  {:>5}  {:>5.1}  {:>5.1}  {:>5.1}  {:>5.1}\n",
            label,
            r.direction.short(),
            if r.dsl { "yes" } else { "no" },
            r.r1,
            r.r5,
            r.r10,
            r.avg_r
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quality {
    High,
    Medium,
    Low,
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quality::High => "high",
            Quality::Medium => "medium",
            Quality::Low => "low",
        })
    }
}

/// High when more than two thirds of the frames score above `threshold`,
/// Low when fewer than one third do. Compared in integers so the boundaries
/// are exact.
pub fn quality_classify(frame_scores: &[f64], threshold: f64) -> Result<Quality> {
    if frame_scores.is_empty() {
        return Err(Error::domain("quality of an empty frame list"));
    }
    let n = frame_scores.len();
    let above = frame_scores.iter().filter(|&&s| s > threshold).count();
    Ok(if 3 * above > 2 * n {
        Quality::High
    } else if 3 * above < n {
        Quality::Low
    } else {
        Quality::Medium
    })
}
