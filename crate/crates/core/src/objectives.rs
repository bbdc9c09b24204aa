//! Contrastive objectives.
//!
//! Video-text contrast treats each text as the anchor and the batch's videos
//! as candidates. Frame-caption contrast does the same per frame index, with
//! each caption anchoring against that frame index of every video.

use crate::error::{Error, Result};
use crate::model::{pair_score_var, EncodedSample, Model, ModelVars};
use crate::numerics::{log_sum_exp, matmul_nt, Matrix, Var};

/// How per-anchor terms are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LossOptions {
    /// Average the text-anchored loss with the video-anchored one.
    pub symmetric: bool,
    /// Divide the batch sum by `B`.
    pub batch_mean: bool,
}

/// `−log softmax` of the positive in one anchor's logits, accurate when the
/// positive dominates (returns exactly 0 rather than rounding noise).
fn anchor_term(logits: &[f64], positive: usize) -> f64 {
    let p = logits[positive];
    let gaps: Vec<f64> = logits.iter().map(|l| l - p).collect();
    let max = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        let rest: f64 = gaps
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != positive)
            .map(|(_, g)| g.exp())
            .sum();
        rest.ln_1p()
    } else {
        log_sum_exp(&gaps)
    }
}

/// Text-anchored contrastive loss from a `B × B` score grid with rows =
/// videos and columns = texts; the positive of text `b` is video `b`.
pub fn vtc_from_scores(scores: &Matrix, scale: f64, opts: LossOptions) -> Result<f64> {
    let b = scores.rows();
    if b == 0 {
        return Err(Error::domain("contrastive loss over an empty batch"));
    }
    if scores.cols() != b {
        return Err(Error::shape("vtc scores", scores.shape(), (b, b)));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::domain(format!("logit scale must be positive, got {scale}")));
    }
    if !scores.is_finite() {
        return Err(Error::Numeric("vtc scores are not finite".into()));
    }
    let logits = scores.scale(scale);
    let text_anchored: f64 = (0..b)
        .map(|col| {
            let column: Vec<f64> = (0..b).map(|r| logits.get(r, col)).collect();
            anchor_term(&column, col)
        })
        .sum();
    let mut loss = if opts.symmetric {
        let video_anchored: f64 = (0..b).map(|r| anchor_term(logits.row(r), r)).sum();
        (text_anchored + video_anchored) / 2.0
    } else {
        text_anchored
    };
    if opts.batch_mean {
        loss /= b as f64;
    }
    Ok(loss)
}

/// Contrastive loss between pooled video features and text features, both
/// `B × d`, with logits `scale·⟨v, t⟩`.
pub fn vtc_loss(video: &Matrix, text: &Matrix, scale: f64, opts: LossOptions) -> Result<f64> {
    if video.shape() != text.shape() {
        return Err(Error::shape("vtc_loss", video.shape(), text.shape()));
    }
    vtc_from_scores(&matmul_nt(video, text)?, scale, opts)
}

/// Per-frame-index contrast between frames and captions, summed over the
/// batch and averaged over frame indices. Each item is `N_f × d`.
pub fn fcc_loss(frames: &[Matrix], captions: &[Matrix], scale: f64, batch_mean: bool) -> Result<f64> {
    let b = frames.len();
    if b == 0 {
        return Err(Error::domain("frame-caption loss over an empty batch"));
    }
    if captions.len() != b {
        return Err(Error::domain(format!("{b} frame sets but {} caption sets", captions.len())));
    }
    let shape = frames[0].shape();
    if shape.0 == 0 {
        return Err(Error::domain("frame-caption loss needs at least one frame"));
    }
    for m in frames.iter().chain(captions) {
        if m.shape() != shape {
            return Err(Error::shape("fcc_loss", m.shape(), shape));
        }
    }
    let n_f = shape.0;
    let mut total = 0.0;
    for i in 0..n_f {
        let v_i = Matrix::from_rows(&frames.iter().map(|m| m.row(i)).collect::<Vec<_>>())?;
        let c_i = Matrix::from_rows(&captions.iter().map(|m| m.row(i)).collect::<Vec<_>>())?;
        // rows = videos, columns = captions, matching vtc_from_scores
        total += vtc_from_scores(&matmul_nt(&v_i, &c_i)?, scale, LossOptions::default())?;
    }
    let mut loss = total / n_f as f64;
    if batch_mean {
        loss /= b as f64;
    }
    Ok(loss)
}

/// Tape form of [`vtc_from_scores`]; `scores` is `B × B`, rows = videos.
pub fn vtc_from_scores_var<'t>(scores: Var<'t>, scale: f64, opts: LossOptions) -> Var<'t> {
    let b = scores.rows() as f64;
    let logits = scores.scale(scale);
    let text_anchored = logits.t().info_nce_rows();
    let mut loss = if opts.symmetric {
        text_anchored.add(logits.info_nce_rows()).scale(0.5)
    } else {
        text_anchored
    };
    if opts.batch_mean {
        loss = loss.scale(1.0 / b);
    }
    loss
}

/// Tape form of [`fcc_loss`].
pub fn fcc_loss_var<'t>(frames: &[Var<'t>], captions: &[Var<'t>], scale: f64, batch_mean: bool) -> Var<'t> {
    let n_f = frames[0].rows();
    let terms: Vec<Var<'t>> = (0..n_f)
        .map(|i| {
            let v_i = Var::concat_rows(&frames.iter().map(|m| m.row(i)).collect::<Vec<_>>());
            let c_i = Var::concat_rows(&captions.iter().map(|m| m.row(i)).collect::<Vec<_>>());
            vtc_from_scores_var(v_i.matmul_t(c_i), scale, LossOptions::default())
        })
        .collect();
    let mut loss = Var::concat_rows(&terms).sum().scale(1.0 / n_f as f64);
    if batch_mean {
        loss = loss.scale(1.0 / frames.len() as f64);
    }
    loss
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub vtc: f64,
    /// Present when caption guidance is active.
    pub fcc: Option<f64>,
    pub total: f64,
}

/// Video-text contrast on enhanced pair scores plus frame-caption contrast
/// on the pre-enhancement frame features.
pub fn total_loss(model: &Model, batch: &[&EncodedSample]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::domain("total loss over an empty batch"));
    }
    let cfg = &model.config;
    let feats: Vec<_> = batch.iter().map(|s| model.features(s)).collect();
    let scores = model.similarity(&feats, &feats)?;
    let vtc = vtc_from_scores(&scores, cfg.logit_scale, cfg.loss_options())?;
    let fcc = if cfg.components.acg {
        let frames: Vec<Matrix> = feats.iter().map(|f| f.frames.clone()).collect();
        let captions: Vec<Matrix> = feats.iter().map(|f| f.captions.clone()).collect();
        Some(fcc_loss(&frames, &captions, cfg.logit_scale, cfg.batch_mean)?)
    } else {
        None
    };
    Ok(LossBreakdown {
        vtc,
        fcc,
        total: vtc + fcc.unwrap_or(0.0),
    })
}

/// Loss terms recorded on a tape.
pub struct LossVars<'t> {
    pub vtc: Var<'t>,
    pub fcc: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// Tape form of [`total_loss`].
pub fn total_loss_var<'t>(mv: &ModelVars<'t>, config: &crate::model::ModelConfig, batch: &[&EncodedSample]) -> LossVars<'t> {
    let frames: Vec<Var<'t>> = batch.iter().map(|s| mv.frame_features(s)).collect();
    let captions: Vec<Var<'t>> = batch.iter().map(|s| mv.caption_features(s)).collect();
    let tokens: Vec<Var<'t>> = batch.iter().map(|s| mv.token_features(s)).collect();
    // one row per text, one column per video
    let text_rows: Vec<Var<'t>> = tokens
        .iter()
        .map(|&t| {
            let column: Vec<Var<'t>> = frames
                .iter()
                .zip(&captions)
                .map(|(&f, &c)| pair_score_var(config, f, c, t))
                .collect();
            Var::concat_rows(&column).t()
        })
        .collect();
    let scores = Var::concat_rows(&text_rows).t();
    let vtc = vtc_from_scores_var(scores, config.logit_scale, config.loss_options());
    let fcc = config
        .components
        .acg
        .then(|| fcc_loss_var(&frames, &captions, config.logit_scale, config.batch_mean));
    let total = match fcc {
        Some(f) => vtc.add(f),
        None => vtc,
    };
    LossVars { vtc, fcc, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{SeededRng, Tape};

    #[test]
    fn single_pair_is_exactly_zero() {
        let v = Matrix::row_vector(&[0.3, 0.4]);
        assert_eq!(vtc_loss(&v, &v, 100.0, LossOptions::default()).unwrap(), 0.0);
        assert_eq!(fcc_loss(&[Matrix::identity(2)], &[Matrix::identity(2)], 1.0, false).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pairs_closed_form() {
        let i2 = Matrix::identity(2);
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        let got = vtc_loss(&i2, &i2, 1.0, LossOptions::default()).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.626523).abs() < 1e-6);
        assert!(vtc_loss(&i2, &i2, 100.0, LossOptions::default()).unwrap() < 1e-40);
    }

    #[test]
    fn empty_batch_is_a_domain_error() {
        let e = Matrix::zeros(0, 3);
        assert!(matches!(vtc_loss(&e, &e, 1.0, LossOptions::default()), Err(Error::Domain(_))));
        assert!(matches!(fcc_loss(&[], &[], 1.0, false), Err(Error::Domain(_))));
    }

    #[test]
    fn tape_forms_match() {
        let mut rng = SeededRng::new(5);
        let s = rng.normal_matrix(4, 4, 1.0);
        for symmetric in [false, true] {
            for batch_mean in [false, true] {
                let opts = LossOptions { symmetric, batch_mean };
                let tape = Tape::new();
                let got = vtc_from_scores_var(tape.leaf(s.clone()), 3.0, opts).value().get(0, 0);
                let want = vtc_from_scores(&s, 3.0, opts).unwrap();
                assert!((got - want).abs() < 1e-12);
            }
        }
        let frames: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(2, 4, 1.0)).collect();
        let caps: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(2, 4, 1.0)).collect();
        let tape = Tape::new();
        let fv: Vec<_> = frames.iter().map(|m| tape.leaf(m.clone())).collect();
        let cv: Vec<_> = caps.iter().map(|m| tape.leaf(m.clone())).collect();
        let got = fcc_loss_var(&fv, &cv, 2.0, false).value().get(0, 0);
        let want = fcc_loss(&frames, &caps, 2.0, false).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}
