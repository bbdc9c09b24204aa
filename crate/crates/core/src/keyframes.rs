//! Key-frame selection by temporal-segment density peaks.
//!
//! Frames are embeddings (rows of a matrix). Density uses a Gaussian kernel
//! over cosine distances with a percentile cutoff; separation is the distance
//! to the nearest denser frame. The timeline is cut into equal contiguous
//! segments and each segment keeps its frame with the largest `ρ·δ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, Matrix};

pub const DEFAULT_CUTOFF_PERCENTILE: f64 = 20.0;
pub const DEFAULT_N_KEY: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSelection {
    /// Strictly increasing frame positions.
    pub indices: Vec<usize>,
    /// `γ = ρ·δ` of each selected frame.
    pub scores: Vec<f64>,
}

/// Per-frame statistics behind a selection, for debugging dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityPeaks {
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub cutoff: f64,
}

/// Distances below this are rounding noise of coincident embeddings.
pub const COINCIDENT_EPS: f64 = 1e-12;

/// `1 − cos(e_i, e_j)` for every pair, snapped to 0 within
/// [`COINCIDENT_EPS`].
pub fn cosine_distances(frames: &Matrix) -> Matrix {
    let n = frames.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut v = 1.0 - cosine(frames.row(i), frames.row(j));
            if v.abs() < COINCIDENT_EPS {
                v = 0.0;
            }
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Linear-interpolated percentile (0..=100) of the off-diagonal distances;
/// 0 when there are no pairs.
pub fn distance_percentile(dist: &Matrix, percentile: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::domain(format!("percentile {percentile} outside [0, 100]")));
    }
    let n = dist.rows();
    let mut all: Vec<f64> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| dist.get(i, j)).collect();
    if all.is_empty() {
        return Ok(0.0);
    }
    all.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(all[lo] + (all[hi] - all[lo]) * (pos - lo as f64))
}

/// `ρ_i = Σ_{j≠i} exp(−(d_ij / d_c)²)`. A zero cutoff counts only exact
/// duplicates.
pub fn density_with_cutoff(dist: &Matrix, cutoff: f64) -> Vec<f64> {
    let n = dist.rows();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d = dist.get(i, j);
                    if cutoff > 0.0 {
                        (-(d / cutoff).powi(2)).exp()
                    } else if d == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Local density with the cutoff at `cutoff_percentile` of all pairwise
/// distances.
pub fn local_density(frames: &Matrix, cutoff_percentile: f64) -> Result<Vec<f64>> {
    let dist = cosine_distances(frames);
    let cutoff = distance_percentile(&dist, cutoff_percentile)?;
    Ok(density_with_cutoff(&dist, cutoff))
}

/// Frame `j` outranks frame `i` when denser, or equally dense and earlier.
fn outranks(rho: &[f64], j: usize, i: usize) -> bool {
    rho[j] > rho[i] || (rho[j] == rho[i] && j < i)
}

/// Distance to the nearest outranking frame; the top frame gets the set's
/// diameter.
pub fn separation_distance(rho: &[f64], dist: &Matrix) -> Result<Vec<f64>> {
    let n = rho.len();
    if dist.shape() != (n, n) {
        return Err(Error::shape("separation_distance", dist.shape(), (n, n)));
    }
    let diameter = dist.data().iter().copied().fold(0.0, f64::max);
    Ok((0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| outranks(rho, j, i))
                .map(|j| dist.get(i, j))
                .reduce(f64::min)
                .unwrap_or(diameter)
        })
        .collect())
}

pub fn density_peaks(frames: &Matrix, cutoff_percentile: f64) -> Result<DensityPeaks> {
    let dist = cosine_distances(frames);
    let cutoff = distance_percentile(&dist, cutoff_percentile)?;
    let rho = density_with_cutoff(&dist, cutoff);
    let delta = separation_distance(&rho, &dist)?;
    let gamma = rho.iter().zip(&delta).map(|(r, d)| r * d).collect();
    Ok(DensityPeaks { rho, delta, gamma, cutoff })
}

/// `[start, end)` of each of `n_key` equal contiguous segments over `total`
/// frames.
pub fn segment_bounds(total: usize, n_key: usize) -> Vec<(usize, usize)> {
    (0..n_key).map(|s| (s * total / n_key, (s + 1) * total / n_key)).collect()
}

pub fn tsdpc_extract(frames: &Matrix, n_key: usize) -> Result<KeyframeSelection> {
    tsdpc_extract_with(frames, n_key, DEFAULT_CUTOFF_PERCENTILE)
}

pub fn tsdpc_extract_with(frames: &Matrix, n_key: usize, cutoff_percentile: f64) -> Result<KeyframeSelection> {
    let total = frames.rows();
    if total == 0 {
        return Err(Error::domain("key-frame extraction from an empty sequence"));
    }
    if n_key == 0 {
        return Err(Error::domain("n_key must be at least 1"));
    }
    if !frames.is_finite() {
        return Err(Error::Numeric("frame embeddings are not finite".into()));
    }
    let peaks = density_peaks(frames, cutoff_percentile)?;
    if total <= n_key {
        return Ok(KeyframeSelection {
            indices: (0..total).collect(),
            scores: peaks.gamma,
        });
    }
    let mut indices = Vec::with_capacity(n_key);
    for (start, end) in segment_bounds(total, n_key) {
        // strict comparison keeps the earliest index on ties
        let best = (start..end).fold(start, |b, i| if peaks.gamma[i] > peaks.gamma[b] { i } else { b });
        indices.push(best);
    }
    let scores = indices.iter().map(|&i| peaks.gamma[i]).collect();
    Ok(KeyframeSelection { indices, scores })
}

/// Selections for many videos, in input order.
pub fn tsdpc_extract_many(videos: &[Matrix], n_key: usize, cutoff_percentile: f64) -> Vec<Result<KeyframeSelection>> {
    videos.par_iter().map(|v| tsdpc_extract_with(v, n_key, cutoff_percentile)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_sequences() {
        let one = Matrix::row_vector(&[1.0, 2.0]);
        assert_eq!(local_density(&one, 20.0).unwrap(), vec![0.0]);
        let sel = tsdpc_extract(&one, 8).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert_eq!(sel.scores, vec![0.0]);
        assert!(tsdpc_extract(&Matrix::zeros(0, 2), 8).is_err());
    }

    #[test]
    fn identical_frames() {
        let frames = Matrix::filled(16, 3, 0.7);
        assert!(local_density(&frames, 20.0).unwrap().iter().all(|&r| r == 15.0));
        assert_eq!(tsdpc_extract(&frames, 4).unwrap().indices, vec![0, 4, 8, 12]);
    }

    #[test]
    fn fewer_frames_than_requested() {
        let frames = Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64).sin());
        assert_eq!(tsdpc_extract(&frames, 8).unwrap().indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn coincident_pair_and_orthogonal_frame() {
        let frames = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let dist = cosine_distances(&frames);
        let rho = density_with_cutoff(&dist, 1.0);
        let e = (-1.0f64).exp();
        assert!((rho[0] - (1.0 + e)).abs() < 1e-15);
        assert!((rho[1] - (1.0 + e)).abs() < 1e-15);
        assert!((rho[2] - 2.0 * e).abs() < 1e-15);
        let delta = separation_distance(&rho, &dist).unwrap();
        assert_eq!(delta, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn percentile_interpolates() {
        let d = Matrix::from_rows(&[[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [2.0, 3.0, 0.0]]).unwrap();
        assert_eq!(distance_percentile(&d, 50.0).unwrap(), 2.0);
        assert!((distance_percentile(&d, 20.0).unwrap() - 1.4).abs() < 1e-12);
    }

    #[test]
    fn segments_cover_the_timeline() {
        assert_eq!(segment_bounds(10, 3), vec![(0, 3), (3, 6), (6, 10)]);
    }
}
