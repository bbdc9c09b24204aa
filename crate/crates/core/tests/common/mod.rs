//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use vtrecipe::evaluation::Direction;
use vtrecipe::model::{EncodedSample, Model, ModelConfig, RawSample};
use vtrecipe::numerics::{Matrix, SeededRng};
use vtrecipe::stan::PatchGrid;

/// Recall@k by fully sorting each query's candidates (score descending, then
/// index ascending) and locating the diagonal candidate.
pub fn recall_oracle(s: &Matrix, k: usize, direction: Direction) -> f64 {
    let n = s.rows();
    let score = |q: usize, c: usize| match direction {
        Direction::TextToVideo => s.get(c, q),
        Direction::VideoToText => s.get(q, c),
    };
    let mut hits = 0;
    for q in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| score(q, b).partial_cmp(&score(q, a)).unwrap().then(a.cmp(&b)));
        let pos = order.iter().position(|&c| c == q).unwrap();
        if pos < k {
            hits += 1;
        }
    }
    100.0 * hits as f64 / n as f64
}

/// 30 frames in three contiguous runs of 10 around mutually orthogonal unit
/// centres (pairwise cosine distance 1), with Gaussian noise of `sigma`.
pub fn three_clusters(seed: u64, dim: usize, sigma: f64) -> (Matrix, Vec<usize>) {
    clustered_frames(seed, dim, sigma, &[10, 10, 10])
}

/// Contiguous runs of the given lengths, one orthogonal centre per run.
pub fn clustered_frames(seed: u64, dim: usize, sigma: f64, runs: &[usize]) -> (Matrix, Vec<usize>) {
    let mut rng = SeededRng::new(seed).split_named("three-clusters");
    let basis = rng.orthogonal(dim);
    let labels: Vec<usize> = runs.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
    let total = labels.len();
    let frames = Matrix::from_fn(total, dim, |r, c| basis.get(labels[r], c));
    let noise = rng.normal_matrix(total, dim, sigma);
    (frames.add(&noise).unwrap(), labels)
}

/// Three runs of random lengths (each at least one) over 30 frames.
pub fn uneven_runs(seed: u64) -> [usize; 3] {
    let mut rng = SeededRng::new(seed).split_named("runs");
    let a = 1 + rng.below(28);
    let b = 1 + rng.below(29 - a);
    [a, b, 30 - a - b]
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Density-peaks scores straight from the definitions: Gaussian density with
/// the cutoff at the 20th percentile of pairwise cosine distances, distance
/// to the nearest denser frame (ties: earlier is denser), `γ = ρ·δ`.
pub fn gamma_oracle(frames: &Matrix) -> Vec<f64> {
    let n = frames.rows();
    let d = |i: usize, j: usize| cos_dist(frames.row(i), frames.row(j));
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(d(i, j));
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.2 * (pairs.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    let dc = pairs[lo] + frac * (pairs[(lo + 1).min(pairs.len() - 1)] - pairs[lo]);
    let rho: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| (-(d(i, j) / dc).powi(2)).exp()).sum())
        .collect();
    let diameter = pairs.last().copied().unwrap_or(0.0);
    (0..n)
        .map(|i| {
            let delta = (0..n)
                .filter(|&j| rho[j] > rho[i] || (rho[j] == rho[i] && j < i))
                .map(|j| d(i, j))
                .fold(f64::INFINITY, f64::min);
            rho[i] * if delta.is_finite() { delta } else { diameter }
        })
        .collect()
}

/// Per-segment argmax of the oracle scores over `n_key` equal segments.
pub fn segment_argmax_oracle(gamma: &[f64], n_key: usize) -> Vec<usize> {
    let n = gamma.len();
    (0..n_key)
        .map(|s| {
            let (a, b) = (s * n / n_key, (s + 1) * n / n_key);
            let mut best = a;
            for i in a..b {
                if gamma[i] > gamma[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Gradient-suite scale: B=3, N_f=3, N_t=4, N_p=2, d=6, every component on.
pub fn grad_suite_config() -> ModelConfig {
    ModelConfig {
        dim: 6,
        n_frames: 3,
        n_patches: 2,
        n_tokens: 4,
        encoder_layers: 3,
        stan_layers: 2,
        symmetric: true,
        ..ModelConfig::default()
    }
}

/// A model whose every trainable parameter (including the zero-initialised
/// temporal projections) is perturbed, plus a batch of `b` encoded items.
pub fn perturbed_model(config: ModelConfig, seed: u64, b: usize) -> (Model, Vec<EncodedSample>) {
    let mut model = Model::new(config.clone(), seed).unwrap();
    let mut rng = SeededRng::new(seed).split_named("perturb");
    let named: Vec<(String, Matrix)> = model
        .named_params()
        .into_iter()
        .map(|(n, m)| {
            let noise = rng.normal_matrix(m.rows(), m.cols(), 0.3);
            (n, m.add(&noise).unwrap())
        })
        .collect();
    model.set_named_params(&named).unwrap();
    let words = ["red ball", "green tree near lake", "a dog runs", "cat on mat", "blue car", "old man walks"];
    let batch = (0..b)
        .map(|i| {
            let n_f = config.n_frames;
            let tokens = rng.normal_matrix(n_f * (config.n_patches + 1), config.dim, 1.0);
            let raw = RawSample {
                grid: PatchGrid::new(n_f, config.n_patches, 0, tokens).unwrap(),
                text: words[i % words.len()].to_string(),
                captions: (0..n_f).map(|f| words[(i + f + 1) % words.len()].to_string()).collect(),
            };
            model.encode(&raw).unwrap()
        })
        .collect();
    (model, batch)
}
