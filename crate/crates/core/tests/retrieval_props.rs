mod common;

use proptest::prelude::*;
use vtrecipe::evaluation::{apply_dsl, recall_at_k, Direction};
use vtrecipe::keyframes::{density_peaks, segment_bounds, tsdpc_extract, DEFAULT_CUTOFF_PERCENTILE};
use vtrecipe::numerics::{cosine, matmul, Matrix, SeededRng};

fn direction() -> impl Strategy<Value = Direction> {
    prop_oneof![Just(Direction::TextToVideo), Just(Direction::VideoToText)]
}

/// Scores on a coarse grid so ties are common.
fn scores(n: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    Matrix::from_fn(n, n, |_, _| rng.below(5) as f64 * 0.25)
}

fn mean_pairwise_cosine(frames: &Matrix, idx: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            sum += cosine(frames.row(i), frames.row(j));
            count += 1;
        }
    }
    sum / count as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn recall_never_drops_as_k_grows(n in 1usize..20, seed in any::<u64>(), dir in direction()) {
        let s = scores(n, seed);
        let mut prev = 0.0;
        for k in 1..=n + 2 {
            let r = recall_at_k(&s, k, dir).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(recall_at_k(&s, n, dir).unwrap(), 100.0);
    }

    #[test]
    fn tiny_dual_softmax_temperature_keeps_every_ranking(n in 1usize..12, seed in any::<u64>(), beta in 1e-6f64..0.5, dir in direction()) {
        let mut rng = SeededRng::new(seed);
        let s = Matrix::from_fn(n, n, |_, _| 2.0 * rng.uniform() - 1.0);
        let d = apply_dsl(&s, beta, dir).unwrap();
        let at = |m: &Matrix, q: usize, c: usize| match dir {
            Direction::TextToVideo => m.get(c, q),
            Direction::VideoToText => m.get(q, c),
        };
        for q in 0..n {
            for a in 0..n {
                for b in 0..n {
                    if at(&s, q, a) > at(&s, q, b) + 1e-9 {
                        prop_assert!(at(&d, q, a) > at(&d, q, b));
                    }
                }
            }
        }
    }

    #[test]
    fn selection_is_sized_sorted_and_repeatable(t in 1usize..40, d in 1usize..8, n_key in 1usize..12, seed in any::<u64>()) {
        let frames = SeededRng::new(seed).normal_matrix(t, d, 1.0);
        let sel = tsdpc_extract(&frames, n_key).unwrap();
        prop_assert_eq!(sel.indices.len(), n_key.min(t));
        prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(tsdpc_extract(&frames, n_key).unwrap(), sel);
    }

    #[test]
    fn rotating_the_embedding_space_keeps_the_selection(t in 2usize..30, d in 2usize..8, n_key in 1usize..10, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let frames = rng.normal_matrix(t, d, 1.0);
        let rotated = matmul(&frames, &rng.orthogonal(d)).unwrap();
        let gamma = density_peaks(&frames, DEFAULT_CUTOFF_PERCENTILE).unwrap().gamma;
        let a = tsdpc_extract(&frames, n_key).unwrap().indices;
        let b = tsdpc_extract(&rotated, n_key).unwrap().indices;
        if t <= n_key {
            prop_assert_eq!(a, b);
        } else {
            // segments whose two best frames sit within rounding may swap
            for ((lo, hi), (x, y)) in segment_bounds(t, n_key).into_iter().zip(a.into_iter().zip(b)) {
                let mut g: Vec<f64> = gamma[lo..hi].to_vec();
                g.sort_by(|p, q| q.partial_cmp(p).unwrap());
                let near_tie = g.len() > 1 && g[0] - g[1] <= 1e-9 * g[0].abs().max(1.0);
                prop_assert!(x == y || near_tie);
            }
        }
    }
}

/// Three runs of random lengths around orthogonal centres: density-peak
/// selection lands on more distinct content than a uniform stride.
#[test]
fn selection_is_more_diverse_than_uniform_stride() {
    let (n_key, seeds) = (3, 100);
    let (mut ours, mut stride) = (0.0, 0.0);
    for seed in 0..seeds {
        let (frames, _) = common::clustered_frames(seed, 16, 0.1, &common::uneven_runs(seed));
        let sel = tsdpc_extract(&frames, n_key).unwrap().indices;
        let uniform: Vec<usize> = (0..n_key).map(|j| j * 30 / n_key).collect();
        ours += mean_pairwise_cosine(&frames, &sel);
        stride += mean_pairwise_cosine(&frames, &uniform);
    }
    let (ours, stride) = (ours / seeds as f64, stride / seeds as f64);
    println!("mean pairwise cosine {ours:.4} vs stride {stride:.4}");
    assert!(ours < stride);
}
