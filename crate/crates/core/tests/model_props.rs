mod common;

use proptest::prelude::*;
use vtrecipe::model::{Model, ModelConfig};
use vtrecipe::numerics::{grad_check, Matrix, SeededRng};
use vtrecipe::objectives::{fcc_loss, total_loss, vtc_from_scores, vtc_loss, LossOptions};
use vtrecipe::stan::{
    build_first_input, fuse_outputs_var, run_branch_var, stan_layer_body, stan_layer_forward, temporal_attention,
    video_features, PatchGrid, StanParams, StanState,
};
use vtrecipe::train::{train_step, TrainConfig, TrainState};

fn grids(config: &ModelConfig, seed: u64) -> Vec<PatchGrid> {
    let mut rng = SeededRng::new(seed).split_named("grid");
    let tokens = rng.normal_matrix(config.n_frames * (config.n_patches + 1), config.dim, 1.0);
    let input = PatchGrid::new(config.n_frames, config.n_patches, 0, tokens).unwrap();
    Model::frozen_visual_encoder(config).forward(&input).unwrap()
}

fn branch_config(n_frames: usize, n_patches: usize, dim: usize, stan_layers: usize) -> ModelConfig {
    ModelConfig {
        dim,
        n_frames,
        n_patches,
        n_tokens: 4,
        encoder_layers: stan_layers + 1,
        stan_layers,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn branch_layers_preserve_token_shapes(seed in any::<u64>(), n_f in 1usize..5, n_p in 1usize..4, d in 2usize..7, layers in 1usize..4) {
        let config = branch_config(n_f, n_p, d, layers);
        let model = Model::new(config.clone(), seed).unwrap();
        let g = grids(&config, seed);
        let p = &model.stan;
        let mut state = build_first_input(&g[p.anchor_m], p).unwrap();
        prop_assert_eq!(state.video_cls.shape(), (1, d));
        prop_assert_eq!(state.patches.shape(), (n_f * n_p, d));
        state = stan_layer_body(&state, p, 1).unwrap();
        for k in 2..=layers {
            state = stan_layer_forward(&state, &g[p.anchor_m + k - 1], p, k).unwrap();
            prop_assert_eq!(state.video_cls.shape(), (1, d));
            prop_assert_eq!(state.patches.shape(), (n_f * n_p, d));
        }
        prop_assert_eq!(video_features(&g, p).unwrap().shape(), (n_f, d));
    }

    #[test]
    fn branch_output_is_bitwise_reproducible(seed in any::<u64>()) {
        let config = branch_config(3, 2, 6, 2);
        let a = video_features(&grids(&config, seed), &Model::new(config.clone(), seed).unwrap().stan).unwrap();
        let b = video_features(&grids(&config, seed), &Model::new(config.clone(), seed).unwrap().stan).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fresh_temporal_projection_contributes_nothing(seed in any::<u64>(), n_f in 1usize..6, d in 2usize..7) {
        let config = branch_config(n_f, 2, d, 2);
        let mut p = Model::new(config, seed).unwrap().stan;
        let mut rng = SeededRng::new(seed);
        let tokens = rng.normal_matrix(n_f, d, 1.0);
        for k in 1..=2 {
            prop_assert!(temporal_attention(&tokens, &p, k).unwrap().data().iter().all(|&x| x == 0.0));
        }
        for layer in &mut p.layers {
            layer.spatial.wv = Matrix::zeros(d, d);
        }
        let input = StanState {
            video_cls: rng.normal_matrix(1, d, 1.0),
            patches: rng.normal_matrix(n_f * 2, d, 1.0),
            layer_index: 1,
        };
        let out = stan_layer_body(&input, &p, 1).unwrap();
        prop_assert_eq!(&out.patches, &input.patches);
        // The new video CLS is a mean over identical per-frame rows.
        prop_assert!(out.video_cls.max_abs_diff(&input.video_cls) <= 1e-12);
    }

    #[test]
    fn contrastive_losses_are_nonnegative(seed in any::<u64>(), b in 1usize..7, n_f in 1usize..4, d in 1usize..6, scale in 0.1f64..200.0, symmetric: bool, batch_mean: bool) {
        let mut rng = SeededRng::new(seed);
        let opts = LossOptions { symmetric, batch_mean };
        prop_assert!(vtc_loss(&rng.normal_matrix(b, d, 1.0), &rng.normal_matrix(b, d, 1.0), scale, opts).unwrap() >= 0.0);
        let frames: Vec<Matrix> = (0..b).map(|_| rng.normal_matrix(n_f, d, 1.0)).collect();
        let caps: Vec<Matrix> = (0..b).map(|_| rng.normal_matrix(n_f, d, 1.0)).collect();
        prop_assert!(fcc_loss(&frames, &caps, scale, batch_mean).unwrap() >= 0.0);
    }

    #[test]
    fn shifting_one_texts_scores_leaves_the_loss_unchanged(seed in any::<u64>(), b in 1usize..7, col in 0usize..7, shift in -50.0f64..50.0, batch_mean: bool) {
        let col = col % b;
        let mut rng = SeededRng::new(seed);
        let s = rng.normal_matrix(b, b, 1.0);
        let shifted = Matrix::from_fn(b, b, |r, c| s.get(r, c) + if c == col { shift } else { 0.0 });
        let opts = LossOptions { symmetric: false, batch_mean };
        let before = vtc_from_scores(&s, 10.0, opts).unwrap();
        let after = vtc_from_scores(&shifted, 10.0, opts).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before.abs().max(1.0));
    }
}

#[test]
fn branch_gradients_match_central_differences() {
    let config = branch_config(3, 2, 6, 2);
    let (model, _) = common::perturbed_model(config.clone(), 5, 0);
    // The checker's closure must accept every tape lifetime.
    let params: &'static StanParams = Box::leak(Box::new(model.stan.clone()));
    let g: &'static [PatchGrid] = Box::leak(grids(&config, 5).into_boxed_slice());
    let probe = SeededRng::new(9).normal_matrix(3, 6, 1.0);
    let point: Vec<Matrix> = params.to_named().into_iter().map(|(_, m)| m).collect();
    let err = grad_check(
        |tape, leaves| {
            let sv = params.bind(leaves).unwrap();
            let state = run_branch_var(g, &sv);
            fuse_outputs_var(g.last().unwrap(), state, &sv).hadamard(tape.leaf(probe.clone())).sum()
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-4, "max relative error {err:e}");
}

#[test]
fn fifty_steps_on_one_batch_cut_the_loss_by_a_fifth() {
    let config = ModelConfig::toy();
    let (model, batch) = common::perturbed_model(config, 3, 8);
    let refs: Vec<_> = batch.iter().collect();
    let cfg = TrainConfig::toy();
    let first = total_loss(&model, &refs).unwrap().total;
    let mut state = TrainState::new(model);
    for _ in 0..50 {
        train_step(&mut state, &refs, &cfg, cfg.learning_rate).unwrap();
    }
    let last = total_loss(&state.model, &refs).unwrap().total;
    assert!(last <= 0.8 * first, "loss {first} -> {last}");
}
