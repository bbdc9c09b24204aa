//! End-to-end recipe: train on a paired corpus, score a test set, and walk
//! the component ladder (baseline, then the temporal branch, then feature
//! enhancement) over several seeds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{apply_dsl, retrieval_metrics, Direction, RetrievalMetrics};
use crate::model::{baseline_score, Components, EncodedSample, Model, ModelConfig, RawSample};
use crate::numerics::Matrix;
use crate::synth::{SynthConfig, SynthWorld};
use crate::train::{train, TrainConfig, TrainOutcome, TrainState};

/// How a trained model is queried.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub components: Components,
    /// Dual-softmax temperature, when re-weighting is on.
    pub dsl_beta: Option<f64>,
    pub frames: usize,
    pub tokens: usize,
}

impl EvalOptions {
    pub fn for_model(config: &ModelConfig) -> Self {
        Self {
            components: config.components,
            dsl_beta: None,
            frames: config.n_frames,
            tokens: config.n_tokens,
        }
    }
}

/// `model` adapted to the evaluation clip length, token count and active
/// components.
pub fn eval_model(model: &Model, opts: &EvalOptions) -> Result<Model> {
    let mut m = model.with_frames(opts.frames)?.with_tokens(opts.tokens)?;
    m.config.components = opts.components;
    Ok(m)
}

pub fn encode_all(model: &Model, samples: &[RawSample]) -> Result<Vec<EncodedSample>> {
    use rayon::prelude::*;
    samples.par_iter().map(|s| model.encode(s)).collect()
}

/// Video-by-text score grid of a paired test set (pair `i` on the diagonal),
/// with the dual softmax applied when requested.
pub fn test_similarity(model: &Model, test: &[EncodedSample], dsl_beta: Option<f64>, direction: Direction) -> Result<Matrix> {
    if test.is_empty() {
        return Err(Error::domain("empty test set"));
    }
    let feats = model.features_batch(test);
    let s = model.similarity(&feats, &feats)?;
    match dsl_beta {
        Some(beta) => apply_dsl(&s, beta, direction),
        None => Ok(s),
    }
}

pub fn evaluate(model: &Model, test: &[RawSample], opts: &EvalOptions, direction: Direction) -> Result<RetrievalMetrics> {
    let m = eval_model(model, opts)?;
    let encoded = encode_all(&m, test)?;
    retrieval_metrics(&test_similarity(&m, &encoded, opts.dsl_beta, direction)?, direction)
}

/// Score grid of the reference path with every component off.
pub fn baseline_similarity(model: &Model, test: &[EncodedSample]) -> Result<Matrix> {
    let n = test.len();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, baseline_score(model, &test[i], &test[j])?);
        }
    }
    Ok(s)
}

/// Trains a fresh model initialised from `init_seed`.
pub fn train_fresh(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    init_seed: u64,
    data: &[RawSample],
    on_step: impl FnMut(&crate::train::StepRecord),
) -> Result<TrainOutcome> {
    let model = Model::new(config.clone(), init_seed)?;
    let encoded = encode_all(&model, data)?;
    train(TrainState::new(model), &encoded, train_cfg, on_step)
}

/// Rungs of the component ladder, weakest first.
pub const LADDER: [(&str, Components); 3] = [
    ("baseline", Components::BASELINE),
    ("+stan", Components { stan: true, mug: false, acg: false }),
    ("+stan+mug+acg", Components::FULL),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderSpec {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub seeds: Vec<u64>,
}

impl Default for LadderSpec {
    fn default() -> Self {
        Self {
            train_pairs: 256,
            test_pairs: 64,
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RungResult {
    pub label: String,
    pub components: Components,
    /// Test metrics per seed, text-to-video.
    pub per_seed: Vec<RetrievalMetrics>,
    /// Test R@1 of the untrained model per seed.
    pub untrained_r1: Vec<f64>,
}

impl RungResult {
    pub fn mean_avg_r(&self) -> f64 {
        self.per_seed.iter().map(|m| m.avg_r).sum::<f64>() / self.per_seed.len().max(1) as f64
    }

    pub fn mean_r1(&self) -> f64 {
        self.per_seed.iter().map(|m| m.r1).sum::<f64>() / self.per_seed.len().max(1) as f64
    }
}

/// Seeds of one ladder run: model init, training pairs and test pairs all
/// derive from the run seed so rungs see identical data.
pub fn run_seeds(seed: u64) -> (u64, u64, u64) {
    (100 + seed, 1000 + seed, 2000 + seed)
}

/// Trains and tests every rung for every seed. `data` supplies the
/// training and test items of a seed; `eval_frames` and `eval_tokens` shape
/// the test-time model.
pub fn ladder(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    rungs: &[(&str, Components)],
    eval_frames: usize,
    eval_tokens: usize,
    data: impl Fn(u64) -> Result<(Vec<RawSample>, Vec<RawSample>)>,
) -> Result<Vec<RungResult>> {
    rungs
        .iter()
        .map(|(label, comps)| {
            let mut config = base.clone();
            config.components = *comps;
            let opts = EvalOptions {
                components: *comps,
                dsl_beta: None,
                frames: eval_frames,
                tokens: eval_tokens,
            };
            let mut per_seed = Vec::new();
            let mut untrained_r1 = Vec::new();
            for &seed in seeds {
                let (train_raw, test_raw) = data(seed)?;
                let init = run_seeds(seed).0;
                let fresh = Model::new(config.clone(), init)?;
                untrained_r1.push(evaluate(&fresh, &test_raw, &opts, Direction::TextToVideo)?.r1);
                let tc = TrainConfig {
                    seed,
                    ..train_cfg.clone()
                };
                let out = train_fresh(&config, &tc, init, &train_raw, |_| {})?;
                if let Some(e) = out.error {
                    return Err(e);
                }
                per_seed.push(evaluate(&out.state.model, &test_raw, &opts, Direction::TextToVideo)?);
            }
            Ok(RungResult {
                label: label.to_string(),
                components: *comps,
                per_seed,
                untrained_r1,
            })
        })
        .collect()
}

/// [`ladder`] on fresh synthetic pairs per seed.
pub fn run_ladder(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    synth: &SynthConfig,
    spec: &LadderSpec,
    rungs: &[(&str, Components)],
) -> Result<Vec<RungResult>> {
    let world = SynthWorld::new(base, synth.clone())?;
    let raw = |n, s, p| world.pairs(n, s, p).into_iter().map(|p| p.sample).collect::<Vec<_>>();
    ladder(base, train_cfg, &spec.seeds, rungs, base.n_frames, base.n_tokens, |seed| {
        let (_, tr, te) = run_seeds(seed);
        Ok((raw(spec.train_pairs, tr, "tr"), raw(spec.test_pairs, te, "te")))
    })
}

/// Aligned table of a ladder run.
pub fn ladder_table(rows: &[RungResult]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:>5}  {:>5}  {:>5}  {:>5}  {:>5}\n", "config", "seeds", "R@1", "R@5", "R@10", "AVG-R");
    for r in rows {
        let n = r.per_seed.len().max(1) as f64;
        let mean = |f: fn(&RetrievalMetrics) -> f64| r.per_seed.iter().map(f).sum::<f64>() / n;
        out.push_str(&format!(
            "{:<width$}  {:>5}  {:>5.1}  {:>5.1}  {:>5.1}  {:>5.1}\n",
            r.label,
            r.per_seed.len(),
            mean(|m| m.r1),
            mean(|m| m.r5),
            mean(|m| m.r10),
            mean(|m| m.avg_r)
        ));
    }
    out
}
