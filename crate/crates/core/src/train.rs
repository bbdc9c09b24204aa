//! AdamW training of the branch and projection heads with frozen encoders.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncodedSample, Model, ModelConfig};
use crate::numerics::container::Bundle;
use crate::numerics::{Matrix, SeededRng, Tape};
use crate::objectives::total_loss_var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine: bool,
    /// Learning-rate multiplier for the branch parameters (heads use 1).
    #[serde(default = "one")]
    pub branch_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-6,
            weight_decay: 0.05,
            epochs: 2,
            batch_size: 16,
            seed: 0,
            cosine: true,
            branch_lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Recipe for the toy corpus: the heads start unaligned, so they need a
    /// far larger step than adaptation of a pretrained model, while the
    /// branch moves ten times slower to stay near its inherited weights.
    pub fn toy() -> Self {
        Self {
            learning_rate: 3e-2,
            branch_lr_scale: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config("weight decay must be >= 0 and batch size >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("AdamW betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for `step` (0-based) out of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.learning_rate;
        }
        self.learning_rate * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &[Matrix]) -> Self {
        Self {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`; decay is scaled by the step size.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64, cfg: &TrainConfig) {
        let ones = vec![1.0; params.len()];
        self.step_scaled(params, grads, lr, &ones, cfg);
    }

    /// As [`AdamW::step`] with a per-parameter multiplier on `lr`.
    pub fn step_scaled(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64, scales: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), (m, v)), &scale) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())).zip(scales) {
            let lr = lr * scale;
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + cfg.eps) + cfg.weight_decay * pd[i];
                pd[i] -= lr * update;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let params: Vec<Matrix> = model.named_params().into_iter().map(|(_, m)| m).collect();
        Self {
            optimizer: AdamW::new(&params),
            model,
            step: 0,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub vtc: f64,
    pub fcc: Option<f64>,
    pub lr: f64,
}

/// Parameters inside the spatial-temporal branch, as opposed to the two
/// projection heads.
pub fn is_branch_param(name: &str) -> bool {
    name.starts_with("stan.") && name != "stan.vis_proj"
}

/// One AdamW update on the gradients of the total loss over `batch`.
/// Returns the pre-update loss terms; the state is untouched on error.
pub fn train_step(state: &mut TrainState, batch: &[&EncodedSample], cfg: &TrainConfig, lr: f64) -> Result<(f64, f64, Option<f64>)> {
    if batch.is_empty() {
        return Err(Error::domain("training step on an empty batch"));
    }
    let (values, grads) = {
        let tape = Tape::new();
        let mv = state.model.on(&tape);
        let loss = total_loss_var(&mv, &state.model.config, batch);
        let vtc = loss.vtc.value().get(0, 0);
        let fcc = loss.fcc.map(|f| f.value().get(0, 0));
        if !vtc.is_finite() {
            return Err(Error::Numeric(format!("video-text contrastive term is {vtc} at step {}", state.step)));
        }
        if let Some(f) = fcc.filter(|f| !f.is_finite()) {
            return Err(Error::Numeric(format!("frame-caption contrastive term is {f} at step {}", state.step)));
        }
        let total = loss.total.value().get(0, 0);
        let g = tape.backward(loss.total)?;
        let grads: Vec<Matrix> = mv.leaves().into_iter().map(|l| g.wrt(l)).collect();
        if grads.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step)));
        }
        ((total, vtc, fcc), grads)
    };
    let named = state.model.named_params();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let mut params: Vec<Matrix> = named.into_iter().map(|(_, m)| m).collect();
    let scales: Vec<f64> = names.iter().map(|n| if is_branch_param(n) { cfg.branch_lr_scale } else { 1.0 }).collect();
    state.optimizer.step_scaled(&mut params, &grads, lr, &scales, cfg);
    let updated: Vec<(String, Matrix)> = names.into_iter().zip(params).collect();
    state.model.set_named_params(&updated)?;
    state.step += 1;
    Ok(values)
}

/// Result of a training run. On a numeric failure `state` is the last good
/// state and `error` carries the diagnostic.
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepRecord>,
    pub error: Option<Error>,
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Mini-batch AdamW over `data` for `cfg.epochs` epochs. Batch order is a
/// seeded shuffle per epoch.
pub fn train(state: TrainState, data: &[EncodedSample], cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = state;
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(total);
    let rng = SeededRng::new(cfg.seed).split_named("batch-order");
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.split(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = cfg.lr_at(log.len(), total);
            match train_step(&mut state, &batch, cfg, lr) {
                Ok((loss, vtc, fcc)) => {
                    let rec = StepRecord {
                        step: state.step,
                        epoch,
                        loss,
                        vtc,
                        fcc,
                        lr,
                    };
                    on_step(&rec);
                    log.push(rec);
                }
                Err(e @ Error::Numeric(_)) => {
                    return Ok(TrainOutcome {
                        state,
                        log,
                        error: Some(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(TrainOutcome { state, log, error: None })
}

/// Mean logged loss per epoch.
pub fn epoch_means(log: &[StepRecord]) -> Vec<f64> {
    let epochs = log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = log.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Checkpoint = parameters and optimizer moments in one named bundle; the
/// model config and any caller metadata go into the manifest.
pub fn checkpoint_bundle(state: &TrainState, extra_meta: &[(String, String)]) -> Result<Bundle> {
    let mut b = Bundle::new();
    b.set_meta("kind", "checkpoint");
    b.set_meta(
        "model_config",
        serde_json::to_string(&state.model.config).map_err(|e| Error::Format(e.to_string()))?,
    );
    b.set_meta("step", state.step.to_string());
    b.set_meta("adam_t", state.optimizer.t.to_string());
    for (k, v) in extra_meta {
        b.set_meta(k.clone(), v.clone());
    }
    let named = state.model.named_params();
    for (name, m) in &named {
        b.push(name.clone(), m.clone());
    }
    for ((name, _), m) in named.iter().zip(&state.optimizer.m) {
        b.push(format!("{ADAM_M}{name}"), m.clone());
    }
    for ((name, _), v) in named.iter().zip(&state.optimizer.v) {
        b.push(format!("{ADAM_V}{name}"), v.clone());
    }
    Ok(b)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>, extra_meta: &[(String, String)]) -> Result<()> {
    checkpoint_bundle(state, extra_meta)?.write(path)
}

pub fn state_from_bundle(b: &Bundle) -> Result<TrainState> {
    let config: ModelConfig = serde_json::from_str(
        b.meta("model_config")
            .ok_or_else(|| Error::Format("checkpoint has no model_config".into()))?,
    )
    .map_err(|e| Error::Format(format!("checkpoint model_config: {e}")))?;
    let parse = |key: &str| -> Result<u64> {
        b.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("checkpoint has no numeric {key}")))
    };
    let mut model = Model::new(config, 0)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let named: Vec<(String, Matrix)> = names
        .iter()
        .map(|n| Ok((n.clone(), b.require(n)?.clone())))
        .collect::<Result<_>>()?;
    model.set_named_params(&named)?;
    let moments = |prefix: &str| -> Result<Vec<Matrix>> {
        names.iter().map(|n| Ok(b.require(&format!("{prefix}{n}"))?.clone())).collect()
    };
    Ok(TrainState {
        model,
        optimizer: AdamW {
            m: moments(ADAM_M)?,
            v: moments(ADAM_V)?,
            t: parse("adam_t")?,
        },
        step: parse("step")?,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    state_from_bundle(&Bundle::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0, 10), 0.1);
        assert!((cfg.lr_at(5, 10) - 0.05).abs() < 1e-15);
        assert!(cfg.lr_at(10, 10).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut params = vec![Matrix::row_vector(&[1.5, -2.0])];
        let before = params.clone();
        AdamW::new(&params).step(&mut params, &[Matrix::row_vector(&[0.3, 0.7])], 0.0, &cfg);
        assert_eq!(params[0].data(), before[0].data());
    }

    #[test]
    fn convex_surrogate_decreases() {
        // f(θ) = |θ − a|², one AdamW step at lr 0.1
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let a = [0.5, -1.0];
        let f = |p: &Matrix| p.data().iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut params = vec![Matrix::row_vector(&[2.0, 2.0])];
        let g = Matrix::row_vector(&[2.0 * (2.0 - a[0]), 2.0 * (2.0 - a[1])]);
        let before = f(&params[0]);
        AdamW::new(&params).step(&mut params, &[g], 0.1, &cfg);
        assert!(f(&params[0]) < before);
    }
}
