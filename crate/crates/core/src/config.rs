//! Run configuration: a TOML file merged with command-line overrides and
//! echoed into every artifact so a run can be replayed from its output.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Components, ModelConfig};
use crate::numerics::container::{Bundle, MAGIC};
use crate::pipeline::clients::RetryPolicy;
use crate::pipeline::record::META_KEY;
use crate::pipeline::PipelineConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "VTRECIPE_CONFIG";

/// Manifest key under which checkpoints carry their run config.
pub const RUN_CONFIG_META: &str = "run_config";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    /// `mock` or `remote`.
    pub kind: String,
    pub endpoint: Option<String>,
    pub retry: RetryPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            kind: "mock".into(),
            endpoint: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,

    pub dim: usize,
    pub frames_train: usize,
    pub frames_eval: usize,
    pub tokens_train: usize,
    pub tokens_eval: usize,
    pub patches: usize,
    pub encoder_layers: usize,
    pub stan_layers: usize,
    pub lambda: f64,
    pub tau: f64,
    pub logit_scale: f64,
    pub symmetric: bool,
    pub batch_mean: bool,
    pub encoder_seed: u64,
    pub text_seed: u64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub branch_lr_scale: f64,
    pub cosine: bool,

    /// Dual-softmax temperature used by `eval --dsl`.
    pub dsl_beta: f64,

    pub pipeline: PipelineConfig,
    pub client: ClientConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            threads: 0,
            dim: m.dim,
            frames_train: 8,
            frames_eval: 12,
            tokens_train: 64,
            tokens_eval: 77,
            patches: m.n_patches,
            encoder_layers: m.encoder_layers,
            stan_layers: m.stan_layers,
            lambda: m.lambda,
            tau: m.tau,
            logit_scale: m.logit_scale,
            symmetric: m.symmetric,
            batch_mean: m.batch_mean,
            encoder_seed: m.encoder_seed,
            text_seed: m.text_seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.learning_rate,
            weight_decay: t.weight_decay,
            branch_lr_scale: t.branch_lr_scale,
            cosine: t.cosine,
            dsl_beta: 100.0,
            pipeline: PipelineConfig::default(),
            client: ClientConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Training-time model configuration with every component on.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            n_frames: self.frames_train,
            n_patches: self.patches,
            n_tokens: self.tokens_train,
            encoder_layers: self.encoder_layers,
            stan_layers: self.stan_layers,
            lambda: self.lambda,
            tau: self.tau,
            logit_scale: self.logit_scale,
            normalize: true,
            symmetric: self.symmetric,
            batch_mean: self.batch_mean,
            components: Components::FULL,
            encoder_seed: self.encoder_seed,
            text_seed: self.text_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            cosine: self.cosine,
            branch_lr_scale: self.branch_lr_scale,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames_eval == 0 || self.tokens_eval == 0 {
            return Err(Error::Config("evaluation frames and tokens must be positive".into()));
        }
        if !(self.dsl_beta > 0.0 && self.dsl_beta.is_finite()) {
            return Err(Error::Config(format!("dsl_beta must be positive, got {}", self.dsl_beta)));
        }
        if !matches!(self.client.kind.as_str(), "mock" | "remote") {
            return Err(Error::Config(format!("client.kind {:?} is neither mock nor remote", self.client.kind)));
        }
        if self.client.kind == "remote" && self.client.endpoint.is_none() {
            return Err(Error::Config("remote client needs client.endpoint".into()));
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.pipeline.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("embedded config: {e}")))
    }

    /// Reads a TOML config, or the config embedded in an artifact: the
    /// provenance line of a JSONL output or the manifest of a checkpoint.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        if bytes.starts_with(MAGIC) {
            let b = Bundle::decode(&bytes)?;
            let text = b
                .meta(RUN_CONFIG_META)
                .ok_or_else(|| Error::Config(format!("{} carries no run config", path.display())))?;
            let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            return Self::from_json(&v);
        }
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let first = text.lines().next().unwrap_or_default();
        if first.trim_start().starts_with('{') {
            let v: Value = serde_json::from_str(first).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let cfg = v
                .get(META_KEY)
                .and_then(|m| m.get("config"))
                .ok_or_else(|| Error::Config(format!("{} has no embedded config", path.display())))?;
            return Self::from_json(cfg);
        }
        Self::from_toml(&text)
    }

    /// The explicit path, else the file named by [`CONFIG_ENV`], else the
    /// defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::read(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::read(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    /// Sets a dotted key (e.g. `pipeline.top_fraction`) from a TOML literal;
    /// bare words are taken as strings.
    pub fn set(&mut self, key: &str, literal: &str) -> Result<()> {
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {literal}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(literal.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = match (&*slot, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        *self = root.try_into().map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_setup() {
        let c = RunConfig::default();
        assert_eq!((c.frames_train, c.frames_eval, c.tokens_train, c.tokens_eval), (8, 12, 64, 77));
        assert_eq!((c.lambda, c.tau, c.logit_scale), (10.0, 100.0, 100.0));
        assert_eq!((c.epochs, c.lr, c.weight_decay), (2, 2e-6, 0.05));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let p = RunConfig::from_toml("tau = 10.0\n[pipeline]\ntop_fraction = 0.5\n").unwrap();
        assert_eq!(p.tau, 10.0);
        assert_eq!(p.pipeline.top_fraction, 0.5);
        assert_eq!(p.lr, c.lr);
        assert!(RunConfig::from_toml("taux = 1").is_err());
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("pipeline.top_fraction", "0.25").unwrap();
        c.set("tau", "10").unwrap();
        c.set("client.kind", "remote").unwrap();
        c.set("pipeline.mix_ratio", "[2, 1]").unwrap();
        assert_eq!(c.pipeline.top_fraction, 0.25);
        assert_eq!(c.tau, 10.0);
        assert_eq!(c.client.kind, "remote");
        assert_eq!(c.pipeline.mix_ratio, [2, 1]);
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("epochs", "\"two\"").is_err());
    }
}
