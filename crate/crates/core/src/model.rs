//! The retrieval model: frozen toy encoders, the trainable branch and
//! projection heads, and the query-conditioned pair score.
//!
//! A video contributes its frame features and auxiliary-caption features; a
//! text contributes its token features. The score of a (video, text) pair
//! runs caption-guided frame weighting conditioned on that text's CLS, then
//! the Mug head over the pair, then a dot product of the pooled features.
//! With every component ablated the score reduces to the mean-pooled frame
//! feature against the text CLS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhancement::{acg_enhance, acg_enhance_var, mug_enhance, mug_enhance_var};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, l2_normalize_rows, matmul, mean_pool, Matrix, SeededRng, Tape, Var};
use crate::stan::{
    fuse_outputs_var, plain_frame_features_var, run_branch_var, PatchGrid, StanParams, StanVars, VisualEncoder,
};
use crate::text::TextEncoder;

/// Which recipe components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub stan: bool,
    pub mug: bool,
    pub acg: bool,
}

impl Components {
    pub const FULL: Self = Self { stan: true, mug: true, acg: true };
    pub const BASELINE: Self = Self { stan: false, mug: false, acg: false };

    /// Disables the comma-separated components in `list` (`stan`, `mug`, `acg`).
    pub fn ablate(mut self, list: &str) -> Result<Self> {
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "stan" => self.stan = false,
                "mug" => self.mug = false,
                "acg" => self.acg = false,
                other => return Err(Error::Config(format!("unknown component {other:?}; expected stan, mug or acg"))),
            }
        }
        Ok(self)
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [("stan", self.stan), ("mug", self.mug), ("acg", self.acg)]
            .iter()
            .filter(|(_, b)| *b)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_frames: usize,
    pub n_patches: usize,
    pub n_tokens: usize,
    pub encoder_layers: usize,
    pub stan_layers: usize,
    pub lambda: f64,
    pub tau: f64,
    pub logit_scale: f64,
    /// L2-normalize features after the projection heads and before scoring.
    pub normalize: bool,
    pub symmetric: bool,
    pub batch_mean: bool,
    pub components: Components,
    /// Seeds of the frozen encoders; part of the data contract, not of training.
    pub encoder_seed: u64,
    pub text_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_frames: 8,
            n_patches: 4,
            n_tokens: 64,
            encoder_layers: 6,
            stan_layers: 4,
            lambda: 10.0,
            tau: 100.0,
            logit_scale: 100.0,
            normalize: true,
            symmetric: false,
            batch_mean: false,
            components: Components::FULL,
            encoder_seed: 1,
            text_seed: 2,
        }
    }
}

impl ModelConfig {
    /// Small end-to-end demo scale. `tau` is lowered because cosine
    /// similarities in 16 dimensions spread far wider than in a 512-wide
    /// joint space, which turns the default into a hard argmax.
    pub fn toy() -> Self {
        Self {
            n_tokens: 8,
            tau: 10.0,
            encoder_layers: 3,
            stan_layers: 2,
            symmetric: true,
            batch_mean: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.n_frames == 0 || self.n_tokens == 0 {
            return bad("dim, frames and tokens must be positive".into());
        }
        if self.stan_layers == 0 || self.stan_layers > self.encoder_layers {
            return bad(format!(
                "stan_layers {} must lie in [1, encoder_layers = {}]",
                self.stan_layers, self.encoder_layers
            ));
        }
        for (name, v) in [("lambda", self.lambda), ("tau", self.tau), ("logit_scale", self.logit_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn loss_options(&self) -> crate::objectives::LossOptions {
        crate::objectives::LossOptions {
            symmetric: self.symmetric,
            batch_mean: self.batch_mean,
        }
    }
}

/// One training or test item before the frozen encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    /// Input tokens (encoder layer 0) for `N_f` frames.
    pub grid: PatchGrid,
    pub text: String,
    /// One caption per frame; missing captions count as empty text.
    pub captions: Vec<String>,
}

/// Frozen-encoder outputs for one item; computed once and reused.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub grids: Vec<PatchGrid>,
    pub tokens: Matrix,
    pub captions: Matrix,
}

/// Features in the joint space after the trainable heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub frames: Matrix,
    pub tokens: Matrix,
    pub captions: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    encoder: VisualEncoder,
    text_encoder: TextEncoder,
    pub stan: StanParams,
    pub text_proj: Matrix,
}

pub const TEXT_PROJ: &str = "text_proj";

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = Self::frozen_visual_encoder(&config);
        let rng = SeededRng::new(seed);
        let stan = StanParams::init(
            &encoder,
            config.n_frames,
            config.n_patches,
            config.stan_layers,
            &mut rng.split_named("stan"),
        )?;
        let text_proj = rng
            .split_named("text_proj")
            .normal_matrix(config.dim, config.dim, 1.0 / (config.dim as f64).sqrt());
        Ok(Self {
            text_encoder: TextEncoder::new(config.dim, config.n_tokens, config.text_seed),
            encoder,
            stan,
            text_proj,
            config,
        })
    }

    /// The same model applied to clips of `n_frames` frames, e.g. evaluation
    /// clips longer than the training ones.
    pub fn with_frames(&self, n_frames: usize) -> Result<Self> {
        if n_frames == self.config.n_frames {
            return Ok(self.clone());
        }
        let mut m = self.clone();
        m.stan = self.stan.resample_frames(n_frames)?;
        m.config.n_frames = n_frames;
        Ok(m)
    }

    /// The same model with text token matrices of `n_tokens` rows.
    pub fn with_tokens(&self, n_tokens: usize) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::Config("token count must be positive".into()));
        }
        let mut m = self.clone();
        m.config.n_tokens = n_tokens;
        m.text_encoder = TextEncoder::new(m.config.dim, n_tokens, m.config.text_seed);
        Ok(m)
    }

    pub fn frozen_visual_encoder(config: &ModelConfig) -> VisualEncoder {
        let mut rng = SeededRng::new(config.encoder_seed).split_named("visual-encoder");
        VisualEncoder::random(config.dim, config.encoder_layers, &mut rng)
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text_encoder
    }

    pub fn visual_encoder(&self) -> &VisualEncoder {
        &self.encoder
    }

    /// Trainable parameters in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Matrix)> {
        let mut out = self.stan.to_named();
        out.push((TEXT_PROJ.to_string(), self.text_proj.clone()));
        out
    }

    /// Replaces every trainable parameter; names and shapes must match.
    pub fn set_named_params(&mut self, named: &[(String, Matrix)]) -> Result<()> {
        let lookup = |n: &str| -> Result<Matrix> {
            named
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::Format(format!("parameter {n} missing")))
        };
        let stan = StanParams::from_named(
            self.config.n_frames,
            self.config.n_patches,
            self.config.dim,
            self.stan.anchor_m,
            self.config.stan_layers,
            lookup,
        )?;
        let text_proj = lookup(TEXT_PROJ)?;
        if text_proj.shape() != (self.config.dim, self.config.dim) {
            return Err(Error::shape("text projection", text_proj.shape(), (self.config.dim, self.config.dim)));
        }
        if named.len() != self.named_params().len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                self.named_params().len(),
                named.len()
            )));
        }
        self.stan = stan;
        self.text_proj = text_proj;
        Ok(())
    }

    pub fn encode(&self, raw: &RawSample) -> Result<EncodedSample> {
        let c = &self.config;
        if (raw.grid.n_frames(), raw.grid.n_patches(), raw.grid.dim()) != (c.n_frames, c.n_patches, c.dim) {
            return Err(Error::Config(format!(
                "sample has {} frames x {} patches x {} dims, model expects {} x {} x {}",
                raw.grid.n_frames(),
                raw.grid.n_patches(),
                raw.grid.dim(),
                c.n_frames,
                c.n_patches,
                c.dim
            )));
        }
        if raw.captions.len() > c.n_frames {
            return Err(Error::domain(format!(
                "{} captions for {} frames",
                raw.captions.len(),
                c.n_frames
            )));
        }
        let mut captions = raw.captions.clone();
        captions.resize(c.n_frames, String::new());
        Ok(EncodedSample {
            grids: self.encoder.forward(&raw.grid)?,
            tokens: self.text_encoder.encode(&raw.text),
            captions: self.text_encoder.encode_cls(&captions),
        })
    }

    pub fn on<'t>(&'t self, tape: &'t Tape) -> ModelVars<'t> {
        ModelVars {
            model: self,
            stan: self.stan.on(tape),
            text_proj: tape.leaf(self.text_proj.clone()),
        }
    }

    /// Wraps caller-made leaves given in [`Model::named_params`] order.
    pub fn bind<'t>(&'t self, leaves: &[Var<'t>]) -> Result<ModelVars<'t>> {
        let (&text_proj, stan) = leaves
            .split_last()
            .ok_or_else(|| Error::domain("no parameter leaves"))?;
        if text_proj.shape() != self.text_proj.shape() {
            return Err(Error::shape("text projection leaf", text_proj.shape(), self.text_proj.shape()));
        }
        Ok(ModelVars {
            model: self,
            stan: self.stan.bind(stan)?,
            text_proj,
        })
    }

    /// Joint-space features of one item.
    pub fn features(&self, s: &EncodedSample) -> Features {
        let tape = Tape::new();
        let mv = self.on(&tape);
        Features {
            frames: mv.frame_features(s).value(),
            tokens: mv.token_features(s).value(),
            captions: mv.caption_features(s).value(),
        }
    }

    pub fn features_batch(&self, samples: &[EncodedSample]) -> Vec<Features> {
        samples.par_iter().map(|s| self.features(s)).collect()
    }

    /// Unscaled `B_v × B_t` score grid, rows = videos, columns = texts.
    pub fn similarity(&self, videos: &[Features], texts: &[Features]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = videos
            .par_iter()
            .map(|v| texts.iter().map(|t| pair_score(&self.config, v, t)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, texts.len()));
        }
        Matrix::from_rows(&rows)
    }
}

/// Model parameters recorded on a tape.
pub struct ModelVars<'t> {
    model: &'t Model,
    pub stan: StanVars<'t>,
    pub text_proj: Var<'t>,
}

impl<'t> ModelVars<'t> {
    /// Leaves in the order of [`Model::named_params`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out = self.stan.leaves();
        out.push(self.text_proj);
        out
    }

    fn finish(&self, x: Var<'t>) -> Var<'t> {
        if self.model.config.normalize {
            x.l2_normalize_rows()
        } else {
            x
        }
    }

    pub fn frame_features(&self, s: &EncodedSample) -> Var<'t> {
        let last = s.grids.last().expect("encoder outputs");
        let raw = if self.model.config.components.stan {
            let state = run_branch_var(&s.grids, &self.stan);
            fuse_outputs_var(last, state, &self.stan)
        } else {
            plain_frame_features_var(last, self.stan.vis_proj)
        };
        self.finish(raw)
    }

    pub fn token_features(&self, s: &EncodedSample) -> Var<'t> {
        let tape = self.text_proj.tape();
        self.finish(tape.leaf(s.tokens.clone()).matmul(self.text_proj))
    }

    pub fn caption_features(&self, s: &EncodedSample) -> Var<'t> {
        let tape = self.text_proj.tape();
        self.finish(tape.leaf(s.captions.clone()).matmul(self.text_proj))
    }
}

/// Score of one (video, text) pair in the joint space.
pub fn pair_score(config: &ModelConfig, video: &Features, text: &Features) -> Result<f64> {
    let t_cls = text.tokens.row(0);
    let frames = if config.components.acg {
        acg_enhance(&video.frames, &video.captions, t_cls, config.lambda)?
    } else {
        video.frames.clone()
    };
    let (mut v, mut t) = if config.components.mug {
        let e = mug_enhance(&frames, &text.tokens, config.tau)?;
        (e.video, e.text)
    } else {
        (mean_pool(&frames)?, t_cls.to_vec())
    };
    if config.normalize {
        v = l2_normalize(&v);
        t = l2_normalize(&t);
    }
    Ok(dot(&v, &t))
}

/// Tape form of [`pair_score`]; returns a `1 × 1` value.
pub fn pair_score_var<'t>(config: &ModelConfig, frames: Var<'t>, captions: Var<'t>, tokens: Var<'t>) -> Var<'t> {
    let t_cls = tokens.row(0);
    let frames = if config.components.acg {
        acg_enhance_var(frames, captions, t_cls, config.lambda)
    } else {
        frames
    };
    let (mut v, mut t) = if config.components.mug {
        mug_enhance_var(frames, tokens, config.tau)
    } else {
        (frames.mean_rows(), t_cls)
    };
    if config.normalize {
        v = v.l2_normalize_rows();
        t = t.l2_normalize_rows();
    }
    v.matmul_t(t)
}

/// Reference score with every component off, computed directly from the
/// frozen outputs: mean-pooled projected frame CLS against the projected
/// text CLS.
pub fn baseline_score(model: &Model, video: &EncodedSample, text: &EncodedSample) -> Result<f64> {
    let last = video.grids.last().expect("encoder outputs");
    let mut frames = matmul(&last.cls_tokens(), &model.stan.vis_proj)?;
    let mut tokens = matmul(&text.tokens, &model.text_proj)?;
    if model.config.normalize {
        frames = l2_normalize_rows(&frames);
        tokens = l2_normalize_rows(&tokens);
    }
    let mut v = mean_pool(&frames)?;
    let mut t = tokens.row(0).to_vec();
    if model.config.normalize {
        v = l2_normalize(&v);
        t = l2_normalize(&t);
    }
    Ok(dot(&v, &t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Model, Vec<EncodedSample>) {
        let config = ModelConfig {
            dim: 6,
            n_frames: 3,
            n_patches: 2,
            n_tokens: 4,
            ..ModelConfig::toy()
        };
        let model = Model::new(config, 3).unwrap();
        let mut rng = SeededRng::new(8);
        let samples = ["red ball", "blue cat sits", "green tree"]
            .iter()
            .map(|t| {
                let raw = RawSample {
                    grid: PatchGrid::new(3, 2, 0, rng.normal_matrix(9, 6, 1.0)).unwrap(),
                    text: t.to_string(),
                    captions: vec!["red".into(), "ball".into(), "cat".into()],
                };
                model.encode(&raw).unwrap()
            })
            .collect();
        (model, samples)
    }

    #[test]
    fn tape_and_plain_scores_agree() {
        let (model, samples) = tiny();
        let feats = model.features_batch(&samples);
        for comps in [Components::FULL, Components::BASELINE, Components::FULL.ablate("mug").unwrap()] {
            let mut cfg = model.config.clone();
            cfg.components = comps;
            let tape = Tape::new();
            let mv = model.on(&tape);
            let f = mv.frame_features(&samples[0]);
            let c = mv.caption_features(&samples[0]);
            let t = mv.token_features(&samples[1]);
            let on_tape = pair_score_var(&cfg, f, c, t).value().get(0, 0);
            let plain = pair_score(&cfg, &feats[0], &feats[1]).unwrap();
            assert!((on_tape - plain).abs() < 1e-12, "{comps:?}");
        }
    }

    #[test]
    fn fully_ablated_model_matches_the_baseline_reference() {
        let (mut model, samples) = tiny();
        model.config.components = Components::BASELINE;
        let feats = model.features_batch(&samples);
        let s = model.similarity(&feats, &feats).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let r = baseline_score(&model, &samples[i], &samples[j]).unwrap();
                assert!((s.get(i, j) - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ablate_parses_component_lists() {
        assert_eq!(Components::FULL.ablate("stan, mug,acg").unwrap(), Components::BASELINE);
        assert!(Components::FULL.ablate("dsl").is_err());
        assert_eq!(Components::FULL.ablate("mug").unwrap().label(), "stan+acg");
    }

    #[test]
    fn resampling_keeps_endpoints_and_is_identity_at_the_trained_length() {
        let (model, _) = tiny();
        assert_eq!(model.with_frames(3).unwrap(), model);
        let long = model.with_frames(5).unwrap();
        let (a, b) = (&model.stan.pos_temporal, &long.stan.pos_temporal);
        assert_eq!(b.rows(), 5);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(2), b.row(4));
        assert_eq!(a.row(1), b.row(2));
        for c in 0..a.cols() {
            assert!((b.get(1, c) - 0.5 * (a.get(0, c) + a.get(1, c))).abs() < 1e-15);
        }
    }

    #[test]
    fn named_params_round_trip() {
        let (mut model, _) = tiny();
        let named = model.named_params();
        let before = model.clone();
        model.set_named_params(&named).unwrap();
        assert_eq!(model, before);
    }
}
