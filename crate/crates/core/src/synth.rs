//! Synthetic paired corpora with a planted cross-modal correspondence.
//!
//! A hidden orthogonal map `R` carries text embeddings into the visual input
//! space. Each video shows one event (a few words together) on some frames
//! and unnamed background on the rest, and every patch carries the
//! scene. The text names the event and the scene; each frame's caption names
//! what that frame shows. Recovering `R` from pairs is what training learns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RawSample};
use crate::numerics::{matmul, Matrix, SeededRng};
use crate::stan::PatchGrid;
use crate::text::TextEncoder;

pub const OBJECTS: &[&str] = &[
    "dog", "cat", "horse", "bird", "car", "boat", "bike", "train", "ball", "kite", "guitar", "piano", "chair", "table",
    "lamp", "clock", "apple", "cake", "pizza", "tree", "flower", "hat", "shoe", "phone",
];
/// Filler content shown on non-event frames and never named by a text.
pub const BACKGROUND: &[&str] = &["sky", "wall", "grass", "road", "crowd", "floor", "water", "fog", "curtain", "sand"];
pub const SCENES: &[&str] = &["beach", "kitchen", "street", "forest", "stadium", "office", "garden", "river"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Words naming the event of each video.
    pub event_words: usize,
    /// Frames showing the event; the others show background.
    pub event_frames: usize,
    /// How many of [`OBJECTS`] events draw from.
    pub vocabulary: usize,
    /// Per-coordinate noise std on frame CLS tokens.
    pub frame_noise: f64,
    /// Per-coordinate noise std on patch tokens.
    pub patch_noise: f64,
    /// Seed of the hidden map; train and test sets must share it.
    pub world_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            event_words: 2,
            event_frames: 3,
            vocabulary: OBJECTS.len(),
            frame_noise: 0.15,
            patch_noise: 0.15,
            world_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub id: String,
    pub sample: RawSample,
    pub objects: Vec<String>,
    pub scene: String,
}

/// Hidden structure shared by every split.
pub struct SynthWorld {
    rotation: Matrix,
    text: TextEncoder,
    config: SynthConfig,
    n_frames: usize,
    n_patches: usize,
}

impl SynthWorld {
    pub fn new(model: &ModelConfig, config: SynthConfig) -> Result<Self> {
        if config.event_words == 0 || config.event_frames == 0 || config.event_frames > model.n_frames {
            return Err(Error::Config(format!(
                "{} event frames of {} words do not fit {} frames",
                config.event_frames, config.event_words, model.n_frames
            )));
        }
        if config.vocabulary > OBJECTS.len() || config.event_words > config.vocabulary {
            return Err(Error::Config("not enough distinct objects".into()));
        }
        let rotation = SeededRng::new(config.world_seed).split_named("hidden-map").orthogonal(model.dim);
        Ok(Self {
            rotation,
            text: TextEncoder::new(model.dim, model.n_tokens, model.text_seed),
            config,
            n_frames: model.n_frames,
            n_patches: model.n_patches,
        })
    }

    /// The planted word-to-visual map (orthogonal, applied to row vectors).
    pub fn hidden_map(&self) -> &Matrix {
        &self.rotation
    }

    fn visual(&self, text: &str) -> Vec<f64> {
        let e = Matrix::row_vector(&self.text.cls(text));
        matmul(&e, &self.rotation).expect("square map").into_data()
    }

    /// `n` pairs drawn with `seed`; ids are `{prefix}{index:05}`.
    pub fn pairs(&self, n: usize, seed: u64, prefix: &str) -> Vec<SynthPair> {
        let root = SeededRng::new(seed).split_named("synth-pairs");
        (0..n).map(|i| self.pair(&mut root.split(i as u64), format!("{prefix}{i:05}"))).collect()
    }

    fn pair(&self, rng: &mut SeededRng, id: String) -> SynthPair {
        let c = &self.config;
        let n_other = self.n_frames - c.event_frames;
        let mut pool: Vec<usize> = (0..c.vocabulary).collect();
        rng.shuffle(&mut pool);
        let objects: Vec<&str> = pool[..c.event_words].iter().map(|&i| OBJECTS[i]).collect();
        let event = objects.join(" ");
        let mut shown: Vec<String> = vec![event.clone(); c.event_frames];
        shown.extend((0..n_other).map(|_| BACKGROUND[rng.below(BACKGROUND.len())].to_string()));
        rng.shuffle(&mut shown);
        let scene = SCENES[rng.below(SCENES.len())];

        let scene_vec = self.visual(scene);
        let d = scene_vec.len();
        let mut tokens = Matrix::zeros(self.n_frames * (self.n_patches + 1), d);
        for (f, what) in shown.iter().enumerate() {
            let base = f * (self.n_patches + 1);
            let obj = self.visual(what);
            for (k, v) in tokens.row_mut(base).iter_mut().enumerate() {
                *v = obj[k] + c.frame_noise * rng.normal();
            }
            // the first half of the patches show the frame's content, the rest the scene
            for p in 1..=self.n_patches {
                let src = if p <= self.n_patches / 2 { &obj } else { &scene_vec };
                for (k, v) in tokens.row_mut(base + p).iter_mut().enumerate() {
                    *v = src[k] + c.patch_noise * rng.normal();
                }
            }
        }

        SynthPair {
            id,
            sample: RawSample {
                grid: PatchGrid::new(self.n_frames, self.n_patches, 0, tokens).expect("grid shape"),
                text: format!("{event} {scene}"),
                captions: shown,
            },
            objects: objects.iter().map(|s| s.to_string()).collect(),
            scene: scene.to_string(),
        }
    }
}
