//! Spatial-temporal branch running alongside a frozen image encoder.
//!
//! The branch reads patch grids from encoder layers `m..m+K-1`, runs `K`
//! layers of temporal-then-spatial self-attention over
//! `N_f·N_p` patch tokens plus one video-level CLS token, and adds a
//! per-frame summary of its output to the encoder's final frame CLS tokens.
//!
//! Every computation is written once against the gradient [`Tape`]; the
//! plain-matrix functions evaluate on a private tape and return the values.

use crate::error::{Error, Result};
use crate::numerics::{mean_pool, Matrix, SeededRng, Tape, Var, LN_EPS};

/// Encoder output for one video at one layer: `N_f` frames of `N_p + 1`
/// tokens, token 0 of each frame being the frame CLS.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    n_frames: usize,
    n_patches: usize,
    layer: usize,
    tokens: Matrix,
}

impl PatchGrid {
    /// `tokens` has `n_frames·(n_patches+1)` rows in frame-major order.
    pub fn new(n_frames: usize, n_patches: usize, layer: usize, tokens: Matrix) -> Result<Self> {
        if n_frames == 0 || tokens.rows() != n_frames * (n_patches + 1) {
            return Err(Error::domain(format!(
                "patch grid of {n_frames} frames x {} tokens needs {} rows, got {}",
                n_patches + 1,
                n_frames * (n_patches + 1),
                tokens.rows()
            )));
        }
        Ok(Self {
            n_frames,
            n_patches,
            layer,
            tokens,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Index of the encoder layer that produced this grid (0 = input tokens).
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn frame(&self, f: usize) -> Matrix {
        let per = self.n_patches + 1;
        self.tokens.select_rows(&(f * per..(f + 1) * per).collect::<Vec<_>>())
    }

    /// Frame CLS tokens, `N_f × d`.
    pub fn cls_tokens(&self) -> Matrix {
        let per = self.n_patches + 1;
        self.tokens
            .select_rows(&(0..self.n_frames).map(|f| f * per).collect::<Vec<_>>())
    }

    /// Non-CLS tokens, `N_f·N_p × d`, frame-major.
    pub fn patch_tokens(&self) -> Matrix {
        let per = self.n_patches + 1;
        let rows: Vec<usize> = (0..self.n_frames)
            .flat_map(|f| (1..per).map(move |j| f * per + j))
            .collect();
        self.tokens.select_rows(&rows)
    }
}

/// Branch tokens between layers: one video CLS and `N_f·N_p` patch tokens
/// (frame-major: row `f·N_p + j` is patch `j` of frame `f`).
#[derive(Clone, Debug, PartialEq)]
pub struct StanState {
    pub video_cls: Matrix,
    pub patches: Matrix,
    pub layer_index: usize,
}

/// Layer-normalized single-head self-attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttnParams {
    pub fn random(dim: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            ln_gamma: Matrix::filled(1, dim, 1.0),
            ln_beta: Matrix::zeros(1, dim),
            wq: rng.normal_matrix(dim, dim, std),
            wk: rng.normal_matrix(dim, dim, std),
            wv: rng.normal_matrix(dim, dim, std),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            ln_gamma: Matrix::filled(1, dim, 1.0),
            ln_beta: Matrix::zeros(1, dim),
            wq: Matrix::identity(dim),
            wk: Matrix::identity(dim),
            wv: Matrix::identity(dim),
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Matrix)>) {
        for (n, m) in [
            ("ln_gamma", &self.ln_gamma),
            ("ln_beta", &self.ln_beta),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
        ] {
            out.push((format!("{prefix}.{n}"), m.clone()));
        }
    }

    fn from_named(prefix: &str, get: &mut impl FnMut(&str) -> Result<Matrix>) -> Result<Self> {
        Ok(Self {
            ln_gamma: get(&format!("{prefix}.ln_gamma"))?,
            ln_beta: get(&format!("{prefix}.ln_beta"))?,
            wq: get(&format!("{prefix}.wq"))?,
            wk: get(&format!("{prefix}.wk"))?,
            wv: get(&format!("{prefix}.wv"))?,
        })
    }

    fn on<'t>(&self, tape: &'t Tape) -> AttnVars<'t> {
        AttnVars {
            ln_gamma: tape.leaf(self.ln_gamma.clone()),
            ln_beta: tape.leaf(self.ln_beta.clone()),
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        for m in [&self.ln_gamma, &self.ln_beta] {
            if m.shape() != (1, dim) {
                return Err(Error::shape("attention layer norm", m.shape(), (1, dim)));
            }
        }
        for m in [&self.wq, &self.wk, &self.wv] {
            if m.shape() != (dim, dim) {
                return Err(Error::shape("attention weights", m.shape(), (dim, dim)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StanLayerParams {
    /// Cross-layer input projection; absent on the first layer.
    pub proj: Option<Matrix>,
    pub temporal: AttnParams,
    pub temp_proj: Matrix,
    pub spatial: AttnParams,
}

/// Trainable parameters of the branch, including the output projection into
/// the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct StanParams {
    pub n_frames: usize,
    pub n_patches: usize,
    pub dim: usize,
    /// Encoder layer feeding the first branch layer.
    pub anchor_m: usize,
    pub pos_spatial: Matrix,
    pub pos_temporal: Matrix,
    pub layers: Vec<StanLayerParams>,
    pub vis_proj: Matrix,
}

impl StanParams {
    /// Fresh parameters: temporal projections zero, spatial attention copied
    /// from the encoder layer each branch layer runs beside.
    pub fn init(
        encoder: &VisualEncoder,
        n_frames: usize,
        n_patches: usize,
        n_layers: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let dim = encoder.dim();
        let total = encoder.n_layers();
        if n_layers == 0 || n_layers > total {
            return Err(Error::domain(format!(
                "branch depth {n_layers} must lie in [1, {total}] encoder layers"
            )));
        }
        let anchor_m = total - n_layers;
        let std = 1.0 / (dim as f64).sqrt();
        let layers = (1..=n_layers)
            .map(|k| StanLayerParams {
                proj: (k >= 2).then(|| rng.normal_matrix(dim, dim, 0.02)),
                temporal: AttnParams::random(dim, std, rng),
                temp_proj: Matrix::zeros(dim, dim),
                spatial: encoder.layers[anchor_m + k - 1].clone(),
            })
            .collect();
        Ok(Self {
            n_frames,
            n_patches,
            dim,
            anchor_m,
            pos_spatial: rng.normal_matrix(n_patches, dim, 0.02),
            pos_temporal: rng.normal_matrix(n_frames, dim, 0.02),
            layers,
            vis_proj: rng.normal_matrix(dim, dim, std),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Copy for clips of `n_frames` frames: temporal position embeddings are
    /// linearly interpolated over the clip, first and last rows pinned.
    pub fn resample_frames(&self, n_frames: usize) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::domain("cannot resample to zero frames"));
        }
        let src = &self.pos_temporal;
        let last = src.rows() - 1;
        let pos_temporal = Matrix::from_fn(n_frames, self.dim, |j, c| {
            if n_frames == 1 || last == 0 {
                return src.get(0, c);
            }
            let x = j as f64 * last as f64 / (n_frames - 1) as f64;
            let lo = (x.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let w = x - lo as f64;
            src.get(lo, c) * (1.0 - w) + src.get(hi, c) * w
        });
        Ok(Self {
            n_frames,
            pos_temporal,
            ..self.clone()
        })
    }

    /// Flat `(name, matrix)` list in a fixed order, the unit of
    /// serialization and optimization.
    pub fn to_named(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![
            ("stan.pos_spatial".to_string(), self.pos_spatial.clone()),
            ("stan.pos_temporal".to_string(), self.pos_temporal.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("stan.layer{}", i + 1);
            if let Some(proj) = &l.proj {
                out.push((format!("{p}.proj"), proj.clone()));
            }
            l.temporal.named(&format!("{p}.temporal"), &mut out);
            out.push((format!("{p}.temp_proj"), l.temp_proj.clone()));
            l.spatial.named(&format!("{p}.spatial"), &mut out);
        }
        out.push(("stan.vis_proj".to_string(), self.vis_proj.clone()));
        out
    }

    /// Inverse of [`StanParams::to_named`]; shapes are validated.
    pub fn from_named(
        n_frames: usize,
        n_patches: usize,
        dim: usize,
        anchor_m: usize,
        n_layers: usize,
        mut get: impl FnMut(&str) -> Result<Matrix>,
    ) -> Result<Self> {
        let layers = (1..=n_layers)
            .map(|k| {
                let p = format!("stan.layer{k}");
                Ok(StanLayerParams {
                    proj: if k >= 2 { Some(get(&format!("{p}.proj"))?) } else { None },
                    temporal: AttnParams::from_named(&format!("{p}.temporal"), &mut get)?,
                    temp_proj: get(&format!("{p}.temp_proj"))?,
                    spatial: AttnParams::from_named(&format!("{p}.spatial"), &mut get)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Self {
            n_frames,
            n_patches,
            dim,
            anchor_m,
            pos_spatial: get("stan.pos_spatial")?,
            pos_temporal: get("stan.pos_temporal")?,
            layers,
            vis_proj: get("stan.vis_proj")?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if self.pos_spatial.shape() != (self.n_patches, d) {
            return Err(Error::shape("spatial position embeddings", self.pos_spatial.shape(), (self.n_patches, d)));
        }
        if self.pos_temporal.shape() != (self.n_frames, d) {
            return Err(Error::shape("temporal position embeddings", self.pos_temporal.shape(), (self.n_frames, d)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if (i == 0) != l.proj.is_none() {
                return Err(Error::domain("only branch layers after the first carry an input projection"));
            }
            for m in l.proj.iter().chain([&l.temp_proj]) {
                if m.shape() != (d, d) {
                    return Err(Error::shape("branch projection", m.shape(), (d, d)));
                }
            }
            l.temporal.check(d)?;
            l.spatial.check(d)?;
        }
        if self.vis_proj.shape() != (d, d) {
            return Err(Error::shape("output projection", self.vis_proj.shape(), (d, d)));
        }
        Ok(())
    }

    /// Records every parameter as a tape leaf.
    pub fn on<'t>(&'t self, tape: &'t Tape) -> StanVars<'t> {
        let leaves: Vec<Var<'t>> = self.to_named().into_iter().map(|(_, m)| tape.leaf(m)).collect();
        self.bind(&leaves).expect("leaves follow to_named")
    }

    /// Wraps caller-made leaves, given in [`StanParams::to_named`] order, so
    /// the branch can be evaluated at perturbed parameters.
    pub fn bind<'t>(&'t self, leaves: &[Var<'t>]) -> Result<StanVars<'t>> {
        let named = self.to_named();
        if leaves.len() != named.len() {
            return Err(Error::domain(format!("{} leaves for {} branch parameters", leaves.len(), named.len())));
        }
        for ((_, m), v) in named.iter().zip(leaves) {
            if v.shape() != m.shape() {
                return Err(Error::shape("branch leaf", v.shape(), m.shape()));
            }
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("counted above");
        let attn = |next: &mut dyn FnMut() -> Var<'t>| AttnVars {
            ln_gamma: next(),
            ln_beta: next(),
            wq: next(),
            wk: next(),
            wv: next(),
        };
        let pos_spatial = next();
        let pos_temporal = next();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let proj = l.proj.as_ref().map(|_| next());
            let temporal = attn(&mut next);
            let temp_proj = next();
            let spatial = attn(&mut next);
            layers.push(LayerVars {
                proj,
                temporal,
                temp_proj,
                spatial,
            });
        }
        Ok(StanVars {
            params: self,
            pos_spatial,
            pos_temporal,
            layers,
            vis_proj: next(),
        })
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        if (grid.n_frames(), grid.n_patches(), grid.dim()) != (self.n_frames, self.n_patches, self.dim) {
            return Err(Error::domain(format!(
                "grid has {} frames x {} patches x {} dims, branch expects {} x {} x {}",
                grid.n_frames(),
                grid.n_patches(),
                grid.dim(),
                self.n_frames,
                self.n_patches,
                self.dim
            )));
        }
        Ok(())
    }

    fn check_layer(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::domain(format!("branch layer {k} outside [1, {}]", self.layers.len())));
        }
        Ok(())
    }

    fn check_state(&self, s: &StanState) -> Result<()> {
        let d = self.dim;
        if s.video_cls.shape() != (1, d) {
            return Err(Error::shape("video cls", s.video_cls.shape(), (1, d)));
        }
        let rows = self.n_frames * self.n_patches;
        if s.patches.shape() != (rows, d) {
            return Err(Error::shape("branch patches", s.patches.shape(), (rows, d)));
        }
        Ok(())
    }
}

pub struct AttnVars<'t> {
    pub ln_gamma: Var<'t>,
    pub ln_beta: Var<'t>,
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
}

impl<'t> AttnVars<'t> {
    fn leaves(&self) -> [Var<'t>; 5] {
        [self.ln_gamma, self.ln_beta, self.wq, self.wk, self.wv]
    }
}

pub struct LayerVars<'t> {
    pub proj: Option<Var<'t>>,
    pub temporal: AttnVars<'t>,
    pub temp_proj: Var<'t>,
    pub spatial: AttnVars<'t>,
}

/// [`StanParams`] recorded on a tape.
pub struct StanVars<'t> {
    params: &'t StanParams,
    pub pos_spatial: Var<'t>,
    pub pos_temporal: Var<'t>,
    pub layers: Vec<LayerVars<'t>>,
    pub vis_proj: Var<'t>,
}

impl<'t> StanVars<'t> {
    /// Leaves in the order of [`StanParams::to_named`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.pos_spatial, self.pos_temporal];
        for l in &self.layers {
            out.extend(l.proj);
            out.extend(l.temporal.leaves());
            out.push(l.temp_proj);
            out.extend(l.spatial.leaves());
        }
        out.push(self.vis_proj);
        out
    }

    pub fn params(&self) -> &'t StanParams {
        self.params
    }
}

/// Branch tokens on a tape.
#[derive(Clone, Copy)]
pub struct StateVar<'t> {
    pub video_cls: Var<'t>,
    pub patches: Var<'t>,
}

/// Attention read-out without the residual:
/// `softmax(Z·Wq·(Z·Wk)ᵀ / √d)·Z·Wv` with `Z = LN(X)·γ + β`.
pub fn attend<'t>(x: Var<'t>, p: &AttnVars<'t>) -> Var<'t> {
    let z = x.layer_norm_rows(LN_EPS).mul_row(p.ln_gamma).add_row(p.ln_beta);
    let q = z.matmul(p.wq);
    let k = z.matmul(p.wk);
    let v = z.matmul(p.wv);
    let scale = 1.0 / (x.cols() as f64).sqrt();
    q.matmul_t(k).softmax_rows(scale).matmul(v)
}

/// Self-attention block with its residual, `X + attend(X)`.
pub fn attention_block<'t>(x: Var<'t>, p: &AttnVars<'t>) -> Var<'t> {
    x.add(attend(x, p))
}

pub fn temporal_attention_var<'t>(y: Var<'t>, layer: &LayerVars<'t>) -> Var<'t> {
    attention_block(y, &layer.temporal).matmul(layer.temp_proj)
}

pub fn spatial_attention_var<'t>(x: Var<'t>, layer: &LayerVars<'t>) -> Var<'t> {
    attention_block(x, &layer.spatial)
}

pub fn build_first_input_var<'t>(grid: &PatchGrid, sv: &StanVars<'t>) -> StateVar<'t> {
    let tape = sv.vis_proj.tape();
    let (nf, np) = (grid.n_frames(), grid.n_patches());
    let cls = mean_pool(&grid.cls_tokens()).expect("grid has at least one frame");
    let spatial_rows: Vec<usize> = (0..nf).flat_map(|_| 0..np).collect();
    let temporal_rows: Vec<usize> = (0..nf).flat_map(|f| std::iter::repeat_n(f, np)).collect();
    let patches = tape
        .leaf(grid.patch_tokens())
        .add(sv.pos_spatial.gather_rows(&spatial_rows))
        .add(sv.pos_temporal.gather_rows(&temporal_rows));
    StateVar {
        video_cls: tape.leaf(Matrix::row_vector(&cls)),
        patches,
    }
}

/// Cross-layer fusion of the previous branch output with encoder layer
/// `m + k − 1`.
pub fn fuse_layer_input_var<'t>(prev: StateVar<'t>, grid: &PatchGrid, layer: &LayerVars<'t>) -> StateVar<'t> {
    let tape = prev.patches.tape();
    let proj = layer.proj.expect("fusion needs an input projection");
    let cls = mean_pool(&grid.cls_tokens()).expect("grid has at least one frame");
    StateVar {
        video_cls: prev.video_cls.add(tape.leaf(Matrix::row_vector(&cls)).matmul(proj)),
        patches: prev.patches.add(tape.leaf(grid.patch_tokens()).matmul(proj)),
    }
}

/// Temporal sublayer at every patch position, then spatial attention per
/// frame over `[video_cls; frame patches]`.
pub fn layer_body_var<'t>(input: StateVar<'t>, layer: &LayerVars<'t>, n_frames: usize, n_patches: usize) -> StateVar<'t> {
    let (nf, np) = (n_frames, n_patches);
    let patches = if np == 0 {
        input.patches
    } else {
        let columns: Vec<Var<'t>> = (0..np)
            .map(|j| {
                let y = input.patches.gather_rows(&(0..nf).map(|f| f * np + j).collect::<Vec<_>>());
                y.add(temporal_attention_var(y, layer))
            })
            .collect();
        // columns are stacked position-major; restore frame-major order
        let stacked = Var::concat_rows(&columns);
        stacked.gather_rows(&(0..nf * np).map(|r| (r % np) * nf + r / np).collect::<Vec<_>>())
    };

    let mut cls_rows = Vec::with_capacity(nf);
    let mut patch_blocks = Vec::with_capacity(nf);
    for f in 0..nf {
        let own: Vec<usize> = (f * np..(f + 1) * np).collect();
        let x = if np == 0 {
            input.video_cls
        } else {
            Var::concat_rows(&[input.video_cls, patches.gather_rows(&own)])
        };
        let out = spatial_attention_var(x, layer);
        cls_rows.push(out.row(0));
        if np > 0 {
            patch_blocks.push(out.gather_rows(&(1..=np).collect::<Vec<_>>()));
        }
    }
    StateVar {
        video_cls: Var::concat_rows(&cls_rows).mean_rows(),
        patches: if np == 0 { patches } else { Var::concat_rows(&patch_blocks) },
    }
}

/// Runs all `K` branch layers. `grids[l]` is encoder layer `l`'s output.
pub fn run_branch_var<'t>(grids: &[PatchGrid], sv: &StanVars<'t>) -> StateVar<'t> {
    let p = sv.params;
    let mut state = build_first_input_var(&grids[p.anchor_m], sv);
    for (i, layer) in sv.layers.iter().enumerate() {
        if i > 0 {
            state = fuse_layer_input_var(state, &grids[p.anchor_m + i], layer);
        }
        state = layer_body_var(state, layer, p.n_frames, p.n_patches);
    }
    state
}

/// Per-frame video features: `(frame CLS + mean of the frame's branch
/// patches + video CLS)·Θvis`.
pub fn fuse_outputs_var<'t>(final_grid: &PatchGrid, state: StateVar<'t>, sv: &StanVars<'t>) -> Var<'t> {
    let tape = sv.vis_proj.tape();
    let (nf, np) = (final_grid.n_frames(), final_grid.n_patches());
    let cls = tape.leaf(final_grid.cls_tokens());
    let summed = if np == 0 {
        cls.add_row(state.video_cls)
    } else {
        let means: Vec<Var<'t>> = (0..nf)
            .map(|f| state.patches.gather_rows(&(f * np..(f + 1) * np).collect::<Vec<_>>()).mean_rows())
            .collect();
        cls.add(Var::concat_rows(&means)).add_row(state.video_cls)
    };
    summed.matmul(sv.vis_proj)
}

/// Frame features without the branch: encoder frame CLS tokens through Θvis.
pub fn plain_frame_features_var<'t>(final_grid: &PatchGrid, vis_proj: Var<'t>) -> Var<'t> {
    vis_proj.tape().leaf(final_grid.cls_tokens()).matmul(vis_proj)
}

fn state_value(s: StateVar<'_>, layer_index: usize) -> StanState {
    StanState {
        video_cls: s.video_cls.value(),
        patches: s.patches.value(),
        layer_index,
    }
}

fn state_leaf<'t>(tape: &'t Tape, s: &StanState) -> StateVar<'t> {
    StateVar {
        video_cls: tape.leaf(s.video_cls.clone()),
        patches: tape.leaf(s.patches.clone()),
    }
}

pub fn build_first_input(grid: &PatchGrid, params: &StanParams) -> Result<StanState> {
    params.check_grid(grid)?;
    let tape = Tape::new();
    let sv = params.on(&tape);
    Ok(state_value(build_first_input_var(grid, &sv), 1))
}

/// `(Y + attend(Y))·Θtemp` for the tokens at one spatial position.
pub fn temporal_attention(tokens: &Matrix, params: &StanParams, k: usize) -> Result<Matrix> {
    params.check_layer(k)?;
    check_tokens(tokens, params.dim)?;
    let tape = Tape::new();
    let sv = params.on(&tape);
    Ok(temporal_attention_var(tape.leaf(tokens.clone()), &sv.layers[k - 1]).value())
}

/// `X + attend(X)` over one frame's tokens.
pub fn spatial_attention(frame_tokens: &Matrix, params: &StanParams, k: usize) -> Result<Matrix> {
    params.check_layer(k)?;
    check_tokens(frame_tokens, params.dim)?;
    let tape = Tape::new();
    let sv = params.on(&tape);
    Ok(spatial_attention_var(tape.leaf(frame_tokens.clone()), &sv.layers[k - 1]).value())
}

fn check_tokens(tokens: &Matrix, dim: usize) -> Result<()> {
    if tokens.rows() == 0 || tokens.cols() != dim {
        return Err(Error::shape("attention tokens", tokens.shape(), (tokens.rows().max(1), dim)));
    }
    Ok(())
}

/// Applies the sublayers of branch layer `k` to an already-fused input.
pub fn stan_layer_body(input: &StanState, params: &StanParams, k: usize) -> Result<StanState> {
    params.check_layer(k)?;
    params.check_state(input)?;
    let tape = Tape::new();
    let sv = params.on(&tape);
    let out = layer_body_var(state_leaf(&tape, input), &sv.layers[k - 1], params.n_frames, params.n_patches);
    Ok(state_value(out, k))
}

/// Fuses `prev` with encoder layer `m + k − 1` and runs branch layer `k ≥ 2`.
pub fn stan_layer_forward(prev: &StanState, encoder_grid: &PatchGrid, params: &StanParams, k: usize) -> Result<StanState> {
    params.check_layer(k)?;
    if k < 2 {
        return Err(Error::domain("layer 1 takes its input from build_first_input"));
    }
    params.check_state(prev)?;
    params.check_grid(encoder_grid)?;
    let expected = params.anchor_m + k - 1;
    if encoder_grid.layer() != expected {
        return Err(Error::domain(format!(
            "branch layer {k} fuses encoder layer {expected}, got layer {}",
            encoder_grid.layer()
        )));
    }
    let tape = Tape::new();
    let sv = params.on(&tape);
    let layer = &sv.layers[k - 1];
    let fused = fuse_layer_input_var(state_leaf(&tape, prev), encoder_grid, layer);
    Ok(state_value(layer_body_var(fused, layer, params.n_frames, params.n_patches), k))
}

pub fn fuse_outputs(encoder_final: &PatchGrid, stan_final: &StanState, params: &StanParams) -> Result<Matrix> {
    params.check_grid(encoder_final)?;
    params.check_state(stan_final)?;
    let tape = Tape::new();
    let sv = params.on(&tape);
    Ok(fuse_outputs_var(encoder_final, state_leaf(&tape, stan_final), &sv).value())
}

/// Full branch plus output fusion; `grids` holds every encoder layer from the
/// input (index 0) to the final layer.
pub fn video_features(grids: &[PatchGrid], params: &StanParams) -> Result<Matrix> {
    let needed = params.anchor_m + params.n_layers();
    if grids.len() <= needed {
        return Err(Error::domain(format!("branch needs encoder layers up to {needed}, got {}", grids.len())));
    }
    for g in grids {
        params.check_grid(g)?;
    }
    let tape = Tape::new();
    let sv = params.on(&tape);
    let state = run_branch_var(grids, &sv);
    Ok(fuse_outputs_var(grids.last().expect("nonempty"), state, &sv).value())
}

/// Frozen toy image encoder: `L` pre-norm self-attention layers applied to
/// each frame's tokens independently.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    dim: usize,
    layers: Vec<AttnParams>,
}

impl VisualEncoder {
    /// Random weights with a small value projection so each layer stays
    /// close to the identity and token content survives to the last layer.
    pub fn random(dim: usize, n_layers: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let layers = (0..n_layers)
            .map(|_| {
                let mut p = AttnParams::random(dim, std, rng);
                p.wv = p.wv.scale(0.1);
                p
            })
            .collect();
        Self { dim, layers }
    }

    pub fn from_layers(dim: usize, layers: Vec<AttnParams>) -> Result<Self> {
        for l in &layers {
            l.check(dim)?;
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &AttnParams {
        &self.layers[l - 1]
    }

    /// Outputs of every layer, index 0 being the input grid itself.
    pub fn forward(&self, input: &PatchGrid) -> Result<Vec<PatchGrid>> {
        if input.dim() != self.dim {
            return Err(Error::shape("encoder input", input.tokens().shape(), (input.tokens().rows(), self.dim)));
        }
        let mut grids = vec![PatchGrid { layer: 0, ..input.clone() }];
        for (l, p) in self.layers.iter().enumerate() {
            let prev = grids.last().expect("nonempty");
            let tape = Tape::new();
            let vars = p.on(&tape);
            let frames: Vec<Matrix> = (0..prev.n_frames())
                .map(|f| attention_block(tape.leaf(prev.frame(f)), &vars).value())
                .collect();
            grids.push(PatchGrid::new(prev.n_frames(), prev.n_patches(), l + 1, Matrix::vstack(&frames)?)?);
        }
        Ok(grids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> (VisualEncoder, StanParams, Vec<PatchGrid>) {
        let mut rng = SeededRng::new(seed);
        let enc = VisualEncoder::random(4, 3, &mut rng);
        let params = StanParams::init(&enc, 2, 2, 2, &mut rng).unwrap();
        let input = PatchGrid::new(2, 2, 0, rng.normal_matrix(6, 4, 1.0)).unwrap();
        let grids = enc.forward(&input).unwrap();
        (enc, params, grids)
    }

    #[test]
    fn first_input_averages_frame_cls() {
        let tokens = Matrix::from_rows(&[[1.0, 0.0], [9.0, 9.0], [3.0, 2.0], [7.0, 7.0]]).unwrap();
        let grid = PatchGrid::new(2, 1, 0, tokens).unwrap();
        let mut rng = SeededRng::new(1);
        let enc = VisualEncoder::random(2, 1, &mut rng);
        let mut params = StanParams::init(&enc, 2, 1, 1, &mut rng).unwrap();
        params.pos_spatial = Matrix::zeros(1, 2);
        params.pos_temporal = Matrix::zeros(2, 2);
        let s = build_first_input(&grid, &params).unwrap();
        assert_eq!(s.video_cls.data(), &[2.0, 1.0]);
        assert_eq!(s.patches, Matrix::from_rows(&[[9.0, 9.0], [7.0, 7.0]]).unwrap());
    }

    #[test]
    fn zero_grid_yields_position_embeddings() {
        let (_, params, _) = small(3);
        let grid = PatchGrid::new(2, 2, 0, Matrix::zeros(6, 4)).unwrap();
        let s = build_first_input(&grid, &params).unwrap();
        for f in 0..2 {
            for j in 0..2 {
                for c in 0..4 {
                    let e = params.pos_spatial.get(j, c) + params.pos_temporal.get(f, c);
                    assert_eq!(s.patches.get(f * 2 + j, c), e);
                }
            }
        }
    }

    #[test]
    fn temporal_projection_zero_gives_exact_zeros() {
        let (_, params, grids) = small(5);
        let y = grids[1].patch_tokens().select_rows(&[0, 2]);
        let out = temporal_attention(&y, &params, 1).unwrap();
        assert!(out.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn single_token_identity_weights() {
        let (_, mut params, _) = small(6);
        params.layers[0].temporal = AttnParams::identity(4);
        params.layers[0].temp_proj = Matrix::identity(4);
        let y = Matrix::row_vector(&[0.5, -1.0, 2.0, 0.0]);
        let ln = crate::numerics::layer_norm(y.row(0), LN_EPS).unwrap();
        let expect: Vec<f64> = y.row(0).iter().zip(&ln).map(|(a, b)| a + b).collect();
        let out = temporal_attention(&y, &params, 1).unwrap();
        for (o, e) in out.row(0).iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_weights_pass_the_residual_through() {
        let (_, mut params, grids) = small(7);
        params.layers[0].spatial.wv = Matrix::zeros(4, 4);
        let x = grids[1].frame(0);
        assert_eq!(spatial_attention(&x, &params, 1).unwrap(), x);
    }

    #[test]
    fn layer_forward_rejects_wrong_encoder_layer() {
        let (_, params, grids) = small(8);
        let s = build_first_input(&grids[params.anchor_m], &params).unwrap();
        let s = stan_layer_body(&s, &params, 1).unwrap();
        assert!(stan_layer_forward(&s, &grids[0], &params, 2).is_err());
        assert!(stan_layer_forward(&s, &grids[params.anchor_m + 1], &params, 2).is_ok());
    }

    #[test]
    fn named_round_trip() {
        let (_, params, _) = small(9);
        let named = params.to_named();
        let back = StanParams::from_named(2, 2, 4, params.anchor_m, 2, |n| {
            Ok(named.iter().find(|(k, _)| k == n).unwrap().1.clone())
        })
        .unwrap();
        assert_eq!(back, params);
        let tape = Tape::new();
        assert_eq!(params.on(&tape).leaves().len(), named.len());
    }
}
