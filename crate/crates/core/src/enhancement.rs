//! Parameter-free feature enhancement.
//!
//! * Mug: bidirectional cross attention. Frames are pooled by how well the
//!   text they attend to matches them, and tokens are pooled by the mirror
//!   rule.
//! * ACG: frames are re-weighted by how well each frame's auxiliary caption
//!   agrees with the frame itself and with the target text.
//!
//! None of these functions normalize; callers decide whether features are
//! L2-normalized first.

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, matmul_nt, softmax_rows, softmax_scaled, Matrix, Var};

/// Frame and token summaries produced by [`mug_enhance`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedPair {
    pub video: Vec<f64>,
    pub text: Vec<f64>,
}

/// Intermediate frame-side weights of the Mug head.
#[derive(Clone, Debug, PartialEq)]
pub struct MugFrameWeights {
    /// `N_f` simplex over frames.
    pub weights: Vec<f64>,
    /// Per-frame text summaries `t̂_i`, `N_f × d`.
    pub frame_text: Matrix,
    /// Row-stochastic frame-to-token attention, `N_f × N_t`.
    pub attention: Matrix,
}

fn check_pair(op: &'static str, v: &Matrix, t: &Matrix) -> Result<()> {
    if v.rows() == 0 || t.rows() == 0 {
        return Err(Error::domain(format!("{op} needs at least one frame and one token")));
    }
    if v.cols() != t.cols() {
        return Err(Error::shape(op, v.shape(), t.shape()));
    }
    if !v.is_finite() || !t.is_finite() {
        return Err(Error::Numeric(format!("{op} input is not finite")));
    }
    Ok(())
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::domain(format!("{name} must be positive and finite, got {x}")));
    }
    Ok(())
}

fn row_dots(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows()).map(|i| dot(a.row(i), b.row(i))).collect()
}

fn weighted_sum(w: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (wi, row) in w.iter().zip(m.row_iter()) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += wi * x;
        }
    }
    out
}

pub fn mug_frame_weights(v: &Matrix, t: &Matrix, tau: f64) -> Result<MugFrameWeights> {
    check_pair("mug_frame_weights", v, t)?;
    check_positive("tau", tau)?;
    let attention = softmax_rows(&matmul_nt(v, t)?, tau);
    let frame_text = matmul(&attention, t)?;
    let weights = softmax_scaled(&row_dots(&frame_text, v), tau)?;
    Ok(MugFrameWeights {
        weights,
        frame_text,
        attention,
    })
}

/// Token-side mirror: a simplex over tokens.
pub fn mug_token_weights(v: &Matrix, t: &Matrix, tau: f64) -> Result<Vec<f64>> {
    check_pair("mug_token_weights", v, t)?;
    check_positive("tau", tau)?;
    // row j holds token j's attention over frames
    let attention = softmax_rows(&matmul_nt(t, v)?, tau);
    let token_video = matmul(&attention, v)?;
    softmax_scaled(&row_dots(&token_video, t), tau)
}

pub fn mug_enhance(v: &Matrix, t: &Matrix, tau: f64) -> Result<EnhancedPair> {
    let fw = mug_frame_weights(v, t, tau)?;
    let tw = mug_token_weights(v, t, tau)?;
    Ok(EnhancedPair {
        video: weighted_sum(&fw.weights, v),
        text: weighted_sum(&tw, t),
    })
}

/// Frame-caption and caption-text consistency weights `(s_v, s_t)`.
pub fn acg_weights(c: &Matrix, v: &Matrix, t_cls: &[f64], lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if c.shape() != v.shape() {
        return Err(Error::shape("acg_weights", c.shape(), v.shape()));
    }
    if c.rows() == 0 {
        return Err(Error::domain("acg_weights needs at least one frame"));
    }
    if t_cls.len() != c.cols() {
        return Err(Error::shape("acg_weights text", (1, t_cls.len()), (1, c.cols())));
    }
    check_positive("lambda", lambda)?;
    let s_v = softmax_scaled(&row_dots(c, v), lambda)?;
    let caption_text: Vec<f64> = c.row_iter().map(|r| dot(r, t_cls)).collect();
    let s_t = softmax_scaled(&caption_text, lambda)?;
    Ok((s_v, s_t))
}

/// Per-frame scalars `(s_v + s_t)/2`; they sum to one.
pub fn acg_scalars(c: &Matrix, v: &Matrix, t_cls: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let (s_v, s_t) = acg_weights(c, v, t_cls, lambda)?;
    Ok(s_v.iter().zip(&s_t).map(|(a, b)| (a + b) / 2.0).collect())
}

pub fn acg_enhance(v: &Matrix, c: &Matrix, t_cls: &[f64], lambda: f64) -> Result<Matrix> {
    let w = acg_scalars(c, v, t_cls, lambda)?;
    Ok(Matrix::from_fn(v.rows(), v.cols(), |i, j| w[i] * v.get(i, j)))
}

/// Tape form of [`mug_enhance`]: returns `(v̄̄, t̄̄)` as `1 × d` rows.
pub fn mug_enhance_var<'t>(v: Var<'t>, t: Var<'t>, tau: f64) -> (Var<'t>, Var<'t>) {
    let z = v.matmul_t(t).softmax_rows(tau);
    let frame_text = z.matmul(t);
    let frame_w = frame_text.hadamard(v).row_sums().t().softmax_rows(tau);

    let z_mirror = t.matmul_t(v).softmax_rows(tau);
    let token_video = z_mirror.matmul(v);
    let token_w = token_video.hadamard(t).row_sums().t().softmax_rows(tau);

    (frame_w.matmul(v), token_w.matmul(t))
}

/// Tape form of [`acg_enhance`]; `t_cls` is `1 × d`.
pub fn acg_enhance_var<'t>(v: Var<'t>, c: Var<'t>, t_cls: Var<'t>, lambda: f64) -> Var<'t> {
    let s_v = c.hadamard(v).row_sums().t().softmax_rows(lambda);
    let s_t = c.matmul_t(t_cls).t().softmax_rows(lambda);
    v.scale_rows(s_v.add(s_t).scale(0.5).t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{SeededRng, Tape};

    #[test]
    fn single_frame_weights_are_one() {
        let v = Matrix::row_vector(&[0.3, -0.2]);
        let t = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(mug_frame_weights(&v, &t, 100.0).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn frame_weights_closed_form() {
        // one token t = e1; frames e1 and e2 give t̂_i·v_i = [1, 0]
        let v = Matrix::identity(2);
        let t = Matrix::row_vector(&[1.0, 0.0]);
        let w = mug_frame_weights(&v, &t, 1.0).unwrap().weights;
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.731059).abs() < 1e-6 && (w[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn identical_frames_pool_to_themselves() {
        let mut rng = SeededRng::new(4);
        let u = rng.normal_vec(5, 1.0);
        let v = Matrix::from_rows(&[u.clone(), u.clone(), u.clone()]).unwrap();
        let t = rng.normal_matrix(4, 5, 1.0);
        let fw = mug_frame_weights(&v, &t, 100.0).unwrap();
        assert!(fw.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
        let out = mug_enhance(&v, &t, 100.0).unwrap();
        for (a, b) in out.video.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn acg_closed_forms() {
        // c_i·v_i = [0.8, 0.7]
        let c = Matrix::from_rows(&[[0.8, 0.0], [0.0, 0.7]]).unwrap();
        let v = Matrix::identity(2);
        let (s_v, s_t) = acg_weights(&c, &v, &[1.0, 8.0 / 7.0], 10.0).unwrap();
        let hi = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((s_v[0] - hi).abs() < 1e-12 && (s_v[0] - 0.731059).abs() < 1e-6);
        // caption-text products are equal, so s_t is uniform
        assert!((s_t[0] - 0.5).abs() < 1e-12);
        let w = acg_scalars(&c, &v, &[1.0, 8.0 / 7.0], 10.0).unwrap();
        assert!((w[0] - 0.615530).abs() < 1e-6 && (w[1] - 0.384470).abs() < 1e-6);
    }

    #[test]
    fn acg_rejects_mismatched_rows() {
        let r = acg_weights(&Matrix::zeros(3, 2), &Matrix::zeros(2, 2), &[0.0, 0.0], 10.0);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_acg_weights_quarter_frames() {
        let mut rng = SeededRng::new(2);
        let v = rng.normal_matrix(4, 3, 1.0);
        let c = Matrix::zeros(4, 3);
        let out = acg_enhance(&v, &c, &[1.0, 2.0, 3.0], 10.0).unwrap();
        assert!(out.max_abs_diff(&v.scale(0.25)) < 1e-15);
    }

    #[test]
    fn tape_forms_match_plain_forms() {
        let mut rng = SeededRng::new(11);
        let v = rng.normal_matrix(3, 5, 0.5);
        let t = rng.normal_matrix(4, 5, 0.5);
        let c = rng.normal_matrix(3, 5, 0.5);
        let tape = Tape::new();
        let (vv, tv, cv) = (tape.leaf(v.clone()), tape.leaf(t.clone()), tape.leaf(c.clone()));
        let enhanced = acg_enhance_var(vv, cv, tv.row(0), 10.0);
        let plain = acg_enhance(&v, &c, t.row(0), 10.0).unwrap();
        assert!(enhanced.value().max_abs_diff(&plain) < 1e-14);

        let (pv, pt) = mug_enhance_var(vv, tv, 7.0);
        let plain = mug_enhance(&v, &t, 7.0).unwrap();
        assert!(pv.value().max_abs_diff(&Matrix::row_vector(&plain.video)) < 1e-14);
        assert!(pt.value().max_abs_diff(&Matrix::row_vector(&plain.text)) < 1e-14);
    }
}
