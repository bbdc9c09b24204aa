//! Deterministic dense kernels. Every function is pure and accumulates in a
//! fixed order (row-major, left to right) so results are bit-reproducible.

use super::Matrix;
use crate::error::{Error, Result};

/// Default epsilon for layer normalization.
pub const LN_EPS: f64 = 1e-5;
/// Epsilon inside the L2 norm, `x / sqrt(|x|^2 + eps)`.
pub const L2_EPS: f64 = 1e-12;

/// Standard matrix product `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += aip * brow[j];
            }
        }
    }
    Matrix::new(n, m, out)
}

/// `a × bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| dot(a.row(i), b.row(j))))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `exp(scale·x_i − max_j scale·x_j)` normalized to sum one.
pub fn softmax_scaled(x: &[f64], scale: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    if !scale.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    Ok(softmax_unchecked(x, scale))
}

pub(crate) fn softmax_unchecked(x: &[f64], scale: f64) -> Vec<f64> {
    let max = x.iter().map(|v| scale * v).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (scale * v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Numerically stable `log Σ exp(x_i)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise scaled softmax.
pub fn softmax_rows(m: &Matrix, scale: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s = softmax_unchecked(m.row(r), scale);
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

/// Column-wise mean; the pooled vector has length `cols`.
pub fn mean_pool(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() == 0 {
        return Err(Error::domain("mean_pool over zero rows"));
    }
    let mut acc = vec![0.0; m.cols()];
    for r in m.row_iter() {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = m.rows() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// `(x − mean) / sqrt(var + eps)` with the population variance. Affine
/// parameters are applied by the caller.
pub fn layer_norm(x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::domain("layer_norm of an empty vector"));
    }
    if eps < 0.0 {
        return Err(Error::domain("layer_norm eps must be non-negative"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    if denom == 0.0 {
        // constant input with eps = 0
        return Ok(vec![0.0; x.len()]);
    }
    Ok(x.iter().map(|v| (v - mean) / denom).collect())
}

pub fn layer_norm_rows(m: &Matrix, eps: f64) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let ln = layer_norm(m.row(r), eps)?;
        out.row_mut(r).copy_from_slice(&ln);
    }
    Ok(out)
}

pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let n = (dot(x, x) + L2_EPS).sqrt();
    x.iter().map(|v| v / n).collect()
}

pub fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let v = l2_normalize(m.row(r));
        out.row_mut(r).copy_from_slice(&v);
    }
    out
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
