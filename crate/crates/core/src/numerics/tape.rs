//! Reverse-mode gradient tape over a small fixed operator set.
//!
//! Values are computed eagerly when an operation is recorded. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! returns an adjoint for every node that the scalar depends on.
//!
//! Operations on [`Var`] panic on shape mismatch; callers validate shapes at
//! their public boundary.

use std::cell::{Ref, RefCell};

use super::kernels;
use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    /// `a + r` with a 1×n row broadcast over every row of `a`.
    AddRow(usize, usize),
    /// `a ⊙ r` with a 1×n row broadcast over every row of `a`.
    MulRow(usize, usize),
    /// Row `i` of `a` multiplied by scalar `w[i]` (w is m×1).
    ScaleRows(usize, usize),
    SoftmaxRows(usize, f64),
    LayerNormRows(usize, f64),
    L2NormalizeRows(usize),
    MeanRows(usize),
    RowSums(usize),
    Sum(usize),
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    /// Σ_r (logsumexp(row r) − a[r][r]) for a square matrix.
    InfoNceRows(usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if the output does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Matrix {
        match &self.adjoints[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input value.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Replays the tape backward from a 1×1 output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id].value;
        if out.shape() != (1, 1) {
            return Err(Error::shape("backward", out.shape(), (1, 1)));
        }
        if !out.is_finite() {
            return Err(Error::Numeric("backward seeded from a non-finite output".into()));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.id + 1];
        adj[output.id] = Some(Matrix::scalar(1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].clone() else { continue };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = kernels::matmul_nt(&g, val(*b)).expect("matmul adjoint");
                    let gb = kernels::matmul(&val(*a).transpose(), &g).expect("matmul adjoint");
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scale(-1.0));
                    accumulate(&mut adj, *a, g);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(val(*b)).expect("hadamard adjoint");
                    let gb = g.hadamard(val(*a)).expect("hadamard adjoint");
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.scale(*c)),
                Op::AddRow(a, r) => {
                    let gr = column_sums(&g);
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *r, gr);
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (val(*a), val(*r));
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * rv.get(0, j));
                    let gr = column_sums(&g.hadamard(av).expect("mul_row adjoint"));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *r, gr);
                }
                Op::ScaleRows(a, w) => {
                    let (av, wv) = (val(*a), val(*w));
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * wv.get(i, 0));
                    let gw = Matrix::from_fn(g.rows(), 1, |i, _| kernels::dot(g.row(i), av.row(i)));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *w, gw);
                }
                Op::SoftmaxRows(a, scale) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let inner = kernels::dot(yr, gr);
                        for (j, out) in ga.row_mut(i).iter_mut().enumerate() {
                            *out = scale * yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = val(*a);
                    let y = &node.value;
                    let n = x.cols() as f64;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let xr = x.row(i);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let sigma = (var + eps).sqrt();
                        if sigma == 0.0 {
                            continue;
                        }
                        let (yr, gr) = (y.row(i), g.row(i));
                        let g_mean = gr.iter().sum::<f64>() / n;
                        let gy_mean = kernels::dot(gr, yr) / n;
                        for (j, out) in ga.row_mut(i).iter_mut().enumerate() {
                            *out = (gr[j] - g_mean - yr[j] * gy_mean) / sigma;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let xr = x.row(i);
                        let norm = (kernels::dot(xr, xr) + kernels::L2_EPS).sqrt();
                        let (yr, gr) = (y.row(i), g.row(i));
                        let gy = kernels::dot(gr, yr);
                        for (j, out) in ga.row_mut(i).iter_mut().enumerate() {
                            *out = (gr[j] - yr[j] * gy) / norm;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (m, n) = val(*a).shape();
                    let inv = 1.0 / m as f64;
                    let ga = Matrix::from_fn(m, n, |_, j| g.get(0, j) * inv);
                    accumulate(&mut adj, *a, ga);
                }
                Op::RowSums(a) => {
                    let (m, n) = val(*a).shape();
                    let ga = Matrix::from_fn(m, n, |i, _| g.get(i, 0));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (m, n) = val(*a).shape();
                    accumulate(&mut adj, *a, Matrix::filled(m, n, g.get(0, 0)));
                }
                Op::GatherRows(a, idx) => {
                    let (m, n) = val(*a).shape();
                    let mut ga = Matrix::zeros(m, n);
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = val(p).rows();
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        accumulate(&mut adj, p, g.select_rows(&idx));
                        offset += rows;
                    }
                }
                Op::InfoNceRows(a) => {
                    let x = val(*a);
                    let gs = g.get(0, 0);
                    let mut ga = kernels::softmax_rows(x, 1.0);
                    for i in 0..x.rows() {
                        let v = ga.get(i, i) - 1.0;
                        ga.set(i, i, v);
                    }
                    accumulate(&mut adj, *a, ga.scale(gs));
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        let mut adjoints = adj;
        adjoints.resize(nodes.len(), None);
        Ok(Gradients { adjoints, shapes })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut adj[id] {
        Some(existing) => existing.add_assign_unchecked(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in g.row_iter() {
        for (o, v) in out.data_mut().iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Matrix {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Matrix) -> Matrix) -> Var<'t> {
        let value = f(&self.tape.value_ref(self.id));
        self.tape.push(value, op)
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl FnOnce(&Matrix, &Matrix) -> Matrix) -> Var<'t> {
        self.same_tape(&other);
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            f(&a, &b)
        };
        self.tape.push(value, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| {
            kernels::matmul(a, b).unwrap_or_else(|e| panic!("{e}"))
        })
    }

    /// `self × otherᵀ`.
    pub fn matmul_t(&self, other: Var<'t>) -> Var<'t> {
        self.matmul(other.t())
    }

    pub fn t(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Matrix::transpose)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            a.add(b).unwrap_or_else(|e| panic!("{e}"))
        })
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            a.sub(b).unwrap_or_else(|e| panic!("{e}"))
        })
    }

    pub fn hadamard(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Hadamard(self.id, other.id), |a, b| {
            a.hadamard(b).unwrap_or_else(|e| panic!("{e}"))
        })
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a.scale(c))
    }

    /// Adds a 1×n row to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(row, Op::AddRow(self.id, row.id), |a, r| {
            assert_eq!((1, a.cols()), r.shape(), "add_row shape");
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + r.get(0, j))
        })
    }

    /// Multiplies every row elementwise by a 1×n row.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(row, Op::MulRow(self.id, row.id), |a, r| {
            assert_eq!((1, a.cols()), r.shape(), "mul_row shape");
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * r.get(0, j))
        })
    }

    /// Scales row `i` by `weights[i]`, where `weights` is m×1.
    pub fn scale_rows(&self, weights: Var<'t>) -> Var<'t> {
        self.binary(weights, Op::ScaleRows(self.id, weights.id), |a, w| {
            assert_eq!((a.rows(), 1), w.shape(), "scale_rows shape");
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * w.get(i, 0))
        })
    }

    pub fn softmax_rows(&self, scale: f64) -> Var<'t> {
        self.unary(Op::SoftmaxRows(self.id, scale), |a| kernels::softmax_rows(a, scale))
    }

    pub fn layer_norm_rows(&self, eps: f64) -> Var<'t> {
        self.unary(Op::LayerNormRows(self.id, eps), |a| {
            kernels::layer_norm_rows(a, eps).unwrap_or_else(|e| panic!("{e}"))
        })
    }

    pub fn l2_normalize_rows(&self) -> Var<'t> {
        self.unary(Op::L2NormalizeRows(self.id), kernels::l2_normalize_rows)
    }

    /// Column-wise mean as a 1×n row.
    pub fn mean_rows(&self) -> Var<'t> {
        self.unary(Op::MeanRows(self.id), |a| {
            Matrix::row_vector(&kernels::mean_pool(a).unwrap_or_else(|e| panic!("{e}")))
        })
    }

    /// Per-row sums as an m×1 column.
    pub fn row_sums(&self) -> Var<'t> {
        self.unary(Op::RowSums(self.id), |a| {
            Matrix::from_fn(a.rows(), 1, |i, _| a.row(i).iter().sum())
        })
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Matrix::scalar(a.sum()))
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Var<'t> {
        self.unary(Op::GatherRows(self.id, indices.to_vec()), |a| a.select_rows(indices))
    }

    pub fn row(&self, i: usize) -> Var<'t> {
        self.gather_rows(&[i])
    }

    /// Vertical concatenation of vars on the same tape.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let first = parts.first().expect("concat_rows needs at least one part");
        let tape = first.tape;
        let value = {
            let vals: Vec<Matrix> = parts
                .iter()
                .map(|p| {
                    first.same_tape(p);
                    tape.value_ref(p.id).clone()
                })
                .collect();
            Matrix::vstack(&vals).unwrap_or_else(|e| panic!("{e}"))
        };
        tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Contrastive cross-entropy with diagonal positives: rows are anchors,
    /// columns are candidates. Returns the sum over anchors as a 1×1 value.
    pub fn info_nce_rows(&self) -> Var<'t> {
        self.unary(Op::InfoNceRows(self.id), |a| {
            assert_eq!(a.rows(), a.cols(), "info_nce_rows expects a square matrix");
            let total = (0..a.rows())
                .map(|r| kernels::log_sum_exp(a.row(r)) - a.get(r, r))
                .sum();
            Matrix::scalar(total)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = x.hadamard(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_adjoint_of_its_shape() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 3));
        let y = tape.leaf(Matrix::scalar(1.0));
        let out = y.scale(2.0);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(x), Matrix::zeros(2, 3));
        assert_eq!(g.wrt(y).data(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[1.0, 2.0]));
        let y = x.add(x).sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn info_nce_single_row_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(4.2));
        assert_eq!(x.info_nce_rows().value().get(0, 0), 0.0);
    }
}
