//! Dense kernels, the reverse-mode tape, and the on-disk matrix container.

pub mod container;
mod gradcheck;
mod kernels;
mod matrix;
mod rng;
mod tape;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, REL_ERROR_FLOOR};
pub use kernels::{
    cosine, dot, l2_normalize, l2_normalize_rows, layer_norm, layer_norm_rows, log_sum_exp,
    matmul, matmul_nt, mean_pool, softmax_rows, softmax_scaled, L2_EPS, LN_EPS,
};
pub use matrix::Matrix;
pub use rng::{stable_hash, SeededRng};
pub use tape::{Gradients, Tape, Var};
