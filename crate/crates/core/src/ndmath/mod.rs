//! Dense numeric kernel: matrices, activations, Adam, seeded randomness and
//! finite-difference gradient checking.

mod adam;
mod gradcheck;
mod matrix;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_norm, numeric_gradient, relative_error, DEFAULT_EPS};
pub use matrix::{
    log_sum_exp, matmul, matmul_into, matmul_nt, matmul_nt_into, matmul_tn, matmul_tn_into,
    matvec, sigmoid, softmax, softmax_inplace, tanh_map, Matrix,
};
pub use rng::{stream, Rng};

/// Parameter init scale: every weight starts uniform in `[-INIT_SCALE, INIT_SCALE]`.
pub const INIT_SCALE: f64 = 0.1;

/// Inverted dropout mask: entries are 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    Matrix::new(rows, cols, data).expect("mask shape")
}
