//! Minimal deterministic neural substrate.

pub mod gradcheck;
pub mod mask;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use mask::AttentionMask;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-head masked attention: row `i` of the output is the softmax-weighted
/// sum of `v` over keys `j` with `mask[i][j]`, using `1/√d` scaling.
pub fn masked_attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, mask: &AttentionMask) -> Result<Tensor<S>> {
    let mut tape = Tape::inference();
    let (qv, kv, vv) = (tape.constant_ref(q), tape.constant_ref(k), tape.constant_ref(v));
    let out = tape.attention(qv, kv, vv, mask, 1)?;
    Ok(tape.value(out).clone())
}

/// `[rows, cols]` tensor with i.i.d. `N(0, std²)` entries.
pub fn normal_tensor<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| S::lit(dist.sample(rng))).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

pub fn ones_row<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::row_vector(vec![S::one(); n])
}
