//! Dense tensors with reverse-mode differentiation over a closed set of ops.
//!
//! Every op has an explicit forward and a hand-written vector-Jacobian product.
//! A [`Graph`] records the ops applied during one forward pass and replays their
//! VJPs in reverse; it is not a general expression tracer.
//!
//! Reductions inside kernels always run in a fixed order (ascending row / column /
//! segment index), and row-parallel kernels compute each output element on a single
//! thread, so results are bitwise identical for any thread count.

mod checkpoint;
mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointRecord};
pub use gradcheck::{gradcheck, gradcheck_with, GradcheckOptions, GradcheckReport};
pub use graph::{Backward, BackwardCtx, GradSink, Graph, Var};
pub use ops::{
    add, cross_entropy_mean, gelu, gelu_grad, gelu_scalar, layer_norm, layer_norm_forward, linear, linear_backward, linear_forward, DEFAULT_LN_EPS,
};
pub use optim::{cosine_lr, AdamW, OptimizerState};
pub use params::{name_seed, uniform_tensor, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Scalar precision used by tensors: `f64` for verification, `f32` for training.
pub trait Real: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Row count above which row-parallel kernels split work across the rayon pool.
pub(crate) const PAR_ROWS: usize = 256;
