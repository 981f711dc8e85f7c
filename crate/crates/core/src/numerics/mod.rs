//! Tensors, differentiable operators, and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod skt;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FdOptions, FdReport, Probe, Stencil};
pub use graph::{DiffNode, Gradients, Tape, Var};
pub use kernels::{
    affine, conv_forward, global_mean_pool, pool_forward, relu, softmax, softmax_cross_entropy,
    ConvGeometry, PoolGeometry, PoolKind,
};
pub use tensor::{Real, Tensor};

/// Pools `input` and returns only the pooled tensor.
pub fn pool<T: Real>(input: &Tensor<T>, geom: &PoolGeometry) -> crate::Result<Tensor<T>> {
    pool_forward(input, geom).map(|(t, _)| t)
}
