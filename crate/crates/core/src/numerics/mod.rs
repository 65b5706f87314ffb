//! Dense tensors, convolution/resampling kernels and reverse-mode
//! differentiation for small convolutional networks.

pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, ParamId, Var};
pub use params::{ParamEntry, ParamStore};
pub use scalar::{matmul_into, Float};
pub use tensor::Tensor;

use crate::error::Result;

/// Plain (untracked) convolution.
pub fn conv2d<F: Float>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    kernels::conv2d_forward(input, weight, bias, stride, padding)?.ensure_finite("conv2d")
}

/// Align-corners-false bilinear upsampling by an integer factor.
pub fn bilinear_upsample<F: Float>(input: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    kernels::bilinear_forward(input, factor)
}

pub fn nearest_upsample<F: Float>(input: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    kernels::nearest_forward(input, factor)
}

/// Non-overlapping `factor x factor` mean (area) downsampling.
pub fn avg_pool<F: Float>(input: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    kernels::avg_pool_forward(input, factor)
}
