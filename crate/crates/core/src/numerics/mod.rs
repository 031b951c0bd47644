//! Differentiable primitives, the optimizer, and the learning-rate schedule.
//!
//! Layers cache what they need during `forward` and consume it in
//! `backward`; parameter gradients accumulate into each parameter tensor's
//! gradient buffer. Everything is generic over [`Real`] so the same code runs
//! in `f32` for training and `f64` for finite-difference verification.

mod attention;
mod gradcheck;
mod layers;
mod optim;
mod schedule;
mod tensor;

pub use attention::{MultiHeadAttention, TransformerBlock};
pub use gradcheck::{grad_check, GradCheckConfig, GradReport};
pub use layers::{
    BatchNorm1d, Concat, Conv1d, Dropout, Gelu, LayerNorm, Linear, MaxPool1d, MeanPool, Padding, Relu, Softmax, Transpose,
};
pub(crate) use layers::{visit_child, visit_child_buffers};
pub use optim::{OptimizerState, Sgd};
pub use schedule::{lr_schedule, ScheduleParams};
pub use tensor::{Real, Tensor};

use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward context: the mode and the generator dropout draws from.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: &'a mut Rng,
}

impl<'a> Ctx<'a> {
    pub fn new(mode: Mode, rng: &'a mut Rng) -> Self {
        Ctx { mode, rng }
    }
}

pub type ParamVisitor<'f, T> = dyn FnMut(&str, &mut Tensor<T>) + 'f;

/// Anything that owns trainable tensors.
pub trait Module<T: Real> {
    /// Visits every trainable tensor with a stable, hierarchical name.
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>);

    /// Visits non-trainable state (batch-norm running statistics).
    fn visit_buffers(&mut self, _f: &mut ParamVisitor<'_, T>) {}

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }
}

/// A single-input differentiable layer.
pub trait Layer<T: Real>: Module<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>>;

    /// Returns the input gradient and accumulates parameter gradients.
    /// Must follow a `forward` call.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
}

/// A layer with any number of inputs, as seen by the gradient checker.
pub trait Primitive<T: Real>: Module<T> {
    fn forward_multi(&mut self, inputs: &[&Tensor<T>], ctx: &mut Ctx<'_>) -> Result<Tensor<T>>;
    fn backward_multi(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

/// Implements [`Primitive`] for single-input layers by delegating to [`Layer`].
#[macro_export]
#[doc(hidden)]
macro_rules! single_input_primitive {
    ($($ty:ty),* $(,)?) => {$(
        impl<T: $crate::numerics::Real> $crate::numerics::Primitive<T> for $ty {
            fn forward_multi(
                &mut self,
                inputs: &[&$crate::numerics::Tensor<T>],
                ctx: &mut $crate::numerics::Ctx<'_>,
            ) -> $crate::Result<$crate::numerics::Tensor<T>> {
                match inputs {
                    [x] => $crate::numerics::Layer::forward(self, x, ctx),
                    _ => Err($crate::Error::shape("forward", format!("expected 1 input, got {}", inputs.len()))),
                }
            }

            fn backward_multi(
                &mut self,
                grad_out: &$crate::numerics::Tensor<T>,
            ) -> $crate::Result<Vec<$crate::numerics::Tensor<T>>> {
                Ok(vec![$crate::numerics::Layer::backward(self, grad_out)?])
            }
        }
    )*};
}

single_input_primitive!(
    MultiHeadAttention<T>,
    TransformerBlock<T>,
    Conv1d<T>,
    MaxPool1d,
    BatchNorm1d<T>,
    Relu<T>,
    Gelu<T>,
    Linear<T>,
    LayerNorm<T>,
    Softmax<T>,
    Dropout<T>,
    MeanPool,
    Transpose,
);

/// Row-wise softmax over a row-major buffer with rows of `width`.
pub fn softmax_rows<T: Real>(data: &mut [T], width: usize) {
    data.chunks_exact_mut(width).for_each(layers::softmax_row);
}

/// Prefixes names handed to a visitor.
pub(crate) fn scoped<'a, 'f: 'a, T: Real>(
    prefix: &'a str,
    f: &'a mut ParamVisitor<'f, T>,
) -> impl FnMut(&str, &mut Tensor<T>) + use<'a, 'f, T> {
    move |name, t| f(&format!("{prefix}.{name}"), t)
}
