use crate::error::{Error, Result};
use crate::numerics::{Concat, Ctx, Dropout, Layer, Module, ParamVisitor, Primitive, Real, Tensor, Transpose};
use crate::rng::Rng;

pub const INIT_STD: f64 = 0.02;

/// `[B, D, K]` features to a `[B, K + 2, D]` sequence framed by CLS and TAL.
#[derive(Debug, Clone)]
pub struct VerticalEmbed<T> {
    pub cls: Tensor<T>,
    pub tal: Tensor<T>,
    /// One row per sequence position, `[max_k + 2, D]`.
    pub positions: Tensor<T>,
    dropout: Dropout<T>,
    transpose: Transpose,
    concat: Concat,
    seq_len: usize,
}

impl<T: Real> VerticalEmbed<T> {
    pub fn new(dim: usize, max_k: usize, dropout: f64, rng: &mut Rng) -> Self {
        VerticalEmbed {
            cls: Tensor::randn(&[dim], INIT_STD, rng).with_grad(),
            tal: Tensor::randn(&[dim], INIT_STD, rng).with_grad(),
            positions: Tensor::randn(&[max_k + 2, dim], INIT_STD, rng).with_grad(),
            dropout: Dropout::new(dropout),
            transpose: Transpose::new(),
            concat: Concat::new(),
            seq_len: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.cls.numel()
    }

    pub fn max_k(&self) -> usize {
        self.positions.shape()[0] - 2
    }

    /// Mask of the last train-mode forward.
    pub fn last_mask(&self) -> Option<&[T]> {
        self.dropout.last_mask()
    }
}

fn broadcast<T: Real>(v: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    let d = v.numel();
    Tensor::from_vec(&[batch, 1, d], v.data().repeat(batch))
}

fn sum_over_batch<T: Real>(g: &Tensor<T>) -> Vec<T> {
    let (b, s, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = vec![T::zero(); s * d];
    for bi in 0..b {
        for (o, &v) in out.iter_mut().zip(&g.data()[bi * s * d..(bi + 1) * s * d]) {
            *o += v;
        }
    }
    out
}

impl<T: Real> Module<T> for VerticalEmbed<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("cls", &mut self.cls);
        f("tal", &mut self.tal);
        f("positions", &mut self.positions);
    }
}

impl<T: Real> Layer<T> for VerticalEmbed<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (b, d, k) = x.dims3("vertical_embed")?;
        if d != self.dim() {
            return Err(Error::shape("vertical_embed", format!("{d} channels, embedding width {}", self.dim())));
        }
        if k > self.max_k() {
            return Err(Error::Capacity { capacity: self.max_k() + 2, needed: k + 2 });
        }
        let tokens = self.transpose.forward(x, ctx)?;
        let seq = self.concat.forward_multi(&[&broadcast(&self.cls, b)?, &tokens, &broadcast(&self.tal, b)?], ctx)?;
        let s = k + 2;
        let pos = &self.positions.data()[..s * d];
        let mut data = seq.into_data();
        for row in data.chunks_exact_mut(s * d) {
            for (v, &p) in row.iter_mut().zip(pos) {
                *v += p;
            }
        }
        self.seq_len = s;
        self.dropout.forward(&Tensor::from_vec(&[b, s, d], data)?, ctx)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.dropout.backward(grad_out)?;
        let (_, s, d) = g.dims3("vertical_embed backward")?;
        if s != self.seq_len {
            return Err(Error::shape("vertical_embed backward", format!("sequence {s}, forward saw {}", self.seq_len)));
        }
        let mut pos_grad = sum_over_batch(&g);
        pos_grad.resize(self.positions.numel(), T::zero());
        self.positions.accumulate_grad(&pos_grad);
        let parts = self.concat.backward_multi(&g)?;
        self.cls.accumulate_grad(&sum_over_batch(&parts[0]));
        self.tal.accumulate_grad(&sum_over_batch(&parts[2]));
        debug_assert_eq!(parts[1].shape()[2], d);
        self.transpose.backward(&parts[1])
    }
}

crate::single_input_primitive!(VerticalEmbed<T>);
