use super::config::CnnPlan;
use crate::error::{Error, Result};
use crate::numerics::{
    visit_child, visit_child_buffers, BatchNorm1d, Conv1d, Ctx, Layer, MaxPool1d, Module, Padding, ParamVisitor, Real,
    Relu, Tensor,
};
use crate::rng::Rng;

pub const MIX_KERNEL: usize = 7;

fn at_layer<T>(index: usize, what: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Shape { op, detail } => Error::Shape { op: format!("cnn layer {index} ({what}) {op}"), detail },
        other => other,
    })
}

/// conv1 reduce, conv7 mix, conv1 expand, each followed by batch norm.
#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    pub reduce: Conv1d<T>,
    pub bn_reduce: BatchNorm1d<T>,
    pub mix: Conv1d<T>,
    pub bn_mix: BatchNorm1d<T>,
    pub expand: Conv1d<T>,
    pub bn_expand: BatchNorm1d<T>,
    relu_reduce: Relu<T>,
    relu_mix: Relu<T>,
    relu_out: Relu<T>,
    residual: bool,
}

impl<T: Real> Bottleneck<T> {
    pub fn new(in_ch: usize, mid: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        Bottleneck {
            reduce: Conv1d::new(in_ch, mid, 1, 1, Padding::Valid, rng),
            bn_reduce: BatchNorm1d::new(mid),
            mix: Conv1d::new(mid, mid, MIX_KERNEL, stride, Padding::Same, rng),
            bn_mix: BatchNorm1d::new(mid),
            expand: Conv1d::new(mid, out_ch, 1, 1, Padding::Valid, rng),
            bn_expand: BatchNorm1d::new(out_ch),
            relu_reduce: Relu::new(),
            relu_mix: Relu::new(),
            relu_out: Relu::new(),
            residual: in_ch == out_ch && stride == 1,
        }
    }

    pub fn has_residual(&self) -> bool {
        self.residual
    }
}

impl<T: Real> Module<T> for Bottleneck<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child("reduce", &mut self.reduce, f);
        visit_child("bn_reduce", &mut self.bn_reduce, f);
        visit_child("mix", &mut self.mix, f);
        visit_child("bn_mix", &mut self.bn_mix, f);
        visit_child("expand", &mut self.expand, f);
        visit_child("bn_expand", &mut self.bn_expand, f);
    }

    fn visit_buffers(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child_buffers("bn_reduce", &mut self.bn_reduce, f);
        visit_child_buffers("bn_mix", &mut self.bn_mix, f);
        visit_child_buffers("bn_expand", &mut self.bn_expand, f);
    }
}

impl<T: Real> Layer<T> for Bottleneck<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let h = self.reduce.forward(x, ctx)?;
        let h = self.bn_reduce.forward(&h, ctx)?;
        let h = self.relu_reduce.forward(&h, ctx)?;
        let h = self.mix.forward(&h, ctx)?;
        let h = self.bn_mix.forward(&h, ctx)?;
        let h = self.relu_mix.forward(&h, ctx)?;
        let h = self.expand.forward(&h, ctx)?;
        let mut h = self.bn_expand.forward(&h, ctx)?;
        if self.residual {
            h = h.add(x)?;
        }
        self.relu_out.forward(&h, ctx)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu_out.backward(grad_out)?;
        let skip = self.residual.then(|| g.clone());
        let g = self.bn_expand.backward(&g)?;
        let g = self.expand.backward(&g)?;
        let g = self.relu_mix.backward(&g)?;
        let g = self.bn_mix.backward(&g)?;
        let g = self.mix.backward(&g)?;
        let g = self.relu_reduce.backward(&g)?;
        let g = self.bn_reduce.backward(&g)?;
        let g = self.reduce.backward(&g)?;
        match skip {
            Some(s) => g.add(&s),
            None => Ok(g),
        }
    }
}

crate::single_input_primitive!(Bottleneck<T>, Cnn<T>);

/// Tail, bottleneck stages and the head projection to the embedding width.
#[derive(Debug, Clone)]
pub struct Cnn<T> {
    pub tail: Conv1d<T>,
    pub tail_bn: BatchNorm1d<T>,
    tail_relu: Relu<T>,
    tail_pool: Option<MaxPool1d>,
    pub blocks: Vec<Bottleneck<T>>,
    pub head: Conv1d<T>,
}

impl<T: Real> Cnn<T> {
    pub fn new(in_channels: usize, plan: &CnnPlan, rng: &mut Rng) -> Self {
        let padding = if plan.tail.same_padding { Padding::Same } else { Padding::Valid };
        let tail = Conv1d::new(in_channels, plan.width, plan.tail.kernel, plan.tail.stride, padding, rng);
        let mut blocks = Vec::new();
        for stage in &plan.stages {
            for i in 0..stage.blocks {
                let stride = if i == 0 { stage.stride } else { 1 };
                blocks.push(Bottleneck::new(plan.width, plan.mid, plan.width, stride, rng));
            }
        }
        Cnn {
            tail,
            tail_bn: BatchNorm1d::new(plan.width),
            tail_relu: Relu::new(),
            tail_pool: plan.tail.pool.map(|p| MaxPool1d::new(p, p)),
            blocks,
            head: Conv1d::new(plan.width, plan.out_channels, 1, 1, Padding::Valid, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.tail.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.head.out_channels()
    }
}

impl<T: Real> Module<T> for Cnn<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child("tail", &mut self.tail, f);
        visit_child("tail_bn", &mut self.tail_bn, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child(&format!("block{i}"), b, f);
        }
        visit_child("head", &mut self.head, f);
    }

    fn visit_buffers(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child_buffers("tail_bn", &mut self.tail_bn, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_buffers(&format!("block{i}"), b, f);
        }
    }
}

impl<T: Real> Layer<T> for Cnn<T> {
    /// `[B, F, T]` tokens to `[B, D, K]` features.
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (_, f, _) = at_layer(0, "input", x.dims3("cnn"))?;
        if f != self.in_channels() {
            return Err(Error::shape(
                "cnn layer 0 (tail)",
                format!("input has {f} channels, model expects {}", self.in_channels()),
            ));
        }
        let h = at_layer(0, "tail", self.tail.forward(x, ctx))?;
        let h = self.tail_bn.forward(&h, ctx)?;
        let mut h = self.tail_relu.forward(&h, ctx)?;
        if let Some(pool) = &mut self.tail_pool {
            h = at_layer(0, "pool", pool.forward(&h, ctx))?;
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            h = at_layer(1 + 3 * i, "bottleneck", b.forward(&h, ctx))?;
        }
        at_layer(1 + 3 * self.blocks.len(), "head", self.head.forward(&h, ctx))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(grad_out)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        if let Some(pool) = &mut self.tail_pool {
            g = Layer::<T>::backward(pool, &g)?;
        }
        let g = self.tail_relu.backward(&g)?;
        let g = self.tail_bn.backward(&g)?;
        self.tail.backward(&g)
    }
}
