use super::layers::{softmax_row, softmax_row_backward, visit_child, Dropout, Gelu, LayerNorm, Linear};
use super::{Ctx, Layer, Module, ParamVisitor, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Unmasked multi-head scaled dot-product self-attention over `[B, S, D]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    n_heads: usize,
    cache: Option<AttnCache<T>>,
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// `[B, H, S, S]` row-stochastic weights.
    weights: Vec<T>,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(dim: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("embedding dim {dim} not divisible by {n_heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
            n_heads,
            cache: None,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Attention weights of the last forward, laid out `[B, H, S, S]`.
    pub fn last_weights(&self) -> Option<&[T]> {
        self.cache.as_ref().map(|c| c.weights.as_slice())
    }
}

impl<T: Real> Module<T> for MultiHeadAttention<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child("query", &mut self.query, f);
        visit_child("key", &mut self.key, f);
        visit_child("value", &mut self.value, f);
        visit_child("output", &mut self.output, f);
    }
}

impl<T: Real> Layer<T> for MultiHeadAttention<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (b, s, d) = x.dims3("attention")?;
        let q = self.query.forward(x, ctx)?;
        let k = self.key.forward(x, ctx)?;
        let v = self.value.forward(x, ctx)?;
        let h = self.n_heads;
        let dh = d / h;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut weights = vec![T::zero(); b * h * s * s];
        let mut mixed = vec![T::zero(); b * s * d];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                let wbase = (bi * h + hi) * s * s;
                for i in 0..s {
                    let qi = &qd[(bi * s + i) * d + off..][..dh];
                    let row = &mut weights[wbase + i * s..][..s];
                    for (j, w) in row.iter_mut().enumerate() {
                        let kj = &kd[(bi * s + j) * d + off..][..dh];
                        *w = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    softmax_row(row);
                    let out = &mut mixed[(bi * s + i) * d + off..][..dh];
                    for (j, &w) in row.iter().enumerate() {
                        let vj = &vd[(bi * s + j) * d + off..][..dh];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        let mixed = Tensor::from_vec(&[b, s, d], mixed)?;
        let y = self.output.forward(&mixed, ctx)?;
        self.cache = Some(AttnCache { q, k, v, weights });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let dmixed = self.output.backward(grad_out)?;
        let cache = self.cache.as_ref().ok_or_else(|| Error::shape("attention", "backward before forward"))?;
        let (b, s, d) = cache.q.dims3("attention backward")?;
        let h = self.n_heads;
        let dh = d / h;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (cache.q.data(), cache.k.data(), cache.v.data());
        let gm = dmixed.data();
        let mut dq = vec![T::zero(); b * s * d];
        let mut dk = vec![T::zero(); b * s * d];
        let mut dv = vec![T::zero(); b * s * d];
        let mut dw = vec![T::zero(); s];
        let mut dscore = vec![T::zero(); s];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                let wbase = (bi * h + hi) * s * s;
                for i in 0..s {
                    let row = &cache.weights[wbase + i * s..][..s];
                    let gi = &gm[(bi * s + i) * d + off..][..dh];
                    for j in 0..s {
                        let vj = &vd[(bi * s + j) * d + off..][..dh];
                        dw[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        let dvj = &mut dv[(bi * s + j) * d + off..][..dh];
                        for (o, &g) in dvj.iter_mut().zip(gi) {
                            *o += row[j] * g;
                        }
                    }
                    softmax_row_backward(row, &dw, &mut dscore);
                    let qi = &qd[(bi * s + i) * d + off..][..dh];
                    for j in 0..s {
                        let ds = dscore[j] * scale;
                        let kj = &kd[(bi * s + j) * d + off..][..dh];
                        let dqi = &mut dq[(bi * s + i) * d + off..][..dh];
                        for (o, &kv) in dqi.iter_mut().zip(kj) {
                            *o += ds * kv;
                        }
                        let dkj = &mut dk[(bi * s + j) * d + off..][..dh];
                        for (o, &qv) in dkj.iter_mut().zip(qi) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        let shape = [b, s, d];
        let dx_q = self.query.backward(&Tensor::from_vec(&shape, dq)?)?;
        let dx_k = self.key.backward(&Tensor::from_vec(&shape, dk)?)?;
        let dx_v = self.value.backward(&Tensor::from_vec(&shape, dv)?)?;
        dx_q.add(&dx_k)?.add(&dx_v)
    }
}

/// Pre-norm transformer block:
/// `a = x + attn(ln1(x))`, `y = a + fc2(gelu(fc1(ln2(a))))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    act: Gelu<T>,
    attn_drop: Dropout<T>,
    mlp_drop: Dropout<T>,
}

impl<T: Real> TransformerBlock<T> {
    pub fn new(dim: usize, n_heads: usize, mlp_ratio: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be at least 1".into()));
        }
        Ok(TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, n_heads, rng)?,
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, dim * mlp_ratio, rng),
            fc2: Linear::new(dim * mlp_ratio, dim, rng),
            act: Gelu::new(),
            attn_drop: Dropout::new(dropout),
            mlp_drop: Dropout::new(dropout),
        })
    }
}

impl<T: Real> Module<T> for TransformerBlock<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child("ln1", &mut self.ln1, f);
        visit_child("attn", &mut self.attn, f);
        visit_child("ln2", &mut self.ln2, f);
        visit_child("fc1", &mut self.fc1, f);
        visit_child("fc2", &mut self.fc2, f);
    }
}

impl<T: Real> Layer<T> for TransformerBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let n1 = self.ln1.forward(x, ctx)?;
        let at = self.attn.forward(&n1, ctx)?;
        let at = self.attn_drop.forward(&at, ctx)?;
        let a = x.add(&at)?;
        let n2 = self.ln2.forward(&a, ctx)?;
        let m = self.fc1.forward(&n2, ctx)?;
        let m = self.act.forward(&m, ctx)?;
        let m = self.fc2.forward(&m, ctx)?;
        let m = self.mlp_drop.forward(&m, ctx)?;
        a.add(&m)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.mlp_drop.backward(grad_out)?;
        let g = self.fc2.backward(&g)?;
        let g = self.act.backward(&g)?;
        let g = self.fc1.backward(&g)?;
        let g = self.ln2.backward(&g)?;
        let da = grad_out.add(&g)?;
        let g = self.attn_drop.backward(&da)?;
        let g = self.attn.backward(&g)?;
        let g = self.ln1.backward(&g)?;
        da.add(&g)
    }
}
