use rand::Rng as _;

use super::{scoped, Ctx, Layer, Mode, Module, ParamVisitor, Primitive, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn missing_cache(op: &str) -> Error {
    Error::shape(op, "backward called before forward")
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// `k - 1` zeros split as evenly as possible (extra on the right), so the
    /// output length is `ceil(L / stride)`.
    Same,
}

/// 1D convolution over `[batch, channels, length]`.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    stride: usize,
    pad_left: usize,
    pad_right: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv1d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: Padding, rng: &mut Rng) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let (pad_left, pad_right) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((kernel - 1) / 2, kernel - 1 - (kernel - 1) / 2),
        };
        Conv1d {
            weight: Tensor::uniform(&[out_ch, in_ch, kernel], bound, rng).with_grad(),
            bias: Tensor::uniform(&[out_ch], bound, rng).with_grad(),
            stride,
            pad_left,
            pad_right,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `floor((L + pad - k) / stride) + 1`, or `None` if the input is too short.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + self.pad_left + self.pad_right;
        (padded >= self.kernel()).then(|| (padded - self.kernel()) / self.stride + 1)
    }

    /// Output positions `t` for which `t * stride + j - pad_left` lands in `[0, len)`.
    fn valid_range(&self, j: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if self.pad_left > j { (self.pad_left - j).div_ceil(s) } else { 0 };
        let hi = if len + self.pad_left > j { ((len + self.pad_left - j - 1) / s + 1).min(out_len) } else { 0 };
        lo..hi.max(lo)
    }
}

impl<T: Real> Module<T> for Conv1d<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

impl<T: Real> Layer<T> for Conv1d<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (b, c_in, len) = x.dims3("conv1d")?;
        if c_in != self.in_channels() {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?} has {c_in} channels, weight {:?} expects {}", x.shape(), self.weight.shape(), self.in_channels()),
            ));
        }
        let out_len = self.out_len(len).ok_or_else(|| {
            Error::shape("conv1d", format!("input length {len} shorter than kernel {}", self.kernel()))
        })?;
        let (c_out, k, s) = (self.out_channels(), self.kernel(), self.stride);
        let w = self.weight.data();
        let xd = x.data();
        let mut out = vec![T::zero(); b * c_out * out_len];
        for bi in 0..b {
            for o in 0..c_out {
                let row = &mut out[(bi * c_out + o) * out_len..][..out_len];
                row.iter_mut().for_each(|v| *v = self.bias.data()[o]);
                for i in 0..c_in {
                    let xin = &xd[(bi * c_in + i) * len..][..len];
                    for j in 0..k {
                        let wv = w[(o * c_in + i) * k + j];
                        for t in self.valid_range(j, len, out_len) {
                            row[t] += wv * xin[t * s + j - self.pad_left];
                        }
                    }
                }
            }
        }
        self.input = Some(x.clone());
        Tensor::from_vec(&[b, c_out, out_len], out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv1d"))?;
        let (b, c_in, len) = x.dims3("conv1d")?;
        let (c_out, k, s) = (self.out_channels(), self.kernel(), self.stride);
        let out_len = self.out_len(len).unwrap_or(0);
        grad_out.expect_shape("conv1d backward", &[b, c_out, out_len])?;
        let w = self.weight.data();
        let xd = x.data();
        let gd = grad_out.data();
        let mut dx = vec![T::zero(); xd.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); c_out];
        for bi in 0..b {
            for o in 0..c_out {
                let g = &gd[(bi * c_out + o) * out_len..][..out_len];
                db[o] += g.iter().copied().sum::<T>();
                for i in 0..c_in {
                    let base = (bi * c_in + i) * len;
                    for j in 0..k {
                        let widx = (o * c_in + i) * k + j;
                        let wv = w[widx];
                        let mut acc = T::zero();
                        for t in self.valid_range(j, len, out_len) {
                            let src = base + t * s + j - self.pad_left;
                            acc += g[t] * xd[src];
                            dx[src] += wv * g[t];
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        Tensor::from_vec(x.shape(), dx)
    }
}

// ---------------------------------------------------------------------------
// Max pooling

/// Non-overlapping-or-strided max pooling over the last axis of `[B, C, L]`.
#[derive(Debug, Clone)]
pub struct MaxPool1d {
    size: usize,
    stride: usize,
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool1d {
    pub fn new(size: usize, stride: usize) -> Self {
        assert!(size >= 1 && stride >= 1);
        MaxPool1d { size, stride, argmax: Vec::new(), in_shape: Vec::new() }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        (len >= self.size).then(|| (len - self.size) / self.stride + 1)
    }
}

impl<T: Real> Module<T> for MaxPool1d {
    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, T>) {}
}

impl<T: Real> Layer<T> for MaxPool1d {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (b, c, len) = x.dims3("max_pool1d")?;
        let out_len = self
            .out_len(len)
            .ok_or_else(|| Error::shape("max_pool1d", format!("length {len} shorter than window {}", self.size)))?;
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * out_len);
        self.argmax.clear();
        for row in 0..b * c {
            let base = row * len;
            for t in 0..out_len {
                let start = base + t * self.stride;
                let mut best = start;
                for idx in start + 1..start + self.size {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                self.argmax.push(best);
            }
        }
        self.in_shape = x.shape().to_vec();
        Tensor::from_vec(&[b, c, out_len], out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if self.in_shape.is_empty() {
            return Err(missing_cache("max_pool1d"));
        }
        if grad_out.numel() != self.argmax.len() {
            return Err(Error::shape("max_pool1d backward", format!("{:?}", grad_out.shape())));
        }
        let mut dx = Tensor::zeros(&self.in_shape);
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad_out.data()) {
            d[src] += g;
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Batch normalization over the channel axis of `[B, C]` or `[B, C, L]`.
///
/// Train mode normalizes with batch statistics (biased variance) and updates
/// running estimates with momentum 0.1 (unbiased variance); eval mode uses the
/// running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    batch_stats: bool,
}

impl<T: Real> BatchNorm1d<T> {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::filled(&[channels], T::one()).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, c, l) = match x.shape()[..] {
            [b, c] => (b, c, 1),
            [b, c, l] => (b, c, l),
            _ => return Err(Error::shape("batch_norm1d", format!("expected [B, C] or [B, C, L], got {:?}", x.shape()))),
        };
        if c != self.channels() {
            return Err(Error::shape("batch_norm1d", format!("input {:?} vs {} channels", x.shape(), self.channels())));
        }
        Ok((b, c, l))
    }
}

impl<T: Real> Module<T> for BatchNorm1d<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("running_mean", &mut self.running_mean);
        f("running_var", &mut self.running_var);
    }
}

impl<T: Real> Layer<T> for BatchNorm1d<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (b, c, l) = self.layout(x)?;
        let n = b * l;
        let xd = x.data();
        let idx = |bi: usize, ch: usize, t: usize| (bi * c + ch) * l + t;
        let eps = T::of(self.eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let batch_stats = ctx.mode == Mode::Train;
        if batch_stats {
            let inv_n = T::of(1.0 / n as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    for t in 0..l {
                        s += xd[idx(bi, ch, t)];
                    }
                }
                let m = s * inv_n;
                let mut v = T::zero();
                for bi in 0..b {
                    for t in 0..l {
                        let d = xd[idx(bi, ch, t)] - m;
                        v += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = v * inv_n;
            }
            let mom = T::of(self.momentum);
            let unbias = if n > 1 { T::of(n as f64 / (n as f64 - 1.0)) } else { T::one() };
            let rm = self.running_mean.data_mut();
            for ch in 0..c {
                rm[ch] = (T::one() - mom) * rm[ch] + mom * mean[ch];
            }
            let rv = self.running_var.data_mut();
            for ch in 0..c {
                rv[ch] = (T::one() - mom) * rv[ch] + mom * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(self.running_mean.data());
            var.copy_from_slice(self.running_var.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.gamma.data(), self.beta.data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                for t in 0..l {
                    let i = idx(bi, ch, t);
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, shape: x.shape().to_vec(), batch_stats });
        Tensor::from_vec(x.shape(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batch_norm1d"))?;
        grad_out.expect_shape("batch_norm1d backward", &cache.shape)?;
        let c = self.channels();
        let (b, l) = (cache.shape[0], cache.shape.get(2).copied().unwrap_or(1));
        let n = T::of((b * l) as f64);
        let idx = |bi: usize, ch: usize, t: usize| (bi * c + ch) * l + t;
        let gd = grad_out.data();
        let g = self.gamma.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); gd.len()];
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for bi in 0..b {
                for t in 0..l {
                    let i = idx(bi, ch, t);
                    sum_dy += gd[i];
                    sum_dy_xhat += gd[i] * cache.xhat[i];
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let scale = g[ch] * cache.inv_std[ch];
            for bi in 0..b {
                for t in 0..l {
                    let i = idx(bi, ch, t);
                    dx[i] = if cache.batch_stats {
                        scale * (gd[i] - sum_dy / n - cache.xhat[i] * sum_dy_xhat / n)
                    } else {
                        scale * gd[i]
                    };
                }
            }
        }
        let shape = cache.shape.clone();
        self.gamma.accumulate_grad(&dgamma);
        self.beta.accumulate_grad(&dbeta);
        Tensor::from_vec(&shape, dx)
    }
}

// ---------------------------------------------------------------------------
// Pointwise activations

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Relu { input: None }
    }
}

impl<T: Real> Module<T> for Relu<T> {
    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, T>) {}
}

impl<T: Real> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
        self.input = Some(x.clone());
        Tensor::from_vec(x.shape(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("relu"))?;
        grad_out.expect_shape("relu backward", x.shape())?;
        let dx = x.data().iter().zip(grad_out.data()).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
        Tensor::from_vec(x.shape(), dx)
    }
}

/// GELU, tanh approximation.
#[derive(Debug, Clone, Default)]
pub struct Gelu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Gelu<T> {
    pub fn new() -> Self {
        Gelu { input: None }
    }
}

const GELU_C: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl<T: Real> Module<T> for Gelu<T> {
    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, T>) {}
}

impl<T: Real> Layer<T> for Gelu<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (c, k, half) = (T::of(GELU_C), T::of(SQRT_2_OVER_PI), T::of(0.5));
        let out = x.data().iter().map(|&v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh())).collect();
        self.input = Some(x.clone());
        Tensor::from_vec(x.shape(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("gelu"))?;
        grad_out.expect_shape("gelu backward", x.shape())?;
        let (c, k, half, three) = (T::of(GELU_C), T::of(SQRT_2_OVER_PI), T::of(0.5), T::of(3.0));
        let dx = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| {
                let th = (k * (v + c * v * v * v)).tanh();
                let d = half * (T::one() + th) + half * v * (T::one() - th * th) * k * (T::one() + three * c * v * v);
                g * d
            })
            .collect();
        Tensor::from_vec(x.shape(), dx)
    }
}

// ---------------------------------------------------------------------------
// Dense layers

/// Affine map over the last axis: `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[out_features, in_features], bound, rng).with_grad(),
            bias: Tensor::uniform(&[out_features], bound, rng).with_grad(),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

impl<T: Real> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (n_in, n_out) = (self.in_features(), self.out_features());
        if x.shape().last() != Some(&n_in) {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", x.shape(), self.weight.shape()),
            ));
        }
        let rows = x.numel() / n_in;
        let (w, b) = (self.weight.data(), self.bias.data());
        let mut out = Vec::with_capacity(rows * n_out);
        for xr in x.data().chunks_exact(n_in) {
            for o in 0..n_out {
                let wr = &w[o * n_in..(o + 1) * n_in];
                let dot: T = wr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                out.push(dot + b[o]);
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n_out;
        self.input = Some(x.clone());
        Tensor::from_vec(&shape, out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let (n_in, n_out) = (self.in_features(), self.out_features());
        let rows = x.numel() / n_in;
        if grad_out.numel() != rows * n_out {
            return Err(Error::shape("linear backward", format!("{:?} for input {:?}", grad_out.shape(), x.shape())));
        }
        let w = self.weight.data();
        let mut dx = vec![T::zero(); x.numel()];
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); n_out];
        for ((xr, gr), dxr) in x
            .data()
            .chunks_exact(n_in)
            .zip(grad_out.data().chunks_exact(n_out))
            .zip(dx.chunks_exact_mut(n_in))
        {
            for (o, &g) in gr.iter().enumerate() {
                db[o] += g;
                let wr = &w[o * n_in..(o + 1) * n_in];
                let dwr = &mut dw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    dxr[i] += g * wr[i];
                    dwr[i] += g * xr[i];
                }
            }
        }
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        Tensor::from_vec(x.shape(), dx)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    eps: f64,
    cache: Option<(Vec<T>, Vec<T>, Vec<usize>)>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[dim], T::one()).with_grad(),
            beta: Tensor::zeros(&[dim]).with_grad(),
            eps: 1e-5,
            cache: None,
        }
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

impl<T: Real> Layer<T> for LayerNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let d = self.gamma.numel();
        if x.shape().last() != Some(&d) {
            return Err(Error::shape("layer_norm", format!("input {:?} vs dim {d}", x.shape())));
        }
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(self.eps);
        let (g, b) = (self.gamma.data(), self.beta.data());
        let mut xhat = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(x.numel() / d);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[i] * h + b[i]);
            }
        }
        self.cache = Some((xhat, inv_std, x.shape().to_vec()));
        Tensor::from_vec(x.shape(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv_std, shape) = self.cache.as_ref().ok_or_else(|| missing_cache("layer_norm"))?;
        grad_out.expect_shape("layer_norm backward", shape)?;
        let d = self.gamma.numel();
        let n = T::of(d as f64);
        let g = self.gamma.data();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut dx = vec![T::zero(); xhat.len()];
        for (r, ((gr, hr), dxr)) in grad_out
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .enumerate()
        {
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for i in 0..d {
                dgamma[i] += gr[i] * hr[i];
                dbeta[i] += gr[i];
                let dh = gr[i] * g[i];
                s1 += dh;
                s2 += dh * hr[i];
            }
            for i in 0..d {
                let dh = gr[i] * g[i];
                dxr[i] = inv_std[r] * (dh - s1 / n - hr[i] * s2 / n);
            }
        }
        let shape = shape.clone();
        self.gamma.accumulate_grad(&dgamma);
        self.beta.accumulate_grad(&dbeta);
        Tensor::from_vec(&shape, dx)
    }
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `dx = y * (dy - sum(dy * y))` for one row.
pub(crate) fn softmax_row_backward<T: Real>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (gi - dot);
    }
}

/// Softmax over the last axis.
#[derive(Debug, Clone, Default)]
pub struct Softmax<T> {
    output: Option<Tensor<T>>,
}

impl<T: Real> Softmax<T> {
    pub fn new() -> Self {
        Softmax { output: None }
    }
}

impl<T: Real> Module<T> for Softmax<T> {
    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, T>) {}
}

impl<T: Real> Layer<T> for Softmax<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let d = *x.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = x.data().to_vec();
        if d > 0 {
            out.chunks_exact_mut(d).for_each(softmax_row);
        }
        let y = Tensor::from_vec(x.shape(), out)?;
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.as_ref().ok_or_else(|| missing_cache("softmax"))?;
        grad_out.expect_shape("softmax backward", y.shape())?;
        let d = *y.shape().last().expect("rank >= 1");
        let mut dx = vec![T::zero(); y.numel()];
        for ((yr, gr), dr) in y.data().chunks_exact(d).zip(grad_out.data().chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
            softmax_row_backward(yr, gr, dr);
        }
        Tensor::from_vec(y.shape(), dx)
    }
}

// ---------------------------------------------------------------------------
// Dropout and reshaping helpers

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
/// Identity in eval mode or at rate 0.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    rate: f64,
    mask: Option<Vec<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        Dropout { rate, mask: None }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Mask from the last train-mode forward (`None` when it acted as identity).
    pub fn last_mask(&self) -> Option<&[T]> {
        self.mask.as_deref()
    }
}

impl<T: Real> Module<T> for Dropout<T> {
    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, T>) {}
}

impl<T: Real> Layer<T> for Dropout<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        if ctx.mode == Mode::Eval || self.rate == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let mask: Vec<T> =
            (0..x.numel()).map(|_| if ctx.rng.random_bool(self.rate) { T::zero() } else { keep }).collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some(mask);
        Tensor::from_vec(x.shape(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.mask {
            None => Ok(grad_out.clone()),
            Some(mask) => {
                let dx = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                Tensor::from_vec(grad_out.shape(), dx)
            }
        }
    }
}

/// Mean over axis 1 of `[B, S, D]`, giving `[B, D]`.
#[derive(Debug, Clone, Default)]
pub struct MeanPool {
    in_shape: Vec<usize>,
}

impl MeanPool {
    pub fn new() -> Self {
        MeanPool::default()
    }
}

impl<T: Real> Module<T> for MeanPool {
    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, T>) {}
}

impl<T: Real> Layer<T> for MeanPool {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (b, s, d) = x.dims3("mean_pool")?;
        if s == 0 {
            return Err(Error::shape("mean_pool", "empty sequence"));
        }
        let inv = T::of(1.0 / s as f64);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for tok in x.data()[bi * s * d..(bi + 1) * s * d].chunks_exact(d) {
                for (a, &v) in o.iter_mut().zip(tok) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        self.in_shape = x.shape().to_vec();
        Tensor::from_vec(&[b, d], out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, s, d] = self.in_shape[..] else {
            return Err(missing_cache("mean_pool"));
        };
        grad_out.expect_shape("mean_pool backward", &[b, d])?;
        let inv = T::of(1.0 / s as f64);
        let mut dx = Vec::with_capacity(b * s * d);
        for bi in 0..b {
            let g = &grad_out.data()[bi * d..(bi + 1) * d];
            for _ in 0..s {
                dx.extend(g.iter().map(|&v| v * inv));
            }
        }
        Tensor::from_vec(&self.in_shape, dx)
    }
}

/// Swaps the last two axes of `[B, A, C]`.
#[derive(Debug, Clone, Default)]
pub struct Transpose {
    in_shape: Vec<usize>,
}

impl Transpose {
    pub fn new() -> Self {
        Transpose::default()
    }

    pub fn apply<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, a, c) = x.dims3("transpose")?;
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let base = bi * a * c;
            for i in 0..a {
                for j in 0..c {
                    out[base + j * a + i] = xd[base + i * c + j];
                }
            }
        }
        Tensor::from_vec(&[b, c, a], out)
    }
}

impl<T: Real> Module<T> for Transpose {
    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, T>) {}
}

impl<T: Real> Layer<T> for Transpose {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        self.in_shape = x.shape().to_vec();
        Self::apply(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if self.in_shape.len() != 3 {
            return Err(missing_cache("transpose"));
        }
        let back = Self::apply(grad_out)?;
        back.expect_shape("transpose backward", &self.in_shape)?;
        Ok(back)
    }
}

/// Concatenation of `[B, S_i, D]` inputs along axis 1.
#[derive(Debug, Clone, Default)]
pub struct Concat {
    lengths: Vec<usize>,
    batch: usize,
    dim: usize,
}

impl Concat {
    pub fn new() -> Self {
        Concat::default()
    }
}

impl<T: Real> Module<T> for Concat {
    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, T>) {}
}

impl<T: Real> Primitive<T> for Concat {
    fn forward_multi(&mut self, inputs: &[&Tensor<T>], _ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (b, _, d) = first.dims3("concat")?;
        let mut lengths = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (bx, s, dx) = x.dims3("concat")?;
            if bx != b || dx != d {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", first.shape(), x.shape())));
            }
            lengths.push(s);
        }
        let total: usize = lengths.iter().sum();
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for (x, &s) in inputs.iter().zip(&lengths) {
                out.extend_from_slice(&x.data()[bi * s * d..(bi + 1) * s * d]);
            }
        }
        self.lengths = lengths;
        self.batch = b;
        self.dim = d;
        Tensor::from_vec(&[b, total, d], out)
    }

    fn backward_multi(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let total: usize = self.lengths.iter().sum();
        let (b, d) = (self.batch, self.dim);
        grad_out.expect_shape("concat backward", &[b, total, d])?;
        let mut grads: Vec<Vec<T>> = self.lengths.iter().map(|&s| Vec::with_capacity(b * s * d)).collect();
        let g = grad_out.data();
        for bi in 0..b {
            let mut offset = bi * total * d;
            for (gi, &s) in grads.iter_mut().zip(&self.lengths) {
                gi.extend_from_slice(&g[offset..offset + s * d]);
                offset += s * d;
            }
        }
        grads
            .into_iter()
            .zip(&self.lengths)
            .map(|(gi, &s)| Tensor::from_vec(&[b, s, d], gi))
            .collect()
    }
}

/// Sequential composition helpers used by composite layers.
pub(crate) fn visit_child<T: Real>(name: &str, child: &mut dyn Module<T>, f: &mut ParamVisitor<'_, T>) {
    child.visit_params(&mut scoped(name, f));
}

pub(crate) fn visit_child_buffers<T: Real>(name: &str, child: &mut dyn Module<T>, f: &mut ParamVisitor<'_, T>) {
    child.visit_buffers(&mut scoped(name, f));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn ctx(rng: &mut Rng, mode: Mode) -> Ctx<'_> {
        Ctx::new(mode, rng)
    }

    #[test]
    fn relu_forward() {
        let mut r = seeded(0);
        let y = Relu::<f64>::new().forward(&Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap(), &mut ctx(&mut r, Mode::Eval)).unwrap();
        assert_eq!(y.data(), &[0.0f64, 0.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = seeded(1);
        let x = Tensor::<f32>::randn(&[7, 13], 5.0, &mut r);
        let y = Softmax::new().forward(&x, &mut ctx(&mut r, Mode::Eval)).unwrap();
        for row in y.data().chunks(13) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn conv_output_length() {
        let mut r = seeded(2);
        let mut conv = Conv1d::<f64>::new(3, 4, 7, 2, Padding::Valid, &mut r);
        assert_eq!(conv.out_len(98), Some(46));
        let y = conv.forward(&Tensor::zeros(&[2, 3, 98]), &mut ctx(&mut r, Mode::Eval)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 46]);
        let same = Conv1d::<f64>::new(3, 4, 7, 2, Padding::Same, &mut r);
        assert_eq!(same.out_len(21), Some(11));
        assert_eq!(same.out_len(20), Some(10));
        let tail = Conv1d::<f64>::new(3, 4, 14, 1, Padding::Same, &mut r);
        assert_eq!(tail.out_len(9), Some(9));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = seeded(3);
        let mut conv = Conv1d::<f64>::new(2, 3, 5, 2, Padding::Same, &mut r);
        let x = Tensor::<f64>::randn(&[2, 2, 11], 1.0, &mut r);
        let y = conv.forward(&x, &mut ctx(&mut r, Mode::Eval)).unwrap();
        let (pl, out_len) = (2isize, 6);
        for b in 0..2 {
            for o in 0..3 {
                for t in 0..out_len {
                    let mut acc = conv.bias.data()[o];
                    for i in 0..2 {
                        for j in 0..5 {
                            let src = (t * 2 + j) as isize - pl;
                            if (0..11).contains(&src) {
                                acc += conv.weight.data()[(o * 2 + i) * 5 + j] * x.data()[(b * 2 + i) * 11 + src as usize];
                            }
                        }
                    }
                    assert!((y.data()[(b * 3 + o) * out_len + t] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_operands() {
        let mut r = seeded(4);
        let mut conv = Conv1d::<f32>::new(3, 4, 7, 1, Padding::Valid, &mut r);
        let err = conv.forward(&Tensor::zeros(&[1, 5, 20]), &mut ctx(&mut r, Mode::Eval)).unwrap_err();
        assert!(err.to_string().contains("[1, 5, 20]"), "{err}");
        assert!(conv.forward(&Tensor::zeros(&[1, 3, 5]), &mut ctx(&mut r, Mode::Eval)).is_err());
    }

    #[test]
    fn batch_norm_eval_is_deterministic_and_running_stats_update() {
        let mut r = seeded(5);
        let mut bn = BatchNorm1d::<f32>::new(3);
        let x = Tensor::<f32>::randn(&[4, 3, 6], 2.0, &mut r);
        let a = bn.forward(&x, &mut ctx(&mut r, Mode::Eval)).unwrap();
        let b = bn.forward(&x, &mut ctx(&mut r, Mode::Eval)).unwrap();
        assert_eq!(a, b);
        assert_eq!(bn.running_mean.data(), &[0.0; 3]);

        let y = bn.forward(&x, &mut ctx(&mut r, Mode::Train)).unwrap();
        // Train-mode output has per-channel zero mean.
        for ch in 0..3 {
            let m: f32 = (0..4).flat_map(|b| (0..6).map(move |t| (b, t))).map(|(b, t)| y.data()[(b * 3 + ch) * 6 + t]).sum();
            assert!(m.abs() < 1e-4);
        }
        let mean0: f32 = (0..4).flat_map(|b| (0..6).map(move |t| (b, t))).map(|(b, t)| x.data()[b * 18 + t]).sum::<f32>() / 24.0;
        assert!((bn.running_mean.data()[0] - 0.1 * mean0).abs() < 1e-5);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut r = seeded(6);
        let x = Tensor::<f32>::randn(&[3, 4], 1.0, &mut r);
        assert_eq!(Dropout::new(0.0).forward(&x, &mut ctx(&mut r, Mode::Train)).unwrap(), x);
        assert_eq!(Dropout::new(0.5).forward(&x, &mut ctx(&mut r, Mode::Eval)).unwrap(), x);
    }

    #[test]
    fn concat_and_transpose() {
        let mut r = seeded(7);
        let a = Tensor::<f64>::from_f64(&[1, 1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = Concat::new().forward_multi(&[&a, &b], &mut ctx(&mut r, Mode::Eval)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = Transpose::apply(&y).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_pool_matches_brute_force() {
        let mut r = seeded(8);
        let x = Tensor::<f64>::randn(&[2, 5, 3], 1.0, &mut r);
        let y = MeanPool::new().forward(&x, &mut ctx(&mut r, Mode::Eval)).unwrap();
        for b in 0..2 {
            for d in 0..3 {
                let m = (0..5).map(|s| x.data()[(b * 5 + s) * 3 + d]).sum::<f64>() / 5.0;
                assert!((y.data()[b * 3 + d] - m).abs() < 1e-12);
            }
        }
    }
}
