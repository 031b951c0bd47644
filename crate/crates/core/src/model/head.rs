use super::config::{ClassifierVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    visit_child, visit_child_buffers, BatchNorm1d, Conv1d, Ctx, Layer, Linear, MeanPool, Module, Padding,
    ParamVisitor, Real, Relu, Tensor,
};
use crate::rng::Rng;

/// Reads only the first (CLS) and last (TAL) tokens.
#[derive(Debug, Clone)]
pub struct LongClassifier<T> {
    /// Two-tap convolution across the CLS/TAL pair, `D -> D` channels.
    pub conv: Conv1d<T>,
    pub fc: Linear<T>,
    seq_len: usize,
}

impl<T: Real> LongClassifier<T> {
    pub fn new(dim: usize, n_classes: usize, rng: &mut Rng) -> Self {
        LongClassifier {
            conv: Conv1d::new(dim, dim, 2, 1, Padding::Valid, rng),
            fc: Linear::new(dim, n_classes, rng),
            seq_len: 0,
        }
    }
}

impl<T: Real> Module<T> for LongClassifier<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child("conv", &mut self.conv, f);
        visit_child("fc", &mut self.fc, f);
    }
}

impl<T: Real> Layer<T> for LongClassifier<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let (b, s, d) = x.dims3("classify_long")?;
        if s < 2 {
            return Err(Error::shape("classify_long", format!("sequence of {s} has no CLS/TAL pair")));
        }
        let xs = x.data();
        let mut pair = Vec::with_capacity(b * d * 2);
        for bi in 0..b {
            for c in 0..d {
                pair.push(xs[(bi * s) * d + c]);
                pair.push(xs[(bi * s + s - 1) * d + c]);
            }
        }
        self.seq_len = s;
        let h = self.conv.forward(&Tensor::from_vec(&[b, d, 2], pair)?, ctx)?.reshape(&[b, d])?;
        self.fc.forward(&h, ctx)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc.backward(grad_out)?;
        let (b, d) = g.dims2("classify_long backward")?;
        let g = self.conv.backward(&g.reshape(&[b, d, 1])?)?;
        let s = self.seq_len;
        let mut dx = vec![T::zero(); b * s * d];
        for bi in 0..b {
            for c in 0..d {
                dx[(bi * s) * d + c] = g.data()[(bi * d + c) * 2];
                dx[(bi * s + s - 1) * d + c] = g.data()[(bi * d + c) * 2 + 1];
            }
        }
        Tensor::from_vec(&[b, s, d], dx)
    }
}

/// Mean pool, then Linear-BN-ReLU twice and a final Linear.
#[derive(Debug, Clone)]
pub struct ShortClassifier<T> {
    pool: MeanPool,
    pub fc1: Linear<T>,
    pub bn1: BatchNorm1d<T>,
    relu1: Relu<T>,
    pub fc2: Linear<T>,
    pub bn2: BatchNorm1d<T>,
    relu2: Relu<T>,
    pub fc3: Linear<T>,
}

impl<T: Real> ShortClassifier<T> {
    pub fn new(dim: usize, hidden: (usize, usize), n_classes: usize, rng: &mut Rng) -> Self {
        ShortClassifier {
            pool: MeanPool::new(),
            fc1: Linear::new(dim, hidden.0, rng),
            bn1: BatchNorm1d::new(hidden.0),
            relu1: Relu::new(),
            fc2: Linear::new(hidden.0, hidden.1, rng),
            bn2: BatchNorm1d::new(hidden.1),
            relu2: Relu::new(),
            fc3: Linear::new(hidden.1, n_classes, rng),
        }
    }

    /// Token mean as applied by the first stage, `[B, S, D]` to `[B, D]`.
    pub fn pool(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        MeanPool::new().forward(x, ctx)
    }
}

impl<T: Real> Module<T> for ShortClassifier<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child("fc1", &mut self.fc1, f);
        visit_child("bn1", &mut self.bn1, f);
        visit_child("fc2", &mut self.fc2, f);
        visit_child("bn2", &mut self.bn2, f);
        visit_child("fc3", &mut self.fc3, f);
    }

    fn visit_buffers(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child_buffers("bn1", &mut self.bn1, f);
        visit_child_buffers("bn2", &mut self.bn2, f);
    }
}

impl<T: Real> Layer<T> for ShortClassifier<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let h = self.pool.forward(x, ctx)?;
        let h = self.fc1.forward(&h, ctx)?;
        let h = self.bn1.forward(&h, ctx)?;
        let h = self.relu1.forward(&h, ctx)?;
        let h = self.fc2.forward(&h, ctx)?;
        let h = self.bn2.forward(&h, ctx)?;
        let h = self.relu2.forward(&h, ctx)?;
        self.fc3.forward(&h, ctx)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc3.backward(grad_out)?;
        let g = self.relu2.backward(&g)?;
        let g = self.bn2.backward(&g)?;
        let g = self.fc2.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        let g = self.fc1.backward(&g)?;
        self.pool.backward(&g)
    }
}

#[derive(Debug, Clone)]
pub enum Classifier<T> {
    Long(LongClassifier<T>),
    Short(ShortClassifier<T>),
}

impl<T: Real> Classifier<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        match cfg.classifier {
            ClassifierVariant::Long => Classifier::Long(LongClassifier::new(cfg.embed_dim, cfg.n_classes, rng)),
            ClassifierVariant::Short => {
                Classifier::Short(ShortClassifier::new(cfg.embed_dim, cfg.short_hidden(), cfg.n_classes, rng))
            }
        }
    }

    pub fn variant(&self) -> ClassifierVariant {
        match self {
            Classifier::Long(_) => ClassifierVariant::Long,
            Classifier::Short(_) => ClassifierVariant::Short,
        }
    }

    fn inner(&mut self) -> &mut dyn Layer<T> {
        match self {
            Classifier::Long(c) => c,
            Classifier::Short(c) => c,
        }
    }
}

impl<T: Real> Module<T> for Classifier<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.inner().visit_params(f)
    }

    fn visit_buffers(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.inner().visit_buffers(f)
    }
}

impl<T: Real> Layer<T> for Classifier<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        self.inner().forward(x, ctx)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner().backward(grad_out)
    }
}

crate::single_input_primitive!(LongClassifier<T>, ShortClassifier<T>, Classifier<T>);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig, Mode};
    use crate::rng::seeded;

    fn zero(m: &mut dyn Module<f64>) {
        m.visit_params(&mut |_, p| p.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }

    #[test]
    fn long_output_extent_and_zero_weights() {
        let mut r = seeded(1);
        let mut c = LongClassifier::<f64>::new(6, 4, &mut r);
        let x = Tensor::randn(&[3, 7, 6], 1.0, &mut r);
        let y = c.forward(&x, &mut Ctx::new(Mode::Eval, &mut r)).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        zero(&mut c);
        let y = c.forward(&x, &mut Ctx::new(Mode::Eval, &mut r)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn long_hand_set_single_class() {
        let mut r = seeded(2);
        let mut c = LongClassifier::<f64>::new(2, 1, &mut r);
        // conv weight [out, in, tap]
        c.conv.weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 2.0, 0.0, -1.0, 0.5, 0.0]);
        c.conv.bias.data_mut().copy_from_slice(&[0.1, 0.0]);
        c.fc.weight.data_mut().copy_from_slice(&[3.0, -1.0]);
        c.fc.bias.data_mut().copy_from_slice(&[0.25]);
        // CLS = (1, 2), interior ignored, TAL = (3, 4)
        let x = Tensor::from_f64(&[1, 3, 2], &[1.0, 2.0, 100.0, -100.0, 3.0, 4.0]).unwrap();
        let y = c.forward(&x, &mut Ctx::new(Mode::Eval, &mut r)).unwrap();
        let h0 = 1.0 * 1.0 + 0.0 * 3.0 + 0.0 * 2.0 + 2.0 * 4.0 + 0.1;
        let h1 = 0.0 * 1.0 + -3.0 + 0.5 * 2.0 + 0.0 * 4.0;
        assert!((y.data()[0] - (3.0 * h0 - h1 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn short_output_extent_and_pool() {
        let mut r = seeded(3);
        let mut c = ShortClassifier::<f64>::new(8, (4, 3), 5, &mut r);
        let x = Tensor::randn(&[4, 6, 8], 1.0, &mut r);
        let y = c.forward(&x, &mut Ctx::new(Mode::Train, &mut r)).unwrap();
        assert_eq!(y.shape(), &[4, 5]);
        let constant = Tensor::from_vec(&[1, 5, 3], [0.5, -1.0, 2.0].repeat(5)).unwrap();
        let pooled = c.pool(&constant, &mut Ctx::new(Mode::Eval, &mut r)).unwrap();
        assert_eq!(pooled.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn gradients() {
        let mut r = seeded(4);
        let cfg = GradCheckConfig::default();
        let rep = grad_check(&mut LongClassifier::<f64>::new(4, 3, &mut r), &[&[2, 5, 4]], &cfg).unwrap();
        assert!(rep.passed(), "{rep:?}");
        let relu = GradCheckConfig { trials: 5, ..cfg };
        let rep = grad_check(&mut ShortClassifier::<f64>::new(6, (4, 3), 3, &mut r), &[&[5, 4, 6]], &relu).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
