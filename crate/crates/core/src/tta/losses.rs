use log::warn;

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Ctx, Module, ParamVisitor, Primitive, Tensor};

pub const LSR_EPSILON: f64 = 0.1;
pub const LSR_LOG_FLOOR: f64 = 1e-12;
pub const EN_EPSILON: f64 = 1e-6;

/// `B x C` row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch {
    data: Vec<f64>,
    batch: usize,
    classes: usize,
}

impl ProbBatch {
    pub fn new(data: Vec<f64>, batch: usize, classes: usize) -> Result<Self> {
        if batch == 0 || classes == 0 || data.len() != batch * classes {
            return Err(Error::Argument(format!("{} values for a {batch}x{classes} batch", data.len())));
        }
        for (j, row) in data.chunks_exact(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Argument(format!("row {j} is not a probability vector (sum {sum})")));
            }
        }
        Ok(ProbBatch { data, batch, classes })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Argument("ragged probability rows".into()));
        }
        ProbBatch::new(rows.concat(), rows.len(), classes)
    }

    /// Row-wise softmax of `B x C` logits.
    pub fn from_logits(logits: &[f64], classes: usize) -> Result<Self> {
        if classes == 0 || logits.is_empty() || !logits.len().is_multiple_of(classes) {
            return Err(Error::Argument(format!("{} logits do not split into rows of {classes}", logits.len())));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let mut data = logits.to_vec();
        softmax_rows(&mut data, classes);
        Ok(ProbBatch { batch: data.len() / classes, data, classes })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.classes)
    }

    /// Pulls a gradient with respect to the probabilities back to the logits.
    pub fn backprop(&self, dp: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut dz = vec![0.0; dp.len()];
        for ((p, g), out) in self.data.chunks_exact(c).zip(dp.chunks_exact(c)).zip(dz.chunks_exact_mut(c)) {
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for i in 0..c {
                out[i] = p[i] * (g[i] - dot);
            }
        }
        dz
    }
}

/// A loss value with its gradient, both scaled as in the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Argument(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!("label {bad} outside 0..{classes}")));
    }
    Ok(())
}

fn smoothed(label: usize, i: usize, classes: usize) -> f64 {
    let hot = if i == label { 1.0 } else { 0.0 };
    (1.0 - LSR_EPSILON) * hot + LSR_EPSILON / classes as f64
}

/// Label-smoothed cross-entropy with `log` clamped at `1e-12`.
pub fn lsr_loss(p: &ProbBatch, labels: &[usize]) -> Result<f64> {
    Ok(lsr_loss_grad(p, labels)?.value)
}

/// Gradient with respect to the probabilities.
pub fn lsr_loss_grad(p: &ProbBatch, labels: &[usize]) -> Result<LossGrad> {
    let (b, c) = (p.batch, p.classes);
    check_labels(labels, b, c)?;
    let mut clamped = 0;
    let mut value = 0.0;
    let mut grad = vec![0.0; b * c];
    for (j, row) in p.rows().enumerate() {
        for (i, &pij) in row.iter().enumerate() {
            let w = smoothed(labels[j], i, c);
            if pij < LSR_LOG_FLOOR {
                clamped += 1;
                value -= w * LSR_LOG_FLOOR.ln();
            } else {
                value -= w * pij.ln();
                grad[j * c + i] = -w / (pij * b as f64);
            }
        }
    }
    if clamped > 0 {
        warn!("lsr_loss: {clamped} probabilities below {LSR_LOG_FLOOR:e} clamped");
    }
    Ok(LossGrad { value: value / b as f64, grad })
}

/// Label-smoothed cross-entropy straight from logits, via log-softmax.
/// Agrees with [`lsr_loss_grad`] followed by [`ProbBatch::backprop`].
pub fn lsr_from_logits(logits: &[f64], classes: usize, labels: &[usize]) -> Result<LossGrad> {
    let p = ProbBatch::from_logits(logits, classes)?;
    let (b, c) = (p.batch, classes);
    check_labels(labels, b, c)?;
    let floor = LSR_LOG_FLOOR.ln();
    let mut value = 0.0;
    let mut grad = vec![0.0; b * c];
    for j in 0..b {
        let z = &logits[j * c..(j + 1) * c];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let mut live_weight = 0.0;
        for i in 0..c {
            let w = smoothed(labels[j], i, c);
            let logp = z[i] - lse;
            if logp < floor {
                value -= w * floor;
            } else {
                value -= w * logp;
                live_weight += w;
                grad[j * c + i] -= w;
            }
        }
        for i in 0..c {
            grad[j * c + i] = (grad[j * c + i] + p.data[j * c + i] * live_weight) / b as f64;
        }
    }
    Ok(LossGrad { value: value / b as f64, grad })
}

/// `-||P||_F / (B C)`.
pub fn nm_loss(p: &ProbBatch) -> f64 {
    nm_loss_grad(p).value
}

pub fn nm_loss_grad(p: &ProbBatch) -> LossGrad {
    let scale = (p.batch * p.classes) as f64;
    let norm = p.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let grad = p.data.iter().map(|&v| if norm > 0.0 { -v / (norm * scale) } else { 0.0 }).collect();
    LossGrad { value: -norm / scale, grad }
}

/// Mean Shannon entropy with `log(p + 1e-6)`.
pub fn en_loss(p: &ProbBatch) -> f64 {
    en_loss_grad(p).value
}

pub fn en_loss_grad(p: &ProbBatch) -> LossGrad {
    let b = p.batch as f64;
    let value = -p.data.iter().map(|&v| v * (v + EN_EPSILON).ln()).sum::<f64>() / b;
    let grad = p.data.iter().map(|&v| -((v + EN_EPSILON).ln() + v / (v + EN_EPSILON)) / b).collect();
    LossGrad { value, grad }
}

fn check_q(q: f64) -> Result<()> {
    if !q.is_finite() || q <= 0.0 || q == 1.0 {
        return Err(Error::Argument(format!("generalized entropy needs finite q > 0, q != 1 (got {q})")));
    }
    Ok(())
}

/// Mean Tsallis entropy `(1 - sum p^q) / (q - 1)`.
pub fn gen_loss(p: &ProbBatch, q: f64) -> Result<f64> {
    Ok(gen_loss_grad(p, q)?.value)
}

pub fn gen_loss_grad(p: &ProbBatch, q: f64) -> Result<LossGrad> {
    check_q(q)?;
    let b = p.batch as f64;
    let value = p.rows().map(|r| (1.0 - r.iter().map(|v| v.powf(q)).sum::<f64>()) / (q - 1.0)).sum::<f64>() / b;
    let grad = p
        .data
        .iter()
        .map(|&v| {
            let base = if q < 1.0 { v.max(f64::MIN_POSITIVE) } else { v };
            -q * base.powf(q - 1.0) / ((q - 1.0) * b)
        })
        .collect();
    Ok(LossGrad { value, grad })
}

/// Weights of the adaptation objective `alpha NM + beta EN + gamma GEN`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtdaWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub q: f64,
}

/// The adaptation objective and its gradient with respect to the probabilities.
/// Terms with zero weight are not evaluated.
pub fn ttda_loss_grad(p: &ProbBatch, w: &TtdaWeights) -> Result<LossGrad> {
    let mut total = LossGrad { value: 0.0, grad: vec![0.0; p.data.len()] };
    let mut add = |weight: f64, lg: LossGrad| {
        total.value += weight * lg.value;
        for (t, g) in total.grad.iter_mut().zip(lg.grad) {
            *t += weight * g;
        }
    };
    if w.alpha != 0.0 {
        add(w.alpha, nm_loss_grad(p));
    }
    if w.beta != 0.0 {
        add(w.beta, en_loss_grad(p));
    }
    if w.gamma != 0.0 {
        add(w.gamma, gen_loss_grad(p, w.q)?);
    }
    Ok(total)
}

pub fn ttda_loss(p: &ProbBatch, w: &TtdaWeights) -> Result<f64> {
    Ok(ttda_loss_grad(p, w)?.value)
}

/// Which objective a [`LossOp`] evaluates.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    Lsr(Vec<usize>),
    Nm,
    En,
    Gen(f64),
    Ttda(TtdaWeights),
}

impl LossKind {
    /// Value and logit gradient for `B x C` logits.
    pub fn eval_logits(&self, logits: &[f64], classes: usize) -> Result<LossGrad> {
        if let LossKind::Lsr(labels) = self {
            return lsr_from_logits(logits, classes, labels);
        }
        let p = ProbBatch::from_logits(logits, classes)?;
        let lg = match self {
            LossKind::Lsr(_) => unreachable!(),
            LossKind::Nm => nm_loss_grad(&p),
            LossKind::En => en_loss_grad(&p),
            LossKind::Gen(q) => gen_loss_grad(&p, *q)?,
            LossKind::Ttda(w) => ttda_loss_grad(&p, w)?,
        };
        Ok(LossGrad { value: lg.value, grad: p.backprop(&lg.grad) })
    }
}

/// A loss on `[B, C]` logits viewed as a one-output primitive, so the
/// finite-difference checker can drive it through the softmax.
#[derive(Debug, Clone)]
pub struct LossOp {
    pub kind: LossKind,
    grad: Vec<f64>,
    shape: Vec<usize>,
}

impl LossOp {
    pub fn new(kind: LossKind) -> Self {
        LossOp { kind, grad: Vec::new(), shape: Vec::new() }
    }
}

impl Module<f64> for LossOp {
    fn visit_params(&mut self, _f: &mut ParamVisitor<'_, f64>) {}
}

impl Primitive<f64> for LossOp {
    fn forward_multi(&mut self, inputs: &[&Tensor<f64>], _ctx: &mut Ctx<'_>) -> Result<Tensor<f64>> {
        let [x] = inputs else {
            return Err(Error::shape("loss", format!("expected 1 input, got {}", inputs.len())));
        };
        let (_, c) = x.dims2("loss")?;
        let lg = self.kind.eval_logits(x.data(), c)?;
        self.grad = lg.grad;
        self.shape = x.shape().to_vec();
        Tensor::from_vec(&[1], vec![lg.value])
    }

    fn backward_multi(&mut self, grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        grad_out.expect_shape("loss backward", &[1])?;
        let g = grad_out.data()[0];
        Ok(vec![Tensor::from_vec(&self.shape, self.grad.iter().map(|v| v * g).collect())?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn uniform(b: usize, c: usize) -> ProbBatch {
        ProbBatch::new(vec![1.0 / c as f64; b * c], b, c).unwrap()
    }

    fn one_hot(b: usize, c: usize) -> ProbBatch {
        let mut d = vec![0.0; b * c];
        for j in 0..b {
            d[j * c + j % c] = 1.0;
        }
        ProbBatch::new(d, b, c).unwrap()
    }

    #[test]
    fn rejects_invalid_rows() {
        assert!(ProbBatch::new(vec![0.5, 0.6], 1, 2).is_err());
        assert!(ProbBatch::new(vec![1.5, -0.5], 1, 2).is_err());
        assert!(ProbBatch::new(vec![0.5; 3], 1, 2).is_err());
    }

    #[test]
    fn lsr_uniform_two_classes() {
        assert!((lsr_loss(&uniform(1, 2), &[0]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lsr_is_minimal_at_the_smoothed_target() {
        let target = ProbBatch::new(vec![0.95, 0.05], 1, 2).unwrap();
        let at_target = lsr_loss(&target, &[0]).unwrap();
        let entropy = -(0.95f64 * 0.95f64.ln() + 0.05 * 0.05f64.ln());
        assert!((at_target - entropy).abs() < 1e-12);
        for k in 1..1000 {
            let p0 = k as f64 / 1000.0;
            let l = lsr_loss(&ProbBatch::new(vec![p0, 1.0 - p0], 1, 2).unwrap(), &[0]).unwrap();
            assert!(l >= at_target - 1e-12, "p0={p0}");
        }
    }

    #[test]
    fn lsr_batch_mean() {
        let row = ProbBatch::new(vec![0.7, 0.2, 0.1], 1, 3).unwrap();
        let two = ProbBatch::new(vec![0.7, 0.2, 0.1, 0.7, 0.2, 0.1], 2, 3).unwrap();
        let (a, b) = (lsr_loss(&row, &[1]).unwrap(), lsr_loss(&two, &[1, 1]).unwrap());
        assert!((a - b).abs() <= 1e-15 * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn lsr_clamps_zero_probabilities() {
        let p = ProbBatch::new(vec![1.0, 0.0], 1, 2).unwrap();
        let l = lsr_loss(&p, &[0]).unwrap();
        assert!(l.is_finite());
        assert!((l - (-0.05 * 1e-12f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn lsr_rejects_bad_labels() {
        assert!(lsr_loss(&uniform(2, 3), &[0]).is_err());
        assert!(lsr_loss(&uniform(1, 3), &[3]).is_err());
    }

    #[test]
    fn lsr_logit_path_matches_probability_path() {
        let mut r = seeded(1);
        let logits: Vec<f64> = (0..12).map(|_| r.random_range(-3.0..3.0)).collect();
        let p = ProbBatch::from_logits(&logits, 4).unwrap();
        let labels = [0, 3, 2];
        let direct = lsr_from_logits(&logits, 4, &labels).unwrap();
        let via = lsr_loss_grad(&p, &labels).unwrap();
        assert!((direct.value - via.value).abs() < 1e-12);
        for (a, b) in direct.grad.iter().zip(p.backprop(&via.grad)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nm_closed_forms() {
        assert!((nm_loss(&one_hot(4, 10)) + 0.05).abs() < 1e-12);
        let (b, c) = (6usize, 5usize);
        let expected = -((b as f64) / c as f64).sqrt() / (b * c) as f64;
        assert!((nm_loss(&uniform(b, c)) - expected).abs() < 1e-15);
    }

    #[test]
    fn nm_scales_with_inverse_root_batch() {
        let row = [0.6, 0.3, 0.1];
        let batch = |b: usize| ProbBatch::new(row.repeat(b), b, 3).unwrap();
        let ratio = nm_loss(&batch(3)) / nm_loss(&batch(12));
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn en_closed_forms() {
        assert!(en_loss(&one_hot(3, 5)).abs() <= 2e-6);
        assert!((en_loss(&uniform(2, 4)) - 4f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn en_uniform_is_maximal() {
        let mut r = seeded(2);
        let top = en_loss(&uniform(1, 3));
        for _ in 0..1000 {
            let w: Vec<f64> = (0..3).map(|_| -r.random::<f64>().max(1e-300).ln()).collect();
            let s: f64 = w.iter().sum();
            let p = ProbBatch::new(w.iter().map(|v| v / s).collect(), 1, 3).unwrap();
            assert!(en_loss(&p) <= top + 1e-12);
        }
    }

    #[test]
    fn gen_closed_forms() {
        assert_eq!(gen_loss(&one_hot(3, 4), 1.1).unwrap(), 0.0);
        assert_eq!(gen_loss(&one_hot(3, 4), 0.8).unwrap(), 0.0);
        let expected = (1.0 - 2f64.powf(-0.1)) / 0.1;
        assert!((gen_loss(&uniform(1, 2), 1.1).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(gen_loss(&uniform(1, 2), 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn gen_approaches_shannon_near_one() {
        let mut r = seeded(3);
        for _ in 0..50 {
            let w: Vec<f64> = (0..5).map(|_| r.random_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            let row: Vec<f64> = w.iter().map(|v| v / s).collect();
            let shannon = -row.iter().map(|v| v * v.ln()).sum::<f64>();
            let p = ProbBatch::new(row, 1, 5).unwrap();
            assert!((gen_loss(&p, 1.0001).unwrap() - shannon).abs() < 1e-3);
        }
    }

    #[test]
    fn ttda_weights_combine_terms() {
        let p = ProbBatch::new(vec![0.5, 0.3, 0.2, 0.1, 0.1, 0.8], 2, 3).unwrap();
        let w = TtdaWeights { alpha: 1.0, beta: 0.5, gamma: 0.5, q: 1.1 };
        let expected = nm_loss(&p) + 0.5 * en_loss(&p) + 0.5 * gen_loss(&p, 1.1).unwrap();
        assert!((ttda_loss(&p, &w).unwrap() - expected).abs() < 1e-15);
        let no_gen = TtdaWeights { gamma: 0.0, q: 1.0, ..w };
        assert!(ttda_loss(&p, &no_gen).is_ok());
    }

    #[test]
    fn loss_gradients_through_softmax() {
        let cfg = GradCheckConfig::default();
        let w = TtdaWeights { alpha: 1.0, beta: 0.5, gamma: 0.5, q: 1.1 };
        let kinds = [
            LossKind::Lsr(vec![0, 2, 1, 4]),
            LossKind::Nm,
            LossKind::En,
            LossKind::Gen(1.1),
            LossKind::Gen(0.8),
            LossKind::Ttda(w),
        ];
        for kind in kinds {
            let rep = grad_check(&mut LossOp::new(kind.clone()), &[&[4, 5]], &cfg).unwrap();
            assert!(rep.passed(), "{kind:?}: {rep:?}");
        }
    }

    proptest! {
        #[test]
        fn sign_bounds(rows in prop::collection::vec(prop::collection::vec(0.001f64..1.0, 4), 1..6)) {
            let norm: Vec<Vec<f64>> = rows.iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            }).collect();
            let p = ProbBatch::from_rows(&norm).unwrap();
            prop_assert!(nm_loss(&p) <= 0.0);
            prop_assert!(en_loss(&p) >= -4.0 * EN_EPSILON);
            prop_assert!(gen_loss(&p, 1.1).unwrap() >= 0.0);
        }
    }
}
