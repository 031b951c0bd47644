use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{LossGrad, LossKind, TtdaWeights};
use crate::audio::AudioClip;
use crate::augment::{make_view_set, ViewParams, ViewRecipe};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{lr_schedule, Ctx, Layer, Mode, Module, ParamVisitor, Real, ScheduleParams, Sgd, Tensor};
use crate::rng::{derive_seed, purpose, seeded, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Am,
    Sc1,
    Sc2,
    Vs,
    Cs,
    Synth,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "am" => Ok(Profile::Am),
            "sc1" => Ok(Profile::Sc1),
            "sc2" => Ok(Profile::Sc2),
            "vs" => Ok(Profile::Vs),
            "cs" => Ok(Profile::Cs),
            "synth" => Ok(Profile::Synth),
            other => Err(Error::Config(format!("unknown profile {other:?} (am, sc1, sc2, vs, cs, synth)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    #[default]
    All,
    /// Only batch-norm and layer-norm scales and shifts.
    NormOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TTDAConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub q: f64,
    pub lr: f64,
    pub lambda: f64,
    pub eta: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub update_scope: UpdateScope,
}

impl Default for TTDAConfig {
    fn default() -> Self {
        TTDAConfig::profile(Profile::Synth)
    }
}

impl TTDAConfig {
    pub fn profile(p: Profile) -> Self {
        let (alpha, beta, gamma, q, eta, epochs) = match p {
            Profile::Am => (1.0, 0.5, 0.5, 1.1, 40, 50),
            Profile::Sc1 => (0.2, 1.0, 0.0, 0.8, 50, 50),
            Profile::Sc2 => (0.0, 1.0, 0.2, 1.1, 50, 80),
            Profile::Vs => (1.0, 0.5, 0.5, 1.1, 80, 50),
            Profile::Cs => (1.0, 0.5, 0.5, 1.1, 40, 50),
            Profile::Synth => (1.0, 0.5, 0.5, 1.1, 40, 10),
        };
        TTDAConfig {
            alpha,
            beta,
            gamma,
            q,
            lr: 1e-3,
            lambda: 10.0,
            eta,
            epochs,
            batch_size: 32,
            update_scope: UpdateScope::All,
        }
    }

    pub fn weights(&self) -> TtdaWeights {
        TtdaWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma, q: self.q }
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams { lr0: self.lr, lambda: self.lambda, eta: self.eta }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!("loss weights {w:?} must be >= 0 and not all zero")));
        }
        if self.q == 1.0 || !(self.q > 0.0) || !self.q.is_finite() {
            return Err(Error::Config(format!("q = {} must be positive and != 1", self.q)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        self.schedule().validate()
    }
}

/// Restricts optimizer updates to normalization parameters.
struct NormOnly<'a, M: ?Sized>(&'a mut M);

impl<T: Real, M: Module<T> + ?Sized> Module<T> for NormOnly<'_, M> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.0.visit_params(&mut |name, p| {
            if name.ends_with(".gamma") || name.ends_with(".beta") {
                f(name, p)
            }
        });
    }
}

/// Forwards each view batch in train mode, evaluates `loss` on its logits and
/// backpropagates, accumulating parameter gradients across views. View `k`
/// draws dropout from a stream derived from `(dropout_seed, k)`, so running a
/// view alone reproduces its gradient exactly. Views whose loss is not finite
/// are not backpropagated; their loss is still reported.
pub fn accumulate_views<T: Real>(
    model: &mut Model<T>,
    views: &[Vec<AudioClip>],
    dropout_seed: u64,
    loss: &mut dyn FnMut(&[f64], usize) -> Result<LossGrad>,
) -> Result<Vec<f64>> {
    let c = model.n_classes();
    let mut losses = Vec::with_capacity(views.len());
    for (k, batch) in views.iter().enumerate() {
        let mut rng = seeded(derive_seed(dropout_seed, &[k as u64]));
        let logits = model.forward_clips(batch, &mut Ctx::new(Mode::Train, &mut rng))?;
        let z: Vec<f64> = logits.data().iter().map(|v| v.f64()).collect();
        let lg = match loss(&z, c) {
            Ok(lg) => lg,
            Err(Error::NonFinite(what)) => {
                warn!("view {k}: non-finite {what}");
                losses.push(f64::NAN);
                continue;
            }
            Err(e) => return Err(e),
        };
        losses.push(lg.value);
        if lg.value.is_finite() {
            let g = Tensor::from_vec(logits.shape(), lg.grad.iter().map(|&v| T::of(v)).collect())?;
            model.backward(&g)?;
        }
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Sum of the view losses in view order.
    pub loss: f64,
    pub view_losses: Vec<f64>,
    /// False when a view loss was not finite and the step was skipped.
    pub applied: bool,
}

fn sum_in_order(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc + x)
}

/// One update on the summed label-smoothed loss of all views: gradients of
/// every view accumulate before a single optimizer step.
pub fn multiview_step<T: Real>(
    model: &mut Model<T>,
    views: &[Vec<AudioClip>],
    labels: &[usize],
    opt: &mut Sgd<T>,
    dropout_seed: u64,
) -> Result<StepReport> {
    model.zero_grad();
    let kind = LossKind::Lsr(labels.to_vec());
    let view_losses = accumulate_views(model, views, dropout_seed, &mut |z, c| kind.eval_logits(z, c))?;
    let loss = sum_in_order(&view_losses);
    if !loss.is_finite() {
        model.zero_grad();
        return Ok(StepReport { loss, view_losses, applied: false });
    }
    opt.step(model)?;
    Ok(StepReport { loss, view_losses, applied: true })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TtdaReport {
    /// Objective of every batch, in processing order.
    pub batch_losses: Vec<f64>,
    /// Objective over the whole test set on fixed views, before the first
    /// epoch and after each completed epoch.
    pub epoch_objective: Vec<f64>,
    /// Set when adaptation stopped early.
    pub stopped: Option<String>,
}

fn ttda_views(clips: &[AudioClip], idx: &[usize], params: &ViewParams, seed: u64, epoch: u64) -> Result<Vec<Vec<AudioClip>>> {
    let mut views = vec![Vec::with_capacity(idx.len()); ViewRecipe::Ttda2.n_views()];
    for &i in idx {
        let mut rng = stream(seed, purpose::VIEWS, i as u64, epoch);
        let set = make_view_set(&clips[i], ViewRecipe::Ttda2, params, &mut rng, &[])?;
        for (k, v) in set.views.into_iter().enumerate() {
            views[k].push(v);
        }
    }
    Ok(views)
}

/// Adaptation objective summed over both views and averaged over batches, on views fixed
/// across calls. Batch-norm running statistics are left untouched.
pub fn ttda_objective<T: Real>(
    model: &mut Model<T>,
    clips: &[AudioClip],
    cfg: &TTDAConfig,
    params: &ViewParams,
    seed: u64,
) -> Result<f64> {
    let mut saved = Vec::new();
    model.visit_buffers(&mut |_, b| saved.push(b.data().to_vec()));
    let kind = LossKind::Ttda(cfg.weights());
    let order: Vec<usize> = (0..clips.len()).collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
        let views = ttda_views(clips, idx, params, seed, u64::MAX)?;
        let dropout = derive_seed(seed, &[purpose::DROPOUT, u64::MAX, bi as u64]);
        let losses = accumulate_views(model, &views, dropout, &mut |z, c| kind.eval_logits(z, c))?;
        total += sum_in_order(&losses);
        n += 1;
    }
    model.zero_grad();
    let mut it = saved.into_iter();
    model.visit_buffers(&mut |_, b| b.data_mut().copy_from_slice(&it.next().expect("same buffers")));
    Ok(total / n.max(1) as f64)
}

/// Unsupervised adaptation on unlabeled clips. Each batch gets one right and
/// one left random shift per clip; the summed objective drives one step.
pub fn ttda_adapt<T: Real>(
    model: &mut Model<T>,
    clips: &[AudioClip],
    cfg: &TTDAConfig,
    params: &ViewParams,
    seed: u64,
) -> Result<TtdaReport> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::DegenerateInput("no clips to adapt on".into()));
    }
    let mut opt = Sgd::new(cfg.lr);
    let kind = LossKind::Ttda(cfg.weights());
    let mut report = TtdaReport::default();
    if cfg.epochs > 0 {
        report.epoch_objective.push(ttda_objective(model, clips, cfg, params, seed)?);
    }
    let mut initial: Option<f64> = None;
    'epochs: for epoch in 0..cfg.epochs {
        opt.lr = lr_schedule(&cfg.schedule(), epoch);
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut stream(seed, purpose::SHUFFLE, 0, epoch as u64));
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let views = ttda_views(clips, idx, params, seed, epoch as u64)?;
            let dropout = derive_seed(seed, &[purpose::DROPOUT, epoch as u64, bi as u64]);
            model.zero_grad();
            let losses = accumulate_views(model, &views, dropout, &mut |z, c| kind.eval_logits(z, c))?;
            let loss = sum_in_order(&losses);
            report.batch_losses.push(loss);
            let init = *initial.get_or_insert(loss);
            if !loss.is_finite() || loss > 10.0 * init.abs().max(1e-3) {
                let msg = format!("epoch {epoch} batch {bi}: objective {loss} against initial {init}");
                warn!("adaptation stopped: {msg}");
                report.stopped = Some(msg);
                break 'epochs;
            }
            match cfg.update_scope {
                UpdateScope::All => opt.step(model)?,
                UpdateScope::NormOnly => opt.step(&mut NormOnly(model))?,
            }
        }
        let obj = ttda_objective(model, clips, cfg, params, seed)?;
        debug!("ttda epoch {epoch}: objective {obj}");
        report.epoch_objective.push(obj);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::MelParams;
    use crate::model::{plan_cnn, ModelConfig};

    fn model() -> Model<f64> {
        let mel = MelParams { n_mels: 8, ..Default::default() };
        let mut cfg = ModelConfig::for_input(mel, 8000, 1.0, 3, 4, 8).unwrap();
        cfg.cnn = plan_cnn(48, 4, 8).unwrap().with_widths(6, 3, 1);
        cfg.n_transformer_blocks = 2;
        cfg.n_heads = 2;
        cfg.mlp_ratio = 2;
        Model::new(cfg, 3).unwrap()
    }

    fn clip(freq: f32, n: usize) -> AudioClip {
        AudioClip::mono((0..n).map(|i| (i as f32 * freq).sin() * 0.3).collect(), 8000).unwrap()
    }

    fn batch(k: usize) -> Vec<AudioClip> {
        (0..4).map(|i| clip(0.02 + 0.01 * (i + k) as f32, 4000)).collect()
    }

    fn grads(m: &mut Model<f64>) -> Vec<f64> {
        let mut g = Vec::new();
        m.visit_params(&mut |_, p| g.extend_from_slice(p.grad().unwrap()));
        g
    }

    #[test]
    fn profiles_match_published_settings() {
        let sc1 = TTDAConfig::profile(Profile::Sc1);
        assert_eq!((sc1.alpha, sc1.beta, sc1.gamma, sc1.q), (0.2, 1.0, 0.0, 0.8));
        assert_eq!((sc1.lr, sc1.lambda, sc1.eta), (1e-3, 10.0, 50));
        let am = TTDAConfig::profile(Profile::Am);
        assert_eq!((am.alpha, am.beta, am.gamma, am.q, am.eta), (1.0, 0.5, 0.5, 1.1, 40));
        for p in [Profile::Am, Profile::Sc1, Profile::Sc2, Profile::Vs, Profile::Cs, Profile::Synth] {
            TTDAConfig::profile(p).validate().unwrap();
        }
        let zero = TTDAConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, ..Default::default() };
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
        assert_eq!("sc2".parse::<Profile>().unwrap(), Profile::Sc2);
    }

    #[test]
    fn identity_views_give_four_times_one_view() {
        let mut m = model();
        let labels = [0, 1, 2, 0];
        let one = vec![batch(0)];
        let four = vec![batch(0); 4];
        let kind = LossKind::Lsr(labels.to_vec());
        // Same dropout stream for every view.
        let eval = |views: &[Vec<AudioClip>], m: &mut Model<f64>| {
            views
                .iter()
                .map(|v| {
                    let logits = m.forward_clips(v, &mut Ctx::new(Mode::Train, &mut seeded(5))).unwrap();
                    kind.eval_logits(logits.data(), 3).unwrap().value
                })
                .collect::<Vec<_>>()
        };
        let single = eval(&one, &mut m)[0];
        assert_eq!(sum_in_order(&eval(&four, &mut m)), 4.0 * single);
    }

    #[test]
    fn gradient_is_sum_of_view_gradients() {
        let mut m = model();
        let views: Vec<Vec<AudioClip>> = (0..3).map(batch).collect();
        let labels = [2, 1, 0, 1];
        let kind = LossKind::Lsr(labels.to_vec());
        m.zero_grad();
        let joint = accumulate_views(&mut m, &views, 9, &mut |z, c| kind.eval_logits(z, c)).unwrap();
        let joint_grad = grads(&mut m);

        let mut summed = vec![0.0; joint_grad.len()];
        let mut separate = Vec::new();
        for (k, v) in views.iter().enumerate() {
            m.zero_grad();
            let mut rng = seeded(derive_seed(9, &[k as u64]));
            let logits = m.forward_clips(v, &mut Ctx::new(Mode::Train, &mut rng)).unwrap();
            let lg = kind.eval_logits(logits.data(), 3).unwrap();
            separate.push(lg.value);
            m.backward(&Tensor::from_vec(logits.shape(), lg.grad).unwrap()).unwrap();
            for (s, g) in summed.iter_mut().zip(grads(&mut m)) {
                *s += g;
            }
        }
        assert_eq!(joint, separate);
        assert_eq!(joint_grad, summed);
    }

    #[test]
    fn single_view_step_is_plain_training() {
        let mut a = model();
        let mut b = model();
        let views = vec![batch(1)];
        let labels = [0, 1, 2, 0];
        let mut oa = Sgd::new(1e-2);
        let rep = multiview_step(&mut a, &views, &labels, &mut oa, 4).unwrap();
        assert!(rep.applied);
        assert_eq!(rep.view_losses.len(), 1);

        b.zero_grad();
        let mut rng = seeded(derive_seed(4, &[0]));
        let logits = b.forward_clips(&views[0], &mut Ctx::new(Mode::Train, &mut rng)).unwrap();
        let lg = LossKind::Lsr(labels.to_vec()).eval_logits(logits.data(), 3).unwrap();
        b.backward(&Tensor::from_vec(logits.shape(), lg.grad).unwrap()).unwrap();
        Sgd::new(1e-2).step(&mut b).unwrap();
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        a.visit_params(&mut |_, p| pa.extend_from_slice(p.data()));
        b.visit_params(&mut |_, p| pb.extend_from_slice(p.data()));
        assert_eq!(pa, pb);
        assert_eq!(rep.loss, lg.value);
    }

    #[test]
    fn non_finite_view_skips_the_step() {
        let mut m = model();
        let mut before = Vec::new();
        m.visit_params(&mut |_, p| before.extend_from_slice(p.data()));
        let mut opt = Sgd::new(1e-2);
        let views = vec![batch(0), batch(1)];
        m.zero_grad();
        let mut calls = 0;
        let losses = accumulate_views(&mut m, &views, 1, &mut |z, c| {
            calls += 1;
            if calls == 2 {
                Err(Error::NonFinite("logits".into()))
            } else {
                LossKind::Nm.eval_logits(z, c)
            }
        })
        .unwrap();
        assert!(losses[1].is_nan());
        let rep = multiview_step(&mut m, &[batch(0)], &[0, 0, 0, 9], &mut opt, 1);
        assert!(rep.is_err());
        let mut after = Vec::new();
        m.visit_params(&mut |_, p| after.extend_from_slice(p.data()));
        assert_eq!(before, after);
    }

    #[test]
    fn adaptation_trace_shape_and_label_free() {
        let mut m = model();
        let clips: Vec<AudioClip> = (0..6).flat_map(|k| batch(k).into_iter().take(1)).collect();
        let cfg = TTDAConfig { epochs: 2, batch_size: 4, ..Default::default() };
        let rep = ttda_adapt(&mut m, &clips, &cfg, &ViewParams::default(), 11).unwrap();
        assert_eq!(rep.batch_losses.len(), 2 * 2);
        assert_eq!(rep.epoch_objective.len(), 3);
        assert!(rep.stopped.is_none());
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let mut m = model();
        let mut before = Vec::new();
        m.visit_params(&mut |_, p| before.extend_from_slice(p.data()));
        m.visit_buffers(&mut |_, p| before.extend_from_slice(p.data()));
        let cfg = TTDAConfig { epochs: 0, ..Default::default() };
        let rep = ttda_adapt(&mut m, &batch(0), &cfg, &ViewParams::default(), 1).unwrap();
        assert!(rep.batch_losses.is_empty());
        let mut after = Vec::new();
        m.visit_params(&mut |_, p| after.extend_from_slice(p.data()));
        m.visit_buffers(&mut |_, p| after.extend_from_slice(p.data()));
        assert_eq!(before, after);
    }

    #[test]
    fn objective_measurement_keeps_running_statistics() {
        let mut m = model();
        let mut before = Vec::new();
        m.visit_buffers(&mut |_, p| before.extend_from_slice(p.data()));
        let cfg = TTDAConfig::default();
        let a = ttda_objective(&mut m, &batch(0), &cfg, &ViewParams::default(), 2).unwrap();
        let b = ttda_objective(&mut m, &batch(0), &cfg, &ViewParams::default(), 2).unwrap();
        assert_eq!(a, b);
        let mut after = Vec::new();
        m.visit_buffers(&mut |_, p| after.extend_from_slice(p.data()));
        assert_eq!(before, after);
    }

    #[test]
    fn norm_only_moves_only_norm_parameters() {
        let mut m = model();
        let mut before = Vec::new();
        m.visit_params(&mut |n, p| before.push((n.to_string(), p.data().to_vec())));
        let cfg = TTDAConfig { epochs: 1, batch_size: 4, update_scope: UpdateScope::NormOnly, lr: 0.05, ..Default::default() };
        ttda_adapt(&mut m, &batch(2), &cfg, &ViewParams::default(), 3).unwrap();
        let mut moved_norm = false;
        let mut i = 0;
        m.visit_params(&mut |n, p| {
            let norm = n.ends_with(".gamma") || n.ends_with(".beta");
            if norm {
                moved_norm |= p.data() != before[i].1.as_slice();
            } else {
                assert_eq!(p.data(), before[i].1.as_slice(), "{n}");
            }
            i += 1;
        });
        assert!(moved_norm);
    }
}
