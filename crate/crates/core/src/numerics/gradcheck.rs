//! Central finite-difference verification of hand-written backward passes.

use rand::seq::index::sample;
use rand::RngCore;

use super::{Ctx, Mode, Primitive, Tensor};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub step: f64,
    pub trials: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Coordinates probed per tensor per trial; larger tensors are subsampled.
    pub max_points: usize,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Inputs with magnitude below this are pushed away from zero, keeping
    /// probes off the kink of piecewise-linear primitives.
    pub kink_margin: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            tolerance: 1e-4,
            step: 1e-5,
            trials: 10,
            seed: 0x5eed,
            mode: Mode::Train,
            max_points: 48,
            floor: 1e-5,
            kink_margin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    /// Location of the worst coordinate, e.g. `input0[12]` or `param weight[3]`.
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn objective(
    prim: &mut dyn Primitive<f64>,
    inputs: &[Tensor<f64>],
    upstream: &Tensor<f64>,
    mode: Mode,
    fwd_seed: u64,
) -> Result<f64> {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let mut rng = seeded(fwd_seed);
    let y = prim.forward_multi(&refs, &mut Ctx::new(mode, &mut rng))?;
    Ok(y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
}

fn nudge(prim: &mut dyn Primitive<f64>, which: usize, idx: usize, delta: f64) {
    let mut k = 0;
    prim.visit_params(&mut |_, p| {
        if k == which {
            p.data_mut()[idx] += delta;
        }
        k += 1;
    });
}

fn probe_indices(n: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, max).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn dump(inputs: &[Tensor<f64>]) -> String {
    inputs.iter().map(|t| format!("{:?}: {:?}", t.shape(), t.data())).collect::<Vec<_>>().join("; ")
}

/// Compares analytic input and parameter gradients of `prim` against central
/// differences of `sum(upstream * forward(x))`, with inputs and upstream
/// weights drawn from N(0, 1).
pub fn grad_check(
    prim: &mut dyn Primitive<f64>,
    input_shapes: &[&[usize]],
    cfg: &GradCheckConfig,
) -> Result<GradReport> {
    let mut rng = seeded(cfg.seed);
    let mut report = GradReport { max_rel_error: 0.0, checked: 0, tolerance: cfg.tolerance, worst: String::new() };
    let h = cfg.step;
    let record = |report: &mut GradReport, analytic: f64, numeric: f64, loc: String| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = format!("{loc}: analytic {analytic:e}, numeric {numeric:e}");
        }
    };

    for trial in 0..cfg.trials {
        let mut inputs: Vec<Tensor<f64>> = input_shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        if let Some(margin) = cfg.kink_margin {
            for x in &mut inputs {
                for v in x.data_mut() {
                    if v.abs() < margin {
                        *v = if *v < 0.0 { -margin } else { margin } + *v;
                    }
                }
            }
        }
        let fwd_seed = rng.next_u64();

        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        prim.zero_grad();
        let y = prim.forward_multi(&refs, &mut Ctx::new(cfg.mode, &mut seeded(fwd_seed)))?;
        let upstream = Tensor::randn(y.shape(), 1.0, &mut rng);
        let input_grads = prim.backward_multi(&upstream)?;
        if input_grads.len() != inputs.len() {
            return Err(Error::shape("grad_check", "backward returned wrong number of gradients"));
        }
        if input_grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("input gradient in trial {trial}; operands {}", dump(&inputs))));
        }
        let mut param_grads: Vec<(String, Vec<f64>)> = Vec::new();
        prim.visit_params(&mut |name, p| {
            param_grads.push((name.to_string(), p.grad().map(<[f64]>::to_vec).unwrap_or_default()));
        });
        if param_grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("parameter gradient in trial {trial}; operands {}", dump(&inputs))));
        }

        for ti in 0..inputs.len() {
            for idx in probe_indices(inputs[ti].numel(), cfg.max_points, &mut rng) {
                let orig = inputs[ti].data()[idx];
                inputs[ti].data_mut()[idx] = orig + h;
                let fp = objective(prim, &inputs, &upstream, cfg.mode, fwd_seed)?;
                inputs[ti].data_mut()[idx] = orig - h;
                let fm = objective(prim, &inputs, &upstream, cfg.mode, fwd_seed)?;
                inputs[ti].data_mut()[idx] = orig;
                record(&mut report, input_grads[ti].data()[idx], (fp - fm) / (2.0 * h), format!("input{ti}[{idx}]"));
            }
        }

        for (pi, (name, grads)) in param_grads.iter().enumerate() {
            if grads.is_empty() {
                continue;
            }
            for idx in probe_indices(grads.len(), cfg.max_points, &mut rng) {
                nudge(prim, pi, idx, h);
                let fp = objective(prim, &inputs, &upstream, cfg.mode, fwd_seed);
                nudge(prim, pi, idx, -2.0 * h);
                let fm = objective(prim, &inputs, &upstream, cfg.mode, fwd_seed);
                nudge(prim, pi, idx, h);
                record(&mut report, grads[idx], (fp? - fm?) / (2.0 * h), format!("param {name}[{idx}]"));
            }
        }
    }
    Ok(report)
}
