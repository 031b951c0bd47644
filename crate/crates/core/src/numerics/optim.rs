use super::{Module, ParamVisitor, Real, Tensor};
use crate::error::{Error, Result};

/// SGD with L2 weight decay and (Nesterov) momentum.
///
/// Per step, for each parameter `p` with gradient `g`:
/// `g += wd * p; v = mu * v + g; p -= lr * (g + mu * v)` (Nesterov) or
/// `p -= lr * v` (classical).
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    velocity: Vec<Vec<T>>,
}

pub type OptimizerState<T> = Sgd<T>;

impl<T: Real> Sgd<T> {
    pub const WEIGHT_DECAY: f64 = 1e-3;
    pub const MOMENTUM: f64 = 0.9;

    /// Weight decay 1e-3, momentum 0.9, Nesterov.
    pub fn new(lr: f64) -> Self {
        Self::with(lr, Self::WEIGHT_DECAY, Self::MOMENTUM, true)
    }

    pub fn with(lr: f64, weight_decay: f64, momentum: f64, nesterov: bool) -> Self {
        Sgd { lr, weight_decay, momentum, nesterov, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update to every parameter of `module` that carries a
    /// gradient. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, module: &mut dyn Module<T>) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        let mut bad: Option<String> = None;
        module.visit_params(&mut |name, p| {
            if bad.is_none() && p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}; step aborted")));
        }

        let (lr, wd, mu) = (T::of(self.lr), T::of(self.weight_decay), T::of(self.momentum));
        let nesterov = self.nesterov;
        let velocity = &mut self.velocity;
        let mut index = 0usize;
        let mut mismatch: Option<String> = None;
        let mut update = |name: &str, p: &mut Tensor<T>| {
            let Some(grad) = p.grad().map(<[T]>::to_vec) else { return };
            if velocity.len() == index {
                velocity.push(vec![T::zero(); grad.len()]);
            }
            let v = &mut velocity[index];
            index += 1;
            if v.len() != grad.len() {
                mismatch.get_or_insert_with(|| format!("velocity for {name} has {} entries, parameter {}", v.len(), grad.len()));
                return;
            }
            for ((w, &g), vel) in p.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                let g = g + wd * *w;
                *vel = mu * *vel + g;
                *w -= lr * if nesterov { g + mu * *vel } else { *vel };
            }
        };
        module.visit_params(&mut update);
        match mismatch {
            Some(m) => Err(Error::shape("sgd", m)),
            None => Ok(()),
        }
    }
}

/// A bare list of tensors, named by position.
impl<T: Real> Module<T> for Vec<Tensor<T>> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        for (i, t) in self.iter_mut().enumerate() {
            f(&i.to_string(), t);
        }
    }
}
