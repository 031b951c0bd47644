use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial learning-rate annealing, frozen after `eta` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub lr0: f64,
    /// Rate of change.
    pub lambda: f64,
    /// Number of epochs over which the rate anneals.
    pub eta: usize,
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(10.0..=40.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [10, 40]", self.lambda)));
        }
        if !(40..=200).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [40, 200]", self.eta)));
        }
        Ok(())
    }
}

/// `lr0 / (1 + lambda * e / eta)^0.75` for `e < eta`; held at the `eta - 1`
/// value afterwards.
pub fn lr_schedule(p: &ScheduleParams, epoch: usize) -> f64 {
    let e = epoch.min(p.eta.saturating_sub(1)) as f64;
    p.lr0 / (1.0 + p.lambda * e / p.eta as f64).powf(0.75)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_at_lr0() {
        let p = ScheduleParams { lr0: 0.02, lambda: 25.0, eta: 100 };
        assert_eq!(lr_schedule(&p, 0), 0.02);
    }

    #[test]
    fn freezes_at_eta() {
        let p = ScheduleParams { lr0: 1e-3, lambda: 10.0, eta: 40 };
        let frozen = 1e-3 / (1.0f64 + 10.0 * 39.0 / 40.0).powf(0.75);
        assert_eq!(lr_schedule(&p, 39), frozen);
        assert_eq!(lr_schedule(&p, 40), frozen);
        assert_eq!(lr_schedule(&p, 1000), frozen);
    }

    #[test]
    fn strictly_decreasing_before_eta() {
        let p = ScheduleParams { lr0: 1e-3, lambda: 10.0, eta: 50 };
        for e in 1..50 {
            assert!(lr_schedule(&p, e) < lr_schedule(&p, e - 1));
        }
    }

    #[test]
    fn validates_ranges() {
        assert!(ScheduleParams { lr0: 1e-3, lambda: 10.0, eta: 40 }.validate().is_ok());
        assert!(ScheduleParams { lr0: 1e-3, lambda: 9.0, eta: 40 }.validate().is_err());
        assert!(ScheduleParams { lr0: 1e-3, lambda: 10.0, eta: 201 }.validate().is_err());
        assert!(ScheduleParams { lr0: 0.0, lambda: 10.0, eta: 40 }.validate().is_err());
    }
}
