use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::augment::{time_shift, Direction, MAX_SHIFT_FRAC};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Real;

/// Anything that maps clips to class probabilities without changing itself
/// observably.
pub trait Predictor {
    fn n_classes(&self) -> usize;
    fn predict_proba(&mut self, clips: &[AudioClip]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Real> Predictor for Model<T> {
    fn n_classes(&self) -> usize {
        Model::n_classes(self)
    }

    fn predict_proba(&mut self, clips: &[AudioClip]) -> Result<Vec<Vec<f64>>> {
        Model::predict_proba(self, clips)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMethod {
    #[default]
    None,
    Aug,
    Mlt,
    Hyb,
}

impl std::str::FromStr for RefineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RefineMethod::None),
            "aug" => Ok(RefineMethod::Aug),
            "mlt" => Ok(RefineMethod::Mlt),
            "hyb" => Ok(RefineMethod::Hyb),
            other => Err(Error::Config(format!("unknown refinement {other:?} (none, aug, mlt, hyb)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementSpec {
    pub method: RefineMethod,
    /// Augmented views per clip; even.
    pub a: usize,
    /// Ensemble members; odd.
    pub m: usize,
    pub checkpoint_paths: Vec<PathBuf>,
}

impl Default for RefinementSpec {
    fn default() -> Self {
        RefinementSpec { method: RefineMethod::None, a: 2, m: 3, checkpoint_paths: Vec::new() }
    }
}

impl RefinementSpec {
    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || !self.a.is_multiple_of(2) {
            return Err(Error::Config(format!("refinement view count A={} must be even and positive", self.a)));
        }
        if self.m.is_multiple_of(2) {
            return Err(Error::Config(format!("ensemble size M={} must be odd", self.m)));
        }
        if matches!(self.method, RefineMethod::Mlt | RefineMethod::Hyb) && self.checkpoint_paths.len() < self.m {
            return Err(Error::Config(format!(
                "{:?} refinement needs {} checkpoints, got {}",
                self.method,
                self.m,
                self.checkpoint_paths.len()
            )));
        }
        Ok(())
    }
}

/// `A / 2` left and `A / 2` right shifts with magnitudes spread evenly up to
/// the maximum shift; `A = 2` gives exactly one shift of the maximum each way.
pub fn refinement_shifts(a: usize) -> Result<Vec<(f64, Direction)>> {
    if a == 0 || !a.is_multiple_of(2) {
        return Err(Error::Argument(format!("A={a} must be even and positive")));
    }
    let half = a / 2;
    Ok((1..=half)
        .flat_map(|i| {
            let frac = MAX_SHIFT_FRAC * i as f64 / half as f64;
            [(frac, Direction::Left), (frac, Direction::Right)]
        })
        .collect())
}

fn check_rows(rows: &[Vec<f64>], n: usize, classes: usize) -> Result<()> {
    if rows.len() != n || rows.iter().any(|r| r.len() != classes) {
        return Err(Error::Ensemble(format!("predictor returned {} rows for {n} clips", rows.len())));
    }
    Ok(())
}

fn mean_into(acc: &mut [Vec<f64>], rows: &[Vec<f64>]) {
    for (a, r) in acc.iter_mut().zip(rows) {
        for (x, y) in a.iter_mut().zip(r) {
            *x += y;
        }
    }
}

fn divide(acc: &mut [Vec<f64>], n: usize) {
    for a in acc {
        for x in a.iter_mut() {
            *x /= n as f64;
        }
    }
}

/// Mean over the original clip and one view per `(fraction, direction)`.
pub fn aug_refine_with<P: Predictor + ?Sized>(
    model: &mut P,
    clips: &[AudioClip],
    shifts: &[(f64, Direction)],
) -> Result<Vec<Vec<f64>>> {
    let c = model.n_classes();
    let mut acc = model.predict_proba(clips)?;
    check_rows(&acc, clips.len(), c)?;
    for &(frac, dir) in shifts {
        let views = clips.iter().map(|x| time_shift(x, frac, dir)).collect::<Result<Vec<_>>>()?;
        let rows = model.predict_proba(&views)?;
        check_rows(&rows, clips.len(), c)?;
        mean_into(&mut acc, &rows);
    }
    divide(&mut acc, shifts.len() + 1);
    Ok(acc)
}

pub fn aug_refine<P: Predictor + ?Sized>(model: &mut P, clips: &[AudioClip], a: usize) -> Result<Vec<Vec<f64>>> {
    aug_refine_with(model, clips, &refinement_shifts(a)?)
}

fn check_members<P: Predictor>(members: &[P]) -> Result<usize> {
    let first = members.first().ok_or_else(|| Error::Ensemble("no ensemble members".into()))?;
    if members.len().is_multiple_of(2) {
        return Err(Error::Ensemble(format!("ensemble size {} must be odd", members.len())));
    }
    let c = first.n_classes();
    if let Some(bad) = members.iter().position(|m| m.n_classes() != c) {
        return Err(Error::Ensemble(format!(
            "member {bad} has {} classes, member 0 has {c}",
            members[bad].n_classes()
        )));
    }
    Ok(c)
}

fn ensemble<P: Predictor>(
    members: &mut [P],
    clips: &[AudioClip],
    mut each: impl FnMut(&mut P) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<Vec<f64>>> {
    let c = check_members(members)?;
    let mut acc = vec![vec![0.0; c]; clips.len()];
    for m in members.iter_mut() {
        let rows = each(m)?;
        check_rows(&rows, clips.len(), c)?;
        mean_into(&mut acc, &rows);
    }
    divide(&mut acc, members.len());
    Ok(acc)
}

/// Mean over independently trained members.
pub fn mlt_refine<P: Predictor>(members: &mut [P], clips: &[AudioClip]) -> Result<Vec<Vec<f64>>> {
    ensemble(members, clips, |m| m.predict_proba(clips))
}

/// Mean over members of each member's augmentation refinement.
pub fn hyb_refine<P: Predictor>(members: &mut [P], clips: &[AudioClip], a: usize) -> Result<Vec<Vec<f64>>> {
    let shifts = refinement_shifts(a)?;
    hyb_refine_with(members, clips, &shifts)
}

pub fn hyb_refine_with<P: Predictor>(
    members: &mut [P],
    clips: &[AudioClip],
    shifts: &[(f64, Direction)],
) -> Result<Vec<Vec<f64>>> {
    ensemble(members, clips, |m| aug_refine_with(m, clips, shifts))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns a fixed row per call, cycling through `outputs`.
    struct Stub {
        outputs: Vec<Vec<f64>>,
        calls: usize,
    }

    impl Predictor for Stub {
        fn n_classes(&self) -> usize {
            self.outputs[0].len()
        }

        fn predict_proba(&mut self, clips: &[AudioClip]) -> Result<Vec<Vec<f64>>> {
            let row = self.outputs[self.calls % self.outputs.len()].clone();
            self.calls += 1;
            Ok(vec![row; clips.len()])
        }
    }

    fn stub(outputs: &[&[f64]]) -> Stub {
        Stub { outputs: outputs.iter().map(|o| o.to_vec()).collect(), calls: 0 }
    }

    fn clips() -> Vec<AudioClip> {
        vec![AudioClip::mono(vec![0.1; 1000], 8000).unwrap(); 2]
    }

    #[test]
    fn shift_menu() {
        assert_eq!(refinement_shifts(2).unwrap(), vec![(0.17, Direction::Left), (0.17, Direction::Right)]);
        assert_eq!(refinement_shifts(4).unwrap().len(), 4);
        assert!(refinement_shifts(3).is_err());
    }

    #[test]
    fn aug_averages_three_outputs() {
        let mut s = stub(&[&[0.6, 0.3, 0.1], &[0.2, 0.2, 0.6], &[0.1, 0.8, 0.1]]);
        let out = aug_refine(&mut s, &clips(), 2).unwrap();
        let expected = [0.9 / 3.0, 1.3 / 3.0, 0.8 / 3.0];
        for (a, b) in out[0].iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_model_is_a_fixed_point() {
        let mut s = stub(&[&[0.25, 0.75]]);
        let out = aug_refine(&mut s, &clips(), 4).unwrap();
        assert!(out.iter().all(|r| (r[0] - 0.25).abs() < 1e-15 && (r[1] - 0.75).abs() < 1e-15));
    }

    #[test]
    fn mlt_of_one_hots_is_uniform() {
        let mut members = vec![stub(&[&[1.0, 0.0, 0.0]]), stub(&[&[0.0, 1.0, 0.0]]), stub(&[&[0.0, 0.0, 1.0]])];
        let out = mlt_refine(&mut members, &clips()).unwrap();
        for r in out {
            assert!(r.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn mean_argmax_differs_only_without_majority() {
        // Each member outputs a one-hot; enumerate every 3-member vote.
        let hot = |k: usize| -> Vec<f64> { (0..3).map(|i| if i == k { 1.0 } else { 0.0 }).collect() };
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let votes = [a, b, c];
                    let mut members: Vec<Stub> =
                        votes.iter().map(|&k| Stub { outputs: vec![hot(k)], calls: 0 }).collect();
                    let mean = &mlt_refine(&mut members, &clips()[..1]).unwrap()[0];
                    let winner = crate::model::argmax(mean);
                    let majority = (0..3).find(|&k| votes.iter().filter(|&&v| v == k).count() >= 2);
                    match majority {
                        Some(k) => assert_eq!(winner, k, "{votes:?}"),
                        None => assert!(votes.contains(&winner)),
                    }
                }
            }
        }
    }

    #[test]
    fn hyb_grand_mean() {
        let grid: [[&[f64]; 3]; 3] = [
            [&[0.5, 0.5], &[0.9, 0.1], &[0.1, 0.9]],
            [&[0.2, 0.8], &[0.3, 0.7], &[0.4, 0.6]],
            [&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.4]],
        ];
        let mut members: Vec<Stub> = grid.iter().map(|row| stub(row)).collect();
        let out = hyb_refine(&mut members, &clips(), 2).unwrap();
        let grand: f64 = grid.iter().flatten().map(|r| r[0]).sum::<f64>() / 9.0;
        assert!((out[0][0] - grand).abs() < 1e-12);
        assert!((out[0][0] + out[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hyb_of_one_member_is_aug() {
        let rows: [&[f64]; 3] = [&[0.6, 0.4], &[0.3, 0.7], &[0.55, 0.45]];
        let a = aug_refine(&mut stub(&rows), &clips(), 2).unwrap();
        let h = hyb_refine(&mut [stub(&rows)], &clips(), 2).unwrap();
        assert_eq!(a, h);
    }

    #[test]
    fn identity_shifts_collapse_hyb_to_mlt() {
        let mut members = vec![stub(&[&[0.6, 0.4]]), stub(&[&[0.1, 0.9]]), stub(&[&[0.3, 0.7]])];
        let identity = [(0.0, Direction::Left), (0.0, Direction::Right)];
        let h = hyb_refine_with(&mut members, &clips(), &identity).unwrap();
        let m = mlt_refine(&mut members, &clips()).unwrap();
        for (x, y) in h.iter().flatten().zip(m.iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ensemble_errors() {
        let mut even = vec![stub(&[&[0.5, 0.5]]), stub(&[&[0.5, 0.5]])];
        assert!(matches!(mlt_refine(&mut even, &clips()), Err(Error::Ensemble(_))));
        let mut mixed = vec![stub(&[&[0.5, 0.5]]), stub(&[&[0.2, 0.3, 0.5]]), stub(&[&[0.5, 0.5]])];
        assert!(matches!(mlt_refine(&mut mixed, &clips()), Err(Error::Ensemble(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(RefinementSpec::default().validate().is_ok());
        assert!(RefinementSpec { a: 3, ..Default::default() }.validate().is_err());
        assert!(RefinementSpec { m: 2, ..Default::default() }.validate().is_err());
        assert!(RefinementSpec { method: RefineMethod::Mlt, ..Default::default() }.validate().is_err());
        assert_eq!("hyb".parse::<RefineMethod>().unwrap(), RefineMethod::Hyb);
    }
}
