//! Stochastic view generation for training, adaptation, and refinement.
//!
//! Every transform preserves length and sample rate and is a pure function of
//! its input, its parameters, and the state of the generator it is handed.

use log::warn;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Upper bound on the fraction of a clip a time shift may displace.
pub const MAX_SHIFT_FRAC: f64 = 0.17;
pub const DEFAULT_NOISE_RATIO: f64 = 0.015;
pub const DEFAULT_SNR_DB: f64 = 50.0;
const PEAK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    TimeShiftLeft,
    TimeShiftRight,
    TimeShiftRandomDir,
    GaussianNoise,
    /// Mixes in the noise-bank clip at this index.
    BackgroundMix(usize),
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub max_shift_frac: f64,
    pub noise_ratio: f64,
    pub snr_db: f64,
}

/// Strengths shared by all views of a recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewParams {
    pub max_shift_frac: f64,
    pub noise_ratio: f64,
    pub snr_db: f64,
}

impl Default for ViewParams {
    fn default() -> Self {
        ViewParams { max_shift_frac: MAX_SHIFT_FRAC, noise_ratio: DEFAULT_NOISE_RATIO, snr_db: DEFAULT_SNR_DB }
    }
}

impl ViewParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_SHIFT_FRAC).contains(&self.max_shift_frac) {
            return Err(Error::Config(format!("max_shift_frac {} outside [0, {MAX_SHIFT_FRAC}]", self.max_shift_frac)));
        }
        if self.noise_ratio < 0.0 || !self.snr_db.is_finite() {
            return Err(Error::Config("noise ratio must be >= 0 and SNR finite".into()));
        }
        Ok(())
    }

    pub fn spec(&self, kind: AugmentationKind) -> AugmentationSpec {
        AugmentationSpec { kind, max_shift_frac: self.max_shift_frac, noise_ratio: self.noise_ratio, snr_db: self.snr_db }
    }
}

impl AugmentationSpec {
    pub fn validate(&self, bank_len: usize) -> Result<()> {
        ViewParams { max_shift_frac: self.max_shift_frac, noise_ratio: self.noise_ratio, snr_db: self.snr_db }
            .validate()?;
        if let AugmentationKind::BackgroundMix(i) = self.kind {
            if i >= bank_len {
                return Err(Error::Config(format!("background mix needs noise bank entry {i}, bank has {bank_len}")));
            }
        }
        Ok(())
    }

    pub fn apply(&self, clip: &AudioClip, rng: &mut Rng, bank: &[AudioClip]) -> Result<AudioClip> {
        match self.kind {
            AugmentationKind::Identity => Ok(clip.clone()),
            AugmentationKind::TimeShiftLeft => random_time_shift(clip, self.max_shift_frac, Some(Direction::Left), rng),
            AugmentationKind::TimeShiftRight => random_time_shift(clip, self.max_shift_frac, Some(Direction::Right), rng),
            AugmentationKind::TimeShiftRandomDir => random_time_shift(clip, self.max_shift_frac, None, rng),
            AugmentationKind::GaussianNoise => gaussian_noise(clip, self.noise_ratio, rng),
            AugmentationKind::BackgroundMix(i) => {
                let noise = bank
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("noise bank has no entry {i}")))?;
                background_mix(clip, noise, self.snr_db, rng)
            }
        }
    }
}

fn require_mono(clip: &AudioClip, op: &str) -> Result<()> {
    if clip.channels() != 1 {
        return Err(Error::Argument(format!("{op} expects mono audio, got {} channels", clip.channels())));
    }
    Ok(())
}

/// Translates the clip by `round(frac * N)` samples, zero-filling the vacated
/// region. A right shift moves content toward higher indices.
pub fn time_shift(clip: &AudioClip, frac: f64, direction: Direction) -> Result<AudioClip> {
    require_mono(clip, "time_shift")?;
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::Argument(format!("shift fraction {frac} outside [0, 1]")));
    }
    let n = clip.frames();
    let shift = ((frac * n as f64).round() as usize).min(n);
    let src = clip.samples();
    let mut out = vec![0.0f32; n];
    match direction {
        Direction::Right => out[shift..].copy_from_slice(&src[..n - shift]),
        Direction::Left => out[..n - shift].copy_from_slice(&src[shift..]),
    }
    Ok(AudioClip::mono_unchecked(out, clip.sample_rate()))
}

/// Time shift with `frac ~ U(0, max_frac)`; a missing direction is drawn at random.
pub fn random_time_shift(
    clip: &AudioClip,
    max_frac: f64,
    direction: Option<Direction>,
    rng: &mut Rng,
) -> Result<AudioClip> {
    let frac = if max_frac > 0.0 { rng.random_range(0.0..=max_frac) } else { 0.0 };
    let direction = direction.unwrap_or_else(|| if rng.random_bool(0.5) { Direction::Right } else { Direction::Left });
    time_shift(clip, frac, direction)
}

/// Adds fresh white noise with `sigma = ratio * max(peak(|x|), 1e-6)`.
pub fn gaussian_noise(clip: &AudioClip, ratio: f64, rng: &mut Rng) -> Result<AudioClip> {
    require_mono(clip, "gaussian_noise")?;
    if ratio < 0.0 || !ratio.is_finite() {
        return Err(Error::Argument(format!("noise ratio {ratio} must be finite and >= 0")));
    }
    if ratio == 0.0 {
        return Ok(clip.clone());
    }
    let sigma = ratio * (clip.peak() as f64).max(PEAK_FLOOR);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let out = clip.samples().iter().map(|&s| (s as f64 + normal.sample(rng)) as f32).collect();
    Ok(AudioClip::mono_unchecked(out, clip.sample_rate()))
}

/// Where a background segment starts and how much it is scaled by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct MixPlan {
    pub start: usize,
    pub gain: f64,
}

/// Noise sample `j` of the segment that starts at `start`, tiling short sources.
fn segment_sample(noise: &[f32], start: usize, j: usize) -> f32 {
    noise[(start + j) % noise.len()]
}

pub(crate) fn plan_mix(clip: &AudioClip, noise: &AudioClip, snr_db: f64, rng: &mut Rng) -> Result<Option<MixPlan>> {
    require_mono(clip, "background_mix")?;
    require_mono(noise, "background_mix noise")?;
    if clip.sample_rate() != noise.sample_rate() {
        return Err(Error::Argument(format!(
            "noise at {} Hz cannot mix into a {} Hz clip",
            noise.sample_rate(),
            clip.sample_rate()
        )));
    }
    if noise.is_empty() {
        return Err(Error::DegenerateNoise("empty noise clip".into()));
    }
    let n = clip.frames();
    let start = if noise.frames() >= n {
        rng.random_range(0..=noise.frames() - n)
    } else {
        rng.random_range(0..noise.frames())
    };
    let noise_power =
        (0..n).map(|j| segment_sample(noise.samples(), start, j) as f64).map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    if noise_power == 0.0 {
        return Err(Error::DegenerateNoise("selected noise segment has zero power".into()));
    }
    let signal_power = clip.power();
    if signal_power == 0.0 {
        warn!("background mix on a silent clip; returning it unchanged");
        return Ok(None);
    }
    let gain = (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(Some(MixPlan { start, gain }))
}

/// Adds a random segment of `noise`, scaled so that the signal-to-noise power
/// ratio equals `snr_db`. Sources shorter than the clip are tiled.
pub fn background_mix(clip: &AudioClip, noise: &AudioClip, snr_db: f64, rng: &mut Rng) -> Result<AudioClip> {
    let Some(plan) = plan_mix(clip, noise, snr_db, rng)? else {
        return Ok(clip.clone());
    };
    let out = clip
        .samples()
        .iter()
        .enumerate()
        .map(|(j, &s)| (s as f64 + plan.gain * segment_sample(noise.samples(), plan.start, j) as f64) as f32)
        .collect();
    Ok(AudioClip::mono_unchecked(out, clip.sample_rate()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRecipe {
    /// Random-direction shift, Gaussian noise, and two background mixes.
    Train4,
    /// One view drawn uniformly from the `Train4` menu.
    Train1,
    /// Right shift then left shift.
    Ttda2,
    /// Left shift then right shift, for prediction refinement.
    Ttau2,
}

impl ViewRecipe {
    pub fn n_views(self) -> usize {
        match self {
            ViewRecipe::Train4 => 4,
            ViewRecipe::Train1 => 1,
            ViewRecipe::Ttda2 | ViewRecipe::Ttau2 => 2,
        }
    }

    pub fn noise_sources_needed(self) -> usize {
        match self {
            ViewRecipe::Train4 | ViewRecipe::Train1 => 2,
            ViewRecipe::Ttda2 | ViewRecipe::Ttau2 => 0,
        }
    }
}

fn train_menu(p: &ViewParams) -> [AugmentationSpec; 4] {
    [
        p.spec(AugmentationKind::TimeShiftRandomDir),
        p.spec(AugmentationKind::GaussianNoise),
        p.spec(AugmentationKind::BackgroundMix(0)),
        p.spec(AugmentationKind::BackgroundMix(1)),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<AudioClip>,
    pub recipe: ViewRecipe,
}

/// Draws the augmentation list for one sample; `Train1` consumes one draw
/// from `rng` to pick its view.
pub fn recipe_specs(recipe: ViewRecipe, params: &ViewParams, rng: &mut Rng) -> Vec<AugmentationSpec> {
    match recipe {
        ViewRecipe::Train4 => train_menu(params).to_vec(),
        ViewRecipe::Train1 => vec![train_menu(params)[rng.random_range(0..4)]],
        ViewRecipe::Ttda2 => {
            vec![params.spec(AugmentationKind::TimeShiftRight), params.spec(AugmentationKind::TimeShiftLeft)]
        }
        ViewRecipe::Ttau2 => {
            vec![params.spec(AugmentationKind::TimeShiftLeft), params.spec(AugmentationKind::TimeShiftRight)]
        }
    }
}

pub fn make_view_set(
    clip: &AudioClip,
    recipe: ViewRecipe,
    params: &ViewParams,
    rng: &mut Rng,
    noise_bank: &[AudioClip],
) -> Result<ViewSet> {
    params.validate()?;
    if noise_bank.len() < recipe.noise_sources_needed() {
        return Err(Error::Config(format!(
            "{recipe:?} needs {} noise-bank clips, got {}",
            recipe.noise_sources_needed(),
            noise_bank.len()
        )));
    }
    let views = recipe_specs(recipe, params, rng)
        .iter()
        .map(|spec| spec.apply(clip, rng, noise_bank))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { views, recipe })
}
