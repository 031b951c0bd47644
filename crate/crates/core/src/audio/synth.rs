//! Deterministic synthetic corpus: one tone family per class.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AudioClip, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Standard deviation of the additive white noise floor.
    #[serde(default = "default_noise")]
    pub noise_amplitude: f64,
    /// Relative half-width of the per-clip frequency jitter.
    #[serde(default = "default_jitter")]
    pub freq_jitter: f64,
}

fn default_noise() -> f64 {
    0.01
}

fn default_jitter() -> f64 {
    0.01
}

impl SynthSpec {
    pub fn new(n_classes: usize, clips_per_class: usize, duration_s: f64, sample_rate: u32, seed: u64) -> Self {
        SynthSpec {
            n_classes,
            clips_per_class,
            duration_s,
            sample_rate,
            seed,
            noise_amplitude: default_noise(),
            freq_jitter: default_jitter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
        }
        if self.clips_per_class < 1 || self.sample_rate < 1 {
            return Err(Error::Config("clip count and sample rate must be at least 1".into()));
        }
        if !(0.5..=12.0).contains(&self.duration_s) {
            return Err(Error::Config(format!("duration {} s outside [0.5, 12]", self.duration_s)));
        }
        if !(0.0..0.5).contains(&self.freq_jitter) || self.noise_amplitude < 0.0 {
            return Err(Error::Config("jitter must lie in [0, 0.5) and noise must be non-negative".into()));
        }
        self.class_step()?;
        Ok(())
    }

    fn class_step(&self) -> Result<f64> {
        let ceiling = 0.4 * self.sample_rate as f64;
        let span = ceiling - BASE_HZ;
        if span <= 0.0 {
            return Err(Error::Config(format!("sample rate {} Hz too low for a {BASE_HZ} Hz base tone", self.sample_rate)));
        }
        let steps = (self.n_classes - 1).max(1) as f64;
        Ok(MAX_STEP_HZ.min(span / steps))
    }

    /// Nominal tone frequency of class `k`.
    pub fn class_frequency(&self, k: usize) -> f64 {
        BASE_HZ + k as f64 * self.class_step().unwrap_or(0.0)
    }

    pub fn frames(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

const BASE_HZ: f64 = 440.0;
const MAX_STEP_HZ: f64 = 330.0;

/// Class `k` is a sinusoid near `440 + k * step` Hz with a weaker second
/// harmonic, random phase, amplitude and frequency jitter, plus white noise.
/// Clips are emitted class-interleaved: clip `i` has label `i % n_classes`.
pub fn generate_synth_corpus(spec: &SynthSpec) -> Result<(DatasetManifest, Vec<AudioClip>)> {
    spec.validate()?;
    let frames = spec.frames();
    let sr = spec.sample_rate as f64;
    let total = spec.n_classes * spec.clips_per_class;
    let noise = Normal::new(0.0, spec.noise_amplitude).map_err(|e| Error::Config(e.to_string()))?;

    let mut clips = Vec::with_capacity(total);
    let mut entries = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % spec.n_classes;
        let mut r = rng::stream(spec.seed, purpose::SYNTH, i as u64, 0);
        let freq = spec.class_frequency(label) * (1.0 + r.random_range(-1.0..=1.0) * spec.freq_jitter);
        let amp = r.random_range(0.3..0.6);
        let phase = r.random_range(0.0..TAU);
        let phase2 = r.random_range(0.0..TAU);
        let samples = (0..frames)
            .map(|n| {
                let t = n as f64 / sr;
                let tone = amp * (TAU * freq * t + phase).sin() + 0.25 * amp * (2.0 * TAU * freq * t + phase2).sin();
                (tone + noise.sample(&mut r)).clamp(-1.0, 1.0) as f32
            })
            .collect();
        clips.push(AudioClip::mono_unchecked(samples, spec.sample_rate));
        entries.push(ManifestEntry { path: format!("clips/{i:05}_c{label}.wav"), label });
    }
    let manifest = DatasetManifest {
        entries,
        class_names: (0..spec.n_classes).map(|k| format!("tone{k}")).collect(),
        sample_rate_hint: Some(spec.sample_rate),
        root: Default::default(),
    };
    Ok((manifest, clips))
}

/// Two background-noise clips: pink noise and a warbling frequency sweep.
pub fn generate_noise_bank(sample_rate: u32, duration_s: f64, seed: u64) -> Result<Vec<AudioClip>> {
    if sample_rate == 0 || duration_s <= 0.0 {
        return Err(Error::Config("noise bank needs a positive rate and duration".into()));
    }
    let frames = (duration_s * sample_rate as f64).round().max(1.0) as usize;
    let sr = sample_rate as f64;
    let mut r = rng::stream(seed, purpose::SYNTH, u64::MAX, 0);
    let white = Normal::new(0.0, 1.0).expect("unit normal");

    // Paul Kellett's economy pink filter.
    let (mut b0, mut b1, mut b2) = (0.0f64, 0.0f64, 0.0f64);
    let mut pink: Vec<f64> = (0..frames)
        .map(|_| {
            let w = white.sample(&mut r);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    let peak = pink.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    pink.iter_mut().for_each(|v| *v *= 0.5 / peak);

    let mut phase = 0.0f64;
    let warble: Vec<f32> = (0..frames)
        .map(|n| {
            let t = n as f64 / sr;
            let f = 700.0 + 300.0 * (TAU * 1.5 * t).sin();
            phase += TAU * f / sr;
            (0.4 * phase.sin() * (0.6 + 0.4 * (TAU * 3.0 * t).sin())) as f32
        })
        .collect();

    Ok(vec![
        AudioClip::mono_unchecked(pink.into_iter().map(|v| v as f32).collect(), sample_rate),
        AudioClip::mono_unchecked(warble, sample_rate),
    ])
}
