use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved floating-point PCM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    channels: u16,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, channels: u16) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if channels == 0 {
            return Err(Error::Argument("channel count must be positive".into()));
        }
        if !samples.len().is_multiple_of(channels as usize) {
            return Err(Error::Argument(format!(
                "{} samples do not divide into {} channels",
                samples.len(),
                channels
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} of audio clip")));
        }
        Ok(AudioClip { samples, sample_rate, channels })
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        Self::new(samples, sample_rate, 1)
    }

    /// Builds a mono clip from samples already known to be finite; used by the
    /// augmentations, whose outputs are finite by construction.
    pub(crate) fn mono_unchecked(samples: Vec<f32>, sample_rate: u32) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        AudioClip { samples, sample_rate, channels: 1 }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    /// Samples per channel.
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Zero-pads or truncates a mono clip to exactly `frames` samples.
    pub fn fit_to(&self, frames: usize) -> Result<AudioClip> {
        if self.channels != 1 {
            return Err(Error::Argument("fit_to expects a mono clip".into()));
        }
        let mut s = self.samples.clone();
        s.resize(frames, 0.0);
        Ok(AudioClip::mono_unchecked(s, self.sample_rate))
    }
}

/// Averages all channels into one: `out[j] = (1/C) * sum_i x[i][j]`.
pub fn stereo_to_mono(clip: &AudioClip) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(Error::DegenerateInput("cannot downmix an empty clip".into()));
    }
    let c = clip.channels as usize;
    if c == 1 {
        return Ok(clip.clone());
    }
    let scale = 1.0 / c as f64;
    let mono = clip
        .samples
        .chunks_exact(c)
        .map(|frame| (frame.iter().map(|&s| s as f64).sum::<f64>() * scale) as f32)
        .collect();
    Ok(AudioClip::mono_unchecked(mono, clip.sample_rate))
}
