//! Log-Mel front end and horizontal tokenization.
//!
//! Window and hop are specified in milliseconds, so the same parameters work
//! at any sample rate; only the number of frames `T` changes.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelParams {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub f_min: f64,
    /// Upper filterbank edge; `None` means the Nyquist frequency.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        MelParams { n_mels: 128, win_ms: 25.0, hop_ms: 10.0, f_min: 0.0, f_max: None, log_floor: 1e-10 }
    }
}

impl MelParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels < 8 {
            return Err(Error::Config(format!("n_mels {} below 8", self.n_mels)));
        }
        if !(self.win_ms > 0.0 && self.hop_ms > 0.0 && self.hop_ms <= self.win_ms) {
            return Err(Error::Config(format!("need 0 < hop_ms ({}) <= win_ms ({})", self.hop_ms, self.win_ms)));
        }
        if !(self.log_floor > 0.0) || self.f_min < 0.0 {
            return Err(Error::Config("log_floor must be positive and f_min non-negative".into()));
        }
        Ok(())
    }

    fn validate_for_rate(&self, sample_rate: u32) -> Result<()> {
        self.validate()?;
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = self.f_max_for(sample_rate);
        if !(self.f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!(
                "need f_min ({}) < f_max ({f_max}) <= {nyquist} Hz",
                self.f_min
            )));
        }
        if self.hop_samples(sample_rate) == 0 || self.win_samples(sample_rate) < 2 {
            return Err(Error::Config(format!("window/hop too short at {sample_rate} Hz")));
        }
        Ok(())
    }

    pub fn f_max_for(&self, sample_rate: u32) -> f64 {
        self.f_max.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.win_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    /// `1 + floor((N - win) / hop)`, or `None` when the clip is shorter than a window.
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> Option<usize> {
        let win = self.win_samples(sample_rate);
        let hop = self.hop_samples(sample_rate).max(1);
        (n_samples >= win).then(|| 1 + (n_samples - win) / hop)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters over the bins of an `n_fft`-point real FFT.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_bins: usize,
    /// Row-major `n_mels x n_bins` weights.
    weights: Vec<f64>,
    /// Half-open range of nonzero bins for each row.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> =
            (0..n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        let mut support = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let rise = (f - left) / (center - left);
                let fall = (right - f) / (right - center);
                *w = rise.min(fall).max(0.0);
            }
            let first = row.iter().position(|&w| w > 0.0);
            let last = row.iter().rposition(|&w| w > 0.0);
            support.push(match (first, last) {
                (Some(a), Some(b)) => (a, b + 1),
                _ => (0, 0),
            });
        }
        MelFilterbank { n_bins, weights, support }
    }

    pub fn n_mels(&self) -> usize {
        self.support.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn support(&self, m: usize) -> (usize, usize) {
        self.support[m]
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let (a, b) = self.support[m];
            let row = self.row(m);
            *o = (a..b).map(|k| row[k] * power[k]).sum();
        }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// `F x T` log-Mel energies, stored row-major by frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    values: Vec<f64>,
    n_mels: usize,
    n_frames: usize,
    pub params: MelParams,
    pub sample_rate: u32,
}

impl TokenMatrix {
    pub fn from_values(values: Vec<f64>, n_mels: usize, n_frames: usize, params: MelParams, sample_rate: u32) -> Result<Self> {
        if values.len() != n_mels * n_frames {
            return Err(Error::shape("TokenMatrix", format!("{} values for {n_mels}x{n_frames}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token matrix entry".into()));
        }
        Ok(TokenMatrix { values, n_mels, n_frames, params, sample_rate })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    /// Number of tokens after horizontal tokenization (one per frame).
    pub fn n_tokens(&self) -> usize {
        self.n_frames
    }

    /// Channels carried by each token (one per Mel bin).
    pub fn token_dim(&self) -> usize {
        self.n_mels
    }

    pub fn token(&self, t: usize) -> Vec<f64> {
        (0..self.n_mels).map(|f| self.get(f, t)).collect()
    }

    pub fn tokens(&self) -> Vec<Vec<f64>> {
        (0..self.n_frames).map(|t| self.token(t)).collect()
    }

    /// Rebuilds the matrix from a token sequence.
    pub fn from_tokens(tokens: &[Vec<f64>], params: MelParams, sample_rate: u32) -> Result<Self> {
        let n_frames = tokens.len();
        let n_mels = tokens.first().map_or(0, Vec::len);
        if tokens.iter().any(|t| t.len() != n_mels) {
            return Err(Error::shape("from_tokens", "ragged token sequence"));
        }
        let mut values = vec![0.0; n_mels * n_frames];
        for (t, tok) in tokens.iter().enumerate() {
            for (f, &v) in tok.iter().enumerate() {
                values[f * n_frames + t] = v;
            }
        }
        Self::from_values(values, n_mels, n_frames, params, sample_rate)
    }
}

/// Hann-windowed power spectra projected through an HTK Mel filterbank,
/// then `ln(x + log_floor)`.
pub fn mel_spectrogram(clip: &AudioClip, params: &MelParams) -> Result<TokenMatrix> {
    if clip.channels() != 1 {
        return Err(Error::Argument(format!("mel_spectrogram expects mono audio, got {} channels", clip.channels())));
    }
    let sr = clip.sample_rate();
    params.validate_for_rate(sr)?;
    let win = params.win_samples(sr);
    let hop = params.hop_samples(sr);
    let n_frames = params
        .n_frames(clip.frames(), sr)
        .ok_or(Error::TooShort { got: clip.frames(), min: win })?;

    let bank = MelFilterbank::new(params.n_mels, win, sr, params.f_min, params.f_max_for(sr));
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; bank.n_bins()];
    let mut mel = vec![0.0; params.n_mels];
    let mut values = vec![0.0; params.n_mels * n_frames];
    let samples = clip.samples();

    for t in 0..n_frames {
        let frame = &samples[t * hop..t * hop + win];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s as f64 * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        bank.apply(&power, &mut mel);
        for (m, &e) in mel.iter().enumerate() {
            values[m * n_frames + t] = (e + params.log_floor).ln();
        }
    }
    TokenMatrix::from_values(values, params.n_mels, n_frames, *params, sr)
}

/// Splits the spectrogram along time: each frame becomes one token whose
/// channels are the Mel bins. Storage is unchanged; see
/// [`TokenMatrix::n_tokens`] and [`TokenMatrix::token`].
pub fn horizontal_tokenize(spec: TokenMatrix) -> TokenMatrix {
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn sine(freq: f64, rate: u32, seconds: f64) -> AudioClip {
        let n = (rate as f64 * seconds) as usize;
        AudioClip::mono((0..n).map(|i| (0.5 * (TAU * freq * i as f64 / rate as f64).sin()) as f32).collect(), rate)
            .unwrap()
    }

    #[test]
    fn one_second_frame_count() {
        let params = MelParams::default();
        let spec = mel_spectrogram(&sine(440.0, 16000, 1.0), &params).unwrap();
        assert_eq!(spec.n_frames(), 1 + (16000 - 400) / 160);
        assert_eq!(spec.n_frames(), 98);
        assert_eq!(spec.n_mels(), 128);
    }

    #[test]
    fn silence_hits_the_floor() {
        let clip = AudioClip::mono(vec![0.0; 8000], 8000).unwrap();
        let params = MelParams { n_mels: 40, ..Default::default() };
        let spec = mel_spectrogram(&clip, &params).unwrap();
        let floor = 1e-10f64.ln();
        assert!(spec.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn sine_peaks_in_its_mel_bin() {
        let params = MelParams::default();
        let spec = mel_spectrogram(&sine(440.0, 16000, 1.0), &params).unwrap();
        // The bin whose triangle peaks closest to 440 Hz, from the mel edges directly.
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(8000.0));
        let centers: Vec<f64> = (1..=128).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / 129.0)).collect();
        let bank = MelFilterbank::new(128, 400, 16000, 0.0, 8000.0);
        // 440 Hz sits between DFT bins 10 (400 Hz) and 11 (440 Hz); pick the filter with most weight at bin 11.
        let expected = (0..128).max_by(|&a, &b| bank.row(a)[11].total_cmp(&bank.row(b)[11])).unwrap();
        assert!(centers[expected] > 300.0 && centers[expected] < 600.0);
        let hits = (0..spec.n_frames())
            .filter(|&t| (0..128).max_by(|&a, &b| spec.get(a, t).total_cmp(&spec.get(b, t))).unwrap() == expected)
            .count();
        assert!(hits as f64 >= 0.95 * spec.n_frames() as f64, "{hits}/{}", spec.n_frames());
    }

    #[test]
    fn too_short_names_minimum() {
        let clip = AudioClip::mono(vec![0.0; 399], 16000).unwrap();
        assert!(matches!(
            mel_spectrogram(&clip, &MelParams::default()),
            Err(Error::TooShort { got: 399, min: 400 })
        ));
    }

    #[test]
    fn invalid_params() {
        let clip = sine(100.0, 8000, 0.5);
        for p in [
            MelParams { n_mels: 4, ..Default::default() },
            MelParams { hop_ms: 30.0, ..Default::default() },
            MelParams { f_max: Some(5000.0), ..Default::default() },
            MelParams { f_min: 4000.0, ..Default::default() },
        ] {
            assert!(matches!(mel_spectrogram(&clip, &p), Err(Error::Config(_))), "{p:?}");
        }
        let stereo = AudioClip::new(vec![0.0; 1600], 8000, 2).unwrap();
        assert!(mel_spectrogram(&stereo, &MelParams::default()).is_err());
    }

    #[test]
    fn filterbank_rows_are_nonnegative_contiguous_triangles() {
        let bank = MelFilterbank::new(64, 512, 16000, 20.0, 8000.0);
        for m in 0..bank.n_mels() {
            let row = bank.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let (a, b) = bank.support(m);
            assert!(b > a, "row {m} empty");
            assert!(row[a..b].iter().all(|&w| w > 0.0), "row {m} has a hole");
            assert!(row[..a].iter().chain(&row[b..]).all(|&w| w == 0.0));
            assert!(row.iter().all(|&w| w <= 1.0));
        }
    }

    #[test]
    fn doubling_hop_halves_frames() {
        for (sr, hop) in [(16000, 5.0), (16000, 10.0), (16000, 12.5), (8000, 10.0), (44100, 10.0)] {
            let clip = sine(300.0, sr, 2.3);
            let a = MelParams { hop_ms: hop, ..Default::default() };
            let b = MelParams { hop_ms: 2.0 * hop, win_ms: 25.0f64.max(2.0 * hop), ..Default::default() };
            let ta = mel_spectrogram(&clip, &a).unwrap().n_frames() as i64;
            let tb = mel_spectrogram(&clip, &b).unwrap().n_frames() as i64;
            assert!((tb - (ta + 1) / 2).abs() <= 1, "{sr} Hz, hop {hop}: {ta} -> {tb}");
        }
    }

    #[test]
    fn deterministic_output() {
        let clip = sine(1000.0, 44100, 0.5);
        let p = MelParams { n_mels: 64, ..Default::default() };
        assert_eq!(mel_spectrogram(&clip, &p).unwrap(), mel_spectrogram(&clip, &p).unwrap());
    }

    #[test]
    fn downmix_before_mel_ignores_channel_count() {
        let mono = sine(500.0, 16000, 0.5);
        let dup: Vec<f32> = mono.samples().iter().flat_map(|&s| [s, s, s]).collect();
        let three = AudioClip::new(dup, 16000, 3).unwrap();
        let p = MelParams { n_mels: 32, ..Default::default() };
        let a = mel_spectrogram(&mono, &p).unwrap();
        let b = mel_spectrogram(&crate::audio::stereo_to_mono(&three).unwrap(), &p).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn tokenization_contract() {
        let spec = mel_spectrogram(&sine(440.0, 16000, 1.0), &MelParams::default()).unwrap();
        let tokens = horizontal_tokenize(spec.clone());
        assert_eq!(tokens.n_tokens(), 98);
        assert_eq!(tokens.token_dim(), 128);
        let seq = tokens.tokens();
        assert_eq!(seq.len(), 98);
        assert!(seq.iter().all(|t| t.len() == 128));
        let back = TokenMatrix::from_tokens(&seq, spec.params, spec.sample_rate).unwrap();
        assert_eq!(back, spec);

        let one = mel_spectrogram(&sine(440.0, 16000, 0.025), &MelParams::default()).unwrap();
        assert_eq!(horizontal_tokenize(one).n_tokens(), 1);
    }
}
