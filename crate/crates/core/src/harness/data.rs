use std::path::PathBuf;

use rand::seq::SliceRandom;

use super::config::DatasetSource;
use crate::audio::{generate_noise_bank, generate_synth_corpus, load_manifest, load_manifest_features, read_wav, stereo_to_mono, AudioClip};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

/// Labeled clips, all mono and of one length per sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clips: Vec<AudioClip>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            clips: idx.iter().map(|&i| self.clips[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Duration every clip was fitted to.
    pub fn duration_s(&self) -> f64 {
        self.clips.first().map_or(0.0, AudioClip::duration_s)
    }

    pub fn sample_rate(&self) -> u32 {
        self.clips.first().map_or(0, AudioClip::sample_rate)
    }
}

/// Unlabeled clips for adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub clips: Vec<AudioClip>,
    pub n_classes: usize,
}

/// Downmixes and fits every clip to the duration of the first one so that
/// clips can be batched.
fn normalize(clips: Vec<AudioClip>) -> Result<Vec<AudioClip>> {
    let Some(first) = clips.first() else {
        return Err(Error::DegenerateInput("dataset has no clips".into()));
    };
    let duration = first.duration_s();
    clips
        .into_iter()
        .map(|c| {
            let mono = stereo_to_mono(&c)?;
            let frames = (duration * mono.sample_rate() as f64).round() as usize;
            mono.fit_to(frames)
        })
        .collect()
}

fn read_all(paths: impl Iterator<Item = PathBuf>) -> Result<Vec<AudioClip>> {
    paths.map(read_wav).collect()
}

pub fn load_dataset(src: &DatasetSource) -> Result<Dataset> {
    let (clips, labels, class_names) = match src {
        DatasetSource::Synth(spec) => {
            let (m, clips) = generate_synth_corpus(spec)?;
            (clips, m.labels(), m.class_names)
        }
        DatasetSource::Manifest(path) => {
            let m = load_manifest(path)?;
            let clips = read_all(m.entries.iter().map(|e| m.resolve(e)))?;
            (clips, m.labels(), m.class_names)
        }
    };
    Ok(Dataset { clips: normalize(clips)?, labels, class_names })
}

/// Loads clips without reading any label.
pub fn load_features(src: &DatasetSource) -> Result<Features> {
    let (clips, n_classes) = match src {
        DatasetSource::Synth(spec) => {
            let (m, clips) = generate_synth_corpus(spec)?;
            (clips, m.n_classes())
        }
        DatasetSource::Manifest(path) => {
            let m = load_manifest_features(path)?;
            (read_all(m.paths.iter().map(|p| m.resolve(p)))?, m.class_names.len())
        }
    };
    Ok(Features { clips: normalize(clips)?, n_classes })
}

/// Shuffled `(train, val)` index split with `round(n * val_fraction)`
/// validation items.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, purpose::SPLIT, 0, 0));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// The configured background-noise clips, or two synthesized ones.
pub fn noise_bank(paths: &[PathBuf], sample_rate: u32, duration_s: f64, seed: u64) -> Result<Vec<AudioClip>> {
    if paths.is_empty() {
        return generate_noise_bank(sample_rate, duration_s, seed);
    }
    paths.iter().map(|p| read_wav(p).and_then(|c| stereo_to_mono(&c))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav_pcm16, SynthSpec};

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split_indices(50, 0.2, 3);
        assert_eq!((a.len(), b.len()), (40, 10));
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(50, 0.2, 3), (a, b));
        assert_eq!(split_indices(5, 0.0, 1).1.len(), 0);
    }

    #[test]
    fn manifest_clips_are_fitted() {
        let dir = tempfile::tempdir().unwrap();
        let long = AudioClip::mono(vec![0.1; 900], 8000).unwrap();
        let short = AudioClip::new(vec![0.2; 1000], 8000, 2).unwrap();
        write_wav_pcm16(dir.path().join("a.wav"), &long).unwrap();
        write_wav_pcm16(dir.path().join("b.wav"), &short).unwrap();
        std::fs::write(dir.path().join("m.txt"), "#classes:x;y\na.wav,0\nb.wav,1\n").unwrap();
        let ds = load_dataset(&DatasetSource::Manifest(dir.path().join("m.txt"))).unwrap();
        assert_eq!(ds.labels, vec![0, 1]);
        assert!(ds.clips.iter().all(|c| c.frames() == 900 && c.channels() == 1));
    }

    #[test]
    fn features_ignore_the_label_column() {
        let dir = tempfile::tempdir().unwrap();
        write_wav_pcm16(dir.path().join("a.wav"), &AudioClip::mono(vec![0.1; 400], 8000).unwrap()).unwrap();
        std::fs::write(dir.path().join("m.txt"), "#classes:x;y\na.wav,NOT-A-LABEL\n").unwrap();
        let src = DatasetSource::Manifest(dir.path().join("m.txt"));
        let f = load_features(&src).unwrap();
        assert_eq!((f.clips.len(), f.n_classes), (1, 2));
        assert!(load_dataset(&src).is_err());
    }

    #[test]
    fn synth_source() {
        let ds = load_dataset(&DatasetSource::Synth(SynthSpec::new(3, 2, 0.5, 8000, 1))).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.n_classes(), 3);
        assert_eq!(noise_bank(&[], 8000, 0.5, 1).unwrap().len(), 2);
    }
}
