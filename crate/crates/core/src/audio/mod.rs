//! Audio ingestion: PCM clips, WAV decoding, channel averaging, dataset
//! manifests and the synthetic tone corpus.

mod clip;
mod manifest;
mod synth;
pub mod wav;

pub use clip::{stereo_to_mono, AudioClip};
pub use manifest::{load_manifest, load_manifest_features, DatasetManifest, FeatureManifest, ManifestEntry};
pub use synth::{generate_noise_bank, generate_synth_corpus, SynthSpec};
pub use wav::{decode_wav, encode_wav_f32, encode_wav_pcm16, read_wav, write_wav_pcm16};
