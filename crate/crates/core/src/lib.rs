//! Trained-from-scratch audio classification with multiview augmentation and
//! test-time adaptation.
//!
//! The pipeline runs end to end on the CPU:
//!
//! 1. [`audio`] decodes WAV, averages channels to mono, and reads dataset
//!    manifests (or synthesizes a small tone corpus).
//! 2. [`augment`] draws the stochastic views used for training and adaptation.
//! 3. [`frontend`] turns mono audio into a log-Mel [`frontend::TokenMatrix`]
//!    whose frames are the tokens, at whatever rate the clip was recorded.
//! 4. [`model`] runs a 1D CNN bottleneck stack, embeds the result with CLS and
//!    TAL tokens, encodes it with full self-attention, and classifies.
//! 5. [`tta`] holds the training and adaptation losses, the multiview step,
//!    test-time adaptation, prediction refinement, and the agreement rate.
//! 6. [`harness`] wires everything into reproducible experiment commands.
//!
//! All differentiable layers live in [`numerics`], each with a hand-written
//! backward pass that is verified against central finite differences.

pub mod audio;
pub mod augment;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod tta;

pub use error::{Error, Result};
