//! Multi-stage, multi-stream, multimodal transformer for next-speaker
//! prediction, trainable at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense 2-D tensors, a reverse-mode autodiff tape, Adam,
//!   and binary parameter checkpoints;
//! - [`nn`] — transformer building blocks (multi-head attention, FFN,
//!   layer norm, positional encoding, encoder/decoder stacks);
//! - [`model`] — the two-stage two-stream architecture with its ablation
//!   variants, plus the MLP / early-fusion / late-fusion baselines;
//! - [`data`] — conversation feature streams, windowing into samples,
//!   a synthetic conversation generator with a Bayes oracle, and the
//!   on-disk dataset format;
//! - [`train`] — loss, metrics, the training loop, and the experiment
//!   grid runner with CSV results and pivoted reports;
//! - [`check`] — finite-difference gradient verification suites;
//! - [`cli`] — the `turnformer` command-line entry point.

pub mod check;
pub mod cli;
pub mod data;
pub mod error;
pub mod modality;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use modality::{Modality, ModalityDims};
pub use tensor::{Element, Tensor};
