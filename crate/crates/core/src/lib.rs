//! Multimodal misinformation detection at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`graph`]: dense `f64` tensors and a tape-based
//!   reverse-mode autodiff graph, with [`gradcheck`] as the finite-difference
//!   oracle.
//! * [`nn`]: parameter storage, linear layers and the post-norm transformer
//!   block shared by every encoder and fusion stage.
//! * [`encoders`]: text / social token encoders, log-mel spectrogram, VGG-style
//!   and wav2vec-style audio encoders, frame and clip video encoders.
//! * [`fusion`]: cross-attention fusion of text, audio and frames, the six-slot
//!   social self-attention, and the classifier head.
//! * [`train`]: cross-entropy, AdamW, chronological splits, the training loop
//!   and evaluation metrics.
//! * [`datagen`]: the synthetic cross-modal-consistency corpus, its on-disk
//!   container and the audio misalignment injector.

pub mod datagen;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
