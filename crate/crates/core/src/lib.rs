//! Hyperspectral image classification with target-pixel-orientation (TPO)
//! sampling and hybrid 3-D/2-D multi-scale convolutional networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense N-D tensors with a tape-based reverse-mode autodiff graph.
//! * [`nn`]: conv/batch-norm/pooling blocks, the dense head and the loss.
//! * [`models`]: band reduction and the two inception-style feature extractors.
//! * [`hsi`]: cube and label rasters, normalisation, splits, file formats.
//! * [`sampler`]: nine-view TPO sample extraction and batching.
//! * [`train`]: Adam, the training loop, confusion matrices and OA/AA/kappa.
//! * [`fixtures`]: small synthetic scenes used by the tests and the CLI.
//! * [`gradsuite`]: finite-difference checks over every op, layer and a tiny model.

pub mod error;
pub mod fixtures;
pub mod gradsuite;
pub mod hsi;
pub mod models;
pub mod nn;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
