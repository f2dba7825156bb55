//! Connective reconstruction-based novelty detection.
//!
//! The method learns a single positive class and flags everything else. A
//! short-skip (residual, no encoder-to-decoder connections) UNet is trained
//! to reconstruct corrupted positive samples; connective positive and hard
//! negative samples are synthesized by convex-mixing originals with their
//! (possibly distorted) reconstructions; a small convolutional classifier is
//! trained on the synthesized set. At test time a query is scored by mixing
//! it with its own reconstruction and reading the classifier's positive-class
//! probability.
//!
//! The crate also ships the dataset protocols (MNIST one-vs-rest with varying
//! outlier percentages, image-folder categories vs a clutter class) and the
//! AUC-ROC / F1 evaluation used to benchmark the method. Every entry point is
//! seeded and bit-deterministic for fixed inputs.

pub mod batch;
pub mod classifier;
pub mod connective;
pub mod corruptions;
pub mod error;
pub mod nn;
pub mod reconstructor;

pub use batch::ImageBatch;
pub use error::{Error, Result};
