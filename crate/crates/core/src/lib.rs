//! Spike-camera video saliency detection.
//!
//! The crate covers the whole pipeline: simulating and decoding binary spike
//! streams, reconstructing frames, a spiking network with cross-step
//! attention, adversarial training against an optimal-transport critic, and
//! the evaluation metrics and energy estimate.

pub mod autodiff;
pub mod cli;
pub mod energy;
pub mod error;
pub mod global;
pub mod losses;
pub mod metrics;
pub mod micro;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod plot;
pub mod params;
pub mod snn;
pub mod spike;
pub mod tensor;
pub mod train;

pub use error::{DecodeError, Error, Result};
pub use tensor::Tensor;
