//! Desk-scale spiking-transformer laboratory.
//!
//! Implements the SpikePool architecture (pooling attention) and a
//! spiking-self-attention baseline end to end: a small fp64 autodiff
//! engine, LIF neuron dynamics with surrogate gradients, the layer zoo
//! (conv / batchnorm / pooling), model assembly, BPTT training with
//! AdamW, synthetic event-camera data, and a frequency-spectrum analysis
//! toolkit (relative log amplitude profiles, band-limited noise
//! perturbation).

pub mod attention;
pub mod error;
pub mod events;
pub mod layers;
pub mod model;
pub mod snn;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
