//! Surrogate-gradient training of convolutional spiking neural networks
//! built from LIF, KLIF and KLIF* neurons.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`ops`]: dense tensors and hand-differentiated layers.
//! * [`neuron`]: per-timestep spiking dynamics and their BPTT step.
//! * [`codec`]: the three-branch convolutional encoder and voting decoder.
//! * [`arch`] and [`network`]: architecture strings, assembly, forward over
//!   `T` timesteps and the MSE loss with full backpropagation through time.
//! * [`optim`], [`train`], [`checkpoint`]: Adam, cosine annealing, the
//!   epoch loop, metrics and persistence.
//! * [`data`]: IDX and CIFAR-10 binary loaders.
//! * [`gradcheck`], [`trace`], [`config`], [`cli`]: tooling behind the binary.

pub mod arch;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod neuron;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod trace;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
