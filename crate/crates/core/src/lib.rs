//! Spiking and conventional neural networks trained with backpropagation,
//! plus an activity-dependent pruner that removes synapses and neurons
//! during training.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the precision for common use.

pub mod ann;
pub mod data;
pub mod error;
pub mod harness;
pub mod network;
pub mod plasticity;
pub mod pruner;
pub mod scalar;
pub mod snn;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = network::Network<f32>;
pub type Network64 = network::Network<f64>;
pub type SnnModel32 = snn::SnnModel<f32>;
pub type SnnModel64 = snn::SnnModel<f64>;
pub type AnnModel32 = ann::AnnModel<f32>;
pub type AnnModel64 = ann::AnnModel<f64>;
pub type Dataset32 = data::LabeledDataset<f32>;
pub type Dataset64 = data::LabeledDataset<f64>;
pub type Trainer32 = harness::Trainer<f32>;
pub type Trainer64 = harness::Trainer<f64>;
