//! Continual learning with ternary feature masks.
//!
//! The crate trains one network over a sequence of classification tasks
//! without revisiting old data. Each feature (neuron or conv channel) is
//! owned by exactly one task; for any task a feature is either trainable,
//! visible but frozen, or absent. Capacity is added between tasks by
//! growing layers, and the per-task storage cost is two bits per feature
//! plus optional per-task feature normalization parameters.

pub mod config;
pub mod data;
pub mod error;
pub mod growth;
pub mod harness;
pub mod layers;
pub mod mask;
pub mod network;
pub mod overhead;
pub mod rng;
pub mod snapshot;
pub mod tensor;
pub mod trainer;

pub use error::{Result, TfmError};
