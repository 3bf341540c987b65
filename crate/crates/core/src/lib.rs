//! Binarized neural network attack laboratory.
//!
//! Trains and runs a bit-packed binarized MLP, applies a keyed
//! adjacent-neuron swap to its hidden layers, and recovers the key by
//! accuracy-guided search.

pub mod attack;
pub mod bnn;
pub mod data;
pub mod error;
pub mod metrics;
pub mod train;
pub mod transform;

pub use bnn::{BnnLayer, BnnModel, PackedBitMatrix};
pub use data::{LabeledDataset, SplitTag};
pub use error::{Error, Result};
pub use transform::{KeySet, PufKey};
