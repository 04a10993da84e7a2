//! Networks whose size is learned during training: tunnel networks with
//! per-unit gates, highway networks and budding perceptrons that grow a
//! binary tree of layers.

pub mod budding;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Architecture, ModelSpec, Network};
pub use trainer::{evaluate, train, TrainConfig};
