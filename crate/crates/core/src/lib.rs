//! A master/worker distributed training engine.
//!
//! Workers compute gradients over private data shards and exchange them
//! with a master that owns the authoritative weights, following either
//! Downpour SGD or elastic averaging SGD, asynchronously or in lock-step,
//! optionally through a tier of sub-masters. The same role state machines
//! run over in-process channels, over TCP, or under a deterministic
//! simulated clock used for scaling experiments.

pub mod config;
pub mod data;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod proto;
pub mod roles;
pub mod simclock;
pub mod transport;

pub use config::TrainConfig;
pub use nn::{Architecture, Gradient, Tensor, WeightSet};
pub use proto::Message;

/// Process rank within a training session; rank 0 is the top-level master.
pub type Rank = u32;
