//! Master, worker and sub-master state machines.
//!
//! The machines never touch a transport or a clock. Each takes one
//! incoming message and returns a [`Step`]: the messages to send, how many
//! weight updates and validation passes it performed, and log events.
//! [`driver`] runs them over real endpoints on threads; the simulator in
//! [`crate::simclock`] runs the very same machines under virtual time.

mod driver;
mod master;
mod submaster;
mod worker;

pub use driver::{run_master, run_submaster, run_worker, DelayInjector, WallLog};
pub use master::{Master, MasterCore, MasterSettings, ValidationRecord};
pub use submaster::SubMaster;
pub use worker::{Outgoing, Worker, WorkerEvent, WorkerSettings};

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::config::{Algorithm, SyncMode, TrainConfig};
use crate::data::{worker_epoch_seed, DataError, Samples};
use crate::nn::{self, Architecture, Gradient, NnError, WeightSet};
use crate::optim::OptimError;
use crate::proto::Message;
use crate::transport::TransportError;
use crate::Rank;

#[derive(Debug, Error)]
pub enum RoleError {
    #[error("rank {rank}: protocol violation: {reason}")]
    Protocol { rank: Rank, reason: String },
    #[error("rank {rank}: payload shape does not match the session architecture")]
    Shape { rank: Rank },
    #[error("rank {rank}: transport failure: {source}")]
    Transport {
        rank: Rank,
        #[source]
        source: TransportError,
    },
    #[error("rank {rank}: peer {peer} disconnected before finishing")]
    PeerLost { rank: Rank, peer: Rank },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration error: {0}")]
    Config(String),
}

impl RoleError {
    pub(crate) fn protocol(rank: Rank, reason: impl Into<String>) -> Self {
        RoleError::Protocol {
            rank,
            reason: reason.into(),
        }
    }
}

/// One line of the JSON-lines run log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEvent {
    pub event: &'static str,
    pub rank: Rank,
    pub version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub staleness: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Seconds since start (wall clock) or simulated time units.
    pub time: f64,
}

impl LogEvent {
    pub(crate) fn new(event: &'static str, rank: Rank, version: u64) -> Self {
        Self {
            event,
            rank,
            version,
            staleness: None,
            loss: None,
            accuracy: None,
            time: 0.0,
        }
    }
}

/// Effects of handling one message.
#[derive(Debug, Default)]
pub struct Step {
    pub sends: Vec<(Rank, Message)>,
    /// Weight updates applied (each costs one master update in the simulator).
    pub updates: u32,
    pub validations: u32,
    pub events: Vec<LogEvent>,
}

/// Counts of gradients by staleness.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StalenessHistogram(pub BTreeMap<u64, u64>);

impl StalenessHistogram {
    pub fn record(&mut self, staleness: u64) {
        *self.0.entry(staleness).or_default() += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn mean(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.0.iter().map(|(&s, &c)| s as f64 * c as f64).sum::<f64>() / n as f64
    }

    pub fn max(&self) -> u64 {
        self.0.keys().next_back().copied().unwrap_or(0)
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.keys().all(|&s| s == 0)
    }

    pub fn merge(&mut self, other: &StalenessHistogram) {
        for (&s, &c) in &other.0 {
            *self.0.entry(s).or_default() += c;
        }
    }

    /// `staleness:count` pairs joined by `;`.
    pub fn compact(&self) -> String {
        self.0
            .iter()
            .map(|(s, c)| format!("{s}:{c}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Produces gradients over a worker's local shard.
pub trait GradientSource: Send {
    fn n_samples(&self) -> usize;
    fn gradient(&mut self, w: &WeightSet, indices: &[usize]) -> Result<Gradient, RoleError>;
}

/// Real backpropagation over an in-memory shard.
pub struct ShardModel {
    arch: Architecture,
    samples: Samples,
}

impl ShardModel {
    pub fn new(arch: Architecture, samples: Samples) -> Result<Self, RoleError> {
        if samples.width != arch.input_width() || samples.n_classes != arch.n_classes() {
            return Err(RoleError::Config(format!(
                "data has width {} and {} classes; architecture `{arch}` expects {} and {}",
                samples.width,
                samples.n_classes,
                arch.input_width(),
                arch.n_classes()
            )));
        }
        Ok(Self { arch, samples })
    }
}

impl GradientSource for ShardModel {
    fn n_samples(&self) -> usize {
        self.samples.len()
    }

    fn gradient(&mut self, w: &WeightSet, indices: &[usize]) -> Result<Gradient, RoleError> {
        let batch = self.samples.batch(indices);
        let (_, g) = nn::loss_and_gradient(w, &self.arch, &batch)?;
        Ok(g)
    }
}

/// Zero gradients of the right shape; lets the simulator run the protocol
/// without any model arithmetic.
pub struct NullSource {
    pub n_samples: usize,
}

impl GradientSource for NullSource {
    fn n_samples(&self) -> usize {
        self.n_samples
    }

    fn gradient(&mut self, w: &WeightSet, _indices: &[usize]) -> Result<Gradient, RoleError> {
        Ok(Gradient::zeros_like(w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Scores weights on a held-out set.
pub trait Evaluator: Send {
    fn evaluate(&mut self, w: &WeightSet) -> Result<Evaluation, RoleError>;
}

pub struct HeldoutEvaluator {
    arch: Architecture,
    samples: Samples,
}

impl HeldoutEvaluator {
    pub fn new(arch: Architecture, samples: Samples) -> Result<Self, RoleError> {
        if samples.is_empty() {
            return Err(RoleError::Config("held-out set is empty".into()));
        }
        if samples.width != arch.input_width() || samples.n_classes != arch.n_classes() {
            return Err(RoleError::Config("held-out set does not match the architecture".into()));
        }
        Ok(Self { arch, samples })
    }
}

impl Evaluator for HeldoutEvaluator {
    fn evaluate(&mut self, w: &WeightSet) -> Result<Evaluation, RoleError> {
        let batch = self.samples.all();
        let (probs, _) = nn::forward(w, &self.arch, &batch)?;
        let loss = nn::loss(&probs, batch.labels())?;
        let correct = (0..batch.len())
            .filter(|&i| probs.argmax(i) == batch.labels()[i])
            .count();
        Ok(Evaluation {
            accuracy: correct as f64 / batch.len() as f64,
            loss,
        })
    }
}

/// Stand-in for validation when only timing matters.
pub struct NullEvaluator;

impl Evaluator for NullEvaluator {
    fn evaluate(&mut self, _w: &WeightSet) -> Result<Evaluation, RoleError> {
        Ok(Evaluation {
            accuracy: 0.0,
            loss: 0.0,
        })
    }
}

/// Every role of one run, ready to be driven.
pub struct RoleSet {
    pub master: Master,
    pub submasters: Vec<SubMaster>,
    pub workers: Vec<Worker>,
}

/// Builds the roles for `cfg`. `sources` must hold one entry per worker rank.
pub fn build_roles(
    cfg: &TrainConfig,
    mut sources: BTreeMap<Rank, Box<dyn GradientSource>>,
    evaluator: Box<dyn Evaluator>,
) -> Result<RoleSet, RoleError> {
    cfg.validate().map_err(|e| RoleError::Config(e.to_string()))?;
    let topo = cfg.topology();
    let initial = cfg.arch.init_weights(cfg.weight_seed);
    let elastic = cfg.elastic();
    let leaf = |rank: Rank, algorithm: Algorithm| MasterSettings {
        rank,
        algorithm,
        mode: cfg.mode,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        elastic,
        children: topo.children_of(rank),
    };

    let top = match &cfg.hierarchy {
        None => leaf(0, cfg.algorithm),
        Some(h) => MasterSettings {
            rank: 0,
            algorithm: Algorithm::Downpour,
            mode: SyncMode::Async,
            learning_rate: h.parent_learning_rate,
            momentum: h.parent_momentum,
            elastic,
            children: topo.children_of(0),
        },
    };
    let master = Master::new(MasterCore::new(top, initial.clone())?, cfg.validate_every, evaluator);

    let mut submasters = Vec::new();
    if let Some(h) = &cfg.hierarchy {
        for &sm in &topo.submasters {
            let core = MasterCore::new(leaf(sm, Algorithm::Downpour), initial.clone())?;
            submasters.push(SubMaster::new(core, 0, h.flush_every)?);
        }
    }

    let n = topo.workers.len() as u64;
    let mut workers = Vec::new();
    for (i, &(rank, parent)) in topo.workers.iter().enumerate() {
        let source = sources
            .remove(&rank)
            .ok_or_else(|| RoleError::Config(format!("no data for worker rank {rank}")))?;
        let sample_budget = cfg.sample_budget.map(|b| b / n + u64::from((i as u64) < b % n));
        let settings = WorkerSettings {
            rank,
            parent,
            algorithm: cfg.algorithm,
            learning_rate: cfg.learning_rate,
            elastic,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            sample_budget,
            shuffle: cfg.shuffle,
            epoch_seed: worker_epoch_seed(cfg.shuffle_seed, rank),
        };
        workers.push(Worker::new(settings, source)?);
    }
    Ok(RoleSet {
        master,
        submasters,
        workers,
    })
}
