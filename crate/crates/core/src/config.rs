//! Training run configuration and its flat `key = value` text form.
//!
//! Grammar: one `key = value` per line; `#` starts a comment; blank lines
//! are ignored; unknown keys are errors. Keys and defaults are listed in
//! `docs/config.md`. [`TrainConfig::render`] produces the canonical text,
//! which parses back to an equal config.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::nn::Architecture;
use crate::optim::{ElasticConfig, OptimState};
use crate::proto::WirePrecision;
use crate::transport::NodeSpec;
use crate::Rank;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Downpour,
    Easgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncMode {
    Async,
    Sync,
}

/// Sub-master tier: `groups` sub-masters each serving `workers_per_group`
/// workers and flushing to rank 0 every `flush_every` accepted updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hierarchy {
    pub groups: usize,
    pub workers_per_group: usize,
    pub flush_every: u64,
    pub parent_learning_rate: f64,
    pub parent_momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub mode: SyncMode,
    /// Worker count for flat runs; ignored when `hierarchy` is set.
    pub workers: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Passes over each worker's shard.
    pub epochs: u64,
    /// When set, overrides `epochs`: the run processes this many samples
    /// in total, split evenly across workers.
    pub sample_budget: Option<u64>,
    /// Validate every V master updates; 0 keeps only the final validation.
    pub validate_every: u64,
    pub elastic_alpha: f64,
    pub elastic_tau: u64,
    pub hierarchy: Option<Hierarchy>,
    pub weight_seed: u64,
    pub shuffle_seed: u64,
    pub shuffle: bool,
    pub wire: WirePrecision,
    pub arch: Architecture,
    /// Upper bound of a random pause a worker takes before each send.
    pub delay_max_us: u64,
    pub delay_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Downpour,
            mode: SyncMode::Async,
            workers: 1,
            batch_size: 100,
            learning_rate: 0.05,
            momentum: 0.0,
            epochs: 10,
            sample_budget: None,
            validate_every: 0,
            elastic_alpha: 0.1,
            elastic_tau: 4,
            hierarchy: None,
            weight_seed: 1,
            shuffle_seed: 2,
            shuffle: true,
            wire: WirePrecision::F32,
            arch: Architecture::benchmark(),
            delay_max_us: 0,
            delay_seed: 3,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        reason: e.to_string(),
    })
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::Value {
            key: key.into(),
            reason: reason.into(),
        };
        match key {
            "algorithm" => {
                self.algorithm = match v {
                    "downpour" => Algorithm::Downpour,
                    "easgd" => Algorithm::Easgd,
                    _ => return Err(bad("expected downpour or easgd")),
                }
            }
            "mode" => {
                self.mode = match v {
                    "async" => SyncMode::Async,
                    "sync" => SyncMode::Sync,
                    _ => return Err(bad("expected async or sync")),
                }
            }
            "workers" => self.workers = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "sample_budget" => {
                self.sample_budget = match v {
                    "none" | "" => None,
                    n => Some(parse_num(key, n)?),
                }
            }
            "validate_every" => self.validate_every = parse_num(key, v)?,
            "elastic_alpha" => self.elastic_alpha = parse_num(key, v)?,
            "elastic_tau" => self.elastic_tau = parse_num(key, v)?,
            "groups" | "workers_per_group" | "flush_every" | "parent_learning_rate" | "parent_momentum" => {
                let h = self.hierarchy.get_or_insert(Hierarchy {
                    groups: 0,
                    workers_per_group: 1,
                    flush_every: 1,
                    parent_learning_rate: 1.0,
                    parent_momentum: 0.0,
                });
                match key {
                    "groups" => h.groups = parse_num(key, v)?,
                    "workers_per_group" => h.workers_per_group = parse_num(key, v)?,
                    "flush_every" => h.flush_every = parse_num(key, v)?,
                    "parent_learning_rate" => h.parent_learning_rate = parse_num(key, v)?,
                    _ => h.parent_momentum = parse_num(key, v)?,
                }
            }
            "weight_seed" => self.weight_seed = parse_num(key, v)?,
            "shuffle_seed" => self.shuffle_seed = parse_num(key, v)?,
            "shuffle" => self.shuffle = parse_num(key, v)?,
            "wire" => {
                self.wire = match v {
                    "f32" => WirePrecision::F32,
                    "f64" => WirePrecision::F64,
                    _ => return Err(bad("expected f32 or f64")),
                }
            }
            "arch" => self.arch = v.parse().map_err(|e: crate::nn::NnError| bad(&e.to_string()))?,
            "delay_max_us" => self.delay_max_us = parse_num(key, v)?,
            "delay_seed" => self.delay_seed = parse_num(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Canonical text form; every key is written.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("algorithm", match self.algorithm {
            Algorithm::Downpour => "downpour".into(),
            Algorithm::Easgd => "easgd".into(),
        });
        kv("mode", match self.mode {
            SyncMode::Async => "async".into(),
            SyncMode::Sync => "sync".into(),
        });
        kv("workers", self.workers.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", fmt_f64(self.learning_rate));
        kv("momentum", fmt_f64(self.momentum));
        kv("epochs", self.epochs.to_string());
        kv("sample_budget", self.sample_budget.map_or("none".into(), |b| b.to_string()));
        kv("validate_every", self.validate_every.to_string());
        kv("elastic_alpha", fmt_f64(self.elastic_alpha));
        kv("elastic_tau", self.elastic_tau.to_string());
        if let Some(h) = &self.hierarchy {
            kv("groups", h.groups.to_string());
            kv("workers_per_group", h.workers_per_group.to_string());
            kv("flush_every", h.flush_every.to_string());
            kv("parent_learning_rate", fmt_f64(h.parent_learning_rate));
            kv("parent_momentum", fmt_f64(h.parent_momentum));
        }
        kv("weight_seed", self.weight_seed.to_string());
        kv("shuffle_seed", self.shuffle_seed.to_string());
        kv("shuffle", self.shuffle.to_string());
        kv("wire", match self.wire {
            WirePrecision::F32 => "f32".into(),
            WirePrecision::F64 => "f64".into(),
        });
        kv("arch", self.arch.to_string());
        kv("delay_max_us", self.delay_max_us.to_string());
        kv("delay_seed", self.delay_seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1".into());
        }
        if self.epochs == 0 && self.sample_budget.is_none() {
            return invalid("epochs must be at least 1".into());
        }
        if self.sample_budget == Some(0) {
            return invalid("sample_budget must be at least 1".into());
        }
        OptimState::new(self.learning_rate, self.momentum, &[]).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        ElasticConfig::new(self.elastic_alpha, self.elastic_tau).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match &self.hierarchy {
            None if self.workers == 0 => return invalid("at least one worker is required".into()),
            None => {}
            Some(h) => {
                if h.groups == 0 || h.workers_per_group == 0 {
                    return invalid("hierarchy needs at least one group of one worker".into());
                }
                if h.flush_every == 0 {
                    return invalid("flush_every must be at least 1".into());
                }
                if self.algorithm != Algorithm::Downpour {
                    return invalid("hierarchical runs support the downpour algorithm only".into());
                }
                OptimState::new(h.parent_learning_rate, h.parent_momentum, &[])
                    .map_err(|e| ConfigError::Invalid(format!("parent optimizer: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn elastic(&self) -> ElasticConfig {
        ElasticConfig::new(self.elastic_alpha, self.elastic_tau).expect("validated elastic config")
    }

    pub fn topology(&self) -> Topology {
        Topology::from_config(self)
    }
}

/// Rank layout of a run: 0 is the top master, then sub-masters (if any),
/// then workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub submasters: Vec<Rank>,
    /// `(worker rank, parent rank)` in rank order.
    pub workers: Vec<(Rank, Rank)>,
}

impl Topology {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        match &cfg.hierarchy {
            None => Self {
                submasters: vec![],
                workers: (1..=cfg.workers as Rank).map(|r| (r, 0)).collect(),
            },
            Some(h) => {
                let g = h.groups as Rank;
                let submasters: Vec<Rank> = (1..=g).collect();
                let mut workers = Vec::new();
                let mut next = g + 1;
                for &sm in &submasters {
                    for _ in 0..h.workers_per_group {
                        workers.push((next, sm));
                        next += 1;
                    }
                }
                Self { submasters, workers }
            }
        }
    }

    pub fn worker_ranks(&self) -> Vec<Rank> {
        self.workers.iter().map(|&(r, _)| r).collect()
    }

    pub fn children_of(&self, rank: Rank) -> Vec<Rank> {
        if rank == 0 && !self.submasters.is_empty() {
            return self.submasters.clone();
        }
        self.workers.iter().filter(|&&(_, p)| p == rank).map(|&(r, _)| r).collect()
    }

    pub fn nodes(&self) -> Vec<NodeSpec> {
        let mut nodes = vec![NodeSpec { rank: 0, parent: None }];
        nodes.extend(self.submasters.iter().map(|&r| NodeSpec { rank: r, parent: Some(0) }));
        nodes.extend(self.workers.iter().map(|&(r, p)| NodeSpec { rank: r, parent: Some(p) }));
        nodes
    }
}
