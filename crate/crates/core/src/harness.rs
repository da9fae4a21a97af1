//! Runs and experiments: wires a config and a dataset to the roles over a
//! chosen backend, and collects the results.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{Algorithm, ConfigError, SyncMode, TrainConfig};
use crate::data::{shard_files, DataError, Dataset, DatasetSpec};
use crate::nn::WeightSet;
use crate::roles::{
    build_roles, run_master, run_submaster, run_worker, DelayInjector, Evaluator, GradientSource, HeldoutEvaluator,
    LogEvent, NullEvaluator, NullSource, RoleError, ShardModel, StalenessHistogram, ValidationRecord, WallLog,
};
use crate::simclock::{self, csv_err, CostModel, SimError, SimReport};
use crate::transport::{
    accept_children, establish, tcp_connect, Backend, Endpoint, SessionSpec, TransportError, DEFAULT_INBOX_CAPACITY,
};
use crate::Rank;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Role(#[from] RoleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Experiment(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunBackend {
    InProc,
    Tcp,
    Sim(CostModel),
}

impl RunBackend {
    pub fn name(&self) -> &'static str {
        match self {
            RunBackend::InProc => "inproc",
            RunBackend::Tcp => "tcp",
            RunBackend::Sim(_) => "sim",
        }
    }
}

/// What a run trains on. `Timing` carries only the shape of the data and
/// is accepted by the simulator alone, which then skips all model math.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    Data(&'a Dataset),
    Timing(&'a DatasetSpec),
}

impl DataSource<'_> {
    fn spec(&self) -> &DatasetSpec {
        match self {
            DataSource::Data(d) => &d.spec,
            DataSource::Timing(s) => s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    /// The config as run, in canonical text form.
    pub config: String,
    pub backend: &'static str,
    pub workers: usize,
    /// `None` for timing-only simulations.
    pub final_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub trajectory: Vec<ValidationRecord>,
    /// Wall seconds, or simulated time units.
    pub elapsed: f64,
    pub staleness: StalenessHistogram,
    pub messages_sent: BTreeMap<Rank, u64>,
    pub messages_received: BTreeMap<Rank, u64>,
    pub updates: u64,
    pub gradients_sent: u64,
    pub gradients_applied: u64,
    pub gradients_rejected: u64,
    pub samples_processed: u64,
    pub samples_accepted: u64,
    pub final_weights: WeightSet,
    pub log: Vec<LogEvent>,
}

/// One gradient source per worker rank, over that worker's file shard.
pub fn worker_sources(
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<BTreeMap<Rank, Box<dyn GradientSource>>, HarnessError> {
    let ranks = cfg.topology().worker_ranks();
    let shards = shard_files(data.spec.n_files, &ranks)?;
    let mut out = BTreeMap::new();
    for &r in &ranks {
        let samples = data.shard(shards.files_for(r));
        out.insert(r, Box::new(ShardModel::new(cfg.arch.clone(), samples)?) as Box<dyn GradientSource>);
    }
    Ok(out)
}

fn timing_sources(cfg: &TrainConfig, spec: &DatasetSpec) -> Result<BTreeMap<Rank, Box<dyn GradientSource>>, HarnessError> {
    let ranks = cfg.topology().worker_ranks();
    let shards = shard_files(spec.n_files, &ranks)?;
    Ok(ranks
        .iter()
        .map(|&r| {
            let n = shards.files_for(r).len() * spec.samples_per_file;
            (r, Box::new(NullSource { n_samples: n }) as Box<dyn GradientSource>)
        })
        .collect())
}

/// Trains `cfg` on `source` over `backend` and returns once every rank
/// has finished and the final validation is in.
pub fn run(cfg: &TrainConfig, source: DataSource<'_>, backend: &RunBackend) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    source.spec().validate()?;
    match (backend, source) {
        (RunBackend::Sim(cm), DataSource::Data(data)) => {
            let evaluator = Box::new(HeldoutEvaluator::new(cfg.arch.clone(), data.heldout.clone())?);
            let rep = simclock::simulate(cfg, cm, worker_sources(cfg, data)?, evaluator)?;
            Ok(from_sim(cfg, rep, true))
        }
        (RunBackend::Sim(cm), DataSource::Timing(spec)) => {
            let rep = simclock::simulate(cfg, cm, timing_sources(cfg, spec)?, Box::new(NullEvaluator))?;
            Ok(from_sim(cfg, rep, false))
        }
        (RunBackend::InProc, DataSource::Data(data)) => run_threaded(cfg, data, Backend::InProc),
        (RunBackend::Tcp, DataSource::Data(data)) => run_threaded(cfg, data, Backend::Tcp),
        (_, DataSource::Timing(_)) => Err(HarnessError::Experiment(
            "timing-only data can only be used with the sim backend".into(),
        )),
    }
}

fn from_sim(cfg: &TrainConfig, r: SimReport, faithful: bool) -> RunReport {
    let last = r.validations.last();
    RunReport {
        config: cfg.render(),
        backend: "sim",
        workers: r.workers,
        final_accuracy: last.filter(|_| faithful).map(|v| v.accuracy),
        final_loss: last.filter(|_| faithful).map(|v| v.loss),
        trajectory: r.validations,
        elapsed: r.makespan,
        staleness: r.staleness,
        messages_sent: r.messages_sent,
        messages_received: r.messages_received,
        updates: r.updates,
        gradients_sent: r.gradients_sent,
        gradients_applied: r.gradients_applied,
        gradients_rejected: r.gradients_rejected,
        samples_processed: r.samples_processed,
        samples_accepted: r.samples_accepted,
        final_weights: r.final_weights,
        log: r.log,
    }
}

fn counts(eps: &[&Endpoint]) -> (u64, u64) {
    eps.iter().fold((0, 0), |(s, r), ep| {
        (
            s + ep.sent_counts().values().sum::<u64>(),
            r + ep.received_counts().values().sum::<u64>(),
        )
    })
}

/// Keeps the most informative error: a peer loss is usually the echo of
/// a failure elsewhere.
fn root_cause(errors: Vec<RoleError>) -> RoleError {
    let secondary = |e: &RoleError| matches!(e, RoleError::PeerLost { .. } | RoleError::Transport { .. });
    let mut errors = errors;
    let i = errors.iter().position(|e| !secondary(e)).unwrap_or(0);
    errors.swap_remove(i)
}

fn run_threaded(cfg: &TrainConfig, data: &Dataset, backend: Backend) -> Result<RunReport, HarnessError> {
    let topo = cfg.topology();
    let evaluator = Box::new(HeldoutEvaluator::new(cfg.arch.clone(), data.heldout.clone())?);
    let roles = build_roles(cfg, worker_sources(cfg, data)?, evaluator)?;
    let mut links = establish(&SessionSpec::new(backend, cfg.wire, topo.nodes()))?;
    let mut take = |r: Rank| links.remove(&r).expect("every rank has links");

    let start = Instant::now();
    let mut master = roles.master;
    let mut master_ep = take(0).down.expect("rank 0 has children");
    let mut subs: Vec<_> = roles
        .submasters
        .into_iter()
        .map(|s| {
            let l = take(s.rank());
            (s, l.up.expect("sub-master has a parent"), l.down.expect("sub-master has children"))
        })
        .collect();
    let mut workers: Vec<_> = roles
        .workers
        .into_iter()
        .map(|w| {
            let ep = take(w.rank()).up.expect("worker has a parent");
            let delay = DelayInjector::new(cfg.delay_max_us, cfg.delay_seed, w.rank());
            (w, ep, delay)
        })
        .collect();

    let mut errors = Vec::new();
    let mut log = WallLog::new(start);
    let mut sub_logs = Vec::new();
    thread::scope(|s| {
        let mut handles = Vec::new();
        for (w, ep, delay) in workers.iter_mut() {
            let delay = delay.take();
            handles.push(s.spawn(move || run_worker(w, ep, delay)));
        }
        let mut sub_handles = Vec::new();
        for (sm, up, down) in subs.iter_mut() {
            sub_handles.push(s.spawn(move || {
                let mut l = WallLog::new(start);
                run_submaster(sm, up, down, &mut l).map(|_| l)
            }));
        }
        if let Err(e) = run_master(&mut master, &mut master_ep, &mut log) {
            errors.push(e);
        }
        for h in sub_handles {
            match h.join().expect("sub-master thread panicked") {
                Ok(l) => sub_logs.push(l),
                Err(e) => errors.push(e),
            }
        }
        for h in handles {
            if let Err(e) = h.join().expect("worker thread panicked") {
                errors.push(e);
            }
        }
    });
    let elapsed = start.elapsed().as_secs_f64();
    if !errors.is_empty() {
        return Err(root_cause(errors).into());
    }

    let mut sent = BTreeMap::new();
    let mut received = BTreeMap::new();
    let (s0, r0) = counts(&[&master_ep]);
    sent.insert(0, s0);
    received.insert(0, r0);
    let mut staleness = StalenessHistogram::default();
    let (mut g_sent, mut g_applied, mut g_rejected, mut processed) = (0, 0, 0, 0);
    let core = master.core();
    g_applied += core.gradients_received() - core.rejected();
    g_rejected += core.rejected();
    if subs.is_empty() {
        staleness.merge(core.staleness());
    }
    for (sm, up, down) in &subs {
        let (s, r) = counts(&[up, down]);
        sent.insert(sm.rank(), s);
        received.insert(sm.rank(), r);
        let c = sm.core();
        g_sent += sm.flushes();
        g_applied += c.gradients_received() - c.rejected();
        g_rejected += c.rejected();
        staleness.merge(c.staleness());
    }
    for (w, ep, _) in &workers {
        let (s, r) = counts(&[ep]);
        sent.insert(w.rank(), s);
        received.insert(w.rank(), r);
        g_sent += w.messages_sent();
        processed += w.samples_processed();
    }
    let mut events = log.events;
    for l in sub_logs {
        events.extend(l.events);
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));

    let last = master.validations().last().cloned();
    Ok(RunReport {
        config: cfg.render(),
        backend: match backend {
            Backend::InProc => "inproc",
            Backend::Tcp => "tcp",
        },
        workers: workers.len(),
        final_accuracy: last.as_ref().map(|v| v.accuracy),
        final_loss: last.as_ref().map(|v| v.loss),
        trajectory: master.validations().to_vec(),
        elapsed,
        staleness,
        messages_sent: sent,
        messages_received: received,
        updates: core.updates(),
        gradients_sent: g_sent,
        gradients_applied: g_applied,
        gradients_rejected: g_rejected,
        samples_processed: processed,
        samples_accepted: core.samples_accepted(),
        final_weights: core.weights().clone(),
        log: events,
    })
}

/// Runs one rank of a TCP session in this process. `peers[r]` is the
/// address rank `r` listens on (only ranks with children listen). Returns
/// a report on rank 0 and `None` elsewhere.
pub fn run_node(
    cfg: &TrainConfig,
    data: &Dataset,
    rank: Rank,
    peers: &[SocketAddr],
    timeout: Duration,
) -> Result<Option<RunReport>, HarnessError> {
    cfg.validate()?;
    let topo = cfg.topology();
    let addr = |r: Rank| {
        peers
            .get(r as usize)
            .copied()
            .ok_or_else(|| HarnessError::Experiment(format!("no address for rank {r} in the peer list")))
    };
    let worker_ranks = topo.worker_ranks();
    let shards = shard_files(data.spec.n_files, &worker_ranks)?;
    // only this rank's shard is materialised
    let mut sources = BTreeMap::new();
    for &r in &worker_ranks {
        let src: Box<dyn GradientSource> = if r == rank {
            Box::new(ShardModel::new(cfg.arch.clone(), data.shard(shards.files_for(r)))?)
        } else {
            Box::new(NullSource {
                n_samples: shards.files_for(r).len() * data.spec.samples_per_file,
            })
        };
        sources.insert(r, src);
    }
    let evaluator: Box<dyn Evaluator> = if rank == 0 {
        Box::new(HeldoutEvaluator::new(cfg.arch.clone(), data.heldout.clone())?)
    } else {
        Box::new(NullEvaluator)
    };
    let roles = build_roles(cfg, sources, evaluator)?;
    let children = topo.children_of(rank);
    let listener = if children.is_empty() {
        None
    } else {
        Some(TcpListener::bind(addr(rank)?)?)
    };
    let start = Instant::now();
    let mut log = WallLog::new(start);

    if rank == 0 {
        let listener = listener.expect("rank 0 has children");
        let mut ep = accept_children(0, listener, &children, cfg.wire, DEFAULT_INBOX_CAPACITY, timeout)?;
        let mut master = roles.master;
        run_master(&mut master, &mut ep, &mut log)?;
        let last = master.validations().last().cloned();
        let core = master.core();
        let (s, r) = counts(&[&ep]);
        return Ok(Some(RunReport {
            config: cfg.render(),
            backend: "tcp",
            workers: worker_ranks.len(),
            final_accuracy: last.as_ref().map(|v| v.accuracy),
            final_loss: last.as_ref().map(|v| v.loss),
            trajectory: master.validations().to_vec(),
            elapsed: start.elapsed().as_secs_f64(),
            staleness: core.staleness().clone(),
            messages_sent: BTreeMap::from([(0, s)]),
            messages_received: BTreeMap::from([(0, r)]),
            updates: core.updates(),
            gradients_sent: 0,
            gradients_applied: core.gradients_received() - core.rejected(),
            gradients_rejected: core.rejected(),
            samples_processed: 0,
            samples_accepted: core.samples_accepted(),
            final_weights: core.weights().clone(),
            log: log.events,
        }));
    }

    if let Some(mut sm) = roles.submasters.into_iter().find(|s| s.rank() == rank) {
        let mut up = tcp_connect(rank, sm.parent(), addr(sm.parent())?, cfg.wire, DEFAULT_INBOX_CAPACITY, timeout)?;
        let listener = listener.expect("sub-master has children");
        let mut down = accept_children(rank, listener, &children, cfg.wire, DEFAULT_INBOX_CAPACITY, timeout)?;
        run_submaster(&mut sm, &mut up, &mut down, &mut log)?;
        return Ok(None);
    }
    let Some(mut w) = roles.workers.into_iter().find(|w| w.rank() == rank) else {
        return Err(HarnessError::Experiment(format!("rank {rank} is not part of this topology")));
    };
    let mut ep = tcp_connect(rank, w.parent(), addr(w.parent())?, cfg.wire, DEFAULT_INBOX_CAPACITY, timeout)?;
    run_worker(&mut w, &mut ep, DelayInjector::new(cfg.delay_max_us, cfg.delay_seed, rank))?;
    Ok(None)
}

fn flat_workers(base: &TrainConfig, workers: usize) -> Result<TrainConfig, HarnessError> {
    if base.hierarchy.is_some() {
        return Err(HarnessError::Experiment("worker sweeps need a flat topology".into()));
    }
    Ok(TrainConfig {
        workers,
        ..base.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupPoint {
    pub workers: usize,
    pub elapsed: f64,
    pub speedup: f64,
    pub final_accuracy: Option<f64>,
}

pub const SPEEDUP_HEADER: [&str; 4] = ["workers", "elapsed", "speedup", "final_accuracy"];

/// One run per worker count; `speedup = elapsed(1) / elapsed(W)`.
pub fn experiment_speedup(
    base: &TrainConfig,
    workers: &[usize],
    source: DataSource<'_>,
    backend: &RunBackend,
) -> Result<Vec<SpeedupPoint>, HarnessError> {
    if !workers.contains(&1) {
        return Err(HarnessError::Experiment("the worker list must include 1 as the baseline".into()));
    }
    let mut runs = Vec::new();
    for &w in workers {
        let r = run(&flat_workers(base, w)?, source, backend)?;
        runs.push((w, r.elapsed, r.final_accuracy));
    }
    let t1 = runs.iter().find(|(w, ..)| *w == 1).expect("baseline present").1;
    Ok(runs
        .into_iter()
        .map(|(w, t, acc)| SpeedupPoint {
            workers: w,
            elapsed: t,
            speedup: t1 / t,
            final_accuracy: acc,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StalenessPoint {
    pub workers: usize,
    pub momentum: f64,
    pub trial: u64,
    pub final_accuracy: f64,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    pub histogram: StalenessHistogram,
}

pub const STALENESS_HEADER: [&str; 7] = [
    "workers",
    "momentum",
    "trial",
    "final_accuracy",
    "mean_staleness",
    "max_staleness",
    "histogram",
];

/// Async Downpour across worker counts and momenta. Trial `t` uses delay
/// seed `base.delay_seed + t`; everything else is held fixed.
pub fn experiment_staleness(
    base: &TrainConfig,
    workers: &[usize],
    momenta: &[f64],
    trials: u64,
    data: &Dataset,
    backend: &RunBackend,
) -> Result<Vec<StalenessPoint>, HarnessError> {
    if base.algorithm != Algorithm::Downpour || base.mode != SyncMode::Async {
        return Err(HarnessError::Experiment("the staleness experiment needs async downpour".into()));
    }
    if trials == 0 {
        return Err(HarnessError::Experiment("at least one trial is required".into()));
    }
    let mut out = Vec::new();
    for &w in workers {
        for &mu in momenta {
            for t in 0..trials {
                let cfg = TrainConfig {
                    momentum: mu,
                    delay_seed: base.delay_seed.wrapping_add(t),
                    ..flat_workers(base, w)?
                };
                let r = run(&cfg, DataSource::Data(data), backend)?;
                out.push(StalenessPoint {
                    workers: w,
                    momentum: mu,
                    trial: t,
                    final_accuracy: r.final_accuracy.unwrap_or(f64::NAN),
                    mean_staleness: r.staleness.mean(),
                    max_staleness: r.staleness.max(),
                    histogram: r.staleness,
                });
            }
        }
    }
    Ok(out)
}

/// Mean of `mean_staleness` over trials, per `(workers, momentum)`, in
/// first-seen order.
pub fn mean_staleness_by_workers(points: &[StalenessPoint]) -> Vec<(usize, f64, f64)> {
    let mut keys: Vec<(usize, u64)> = Vec::new();
    let mut sums: BTreeMap<(usize, u64), (f64, usize)> = BTreeMap::new();
    for p in points {
        let k = (p.workers, p.momentum.to_bits());
        if !sums.contains_key(&k) {
            keys.push(k);
        }
        let e = sums.entry(k).or_default();
        e.0 += p.mean_staleness;
        e.1 += 1;
    }
    keys.into_iter()
        .map(|k| {
            let (s, n) = sums[&k];
            (k.0, f64::from_bits(k.1), s / n as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPoint {
    pub batch_size: usize,
    pub speedup: f64,
    pub relative_speedup: f64,
}

pub const BATCH_HEADER: [&str; 3] = ["batch_size", "speedup", "relative_speedup"];
pub const REFERENCE_BATCH: usize = 100;

/// Simulated speedup at `workers` for each batch size, normalized to the
/// speedup at batch size 100. Total samples stay fixed.
pub fn experiment_batchsize(
    base: &TrainConfig,
    batches: &[usize],
    workers: usize,
    spec: &DatasetSpec,
    cm: &CostModel,
) -> Result<Vec<BatchPoint>, HarnessError> {
    if !batches.contains(&REFERENCE_BATCH) {
        return Err(HarnessError::Experiment(format!(
            "the batch list must include the reference batch size {REFERENCE_BATCH}"
        )));
    }
    let backend = RunBackend::Sim(*cm);
    let mut speedups = Vec::new();
    for &b in batches {
        let cfg = TrainConfig {
            batch_size: b,
            ..base.clone()
        };
        let pts = experiment_speedup(&cfg, &[1, workers], DataSource::Timing(spec), &backend)?;
        speedups.push((b, pts.last().expect("two points").speedup));
    }
    let reference = speedups.iter().find(|(b, _)| *b == REFERENCE_BATCH).expect("reference present").1;
    Ok(speedups
        .into_iter()
        .map(|(b, s)| BatchPoint {
            batch_size: b,
            speedup: s,
            relative_speedup: s / reference,
        })
        .collect())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_speedup_csv<W: Write>(points: &[SpeedupPoint], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPEEDUP_HEADER).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.workers.to_string(),
            p.elapsed.to_string(),
            p.speedup.to_string(),
            opt(p.final_accuracy),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

pub fn write_staleness_csv<W: Write>(points: &[StalenessPoint], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STALENESS_HEADER).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.workers.to_string(),
            p.momentum.to_string(),
            p.trial.to_string(),
            p.final_accuracy.to_string(),
            p.mean_staleness.to_string(),
            p.max_staleness.to_string(),
            p.histogram.compact(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

pub fn write_batch_csv<W: Write>(points: &[BatchPoint], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BATCH_HEADER).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.batch_size.to_string(),
            p.speedup.to_string(),
            p.relative_speedup.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

pub const TRAJECTORY_HEADER: [&str; 6] = ["version", "updates", "samples", "accuracy", "loss", "final"];

pub fn write_trajectory_csv<W: Write>(points: &[ValidationRecord], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.version.to_string(),
            p.updates.to_string(),
            p.samples.to_string(),
            p.accuracy.to_string(),
            p.loss.to_string(),
            p.is_final.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

/// One JSON object per line.
pub fn write_run_log<W: Write>(events: &[LogEvent], mut out: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn render_dataset_spec(spec: &DatasetSpec) -> String {
    format!(
        "n_files = {}\nsamples_per_file = {}\nseq_len = {}\ninput_dim = {}\nn_classes = {}\nseed = {}\ndelta = {:?}\n",
        spec.n_files, spec.samples_per_file, spec.seq_len, spec.input_dim, spec.n_classes, spec.seed, spec.delta
    )
}

/// Writes `<stem>.csv` next to the exact inputs that produced it:
/// `<stem>.config`, plus `<stem>.data` and `<stem>.costmodel` when given.
pub fn write_bundle(
    dir: &Path,
    stem: &str,
    csv: &[u8],
    cfg: &TrainConfig,
    data: Option<&DatasetSpec>,
    cm: Option<&CostModel>,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |ext: &str, bytes: &[u8]| -> io::Result<()> {
        let p = dir.join(format!("{stem}.{ext}"));
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("csv", csv)?;
    put("config", cfg.render().as_bytes())?;
    if let Some(s) = data {
        put("data", render_dataset_spec(s).as_bytes())?;
    }
    if let Some(cm) = cm {
        put("costmodel", cm.render().as_bytes())?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            n_files: 4,
            samples_per_file: 40,
            seq_len: 1,
            input_dim: 4,
            n_classes: 3,
            seed: 11,
            delta: 4.0,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 10,
            epochs: 2,
            learning_rate: 0.1,
            arch: "dense:4:6:tanh,softmax:6:3".parse().unwrap(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn inproc_run_reports_and_accounts() {
        let data = Dataset::generate(&tiny_spec()).unwrap();
        let cfg = TrainConfig { workers: 2, ..tiny_cfg() };
        let r = run(&cfg, DataSource::Data(&data), &RunBackend::InProc).unwrap();
        assert_eq!(r.config, cfg.render());
        assert_eq!(r.workers, 2);
        assert_eq!(r.samples_processed, 4 * 40 * 2);
        assert_eq!(r.samples_accepted, r.samples_processed);
        assert_eq!(r.gradients_sent, r.gradients_applied + r.gradients_rejected);
        assert_eq!(
            r.messages_sent.values().sum::<u64>(),
            r.messages_received.values().sum::<u64>()
        );
        assert!(r.final_accuracy.is_some());
        assert!(r.log.iter().any(|e| e.event == "final"));
    }

    #[test]
    fn timing_data_needs_the_simulator() {
        let spec = tiny_spec();
        assert!(run(&tiny_cfg(), DataSource::Timing(&spec), &RunBackend::InProc).is_err());
        let r = run(&tiny_cfg(), DataSource::Timing(&spec), &RunBackend::Sim(CostModel::default())).unwrap();
        assert_eq!(r.final_accuracy, None);
    }

    #[test]
    fn speedup_needs_a_baseline() {
        let spec = tiny_spec();
        let e = experiment_speedup(&tiny_cfg(), &[2, 4], DataSource::Timing(&spec), &RunBackend::Sim(CostModel::default()));
        assert!(matches!(e, Err(HarnessError::Experiment(_))));
    }

    #[test]
    fn batch_sweep_without_master_cost_ties() {
        let spec = tiny_spec();
        let cm = CostModel::new(1.0, 0.0, 0.0, 0.0).unwrap();
        let pts = experiment_batchsize(&tiny_cfg(), &[10, 20, 40, 100], 4, &spec, &cm).unwrap();
        assert!(pts.iter().all(|p| p.relative_speedup == 1.0), "{pts:?}");
        assert!(experiment_batchsize(&tiny_cfg(), &[10, 20], 4, &spec, &cm).is_err());
    }

    #[test]
    fn staleness_needs_async_downpour() {
        let data = Dataset::generate(&tiny_spec()).unwrap();
        let cfg = TrainConfig { mode: SyncMode::Sync, ..tiny_cfg() };
        assert!(experiment_staleness(&cfg, &[1], &[0.0], 1, &data, &RunBackend::InProc).is_err());
    }

    #[test]
    fn staleness_points_record_momentum() {
        let data = Dataset::generate(&tiny_spec()).unwrap();
        let pts = experiment_staleness(&tiny_cfg(), &[1, 2], &[0.0, 0.9], 2, &data, &RunBackend::InProc).unwrap();
        assert_eq!(pts.len(), 8);
        assert!(pts.iter().filter(|p| p.workers == 1).all(|p| p.histogram.is_all_zero()));
        assert!(pts.iter().any(|p| p.momentum == 0.9));
        let means = mean_staleness_by_workers(&pts);
        assert_eq!(means.len(), 4);
        assert_eq!((means[1].0, means[1].1), (1, 0.9));
    }

    #[test]
    fn bundle_writes_inputs_beside_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = Vec::new();
        write_batch_csv(
            &[BatchPoint {
                batch_size: 100,
                speedup: 2.0,
                relative_speedup: 1.0,
            }],
            &mut csv,
        )
        .unwrap();
        let files = write_bundle(dir.path(), "b", &csv, &tiny_cfg(), Some(&tiny_spec()), Some(&CostModel::default())).unwrap();
        assert_eq!(files.len(), 4);
        let text = fs::read_to_string(dir.path().join("b.config")).unwrap();
        assert_eq!(TrainConfig::parse(&text).unwrap(), tiny_cfg());
        assert_eq!(fs::read(dir.path().join("b.csv")).unwrap(), b"batch_size,speedup,relative_speedup\n100,2,1\n");
    }

    #[test]
    fn run_log_is_json_lines() {
        let mut ev = LogEvent::new("update", 3, 7);
        ev.staleness = Some(2);
        let mut buf = Vec::new();
        write_run_log(&[ev.clone(), ev], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["event"], "update");
        assert_eq!(v["staleness"], 2);
        assert!(v.get("loss").is_none());
    }
}
