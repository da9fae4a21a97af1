//! Discrete-event execution of a run under a parametric cost model.
//!
//! The real role state machines run unchanged; only time is modeled.
//! Every node is a serial resource: a message waits until the node is
//! free, handling it costs
//!
//! * worker: `samples · c_s` for the batches computed before its next send,
//! * master or sub-master: `updates · u + validations · v`,
//!
//! and each outgoing message lands after that cost plus its link latency.
//! GRADIENT and WEIGHTS cost `L`; the handshake reply and control
//! messages (HELLO, DONE, SHUTDOWN) are free. With one worker and `N`
//! batches the makespan is therefore `N·(B·c_s + 2L + u) + validations·v`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::io::Write;

use thiserror::Error;

use crate::config::TrainConfig;
use crate::data::{shard_files, DataError, DatasetSpec};
use crate::nn::WeightSet;
use crate::proto::Message;
use crate::roles::{
    build_roles, Evaluator, GradientSource, LogEvent, Master, NullEvaluator, NullSource, RoleError, StalenessHistogram,
    SubMaster, ValidationRecord, Worker, WorkerEvent,
};
use crate::Rank;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid cost model: {0}")]
    CostModel(String),
    #[error("a run needs at least one worker")]
    ZeroWorkers,
    #[error("speedup table needs a one-worker baseline")]
    MissingBaseline,
    #[error("simulation stalled at t={time} with unfinished ranks {pending:?}")]
    Stalled { time: f64, pending: Vec<Rank> },
    #[error(transparent)]
    Role(#[from] RoleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Time charged for each kind of work, in arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub compute_per_sample: f64,
    pub master_update_cost: f64,
    pub link_latency: f64,
    pub validation_cost: f64,
}

impl Default for CostModel {
    /// `c_s = 1`, `u = 100/30`, no latency, free validation: a batch of
    /// 100 costs thirty master updates.
    fn default() -> Self {
        Self {
            compute_per_sample: 1.0,
            master_update_cost: 100.0 / 30.0,
            link_latency: 0.0,
            validation_cost: 0.0,
        }
    }
}

impl CostModel {
    pub fn new(c_s: f64, u: f64, l: f64, v: f64) -> Result<Self, SimError> {
        let cm = Self {
            compute_per_sample: c_s,
            master_update_cost: u,
            link_latency: l,
            validation_cost: v,
        };
        cm.validate()?;
        Ok(cm)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("compute_per_sample", self.compute_per_sample),
            ("master_update_cost", self.master_update_cost),
            ("link_latency", self.link_latency),
            ("validation_cost", self.validation_cost),
        ];
        for (k, x) in fields {
            if !x.is_finite() || x < 0.0 {
                return Err(SimError::CostModel(format!("{k} must be finite and non-negative, got {x}")));
            }
        }
        if self.compute_per_sample == 0.0 {
            return Err(SimError::CostModel("compute_per_sample must be positive".into()));
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment. Missing keys keep
    /// their default.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut cm = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SimError::CostModel(format!("line {}: expected key = value", i + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| SimError::CostModel(format!("line {}: `{}` is not a number", i + 1, v.trim())))?;
            match k.trim() {
                "compute_per_sample" => cm.compute_per_sample = v,
                "master_update_cost" => cm.master_update_cost = v,
                "link_latency" => cm.link_latency = v,
                "validation_cost" => cm.validation_cost = v,
                other => return Err(SimError::CostModel(format!("line {}: unknown key `{other}`", i + 1))),
            }
        }
        cm.validate()?;
        Ok(cm)
    }

    pub fn render(&self) -> String {
        format!(
            "compute_per_sample = {:?}\nmaster_update_cost = {:?}\nlink_latency = {:?}\nvalidation_cost = {:?}\n",
            self.compute_per_sample, self.master_update_cost, self.link_latency, self.validation_cost
        )
    }
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub workers: usize,
    pub makespan: f64,
    /// Busy fraction of each worker over the makespan.
    pub worker_utilization: BTreeMap<Rank, f64>,
    pub master_busy_fraction: f64,
    /// Staleness seen by the masters that serve workers.
    pub staleness: StalenessHistogram,
    pub events: u64,
    /// GRADIENT messages sent by workers and sub-masters.
    pub gradients_sent: u64,
    pub gradients_applied: u64,
    pub gradients_rejected: u64,
    /// Updates applied by rank 0.
    pub updates: u64,
    pub validations: Vec<ValidationRecord>,
    /// Sum of all worker compute time.
    pub total_compute: f64,
    pub samples_processed: u64,
    pub samples_accepted: u64,
    pub messages_sent: BTreeMap<Rank, u64>,
    pub messages_received: BTreeMap<Rank, u64>,
    pub final_weights: WeightSet,
    pub log: Vec<LogEvent>,
}

impl SimReport {
    /// `max(total_compute / W, updates·u + validations·v)`; no schedule can
    /// finish sooner.
    pub fn lower_bound(&self, cm: &CostModel) -> f64 {
        let compute = self.total_compute / self.workers as f64;
        let serial = self.updates as f64 * cm.master_update_cost + self.validations.len() as f64 * cm.validation_cost;
        compute.max(serial)
    }
}

enum Node {
    Master(Master),
    Sub(SubMaster),
    Worker(Worker),
}

struct NodeState {
    node: Node,
    queue: VecDeque<(Rank, Message)>,
    busy_until: f64,
    busy_time: f64,
    scheduled: bool,
    sent: u64,
    received: u64,
}

enum Kind {
    Deliver { to: Rank, from: Rank, msg: Message },
    Process { rank: Rank },
}

struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

struct Engine {
    cm: CostModel,
    nodes: BTreeMap<Rank, NodeState>,
    heap: BinaryHeap<Event>,
    seq: u64,
    greeted: BTreeSet<Rank>,
    log: Vec<LogEvent>,
    makespan: f64,
    events: u64,
}

impl Engine {
    fn push(&mut self, time: f64, kind: Kind) {
        self.seq += 1;
        self.heap.push(Event { time, seq: self.seq, kind });
    }

    fn latency(&mut self, to: Rank, msg: &Message) -> f64 {
        match msg {
            Message::Weights(_) if self.greeted.insert(to) => 0.0,
            Message::Weights(_) | Message::Gradient { .. } => self.cm.link_latency,
            _ => 0.0,
        }
    }

    fn deliver(&mut self, now: f64, to: Rank, from: Rank, msg: Message) {
        let st = self.nodes.get_mut(&to).expect("message to a known rank");
        st.queue.push_back((from, msg));
        st.received += 1;
        if !st.scheduled {
            st.scheduled = true;
            let at = now.max(st.busy_until);
            self.push(at, Kind::Process { rank: to });
        }
    }

    fn process(&mut self, now: f64, rank: Rank) -> Result<(), SimError> {
        let cm = self.cm;
        let st = self.nodes.get_mut(&rank).expect("known rank");
        st.scheduled = false;
        let pick = match &st.node {
            Node::Sub(s) if s.awaiting_parent() => st.queue.iter().position(|(f, _)| *f == s.parent()),
            _ => (!st.queue.is_empty()).then_some(0),
        };
        let Some(i) = pick else { return Ok(()) };
        let (from, msg) = st.queue.remove(i).expect("picked index exists");

        let (sends, cost, events) = match &mut st.node {
            Node::Master(m) => {
                let step = m.handle(from, msg)?;
                let cost = f64::from(step.updates) * cm.master_update_cost
                    + f64::from(step.validations) * cm.validation_cost;
                (step.sends, cost, step.events)
            }
            Node::Sub(s) => {
                let step = s.handle(from, msg)?;
                (step.sends, f64::from(step.updates) * cm.master_update_cost, step.events)
            }
            Node::Worker(w) => match w.on_message(msg)? {
                WorkerEvent::Ready => {
                    let out = w.next_message()?;
                    (vec![(w.parent(), out.msg)], out.samples as f64 * cm.compute_per_sample, vec![])
                }
                WorkerEvent::Finished => (vec![], 0.0, vec![]),
            },
        };
        let finish = now + cost;
        st.busy_until = finish;
        st.busy_time += cost;
        st.sent += sends.len() as u64;
        let more = !st.queue.is_empty();
        if more {
            st.scheduled = true;
        }
        self.makespan = self.makespan.max(finish);
        self.log.extend(events.into_iter().map(|mut e| {
            e.time = finish;
            e
        }));
        for (to, m) in sends {
            let at = finish + self.latency(to, &m);
            self.push(at, Kind::Deliver { to, from: rank, msg: m });
        }
        if more {
            self.push(finish, Kind::Process { rank });
        }
        Ok(())
    }
}

/// Runs `cfg` under `cm` with the given gradient sources (one per worker
/// rank) and evaluator.
pub fn simulate(
    cfg: &TrainConfig,
    cm: &CostModel,
    sources: BTreeMap<Rank, Box<dyn GradientSource>>,
    evaluator: Box<dyn Evaluator>,
) -> Result<SimReport, SimError> {
    cm.validate()?;
    if cfg.hierarchy.is_none() && cfg.workers == 0 {
        return Err(SimError::ZeroWorkers);
    }
    let roles = build_roles(cfg, sources, evaluator)?;
    let n_workers = roles.workers.len();
    let mut engine = Engine {
        cm: *cm,
        nodes: BTreeMap::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        greeted: BTreeSet::new(),
        log: Vec::new(),
        makespan: 0.0,
        events: 0,
    };
    let state = |node| NodeState {
        node,
        queue: VecDeque::new(),
        busy_until: 0.0,
        busy_time: 0.0,
        scheduled: false,
        sent: 0,
        received: 0,
    };
    let mut hellos = Vec::new();
    for mut s in roles.submasters {
        hellos.push((s.rank(), s.parent(), s.hello()?));
        engine.nodes.insert(s.rank(), state(Node::Sub(s)));
    }
    for mut w in roles.workers {
        hellos.push((w.rank(), w.parent(), w.hello()?));
        engine.nodes.insert(w.rank(), state(Node::Worker(w)));
    }
    engine.nodes.insert(0, state(Node::Master(roles.master)));
    for (from, to, msg) in hellos {
        engine.nodes.get_mut(&from).expect("known rank").sent += 1;
        engine.push(0.0, Kind::Deliver { to, from, msg });
    }

    while let Some(ev) = engine.heap.pop() {
        engine.events += 1;
        match ev.kind {
            Kind::Deliver { to, from, msg } => engine.deliver(ev.time, to, from, msg),
            Kind::Process { rank } => engine.process(ev.time, rank)?,
        }
    }

    let pending: Vec<Rank> = engine
        .nodes
        .iter()
        .filter(|(_, st)| match &st.node {
            Node::Master(m) => !m.is_finished(),
            Node::Sub(s) => !s.is_finished(),
            Node::Worker(w) => !w.is_finished(),
        })
        .map(|(&r, _)| r)
        .collect();
    if !pending.is_empty() {
        return Err(SimError::Stalled {
            time: engine.makespan,
            pending,
        });
    }

    let makespan = engine.makespan;
    let frac = |busy: f64| if makespan > 0.0 { busy / makespan } else { 0.0 };
    let mut report = SimReport {
        workers: n_workers,
        makespan,
        worker_utilization: BTreeMap::new(),
        master_busy_fraction: 0.0,
        staleness: StalenessHistogram::default(),
        events: engine.events,
        gradients_sent: 0,
        gradients_applied: 0,
        gradients_rejected: 0,
        updates: 0,
        validations: Vec::new(),
        total_compute: 0.0,
        samples_processed: 0,
        samples_accepted: 0,
        messages_sent: BTreeMap::new(),
        messages_received: BTreeMap::new(),
        final_weights: WeightSet::default(),
        log: engine.log,
    };
    let hierarchical = cfg.hierarchy.is_some();
    for (rank, st) in engine.nodes {
        report.messages_sent.insert(rank, st.sent);
        report.messages_received.insert(rank, st.received);
        match st.node {
            Node::Master(m) => {
                let c = m.core();
                report.master_busy_fraction = frac(st.busy_time);
                report.gradients_applied += c.gradients_received() - c.rejected();
                report.gradients_rejected += c.rejected();
                report.updates = c.updates();
                report.samples_accepted = c.samples_accepted();
                if !hierarchical {
                    report.staleness.merge(c.staleness());
                }
                report.validations = m.validations().to_vec();
                report.final_weights = c.weights().clone();
            }
            Node::Sub(s) => {
                let c = s.core();
                report.gradients_sent += s.flushes();
                report.gradients_applied += c.gradients_received() - c.rejected();
                report.gradients_rejected += c.rejected();
                report.staleness.merge(c.staleness());
            }
            Node::Worker(w) => {
                report.worker_utilization.insert(rank, frac(st.busy_time));
                report.total_compute += st.busy_time;
                report.gradients_sent += w.messages_sent();
                report.samples_processed += w.samples_processed();
            }
        }
    }
    Ok(report)
}

/// Timing-only simulation: zero gradients, no validation arithmetic.
/// Each worker's shard size follows the file sharding of `spec`.
pub fn simulate_run(cfg: &TrainConfig, spec: &DatasetSpec, cm: &CostModel, workers: usize) -> Result<SimReport, SimError> {
    if workers == 0 && cfg.hierarchy.is_none() {
        return Err(SimError::ZeroWorkers);
    }
    let mut cfg = cfg.clone();
    if cfg.hierarchy.is_none() {
        cfg.workers = workers;
    }
    let ranks = cfg.topology().worker_ranks();
    let shards = shard_files(spec.n_files, &ranks)?;
    let sources = ranks
        .iter()
        .map(|&r| {
            let n = shards.files_for(r).len() * spec.samples_per_file;
            (r, Box::new(NullSource { n_samples: n }) as Box<dyn GradientSource>)
        })
        .collect();
    simulate(&cfg, cm, sources, Box::new(NullEvaluator))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupRow {
    pub workers: usize,
    pub makespan: f64,
    pub speedup: f64,
}

/// `S(W) = T₁ / T_W` for every report, in the order given.
pub fn speedup_table(reports: &[SimReport]) -> Result<Vec<SpeedupRow>, SimError> {
    let t1 = reports
        .iter()
        .find(|r| r.workers == 1)
        .ok_or(SimError::MissingBaseline)?
        .makespan;
    Ok(reports
        .iter()
        .map(|r| SpeedupRow {
            workers: r.workers,
            makespan: r.makespan,
            speedup: t1 / r.makespan,
        })
        .collect())
}

pub const SPEEDUP_TABLE_HEADER: [&str; 3] = ["workers", "makespan", "speedup"];

pub fn write_speedup_csv<W: Write>(rows: &[SpeedupRow], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPEEDUP_TABLE_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.workers.to_string(), r.makespan.to_string(), r.speedup.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Per-run summary CSV for `gradhub sim`.
pub const SIM_REPORT_HEADER: [&str; 9] = [
    "workers",
    "makespan",
    "master_busy_fraction",
    "mean_worker_utilization",
    "updates",
    "validations",
    "gradients_sent",
    "mean_staleness",
    "events",
];

pub fn write_report_csv<W: Write>(reports: &[SimReport], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SIM_REPORT_HEADER).map_err(csv_err)?;
    for r in reports {
        let util = r.worker_utilization.values().sum::<f64>() / r.worker_utilization.len().max(1) as f64;
        w.write_record([
            r.workers.to_string(),
            r.makespan.to_string(),
            r.master_busy_fraction.to_string(),
            util.to_string(),
            r.updates.to_string(),
            r.validations.len().to_string(),
            r.gradients_sent.to_string(),
            r.staleness.mean().to_string(),
            r.events.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Algorithm, SyncMode};
    use proptest::prelude::*;

    fn spec(n_files: usize, per_file: usize) -> DatasetSpec {
        DatasetSpec {
            n_files,
            samples_per_file: per_file,
            ..DatasetSpec::desk_scale(5.0, 1)
        }
    }

    fn cfg(batch: usize, epochs: u64) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            epochs,
            arch: "softmax:2:2".parse().unwrap(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cost_model_text_round_trip() {
        let cm = CostModel::new(2.0, 0.5, 0.25, 7.0).unwrap();
        assert_eq!(CostModel::parse(&cm.render()).unwrap(), cm);
        let cm = CostModel::parse("# only latency\nlink_latency = 3\n").unwrap();
        assert_eq!(cm.link_latency, 3.0);
        assert_eq!(cm.compute_per_sample, 1.0);
    }

    #[test]
    fn cost_model_rejects_bad_values() {
        assert!(CostModel::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CostModel::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(CostModel::new(1.0, f64::NAN, 0.0, 0.0).is_err());
        assert!(CostModel::parse("bogus = 1").is_err());
        assert!(CostModel::parse("link_latency 1").is_err());
    }

    #[test]
    fn single_worker_matches_closed_form() {
        let (b, c_s, l, u, v) = (10usize, 1.5, 0.75, 2.0, 11.0);
        let cm = CostModel::new(c_s, u, l, v).unwrap();
        let mut c = cfg(b, 3);
        c.validate_every = 7;
        // 4 files × 10 samples, 3 epochs → 12 batches
        let r = simulate_run(&c, &spec(4, 10), &cm, 1).unwrap();
        let n = 12.0;
        let validations = (12 / 7 + 1) as f64;
        assert_eq!(r.validations.len(), 2);
        let expected = n * (b as f64 * c_s + 2.0 * l + u) + validations * v;
        assert!((r.makespan - expected).abs() < 1e-9, "{} vs {expected}", r.makespan);
    }

    #[test]
    fn free_master_gives_exact_linear_speedup() {
        let cm = CostModel::new(1.0, 0.0, 0.0, 0.0).unwrap();
        let reports: Vec<SimReport> = [1, 2, 3, 4, 6, 12]
            .iter()
            .map(|&w| simulate_run(&cfg(10, 1), &spec(12, 20), &cm, w).unwrap())
            .collect();
        for row in speedup_table(&reports).unwrap() {
            assert_eq!(row.speedup, row.workers as f64);
        }
    }

    #[test]
    fn plateau_is_capped_by_the_master() {
        // B·c_s = 60u
        let cm = CostModel::new(1.0, 100.0 / 60.0, 0.0, 0.0).unwrap();
        let ws = [1, 2, 5, 10, 20, 40, 60, 120];
        let reports: Vec<SimReport> = ws
            .iter()
            .map(|&w| simulate_run(&cfg(100, 1), &spec(1200, 100), &cm, w).unwrap())
            .collect();
        let rows = speedup_table(&reports).unwrap();
        let s10 = rows.iter().find(|r| r.workers == 10).unwrap().speedup;
        assert!(s10 >= 9.5, "S(10) = {s10}");
        for pair in rows.windows(2) {
            assert!(pair[1].speedup >= pair[0].speedup);
        }
        // one update per u at best, plus the single-worker cycle's own update
        let plateau: f64 = 1.0 + 60.0;
        assert!(rows.iter().all(|r| r.speedup <= plateau.min(r.workers as f64) + 1e-9));
    }

    #[test]
    fn identical_reports_give_unit_speedup() {
        let r = simulate_run(&cfg(10, 1), &spec(2, 10), &CostModel::default(), 1).unwrap();
        let rows = speedup_table(&[r.clone(), r]).unwrap();
        assert!(rows.iter().all(|x| x.speedup == 1.0));
    }

    #[test]
    fn missing_baseline_and_zero_workers_are_errors() {
        let r = simulate_run(&cfg(10, 1), &spec(2, 10), &CostModel::default(), 2).unwrap();
        assert!(matches!(speedup_table(&[r]), Err(SimError::MissingBaseline)));
        assert!(matches!(
            simulate_run(&cfg(10, 1), &spec(2, 10), &CostModel::default(), 0),
            Err(SimError::ZeroWorkers)
        ));
    }

    #[test]
    fn hierarchy_and_sync_runs_complete() {
        let mut c = cfg(10, 2);
        c.set("groups", "2").unwrap();
        c.set("workers_per_group", "3").unwrap();
        c.set("flush_every", "4").unwrap();
        let r = simulate_run(&c, &spec(6, 25), &CostModel::default(), 0).unwrap();
        assert_eq!(r.workers, 6);
        assert_eq!(r.gradients_sent, r.gradients_applied + r.gradients_rejected);
        assert_eq!(r.samples_accepted, 6 * 25 * 2);

        let mut c = cfg(10, 2);
        c.mode = SyncMode::Sync;
        c.algorithm = Algorithm::Easgd;
        let r = simulate_run(&c, &spec(4, 25), &CostModel::default(), 4).unwrap();
        assert!(r.staleness.is_all_zero());
    }

    #[test]
    fn csv_headers_are_stable() {
        let r = simulate_run(&cfg(10, 1), &spec(2, 10), &CostModel::default(), 1).unwrap();
        let mut buf = Vec::new();
        write_speedup_csv(&speedup_table(std::slice::from_ref(&r)).unwrap(), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("workers,makespan,speedup\n1,"));
        let mut buf = Vec::new();
        write_report_csv(&[r], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(&SIM_REPORT_HEADER.join(",")));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn makespan_respects_lower_bounds_and_conservation(
            c_s in 0.1f64..3.0,
            u in 0.0f64..20.0,
            l in 0.0f64..5.0,
            v in 0.0f64..50.0,
            workers in 1usize..7,
            batch in 1usize..30,
            every in 0u64..5,
            sync in any::<bool>(),
        ) {
            let cm = CostModel::new(c_s, u, l, v).unwrap();
            let mut c = cfg(batch, 2);
            c.validate_every = every;
            if sync {
                c.mode = SyncMode::Sync;
            }
            let r = simulate_run(&c, &spec(7, 13), &cm, workers).unwrap();
            prop_assert!(r.makespan + 1e-9 >= r.lower_bound(&cm));
            prop_assert_eq!(r.gradients_sent, r.gradients_applied + r.gradients_rejected);
            prop_assert_eq!(r.samples_processed, r.samples_accepted);
            let again = simulate_run(&c, &spec(7, 13), &cm, workers).unwrap();
            prop_assert_eq!(again.makespan.to_bits(), r.makespan.to_bits());
            prop_assert_eq!(again.events, r.events);
        }
    }
}
