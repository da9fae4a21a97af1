use std::collections::BTreeMap;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use gradhub::config::SyncMode;
use gradhub::data::{Dataset, DatasetSpec};
use gradhub::harness::{self, DataSource, HarnessError, RunBackend};
use gradhub::proto::WirePrecision;
use gradhub::roles::{
    build_roles, run_master, run_worker, GradientSource, NullEvaluator, NullSource, RoleError, WallLog,
};
use gradhub::simclock::CostModel;
use gradhub::transport::{establish, Backend, SessionSpec};
use gradhub::{Gradient, Rank, TrainConfig, WeightSet};

fn small_spec() -> DatasetSpec {
    DatasetSpec { n_files: 8, samples_per_file: 40, seq_len: 1, input_dim: 6, n_classes: 3, seed: 4, delta: 3.0 }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        workers: 2,
        epochs: 2,
        batch_size: 20,
        validate_every: 4,
        arch: "dense:6:8:tanh,softmax:8:3".parse().unwrap(),
        ..TrainConfig::default()
    }
}

/// Fails on its `fail_at`-th gradient.
struct Failing {
    calls: u32,
    fail_at: u32,
}

impl GradientSource for Failing {
    fn n_samples(&self) -> usize {
        100
    }

    fn gradient(&mut self, w: &WeightSet, _: &[usize]) -> Result<Gradient, RoleError> {
        self.calls += 1;
        if self.calls == self.fail_at {
            return Err(RoleError::Config("disk went away".into()));
        }
        Ok(Gradient::zeros_like(w))
    }
}

fn run_with_failure(backend: Backend) -> Vec<Result<(), RoleError>> {
    let cfg = TrainConfig { workers: 3, batch_size: 10, ..small_cfg() };
    let mut sources: BTreeMap<Rank, Box<dyn GradientSource>> = BTreeMap::new();
    sources.insert(1, Box::new(NullSource { n_samples: 100 }));
    sources.insert(2, Box::new(Failing { calls: 0, fail_at: 3 }));
    sources.insert(3, Box::new(NullSource { n_samples: 100 }));
    let roles = build_roles(&cfg, sources, Box::new(NullEvaluator)).unwrap();
    let mut links = establish(&SessionSpec::new(backend, cfg.wire, cfg.topology().nodes())).unwrap();
    let mut master_ep = links.get_mut(&0).unwrap().down.take().unwrap();
    let mut master = roles.master;
    let mut workers: Vec<_> = roles
        .workers
        .into_iter()
        .map(|w| {
            let ep = links.get_mut(&w.rank()).unwrap().up.take().unwrap();
            (w, ep)
        })
        .collect();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut results = Vec::new();
        thread::scope(|s| {
            let hs: Vec<_> = workers.iter_mut().map(|(w, ep)| s.spawn(move || run_worker(w, ep, None))).collect();
            let mut log = WallLog::new(Instant::now());
            results.push(run_master(&mut master, &mut master_ep, &mut log));
            for h in hs {
                results.push(h.join().unwrap());
            }
        });
        tx.send(results).unwrap();
    });
    rx.recv_timeout(Duration::from_secs(30)).expect("a failing worker must not hang the session")
}

#[test]
fn worker_failure_reaches_the_master() {
    for backend in [Backend::InProc, Backend::Tcp] {
        let results = run_with_failure(backend);
        assert!(
            matches!(results[0], Err(RoleError::PeerLost { rank: 0, peer: 2 })),
            "{backend:?}: master saw {:?}",
            results[0]
        );
        assert!(results.iter().any(|r| matches!(r, Err(RoleError::Config(m)) if m.contains("disk"))));
    }
}

#[test]
fn harness_reports_bad_architecture_before_launch() {
    let data = Dataset::generate(&small_spec()).unwrap();
    let cfg = TrainConfig { arch: "softmax:5:3".parse().unwrap(), ..small_cfg() };
    let err = harness::run(&cfg, DataSource::Data(&data), &RunBackend::InProc).unwrap_err();
    assert!(matches!(err, HarnessError::Role(RoleError::Config(_))), "{err}");
}

#[test]
fn tcp_and_inproc_agree_in_sync_mode() {
    let data = Dataset::generate(&small_spec()).unwrap();
    let cfg = TrainConfig { mode: SyncMode::Sync, wire: WirePrecision::F64, workers: 4, ..small_cfg() };
    let a = harness::run(&cfg, DataSource::Data(&data), &RunBackend::InProc).unwrap();
    let b = harness::run(&cfg, DataSource::Data(&data), &RunBackend::Tcp).unwrap();
    assert_eq!(a.final_weights, b.final_weights);
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.messages_sent, b.messages_sent);
    assert_eq!(b.backend, "tcp");
    assert!(b.staleness.is_all_zero());
}

#[test]
fn f32_wire_tcp_run_learns() {
    let data = Dataset::generate(&small_spec()).unwrap();
    let cfg = TrainConfig { epochs: 8, learning_rate: 0.2, ..small_cfg() };
    let r = harness::run(&cfg, DataSource::Data(&data), &RunBackend::Tcp).unwrap();
    assert!(r.final_accuracy.unwrap() > 0.8, "{:?}", r.final_accuracy);
    assert_eq!(r.samples_processed, r.samples_accepted);
}

#[test]
fn repeated_sync_runs_are_identical_except_wall_time() {
    let data = Dataset::generate(&small_spec()).unwrap();
    for algorithm in ["downpour", "easgd"] {
        let mut cfg = TrainConfig { mode: SyncMode::Sync, workers: 4, ..small_cfg() };
        cfg.set("algorithm", algorithm).unwrap();
        let a = harness::run(&cfg, DataSource::Data(&data), &RunBackend::InProc).unwrap();
        let b = harness::run(&cfg, DataSource::Data(&data), &RunBackend::InProc).unwrap();
        assert_eq!(a.config, b.config);
        assert_eq!(a.final_weights, b.final_weights);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.final_accuracy, b.final_accuracy);
        assert_eq!(a.staleness, b.staleness);
        assert_eq!(a.messages_sent, b.messages_sent);
        assert_eq!(a.updates, b.updates);
    }
}

#[test]
fn sim_runs_are_bit_deterministic() {
    let data = Dataset::generate(&small_spec()).unwrap();
    let cfg = TrainConfig { workers: 3, ..small_cfg() };
    let backend = RunBackend::Sim(CostModel::new(1.0, 7.0, 2.0, 5.0).unwrap());
    let a = harness::run(&cfg, DataSource::Data(&data), &backend).unwrap();
    let b = harness::run(&cfg, DataSource::Data(&data), &backend).unwrap();
    assert_eq!(a.elapsed.to_bits(), b.elapsed.to_bits());
    assert_eq!(a.final_weights, b.final_weights);
    assert_eq!(a.log.len(), b.log.len());
    assert!(a.final_accuracy.is_some());
}

#[test]
fn sim_single_worker_matches_closed_form() {
    let spec = DatasetSpec { n_files: 3, samples_per_file: 70, ..small_spec() };
    let cfg = TrainConfig { workers: 1, epochs: 2, batch_size: 50, validate_every: 3, ..small_cfg() };
    let (c_s, u, l, v) = (1.5, 4.0, 0.25, 10.0);
    let cm = CostModel::new(c_s, u, l, v).unwrap();
    let r = harness::run(&cfg, DataSource::Timing(&spec), &RunBackend::Sim(cm)).unwrap();
    // 210 samples per epoch in batches of 50, 50, 50, 50, 10
    let n = 2.0 * 210.0;
    let batches = 2.0 * 5.0;
    // validations at updates 3, 6, 9 plus the final one
    let validations = 4.0;
    let expected = n * c_s + batches * (u + 2.0 * l) + validations * v;
    assert!((r.elapsed - expected).abs() < 1e-9, "{} vs {expected}", r.elapsed);
    assert_eq!(r.trajectory.len(), 4);
    assert_eq!(r.final_accuracy, None);
}

#[test]
fn wall_clock_speedup_is_monotone_on_multicore_hosts() {
    let cores = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if cores < 4 {
        eprintln!("skipping: {cores} core(s) available, need 4");
        return;
    }
    let spec = DatasetSpec { n_files: 8, samples_per_file: 200, ..DatasetSpec::desk_scale(5.0, 2) };
    let data = Dataset::generate(&spec).unwrap();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let pts = harness::experiment_speedup(&cfg, &[1, 2, 4], DataSource::Data(&data), &RunBackend::InProc).unwrap();
    assert!(pts.windows(2).all(|p| p[0].speedup < p[1].speedup), "{pts:?}");
}
