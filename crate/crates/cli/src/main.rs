use std::fs::{self, File};
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gradhub::data::{write_dataset, Dataset, DatasetSpec};
use gradhub::harness::{self, DataSource, RunBackend};
use gradhub::simclock::{self, CostModel};
use gradhub::{Rank, TrainConfig};

#[derive(Parser)]
#[command(name = "gradhub", version, about = "Data-parallel training with a parameter server")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset.
    GenData(GenData),
    /// Train one configuration.
    Train(Train),
    /// Simulate one or more worker counts under a cost model.
    Sim(Sim),
    /// Speedup against worker count.
    ExpSpeedup(ExpSpeedup),
    /// Accuracy and staleness against worker count and momentum.
    ExpStaleness(ExpStaleness),
    /// Simulated speedup against batch size.
    ExpBatchsize(ExpBatchsize),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 10)]
    files: usize,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    seq_len: usize,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 5.0)]
    delta: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl GenData {
    fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_files: self.files,
            samples_per_file: self.samples,
            seq_len: self.seq_len,
            input_dim: self.dim,
            n_classes: self.classes,
            seed: self.seed,
            delta: self.delta,
        }
    }
}

/// Config file plus per-field overrides. Later sources win: defaults,
/// then `--config`, then `--set`, then the named flags.
#[derive(Args)]
struct ConfigArgs {
    /// Run-config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    sample_budget: Option<u64>,
    #[arg(long)]
    validate_every: Option<u64>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    wire: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", p.display()))?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv}: expected key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("algorithm", self.algorithm.clone()),
            ("mode", self.mode.clone()),
            ("batch_size", self.batch_size.map(|x| x.to_string())),
            ("learning_rate", self.learning_rate.map(|x| x.to_string())),
            ("momentum", self.momentum.map(|x| x.to_string())),
            ("epochs", self.epochs.map(|x| x.to_string())),
            ("sample_budget", self.sample_budget.map(|x| x.to_string())),
            ("validate_every", self.validate_every.map(|x| x.to_string())),
            ("arch", self.arch.clone()),
            ("wire", self.wire.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }
}

/// Data shape for timing-only simulation when no dataset is given.
#[derive(Args)]
struct ShapeArgs {
    /// Dataset directory; its header supplies the shape.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    files: usize,
    #[arg(long, default_value_t = 500)]
    samples: usize,
}

impl ShapeArgs {
    fn spec(&self) -> Result<DatasetSpec> {
        match &self.data {
            Some(dir) => Ok(Dataset::load(dir)?.spec),
            None => Ok(DatasetSpec {
                n_files: self.files,
                samples_per_file: self.samples,
                ..DatasetSpec::desk_scale(5.0, 1)
            }),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Inproc,
    Tcp,
    Sim,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Flat worker count (ignored for hierarchical configs).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value = "inproc")]
    backend: BackendArg,
    /// Cost model for `--backend sim`.
    #[arg(long)]
    cost_model: Option<PathBuf>,
    /// Run just this rank (TCP only); needs `--peers`.
    #[arg(long)]
    rank: Option<Rank>,
    /// Listen addresses indexed by rank, comma separated.
    #[arg(long, value_delimiter = ',')]
    peers: Vec<SocketAddr>,
    /// Seconds to wait for peers to connect.
    #[arg(long, default_value_t = 60)]
    connect_timeout: u64,
    /// JSON-lines run log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for the trajectory CSV and the config used.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sim {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Worker counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    workers: Vec<usize>,
    #[arg(long)]
    cost_model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExpSpeedup {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    workers: Vec<usize>,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendArg,
    #[arg(long)]
    cost_model: Option<PathBuf>,
    /// Output directory for the CSV bundle.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExpStaleness {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    workers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    momenta: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    trials: u64,
    #[arg(long, value_enum, default_value = "inproc")]
    backend: BackendArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExpBatchsize {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long, value_delimiter = ',', default_value = "10,100,500,1000")]
    batches: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    workers: usize,
    #[arg(long)]
    cost_model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cost_model(path: &Option<PathBuf>) -> Result<CostModel> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(CostModel::parse(&text)?)
        }
        None => Ok(CostModel::default()),
    }
}

fn backend(arg: BackendArg, cm: &Option<PathBuf>) -> Result<RunBackend> {
    Ok(match arg {
        BackendArg::Inproc => RunBackend::InProc,
        BackendArg::Tcp => RunBackend::Tcp,
        BackendArg::Sim => RunBackend::Sim(cost_model(cm)?),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let data = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let report = match a.rank {
        Some(rank) => {
            if !matches!(a.backend, BackendArg::Tcp) {
                bail!("--rank needs --backend tcp");
            }
            let timeout = Duration::from_secs(a.connect_timeout);
            match harness::run_node(&cfg, &data, rank, &a.peers, timeout)? {
                Some(r) => r,
                None => {
                    println!("rank {rank} finished");
                    return Ok(());
                }
            }
        }
        None => harness::run(&cfg, DataSource::Data(&data), &backend(a.backend, &a.cost_model)?)?,
    };
    println!(
        "backend={} workers={} updates={} elapsed={:.4} accuracy={:.4} loss={:.4} mean_staleness={:.3}",
        report.backend,
        report.workers,
        report.updates,
        report.elapsed,
        report.final_accuracy.unwrap_or(f64::NAN),
        report.final_loss.unwrap_or(f64::NAN),
        report.staleness.mean()
    );
    if let Some(p) = &a.log {
        harness::write_run_log(&report.log, create(p)?)?;
    }
    if let Some(dir) = &a.out {
        let mut csv = Vec::new();
        harness::write_trajectory_csv(&report.trajectory, &mut csv)?;
        let cm = matches!(a.backend, BackendArg::Sim).then(|| cost_model(&a.cost_model)).transpose()?;
        harness::write_bundle(dir, "trajectory", &csv, &cfg, Some(&data.spec), cm.as_ref())?;
    }
    Ok(())
}

fn sim(a: Sim) -> Result<()> {
    let cfg = a.cfg.load()?;
    let spec = a.shape.spec()?;
    let cm = cost_model(&a.cost_model)?;
    let mut reports = Vec::new();
    for &w in &a.workers {
        let r = simclock::simulate_run(&cfg, &spec, &cm, w)?;
        println!("workers={w} makespan={} master_busy={:.3}", r.makespan, r.master_busy_fraction);
        reports.push(r);
    }
    simclock::write_report_csv(&reports, create(&a.out)?)?;
    if a.workers.contains(&1) && a.workers.len() > 1 {
        let rows = simclock::speedup_table(&reports)?;
        simclock::write_speedup_csv(&rows, create(&a.out.with_extension("speedup.csv"))?)?;
    }
    Ok(())
}

fn exp_speedup(a: ExpSpeedup) -> Result<()> {
    let cfg = a.cfg.load()?;
    let be = backend(a.backend, &a.cost_model)?;
    let loaded;
    let spec;
    let source = match (&a.shape.data, a.backend) {
        (Some(dir), _) => {
            loaded = Dataset::load(dir)?;
            DataSource::Data(&loaded)
        }
        (None, BackendArg::Sim) => {
            spec = a.shape.spec()?;
            DataSource::Timing(&spec)
        }
        (None, _) => bail!("wall-clock backends need --data"),
    };
    let pts = harness::experiment_speedup(&cfg, &a.workers, source, &be)?;
    for p in &pts {
        println!("workers={} elapsed={} speedup={:.3}", p.workers, p.elapsed, p.speedup);
    }
    let mut csv = Vec::new();
    harness::write_speedup_csv(&pts, &mut csv)?;
    let cm = match be {
        RunBackend::Sim(cm) => Some(cm),
        _ => None,
    };
    let data_spec = match source {
        DataSource::Data(d) => d.spec.clone(),
        DataSource::Timing(s) => s.clone(),
    };
    harness::write_bundle(&a.out, "speedup", &csv, &cfg, Some(&data_spec), cm.as_ref())?;
    Ok(())
}

fn exp_staleness(a: ExpStaleness) -> Result<()> {
    let cfg = a.cfg.load()?;
    let data = Dataset::load(&a.data)?;
    let be = backend(a.backend, &None)?;
    let pts = harness::experiment_staleness(&cfg, &a.workers, &a.momenta, a.trials, &data, &be)?;
    for (w, mu, s) in harness::mean_staleness_by_workers(&pts) {
        println!("workers={w} momentum={mu} mean_staleness={s:.3}");
    }
    let mut csv = Vec::new();
    harness::write_staleness_csv(&pts, &mut csv)?;
    harness::write_bundle(&a.out, "staleness", &csv, &cfg, Some(&data.spec), None)?;
    Ok(())
}

fn exp_batchsize(a: ExpBatchsize) -> Result<()> {
    let cfg = a.cfg.load()?;
    let spec = a.shape.spec()?;
    let cm = cost_model(&a.cost_model)?;
    let pts = harness::experiment_batchsize(&cfg, &a.batches, a.workers, &spec, &cm)?;
    for p in &pts {
        println!("batch_size={} speedup={:.3} relative={:.3}", p.batch_size, p.speedup, p.relative_speedup);
    }
    let mut csv = Vec::new();
    harness::write_batch_csv(&pts, &mut csv)?;
    harness::write_bundle(&a.out, "batchsize", &csv, &cfg, Some(&spec), Some(&cm))?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => {
            let paths = write_dataset(&a.spec(), &a.out)?;
            println!("wrote {} files to {}", paths.len(), a.out.display());
            Ok(())
        }
        Cmd::Train(a) => train(a),
        Cmd::Sim(a) => sim(a),
        Cmd::ExpSpeedup(a) => exp_speedup(a),
        Cmd::ExpStaleness(a) => exp_staleness(a),
        Cmd::ExpBatchsize(a) => exp_batchsize(a),
    }
}
