//! The `ffpipe` command.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ffpipe_core::dataset::partition;
use ffpipe_core::{Mode, Model, Real};

use crate::bench::{bench, BENCH_CONFIG};
use crate::config::{ConfigFile, DataConfig, Precision, RunConfig};
use crate::data::{load_model, load_splits, model_precision, node_partition, save_model};
use crate::error::{PipeError, Result};
use crate::metrics::{write_csv, MetricsRecord, Summary};
use crate::run::{run_plan, NodeData, RunOptions, RunOutcome};
use crate::transport::{tcp, TransportKind, TransportOptions, WireStats};
use crate::worker::{run_collector, run_worker};

#[derive(Debug, Parser)]
#[command(name = "ffpipe", version, about = "Pipelined Forward-Forward training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, summary and model file to --out.
    Train {
        #[command(flatten)]
        opts: RunArgs,
        /// With --transport tcp, do not spawn workers; they are started
        /// elsewhere with `ffpipe worker`.
        #[arg(long)]
        external_workers: bool,
    },
    /// Join a TCP run as one worker.
    Worker {
        /// Resolved configuration listing every endpoint address.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        node: usize,
    },
    /// Test accuracy of a saved model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        opts: RunArgs,
    },
    /// Sequential against pipelined wall time with an injected per-batch delay.
    Bench {
        #[command(flatten)]
        opts: RunArgs,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        opts: RunArgs,
    },
}

#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// paper or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// seq, single, all or fed.
    #[arg(long)]
    pub mode: Option<String>,
    /// adaptive, random or fixed.
    #[arg(long)]
    pub neg: Option<String>,
    /// goodness, softmax, perfopt-last or perfopt-all.
    #[arg(long)]
    pub classifier: Option<String>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// inproc or tcp.
    #[arg(long)]
    pub transport: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub splits: Option<u32>,
    /// mnist, cifar10 or blobs.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Sleep after every batch, in milliseconds.
    #[arg(long)]
    pub delay_ms: Option<f64>,
    #[arg(long)]
    pub timeout_s: Option<f64>,
}

impl RunArgs {
    fn overrides(&self) -> ConfigFile {
        let mut f = ConfigFile {
            preset: self.preset.clone(),
            ..ConfigFile::default()
        };
        f.train.negatives = self.neg.clone();
        f.train.classifier = self.classifier.clone();
        f.train.seed = self.seed;
        f.train.epochs = self.epochs;
        f.train.splits = self.splits;
        f.train.precision = self.precision.clone();
        f.run.mode = self.mode.clone();
        f.run.nodes = self.nodes;
        f.run.transport = self.transport.clone();
        f.run.out = self.out.as_ref().map(|p| p.display().to_string());
        f.run.batch_delay_ms = self.delay_ms;
        f.run.timeout_s = self.timeout_s;
        f.data.dataset = self.dataset.clone();
        f.data.dir = self.data_dir.as_ref().map(|p| p.display().to_string());
        f.data.train_limit = self.train_limit;
        f.data.test_limit = self.test_limit;
        f
    }

    /// `base` (TOML text), then --config, then flags.
    pub fn resolve(&self, base: &str) -> Result<RunConfig> {
        let mut f = ConfigFile::from_toml(base)?;
        if let Some(path) = &self.config {
            f.merge(ConfigFile::load(path)?);
        }
        f.merge(self.overrides());
        f.resolve()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { opts, external_workers } => {
            let cfg = opts.resolve("")?;
            let summary = match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, external_workers)?,
                Precision::F64 => train::<f64>(&cfg, external_workers)?,
            };
            print!("{}", summary.to_text());
            Ok(())
        }
        Command::Worker { config, node } => {
            let cfg = ConfigFile::load(&config)?.resolve()?;
            match cfg.precision {
                Precision::F32 => worker::<f32>(&cfg, node),
                Precision::F64 => worker::<f64>(&cfg, node),
            }
        }
        Command::Evaluate { model, opts } => {
            let cfg = opts.resolve("")?;
            let acc = match model_precision(&model)? {
                8 => evaluate::<f64>(&model, &cfg.data, opts.classifier.as_deref(), cfg.plan.seed)?,
                _ => evaluate::<f32>(&model, &cfg.data, opts.classifier.as_deref(), cfg.plan.seed)?,
            };
            println!("accuracy: {:.2}%", 100.0 * acc);
            Ok(())
        }
        Command::Bench { opts } => {
            let mut cfg = opts.resolve(BENCH_CONFIG)?;
            if opts.delay_ms.is_none() {
                cfg.batch_delay = std::time::Duration::from_millis(5);
            }
            let (train, _) = load_splits::<f32>(&cfg.data, cfg.plan.layer_dims[0], cfg.plan.num_classes, cfg.plan.seed)?;
            let layers = cfg.plan.layer_count();
            let nodes = opts.nodes.unwrap_or(4);
            let variants = [(Mode::AllLayers, 1), (Mode::AllLayers, nodes), (Mode::SingleLayer, layers)];
            let report = bench(&cfg.plan, &train, cfg.batch_delay, &variants, cfg.transport)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Config { opts } => {
            print!("{}", opts.resolve("")?.to_toml());
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PipeError::io(dir, e))
}

fn write_config(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.out.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| PipeError::io(&path, e))?;
    Ok(path)
}

/// Epoch rows every `every` epochs; totals and evaluation rows always.
fn thin(records: &[MetricsRecord], every: u32) -> Vec<MetricsRecord> {
    records
        .iter()
        .filter(|r| r.layer.is_none() || r.epoch % every == 0)
        .cloned()
        .collect()
}

fn train<R: Real>(cfg: &RunConfig, external_workers: bool) -> Result<Summary> {
    create_dir(&cfg.out)?;
    write_config(cfg)?;
    let plan = &cfg.plan;
    let (train, test) = load_splits::<R>(&cfg.data, plan.layer_dims[0], plan.num_classes, plan.seed)?;
    log::info!(
        "{} mode, {} workers, {} training / {} test instances",
        plan.mode,
        plan.nodes,
        train.len(),
        test.len()
    );
    let mut outcome = if cfg.transport == TransportKind::Tcp && plan.mode != Mode::Sequential {
        train_over_tcp::<R>(cfg, external_workers)?
    } else {
        let opts = RunOptions {
            transport: cfg.transport,
            transport_opts: TransportOptions {
                timeout: cfg.timeout,
                jitter: None,
            },
            batch_delay: cfg.batch_delay,
        };
        if plan.mode == Mode::Federated {
            let parts = partition(&train, plan.nodes, cfg.data.partition, plan.seed)?;
            run_plan(plan, NodeData::Partitioned(&parts), &opts)?
        } else {
            run_plan(plan, NodeData::Shared(&train), &opts)?
        }
    };
    outcome.evaluate(&test)?;
    let summary = outcome.summary();
    write_csv(&cfg.out.join("metrics.csv"), &thin(&outcome.records, cfg.metrics_every))?;
    summary.write(&cfg.out.join("summary.toml"))?;
    save_model(&cfg.out.join("model.ffpm"), &outcome.model, plan.splits as u16)?;
    Ok(summary)
}

fn spawn_worker(config: &Path, node: usize) -> Result<Child> {
    let exe = std::env::current_exe().map_err(|e| PipeError::Config(format!("locating own executable: {e}")))?;
    Process::new(exe)
        .arg("worker")
        .arg("--config")
        .arg(config)
        .arg("--node")
        .arg(node.to_string())
        .spawn()
        .map_err(|e| PipeError::Config(format!("spawning worker {node}: {e}")))
}

/// This process is the collector; workers are separate processes.
fn train_over_tcp<R: Real>(cfg: &RunConfig, external_workers: bool) -> Result<RunOutcome<R>> {
    let plan = &cfg.plan;
    let n = plan.nodes;
    let mut cfg = cfg.clone();
    let listener = if cfg.addresses.is_empty() {
        let (mut ls, addrs) = tcp::loopback_listeners(n + 1)?;
        cfg.addresses = addrs;
        ls.pop().expect("collector listener")
    } else {
        TcpListener::bind(cfg.addresses[n]).map_err(|e| PipeError::Transport {
            node: n,
            msg: format!("binding {}: {e}", cfg.addresses[n]),
        })?
    };
    let config_path = write_config(&cfg)?;
    let mut children = Vec::new();
    if !external_workers {
        for i in 0..n {
            children.push((i, spawn_worker(&config_path, i)?));
        }
    }
    let opts = TransportOptions {
        timeout: cfg.timeout,
        jitter: None,
    };
    let start = Instant::now();
    let stats = Arc::new(WireStats::default());
    let collected = tcp::connect_mesh(n, &cfg.addresses, listener, stats.clone(), &opts)
        .and_then(|mut ep| run_collector::<R>(plan, &mut ep));
    let wall = start.elapsed();
    let mut failed = Vec::new();
    for (i, mut child) in children {
        if collected.is_err() {
            let _ = child.kill();
        }
        match child.wait() {
            Ok(status) if status.success() => {}
            Ok(status) => failed.push(format!("worker {i} exited with {status}")),
            Err(e) => failed.push(format!("worker {i}: {e}")),
        }
    }
    let (model, records): (Model<R>, _) = collected?;
    if !failed.is_empty() {
        return Err(PipeError::Transport {
            node: n,
            msg: failed.join("; "),
        });
    }
    Ok(RunOutcome {
        mode: plan.mode,
        workers: n,
        model,
        records,
        reports: Vec::new(),
        wire: stats,
        wall,
    })
}

fn worker<R: Real>(cfg: &RunConfig, node: usize) -> Result<()> {
    let plan = &cfg.plan;
    if cfg.addresses.len() != plan.nodes + 1 {
        return Err(PipeError::Config("worker needs run.addresses for every endpoint".into()));
    }
    if node >= plan.nodes {
        return Err(PipeError::Config(format!("node {node} out of range for {} workers", plan.nodes)));
    }
    let (train, _) = load_splits::<R>(&cfg.data, plan.layer_dims[0], plan.num_classes, plan.seed)?;
    let data = if plan.mode == Mode::Federated {
        node_partition(&train, &cfg.data, plan.nodes, node, plan.seed)?
    } else {
        train
    };
    let listener = TcpListener::bind(cfg.addresses[node]).map_err(|e| PipeError::Transport {
        node,
        msg: format!("binding {}: {e}", cfg.addresses[node]),
    })?;
    let opts = TransportOptions {
        timeout: cfg.timeout,
        jitter: None,
    };
    let mut ep = tcp::connect_mesh(node, &cfg.addresses, listener, Arc::default(), &opts)?;
    let report = run_worker(plan, node, &data, &mut ep, Instant::now(), cfg.batch_delay)?;
    log::info!(
        "node {node} done: busy {:.1} s, idle {:.1} s, comm {:.1} s",
        report.totals.busy_ms / 1e3,
        report.totals.idle_ms / 1e3,
        report.totals.comm_ms / 1e3
    );
    Ok(())
}

fn evaluate<R: Real>(path: &Path, data: &DataConfig, classifier: Option<&str>, seed: u64) -> Result<f64> {
    let mut model = load_model::<R>(path)?;
    if let Some(c) = classifier {
        model.classifier = c.parse()?;
        model.check()?;
    }
    let (_, test) = load_splits::<R>(data, model.input_dim(), model.num_classes, seed)?;
    Ok(model.accuracy(&test)?)
}
