//! Launching whole runs inside one process: the sequential schedule
//! directly, the distributed modes as one thread per worker plus the
//! collector on the calling thread.

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use ffpipe_core::engine::{train_sequential, BatchEvent, EpochEvent, Observer};
use ffpipe_core::wire::MsgType;
use ffpipe_core::{Dataset, Mode, Model, Real, TrainingPlan};

use crate::clock::NodeClock;
use crate::error::{PipeError, Result};
use crate::metrics::{MetricsRecord, Summary};
use crate::transport::{inproc, tcp, TransportKind, TransportOptions, WireStats};
use crate::worker::{run_collector, run_worker, NodeReport};

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub transport: TransportKind,
    pub transport_opts: TransportOptions,
    /// Sleep added after every batch, standing in for heavier compute.
    pub batch_delay: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            transport: TransportKind::InProcess,
            transport_opts: TransportOptions::default(),
            batch_delay: Duration::ZERO,
        }
    }
}

/// Training data as seen by the workers.
#[derive(Clone, Copy, Debug)]
pub enum NodeData<'a, R> {
    Shared(&'a Dataset<R>),
    /// One private partition per worker (federated mode).
    Partitioned(&'a [Dataset<R>]),
}

impl<'a, R> NodeData<'a, R> {
    fn for_node(&self, i: usize) -> &'a Dataset<R> {
        match *self {
            NodeData::Shared(d) => d,
            NodeData::Partitioned(parts) => &parts[i],
        }
    }
}

pub struct RunOutcome<R> {
    pub mode: Mode,
    pub workers: usize,
    pub model: Model<R>,
    pub records: Vec<MetricsRecord>,
    /// Empty for sequential runs, which do not go through a transport.
    pub reports: Vec<NodeReport>,
    pub wire: Arc<WireStats>,
    /// Training time, from worker start to the last worker finishing.
    pub wall: Duration,
}

impl<R: Real> RunOutcome<R> {
    /// Test accuracy in `[0, 1]`, also appended as the collector row.
    pub fn evaluate(&mut self, test: &Dataset<R>) -> Result<f64> {
        let acc = self.model.accuracy(test)?;
        let wall_ms = self.wall.as_secs_f64() * 1e3;
        self.records.push(MetricsRecord {
            node: self.workers,
            chapter: self.model_chapters(),
            epoch: self.model_epochs(),
            layer: None,
            loss: None,
            acc: Some(100.0 * acc),
            busy_ms: 0.0,
            idle_ms: 0.0,
            comm_ms: 0.0,
            wall_ms,
        });
        Ok(acc)
    }

    fn model_chapters(&self) -> u32 {
        self.records.iter().map(|r| r.chapter).max().unwrap_or(0)
    }

    fn model_epochs(&self) -> u32 {
        self.records.iter().map(|r| r.epoch).max().unwrap_or(0)
    }

    pub fn summary(&self) -> Summary {
        Summary::from_records(self.mode.as_str(), &self.records)
    }

    pub fn wire_bytes(&self, t: MsgType) -> u64 {
        self.wire.bytes(t)
    }
}

struct SeqObserver {
    clock: NodeClock,
    delay: Duration,
    records: Vec<MetricsRecord>,
}

impl Observer for SeqObserver {
    fn on_batch(&mut self, _e: &BatchEvent) {
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
    }

    fn on_epoch(&mut self, e: &EpochEvent) {
        log::debug!("layer {} epoch {} loss {:.4}", e.layer, e.epoch, e.mean_loss);
        self.records
            .push(MetricsRecord::epoch(0, e.chapter, e.epoch, e.layer, e.mean_loss, self.clock.totals()));
    }
}

/// The reference schedule on the calling thread.
pub fn run_sequential<R: Real>(plan: &TrainingPlan, data: &Dataset<R>, batch_delay: Duration) -> Result<RunOutcome<R>> {
    plan.validate()?;
    let start = Instant::now();
    let mut obs = SeqObserver {
        clock: NodeClock::start_at(start),
        delay: batch_delay,
        records: Vec::new(),
    };
    let model = train_sequential(plan, data, &mut obs)?;
    let wall = start.elapsed();
    let mut records = obs.records;
    records.push(MetricsRecord::node_total(0, plan.splits, plan.epochs, obs.clock.totals()));
    Ok(RunOutcome {
        mode: Mode::Sequential,
        workers: 1,
        model,
        records,
        reports: Vec::new(),
        wire: Arc::default(),
        wall,
    })
}

/// Runs `plan` in its configured mode. Sequential plans ignore the
/// transport; the other modes start `plan.nodes` worker threads connected
/// by the chosen transport.
pub fn run_plan<R: Real>(plan: &TrainingPlan, data: NodeData<'_, R>, opts: &RunOptions) -> Result<RunOutcome<R>> {
    plan.validate()?;
    let n = plan.nodes;
    match (plan.mode, data) {
        (Mode::Federated, NodeData::Partitioned(parts)) => {
            if parts.len() != n {
                return Err(PipeError::Config(format!("{} partitions for {n} federated nodes", parts.len())));
            }
            if let Some(i) = parts.iter().position(|p| p.is_empty()) {
                return Err(PipeError::Config(format!("partition of node {i} is empty")));
            }
        }
        (Mode::Federated, NodeData::Shared(_)) => {
            return Err(PipeError::Config("federated runs need one partition per node".into()))
        }
        (_, NodeData::Partitioned(_)) => {
            return Err(PipeError::Config(format!("{} runs share one dataset", plan.mode)))
        }
        (Mode::Sequential, NodeData::Shared(d)) => return run_sequential(plan, d, opts.batch_delay),
        _ => {}
    }
    let endpoints = match opts.transport {
        TransportKind::InProcess => inproc::mesh(n + 1, &opts.transport_opts),
        TransportKind::Tcp => tcp::loopback_mesh(n + 1, &opts.transport_opts)?,
    };
    let wire = endpoints[0].stats().clone();
    let start = Instant::now();
    let delay = opts.batch_delay;
    let (collected, wall, results) = thread::scope(|s| {
        let mut eps = endpoints.into_iter();
        let handles: Vec<_> = (0..n)
            .map(|i| {
                let mut ep = eps.next().expect("one endpoint per worker");
                let d = data.for_node(i);
                thread::Builder::new()
                    .name(format!("ffpipe-node-{i}"))
                    .spawn_scoped(s, move || run_worker(plan, i, d, &mut ep, start, delay))
                    .expect("spawning worker thread")
            })
            .collect();
        let mut collector = eps.next().expect("collector endpoint");
        let collected = run_collector::<R>(plan, &mut collector);
        let wall = start.elapsed();
        let results: Vec<Result<NodeReport>> = handles
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                h.join().unwrap_or_else(|_| {
                    Err(PipeError::Transport {
                        node: i,
                        msg: "worker thread panicked".into(),
                    })
                })
            })
            .collect();
        (collected, wall, results)
    });
    let mut reports = Vec::with_capacity(n);
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => errors.push(e),
        }
    }
    let (model, records) = match collected {
        Ok(v) if errors.is_empty() => v,
        Ok(_) => return Err(root_cause(errors)),
        Err(e) => {
            errors.push(e);
            return Err(root_cause(errors));
        }
    };
    Ok(RunOutcome {
        mode: plan.mode,
        workers: n,
        model,
        records,
        reports,
        wire,
        wall,
    })
}

/// The first error that is not just a reaction to another node's abort.
fn root_cause(mut errors: Vec<PipeError>) -> PipeError {
    let i = errors.iter().position(|e| !matches!(e, PipeError::Aborted { .. })).unwrap_or(0);
    errors.swap_remove(i)
}
