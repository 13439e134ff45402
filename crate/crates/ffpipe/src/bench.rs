//! Timing the schedules against each other with a fixed per-batch delay,
//! so the comparison reflects scheduling rather than this machine's core
//! count.

use std::fmt::Write as _;
use std::time::Duration;

use ffpipe_core::{Dataset, Mode, Real, TrainingPlan};

use crate::error::Result;
use crate::metrics::{format_utilization, NodeUtilization, Summary};
use crate::run::{run_plan, run_sequential, NodeData, RunOptions};
use crate::transport::TransportKind;

/// Small blob problem whose compute is negligible next to the delay.
pub const BENCH_CONFIG: &str = r#"preset = "desk"

[model]
layers = [32, 32, 32, 32, 32]
classes = 4

[train]
epochs = 20
splits = 20
negatives = "random"

[data]
dataset = "blobs"
blobs = 512
"#;

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub mode: Mode,
    pub nodes: usize,
    pub wall_s: f64,
    pub speedup: f64,
    /// Speedup per node.
    pub utilization: f64,
    pub per_node: Vec<NodeUtilization>,
    /// When each node first started training, in units of one
    /// (layer, chapter) step of the sequential run.
    pub first_start_steps: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub delay: Duration,
    pub sequential_s: f64,
    /// Sequential wall time per (layer, chapter) step.
    pub step_s: f64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, mode: Mode, nodes: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode && r.nodes == nodes)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "per-batch delay {:.1} ms; sequential {:.2} s ({:.1} ms per layer-chapter)",
            self.delay.as_secs_f64() * 1e3,
            self.sequential_s,
            self.step_s * 1e3
        );
        let _ = writeln!(s, "mode    nodes   wall_s  speedup  utilization  first starts (steps)");
        for r in &self.rows {
            let starts: Vec<String> = r.first_start_steps.iter().map(|v| format!("{v:.2}")).collect();
            let _ = writeln!(
                s,
                "{:<7} {:>5} {:>8.2} {:>7.2}x {:>11.1}%  [{}]",
                r.mode.as_str(),
                r.nodes,
                r.wall_s,
                r.speedup,
                100.0 * r.utilization,
                starts.join(", ")
            );
        }
        for r in &self.rows {
            let _ = write!(s, "\n{} N={}\n{}", r.mode, r.nodes, format_utilization(&r.per_node));
        }
        s
    }
}

/// Runs `plan` sequentially, then once per `(mode, nodes)` variant, all
/// with `delay` after every batch.
pub fn bench<R: Real>(
    plan: &TrainingPlan,
    data: &Dataset<R>,
    delay: Duration,
    variants: &[(Mode, usize)],
    transport: TransportKind,
) -> Result<BenchReport> {
    let seq_plan = plan.clone().with_mode(Mode::Sequential, 1);
    let seq = run_sequential(&seq_plan, data, delay)?;
    let sequential_s = seq.wall.as_secs_f64();
    let step_s = sequential_s / (plan.splits as f64 * plan.layer_count() as f64);
    let opts = RunOptions {
        transport,
        batch_delay: delay,
        ..RunOptions::default()
    };
    let mut rows = Vec::new();
    for &(mode, nodes) in variants {
        let p = plan.clone().with_mode(mode, nodes);
        let out = run_plan(&p, NodeData::Shared(data), &opts)?;
        let wall_s = out.wall.as_secs_f64();
        let speedup = sequential_s / wall_s;
        let first_start_steps = out
            .reports
            .iter()
            .map(|r| r.spans.first().map_or(f64::NAN, |s| s.start_ms / 1e3 / step_s))
            .collect();
        log::info!("{mode} N={nodes}: {wall_s:.2} s, speedup {speedup:.2}");
        rows.push(BenchRow {
            mode,
            nodes,
            wall_s,
            speedup,
            utilization: speedup / nodes as f64,
            per_node: Summary::from_records(mode.as_str(), &out.records).nodes,
            first_start_steps,
        });
    }
    Ok(BenchReport {
        delay,
        sequential_s,
        step_s,
        rows,
    })
}
