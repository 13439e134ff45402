//! Metrics rows, the CSV file they live in, and the run summary derived
//! from them.
//!
//! A run writes three kinds of rows:
//! - one per trained (layer, epoch) with its mean loss,
//! - one per worker at the end with the node's time totals (empty layer),
//! - one for the collector (node id = number of workers) with the test
//!   accuracy in percent and the run's wall time.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::Totals;
use crate::error::{PipeError, Result};

pub const CSV_HEADER: &str = "node,chapter,epoch,layer,loss,acc,busy_ms,idle_ms,comm_ms,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub node: usize,
    pub chapter: u32,
    pub epoch: u32,
    pub layer: Option<usize>,
    pub loss: Option<f64>,
    pub acc: Option<f64>,
    pub busy_ms: f64,
    pub idle_ms: f64,
    pub comm_ms: f64,
    /// Milliseconds since the node started; doubles as the row timestamp.
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub fn epoch(node: usize, chapter: u32, epoch: u32, layer: usize, loss: f64, t: Totals) -> Self {
        MetricsRecord {
            node,
            chapter,
            epoch,
            layer: Some(layer),
            loss: Some(loss),
            acc: None,
            busy_ms: t.busy_ms,
            idle_ms: t.idle_ms,
            comm_ms: t.comm_ms,
            wall_ms: t.wall_ms,
        }
    }

    pub fn node_total(node: usize, chapter: u32, epoch: u32, t: Totals) -> Self {
        MetricsRecord {
            layer: None,
            loss: None,
            ..Self::epoch(node, chapter, epoch, 0, 0.0, t)
        }
    }

    pub fn is_node_total(&self) -> bool {
        self.layer.is_none() && self.acc.is_none()
    }
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| PipeError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> PipeError {
    PipeError::Data(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeUtilization {
    pub node: usize,
    pub busy_ms: f64,
    pub idle_ms: f64,
    pub comm_ms: f64,
    pub wall_ms: f64,
    /// Share of the node's wall time not spent idle.
    pub utilization: f64,
}

/// Per-worker time breakdown from the node-total rows.
pub fn utilization_report(records: &[MetricsRecord]) -> Vec<NodeUtilization> {
    let mut out: Vec<NodeUtilization> = records
        .iter()
        .filter(|r| r.is_node_total())
        .map(|r| NodeUtilization {
            node: r.node,
            busy_ms: r.busy_ms,
            idle_ms: r.idle_ms,
            comm_ms: r.comm_ms,
            wall_ms: r.wall_ms,
            utilization: if r.wall_ms > 0.0 { 1.0 - r.idle_ms / r.wall_ms } else { 1.0 },
        })
        .collect();
    out.sort_by_key(|u| u.node);
    out
}

pub fn format_utilization(report: &[NodeUtilization]) -> String {
    let mut s = String::from("node     busy_s     idle_s     comm_s     wall_s   util\n");
    for u in report {
        let _ = writeln!(
            s,
            "{:>4} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>5.1}%",
            u.node,
            u.busy_ms / 1e3,
            u.idle_ms / 1e3,
            u.comm_ms / 1e3,
            u.wall_ms / 1e3,
            100.0 * u.utilization
        );
    }
    s
}

/// The end-of-run record written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub workers: usize,
    pub total_wall_s: f64,
    pub test_accuracy_pct: Option<f64>,
    pub nodes: Vec<NodeUtilization>,
}

impl Summary {
    /// Everything but `mode` comes from the rows, so a saved CSV reproduces
    /// the summary exactly.
    pub fn from_records(mode: &str, records: &[MetricsRecord]) -> Self {
        let nodes = utilization_report(records);
        let collector = records.iter().rev().find(|r| r.acc.is_some());
        let total_wall_ms = collector
            .map(|r| r.wall_ms)
            .unwrap_or_else(|| nodes.iter().map(|u| u.wall_ms).fold(0.0, f64::max));
        Summary {
            mode: mode.to_string(),
            workers: nodes.len(),
            total_wall_s: total_wall_ms / 1e3,
            test_accuracy_pct: collector.and_then(|r| r.acc),
            nodes,
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("summary is always serializable")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipeError::Data(format!("summary: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| PipeError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(busy: f64, idle: f64, comm: f64) -> Totals {
        Totals {
            busy_ms: busy,
            idle_ms: idle,
            comm_ms: comm,
            wall_ms: busy + idle + comm,
        }
    }

    fn sample() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord::epoch(0, 1, 1, 0, 0.6931471805599453, t(10.0, 0.0, 0.5)),
            MetricsRecord::epoch(1, 2, 2, 1, 0.25, t(11.0, 7.25, 0.0)),
            MetricsRecord::node_total(1, 2, 2, t(20.0, 10.0, 1.0)),
            MetricsRecord::node_total(0, 1, 2, t(30.0, 0.0, 1.0)),
            MetricsRecord {
                acc: Some(91.25),
                ..MetricsRecord::node_total(2, 2, 2, t(0.0, 0.0, 33.0))
            },
        ]
    }

    #[test]
    fn csv_round_trip_reproduces_summary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = sample();
        write_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert!(text.contains("\n1,2,2,,,,20.0,10.0,1.0,31.0\n"), "{text}");
        let back = read_csv(&p).unwrap();
        assert_eq!(back, rows);
        let s = Summary::from_records("all", &rows);
        assert_eq!(Summary::from_records("all", &back), s);
        assert_eq!(Summary::from_text(&s.to_text()).unwrap(), s);
        assert_eq!(s.workers, 2);
        assert_eq!(s.test_accuracy_pct, Some(91.25));
        assert!((s.total_wall_s - 0.033).abs() < 1e-12);
        assert_eq!(s.nodes[0].node, 0);
        assert_eq!(s.nodes[0].utilization, 1.0);
        assert!((s.nodes[1].utilization - 21.0 / 31.0).abs() < 1e-12);
    }

    #[test]
    fn table_has_a_line_per_node() {
        let r = utilization_report(&sample());
        assert_eq!(format_utilization(&r).lines().count(), 3);
    }
}
