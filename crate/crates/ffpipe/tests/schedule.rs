//! Who waits for what, and when, in each distributed mode.

use std::time::Duration;

use ffpipe::run::{run_plan, NodeData, RunOptions};
use ffpipe::worker::Fetch;
use ffpipe_core::dataset::{partition, synthetic_blobs, PartitionScheme};
use ffpipe_core::wire::MsgType;
use ffpipe_core::{Dataset, Mode, TrainingPlan};

fn plan(layers: usize, splits: u32) -> TrainingPlan {
    let mut dims = vec![12];
    dims.extend(std::iter::repeat(8).take(layers));
    TrainingPlan {
        layer_dims: dims,
        num_classes: 3,
        epochs: splits,
        splits,
        batch_size: 8,
        cooldown_start_epoch: splits / 2,
        ..TrainingPlan::desk()
    }
}

fn data() -> Dataset<f64> {
    synthetic_blobs(48, 12, 3, 3.0, 5).unwrap()
}

#[test]
fn single_layer_fetches_only_lower_layers_of_the_same_chapter() {
    let p = plan(3, 3).with_mode(Mode::SingleLayer, 3);
    let out = run_plan(&p, NodeData::Shared(&data()), &RunOptions::default()).unwrap();
    for rep in &out.reports {
        let i = rep.node;
        let mut want = Vec::new();
        for c in 1..=3 {
            for j in 0..i {
                want.push(Fetch {
                    for_chapter: c,
                    layer: j,
                    chapter: c,
                    from: j,
                });
            }
        }
        assert_eq!(rep.fetches, want, "node {i}");
        assert!(rep.spans.iter().all(|s| s.layer == i));
    }
    assert!(out.reports[0].fetches.is_empty());
}

#[test]
fn single_layer_staggers_chapter_starts() {
    let p = plan(3, 3).with_mode(Mode::SingleLayer, 3);
    let opts = RunOptions {
        batch_delay: Duration::from_millis(4),
        ..RunOptions::default()
    };
    let out = run_plan(&p, NodeData::Shared(&data()), &opts).unwrap();
    let r = &out.reports;
    for i in 1..3 {
        for c in 0..3 {
            // chapter c+1 of layer i starts only after layer i-1 published it
            assert!(
                r[i].spans[c].start_ms >= r[i - 1].spans[c].end_ms,
                "node {i} chapter {}: {:?} vs {:?}",
                c + 1,
                r[i].spans[c],
                r[i - 1].spans[c]
            );
        }
    }
    // the first node never waits
    assert_eq!(r[0].totals.idle_ms, 0.0);
}

#[test]
fn all_layers_ring_gives_each_node_its_chapters() {
    let p = plan(3, 6).with_mode(Mode::AllLayers, 3);
    let out = run_plan(&p, NodeData::Shared(&data()), &RunOptions::default()).unwrap();
    for rep in &out.reports {
        let chapters: Vec<u32> = rep.spans.iter().step_by(3).map(|s| s.chapter).collect();
        let i = rep.node as u32;
        assert_eq!(chapters, vec![i + 1, i + 4], "node {i}");
        assert_eq!(rep.spans.len(), 6);
        let from_prev = rep.fetches.iter().all(|f| f.chapter + 1 == f.for_chapter && f.from == (rep.node + 2) % 3);
        assert!(from_prev, "node {i}: {:?}", rep.fetches);
    }
    // every layer trains E epochs in total
    let epochs: usize = out.records.iter().filter(|r| r.layer == Some(1)).count();
    assert_eq!(epochs, 6);
}

#[test]
fn federated_wire_carries_only_parameters_and_control() {
    let d = data();
    let parts = partition(&d, 2, PartitionScheme::Iid, 1).unwrap();
    let p = plan(3, 4).with_mode(Mode::Federated, 2);
    let out = run_plan(&p, NodeData::Partitioned(&parts), &RunOptions::default()).unwrap();
    assert_eq!(out.wire.bytes(MsgType::NegLabels), 0);
    let known = out.wire.bytes(MsgType::LayerSnapshot) + out.wire.bytes(MsgType::Control) + out.wire.bytes(MsgType::MetricsSample);
    assert_eq!(known, out.wire.total_bytes());
    assert!(out.wire.frames(MsgType::LayerSnapshot) > 0);
}

#[test]
fn node_clocks_balance() {
    let p = plan(3, 4).with_mode(Mode::AllLayers, 2);
    let out = run_plan(&p, NodeData::Shared(&data()), &RunOptions::default()).unwrap();
    for rep in &out.reports {
        let t = rep.totals;
        assert!((t.busy_ms + t.idle_ms + t.comm_ms - t.wall_ms).abs() <= 1.0, "{t:?}");
    }
    let summary = out.summary();
    assert_eq!(summary.workers, 2);
    for u in &summary.nodes {
        assert!((u.busy_ms + u.idle_ms + u.comm_ms - u.wall_ms).abs() <= 1.0, "{u:?}");
    }
}
