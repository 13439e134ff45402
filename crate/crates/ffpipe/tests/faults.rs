//! Transport fault handling: corruption, stalls, aborts and random delays.

use std::thread;
use std::time::{Duration, Instant};

use ffpipe::run::{run_plan, run_sequential, NodeData, RunOptions};
use ffpipe::transport::{inproc, tcp, Endpoint, Jitter, TransportKind, TransportOptions};
use ffpipe::worker::run_worker;
use ffpipe::PipeError;
use ffpipe_core::dataset::synthetic_blobs;
use ffpipe_core::wire::{encode_model, LayerSnapshot, Message};
use ffpipe_core::{Dataset, Mode, Model, NegStrategy, TrainingPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn plan() -> TrainingPlan {
    TrainingPlan {
        layer_dims: vec![12, 10, 8, 8],
        num_classes: 3,
        epochs: 4,
        splits: 4,
        batch_size: 8,
        cooldown_start_epoch: 2,
        ..TrainingPlan::desk()
    }
}

fn snapshot(chapter: u16, layer: usize) -> Message<f64> {
    let m = Model::<f64>::init(&plan()).unwrap();
    Message::Layer(LayerSnapshot {
        chapter,
        stage: m.stage(layer),
    })
}

fn meshes(n: usize, opts: &TransportOptions) -> Vec<(TransportKind, Vec<Endpoint>)> {
    vec![
        (TransportKind::InProcess, inproc::mesh(n, opts)),
        (TransportKind::Tcp, tcp::loopback_mesh(n, opts).unwrap()),
    ]
}

#[test]
fn snapshots_round_trip_bitwise() {
    for (kind, mut eps) in meshes(2, &TransportOptions::default()) {
        let msg = snapshot(3, 1);
        eps[0].send(1, &msg).unwrap();
        let got = eps[1].get_layer::<f64>(3, 1, 0).unwrap();
        assert_eq!(Message::Layer(got).encode().unwrap(), msg.encode().unwrap(), "{kind}");
    }
}

#[test]
fn corrupted_frame_is_rejected() {
    for (kind, mut eps) in meshes(2, &TransportOptions::default()) {
        let mut bytes = snapshot(1, 0).encode().unwrap();
        let at = bytes.len() / 2;
        bytes[at] ^= 0x10;
        eps[0].send_raw(1, bytes).unwrap();
        let err = eps[1].get_layer::<f64>(1, 0, 0).unwrap_err();
        assert!(matches!(err, PipeError::Protocol { .. }), "{kind}: {err}");
        assert!(err.to_string().contains("checksum"), "{kind}: {err}");
    }
}

#[test]
fn get_blocks_until_publish() {
    for (kind, eps) in meshes(2, &TransportOptions::default()) {
        let mut it = eps.into_iter();
        let (mut a, mut b) = (it.next().unwrap(), it.next().unwrap());
        let t0 = Instant::now();
        let sender = thread::spawn(move || {
            thread::sleep(Duration::from_millis(150));
            a.send(1, &snapshot(2, 2)).unwrap();
            a
        });
        let got = b.get_layer::<f64>(2, 2, 0).unwrap();
        assert!(t0.elapsed() >= Duration::from_millis(150), "{kind}");
        assert_eq!(got.stage.index, 2);
        sender.join().unwrap();
    }
}

#[test]
fn stalled_worker_names_the_missing_layer() {
    let p = plan().with_mode(Mode::AllLayers, 2);
    let data = synthetic_blobs::<f64>(40, 12, 3, 3.0, 1).unwrap();
    let opts = TransportOptions {
        timeout: Duration::from_millis(300),
        jitter: None,
    };
    // node 0 never runs, so node 1 waits for layer 0 of chapter 1
    let mut eps = inproc::mesh(3, &opts);
    let err = run_worker(&p, 1, &data, &mut eps[1], Instant::now(), Duration::ZERO).unwrap_err();
    assert!(matches!(err, PipeError::Timeout { node: 1, .. }), "{err}");
    assert!(err.to_string().contains("layer 0 of chapter 1 from node 0"), "{err}");
}

#[test]
fn abort_reaches_every_peer() {
    for (kind, mut eps) in meshes(4, &TransportOptions::default()) {
        eps[2].broadcast_abort("disk on fire");
        for i in [0, 1, 3] {
            let err = eps[i].get_layer::<f64>(1, 0, 2).unwrap_err();
            match err {
                PipeError::Aborted { node, from, reason } => {
                    assert_eq!((node, from), (i, 2), "{kind}");
                    assert_eq!(reason, "disk on fire");
                }
                other => panic!("{kind}: {other}"),
            }
        }
    }
}

#[test]
fn failing_node_stops_the_run_quickly() {
    let p = TrainingPlan {
        mode: Mode::Federated,
        nodes: 3,
        neg_lag: 3,
        ..plan()
    };
    let good = synthetic_blobs::<f64>(30, 12, 3, 3.0, 1).unwrap();
    let bad = synthetic_blobs::<f64>(30, 11, 3, 3.0, 1).unwrap();
    let parts = vec![good.clone(), bad, good];
    for transport in [TransportKind::InProcess, TransportKind::Tcp] {
        let opts = RunOptions {
            transport,
            transport_opts: TransportOptions {
                timeout: Duration::from_secs(20),
                jitter: None,
            },
            ..RunOptions::default()
        };
        let t0 = Instant::now();
        let err = run_plan(&p, NodeData::Partitioned(&parts), &opts).err().unwrap();
        assert!(err.to_string().contains("dimension mismatch"), "{transport}: {err}");
        assert!(t0.elapsed() < Duration::from_secs(10), "{transport}: took {:?}", t0.elapsed());
    }
}

#[test]
fn empty_partition_is_a_config_error() {
    let p = TrainingPlan {
        mode: Mode::Federated,
        nodes: 2,
        neg_lag: 2,
        ..plan()
    };
    let good = synthetic_blobs::<f64>(30, 12, 3, 3.0, 1).unwrap();
    let empty = good.head(0);
    let parts = vec![good, empty];
    let err = run_plan(&p, NodeData::Partitioned(&parts), &RunOptions::default()).err().unwrap();
    assert!(matches!(err, PipeError::Config(_)), "{err}");
}

fn blobs(d: usize, seed: u64) -> Dataset<f64> {
    synthetic_blobs(24, d, 3, 3.0, seed).unwrap()
}

/// Random small grids with every send delayed by up to 2 ms: no deadlock,
/// and the result is still the sequential one.
#[test]
fn random_delays_never_deadlock() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..14 {
        let layers = rng.random_range(1..=8usize);
        let splits = rng.random_range(1..=16u32);
        let single = case % 2 == 1;
        let nodes = if single { layers } else { rng.random_range(1..=8usize) };
        let (mode, neg) = if single {
            (Mode::SingleLayer, NegStrategy::Adaptive)
        } else {
            (Mode::AllLayers, [NegStrategy::Adaptive, NegStrategy::Random][case % 4 / 2])
        };
        let mut dims = vec![8];
        dims.extend(std::iter::repeat(6).take(layers));
        let p = TrainingPlan {
            layer_dims: dims,
            num_classes: 3,
            epochs: splits,
            splits,
            batch_size: 8,
            cooldown_start_epoch: splits / 2,
            neg_strategy: neg,
            ..TrainingPlan::desk()
        }
        .with_mode(mode, nodes);
        let data = blobs(8, case as u64);
        let oracle = TrainingPlan {
            mode: Mode::Sequential,
            nodes: 1,
            ..p.clone()
        };
        let want = encode_model(&run_sequential(&oracle, &data, Duration::ZERO).unwrap().model, 0).unwrap();
        let transport = if case % 3 == 0 { TransportKind::Tcp } else { TransportKind::InProcess };
        let opts = RunOptions {
            transport,
            transport_opts: TransportOptions {
                timeout: Duration::from_secs(30),
                jitter: Some(Jitter {
                    seed: case as u64,
                    max: Duration::from_millis(2),
                }),
            },
            ..RunOptions::default()
        };
        let out = run_plan(&p, NodeData::Shared(&data), &opts)
            .unwrap_or_else(|e| panic!("case {case} ({mode} N={nodes} L={layers} S={splits}): {e}"));
        assert!(
            encode_model(&out.model, 0).unwrap() == want,
            "case {case} ({mode} N={nodes} L={layers} S={splits}) diverged"
        );
    }
}
