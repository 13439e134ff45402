//! What a single node does in each distributed mode.
//!
//! Workers own no shared state. Everything they learn about the rest of the
//! run arrives as layer snapshots or negative labels through their
//! [`Endpoint`]; everything they produce leaves the same way. The final
//! stages and all metrics go to the collector endpoint.

use std::time::{Duration, Instant};

use ffpipe_core::engine::{
    adaptive_negatives, refreshes_negatives, train_chapter, BatchEvent, ChapterInputs, EpochEvent, Observer,
    PendingNegatives,
};
use ffpipe_core::wire::{Control, ControlKind, LayerSnapshot, Message, MetricsSample, NegLabels};
use ffpipe_core::{Dataset, Mode, Model, NegAssignment, NegStrategy, Real, Stage, TrainingPlan};

use crate::clock::{NodeClock, Phase, Totals};
use crate::error::{PipeError, Result};
use crate::metrics::MetricsRecord;
use crate::transport::Endpoint;

/// Layer field of a metrics sample carrying a node's totals.
const TOTAL_ROW: u16 = u16::MAX;

/// When a node trained one chapter, in milliseconds since the shared start.
#[derive(Clone, Debug, PartialEq)]
pub struct ChapterSpan {
    pub chapter: u32,
    pub layer: usize,
    pub start_ms: f64,
    pub end_ms: f64,
}

/// A snapshot a node waited for before training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fetch {
    /// The chapter about to be trained.
    pub for_chapter: u32,
    pub layer: usize,
    /// Chapter tag of the snapshot received.
    pub chapter: u32,
    pub from: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeReport {
    pub node: usize,
    pub totals: Totals,
    pub spans: Vec<ChapterSpan>,
    pub fetches: Vec<Fetch>,
    pub batches: usize,
    pub negative_rows: usize,
}

pub fn record_to_sample(r: &MetricsRecord) -> MetricsSample {
    MetricsSample {
        node: r.node as u16,
        chapter: r.chapter as u16,
        epoch: r.epoch,
        layer: r.layer.map_or(TOTAL_ROW, |l| l as u16),
        loss: r.loss.unwrap_or(f64::NAN),
        acc: r.acc.unwrap_or(f64::NAN),
        busy_ms: r.busy_ms,
        idle_ms: r.idle_ms,
        comm_ms: r.comm_ms,
        wall_ms: r.wall_ms,
    }
}

pub fn sample_to_record(s: &MetricsSample) -> MetricsRecord {
    let opt = |v: f64| (!v.is_nan()).then_some(v);
    MetricsRecord {
        node: s.node as usize,
        chapter: s.chapter as u32,
        epoch: s.epoch,
        layer: (s.layer != TOTAL_ROW).then_some(s.layer as usize),
        loss: opt(s.loss),
        acc: opt(s.acc),
        busy_ms: s.busy_ms,
        idle_ms: s.idle_ms,
        comm_ms: s.comm_ms,
        wall_ms: s.wall_ms,
    }
}

struct Node<'a, R> {
    plan: &'a TrainingPlan,
    id: usize,
    data: &'a Dataset<R>,
    ep: &'a mut Endpoint,
    clock: NodeClock,
    start: Instant,
    delay: Duration,
    report: NodeReport,
}

/// Forwards epoch metrics to the collector while training runs.
struct Reporter<'b> {
    node: usize,
    collector: usize,
    ep: &'b mut Endpoint,
    clock: &'b mut NodeClock,
    delay: Duration,
    report: &'b mut NodeReport,
    failed: Option<PipeError>,
}

impl Observer for Reporter<'_> {
    fn on_batch(&mut self, e: &BatchEvent) {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        self.report.batches += 1;
        self.report.negative_rows += e.negative_rows;
    }

    fn on_epoch(&mut self, e: &EpochEvent) {
        if self.failed.is_some() {
            return;
        }
        log::debug!("node {} layer {} epoch {} loss {:.4}", self.node, e.layer, e.epoch, e.mean_loss);
        let row = MetricsRecord::epoch(self.node, e.chapter, e.epoch, e.layer, e.mean_loss, self.clock.totals());
        let msg = Message::<f32>::Metrics(record_to_sample(&row));
        let prev = self.clock.switch(Phase::Comm);
        if let Err(err) = self.ep.send(self.collector, &msg) {
            self.failed = Some(err);
        }
        self.clock.switch(prev);
    }
}

impl<R: Real> Node<'_, R> {
    fn collector(&self) -> usize {
        self.plan.nodes
    }

    fn send(&mut self, to: usize, msg: &Message<R>) -> Result<()> {
        let prev = self.clock.switch(Phase::Comm);
        let r = self.ep.send(to, msg);
        self.clock.switch(prev);
        r
    }

    fn publish(&mut self, to: usize, chapter: u32, stage: Stage<R>) -> Result<()> {
        let snap = LayerSnapshot {
            chapter: chapter as u16,
            stage,
        };
        self.send(to, &Message::Layer(snap))
    }

    fn fetch_layer(&mut self, for_chapter: u32, chapter: u32, layer: usize, from: usize) -> Result<Stage<R>> {
        let prev = self.clock.switch(Phase::Idle);
        let got = self.ep.get_layer::<R>(chapter, layer, from);
        self.clock.switch(prev);
        let snap = got?;
        if snap.stage.index != layer || snap.chapter as u32 != chapter {
            return Err(PipeError::Protocol {
                node: self.id,
                msg: format!("asked for layer {layer} of chapter {chapter}, got {} of {}", snap.stage.index, snap.chapter),
            });
        }
        self.report.fetches.push(Fetch {
            for_chapter,
            layer,
            chapter,
            from,
        });
        Ok(snap.stage)
    }

    fn fetch_negatives(&mut self, chapter: u32, from: usize) -> Result<NegAssignment> {
        let prev = self.clock.switch(Phase::Idle);
        let got = self.ep.get_negatives(chapter, from);
        self.clock.switch(prev);
        let n = got?;
        Ok(NegAssignment {
            strategy: NegStrategy::Adaptive,
            labels: n.labels,
            rng_seed: 0,
            num_classes: n.num_classes as usize,
        })
    }

    fn send_negatives(&mut self, to: usize, chapter: u32, neg: &NegAssignment) -> Result<()> {
        let msg = Message::Neg(NegLabels {
            chapter: chapter as u16,
            num_classes: neg.num_classes as u16,
            labels: neg.labels.clone(),
        });
        self.send(to, &msg)
    }

    /// Trains stage `l` of `model` for `chapter` with metrics and delay
    /// hooks attached.
    fn train(&mut self, model: &mut Model<R>, l: usize, chapter: u32, inputs: &ChapterInputs<R>) -> Result<()> {
        let start_ms = ms_since(self.start);
        let last = l + 1 == model.layers.len();
        let mut reporter = Reporter {
            node: self.id,
            collector: self.plan.nodes,
            ep: &mut *self.ep,
            clock: &mut self.clock,
            delay: self.delay,
            report: &mut self.report,
            failed: None,
        };
        train_chapter(
            self.plan,
            l,
            chapter,
            &mut model.layers[l],
            model.probes.get_mut(l),
            if last { model.head.as_mut() } else { None },
            inputs,
            &self.data.labels,
            &mut reporter,
        )?;
        if let Some(e) = reporter.failed {
            return Err(e);
        }
        self.report.spans.push(ChapterSpan {
            chapter,
            layer: l,
            start_ms,
            end_ms: ms_since(self.start),
        });
        Ok(())
    }

    fn finish(mut self) -> Result<NodeReport> {
        let t = self.clock.totals();
        let row = MetricsRecord::node_total(self.id, self.plan.splits, self.plan.epochs, t);
        let collector = self.collector();
        self.send(collector, &Message::Metrics(record_to_sample(&row)))?;
        let done = Message::Control(Control {
            kind: ControlKind::Done,
            node: self.id as u16,
            text: String::new(),
        });
        self.send(collector, &done)?;
        self.report.node = self.id;
        self.report.totals = t;
        Ok(self.report)
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn adaptive_due(plan: &TrainingPlan, chapter: u32) -> bool {
    plan.uses_negatives() && plan.neg_strategy == NegStrategy::Adaptive && chapter > plan.neg_lag
}

/// Ring schedule shared by the all-layers and federated modes: chapter `c`
/// runs on node `(c - 1) mod N`, which pulls each layer from the previous
/// chapter's owner just before training it.
fn ring<R: Real>(node: &mut Node<'_, R>) -> Result<()> {
    let plan = node.plan;
    let data = node.data;
    let layers = plan.layer_count();
    let mut model = Model::<R>::init(plan)?;
    let mut pending = PendingNegatives::new();
    for c in plan.ring_chapters(node.id) {
        if adaptive_due(plan, c) {
            let src = plan.ring_owner(c - plan.neg_lag);
            if src != node.id {
                let neg = node.fetch_negatives(c, src)?;
                pending.insert(c, neg);
            }
        }
        let negatives = pending.take(plan, &data.labels, c)?;
        let mut inputs = ChapterInputs::first(plan, data, negatives.as_ref())?;
        let prev = (c > 1).then(|| plan.ring_owner(c - 1)).filter(|&p| p != node.id);
        let next = if c == plan.splits {
            Some(node.collector())
        } else {
            Some(plan.ring_owner(c + 1)).filter(|&o| o != node.id)
        };
        for l in 0..layers {
            if let Some(p) = prev {
                let stage = node.fetch_layer(c, c - 1, l, p)?;
                model.set_stage(stage)?;
            }
            node.train(&mut model, l, c, &inputs)?;
            if let Some(to) = next {
                node.publish(to, c, model.stage(l))?;
            }
            if l + 1 < layers {
                inputs.advance(&model.layers[l])?;
            }
        }
        if refreshes_negatives(plan, c) {
            let target = c + plan.neg_lag;
            let neg = adaptive_negatives(&model.layers, data)?;
            let owner = plan.ring_owner(target);
            if owner == node.id {
                pending.insert(target, neg);
            } else {
                node.send_negatives(owner, target, &neg)?;
            }
        }
    }
    Ok(())
}

/// One layer per node: node `i` trains layer `i` in every chapter, using
/// the chapter-`c` snapshots of all layers below it. The last node turns
/// its view of the whole network into adaptive negatives for everyone.
fn single_layer<R: Real>(node: &mut Node<'_, R>) -> Result<()> {
    let plan = node.plan;
    let data = node.data;
    let i = node.id;
    let layers = plan.layer_count();
    let last = layers - 1;
    let mut model = Model::<R>::init(plan)?;
    let mut pending = PendingNegatives::new();
    for c in 1..=plan.splits {
        if adaptive_due(plan, c) && i != last {
            let neg = node.fetch_negatives(c, last)?;
            pending.insert(c, neg);
        }
        let negatives = pending.take(plan, &data.labels, c)?;
        for j in 0..i {
            let stage = node.fetch_layer(c, c, j, j)?;
            model.set_stage(stage)?;
        }
        let inputs = ChapterInputs::through(plan, data, negatives.as_ref(), &model.layers[..i])?;
        node.train(&mut model, i, c, &inputs)?;
        for to in i + 1..layers {
            node.publish(to, c, model.stage(i))?;
        }
        if c == plan.splits {
            let collector = node.collector();
            node.publish(collector, c, model.stage(i))?;
        }
        if i == last && refreshes_negatives(plan, c) {
            let target = c + plan.neg_lag;
            let neg = adaptive_negatives::<R>(&model.layers, data)?;
            for to in 0..last {
                node.send_negatives(to, target, &neg)?;
            }
            pending.insert(target, neg);
        }
    }
    Ok(())
}

/// Runs node `id`'s share of `plan`. On failure every other endpoint is
/// told to abort.
pub fn run_worker<R: Real>(
    plan: &TrainingPlan,
    id: usize,
    data: &Dataset<R>,
    ep: &mut Endpoint,
    start: Instant,
    batch_delay: Duration,
) -> Result<NodeReport> {
    let mut node = Node {
        plan,
        id,
        data,
        ep,
        clock: NodeClock::start_at(start),
        start,
        delay: batch_delay,
        report: NodeReport::default(),
    };
    let res = match plan.mode {
        Mode::SingleLayer => single_layer(&mut node),
        Mode::AllLayers | Mode::Federated | Mode::Sequential => ring(&mut node),
    };
    match res {
        Ok(()) => node.finish(),
        Err(e) => {
            if !matches!(e, PipeError::Aborted { .. }) {
                log::error!("node {id}: {e}");
                node.ep.broadcast_abort(&e.to_string());
            }
            Err(e)
        }
    }
}

/// Receives final stages and metrics until every worker reports done.
pub fn run_collector<R: Real>(plan: &TrainingPlan, ep: &mut Endpoint) -> Result<(Model<R>, Vec<MetricsRecord>)> {
    let res = collect(plan, ep);
    if let Err(e) = &res {
        if !matches!(e, PipeError::Aborted { .. }) {
            log::error!("collector: {e}");
            ep.broadcast_abort(&e.to_string());
        }
    }
    res
}

fn collect<R: Real>(plan: &TrainingPlan, ep: &mut Endpoint) -> Result<(Model<R>, Vec<MetricsRecord>)> {
    let layers = plan.layer_count();
    let mut stages: Vec<Option<Stage<R>>> = vec![None; layers];
    let mut records = Vec::new();
    let mut done = vec![false; plan.nodes];
    while done.iter().any(|d| !d) {
        let (from, msg) = ep.next_message::<R>()?;
        match msg {
            Message::Layer(s) if s.chapter as u32 == plan.splits && s.stage.index < layers => {
                let i = s.stage.index;
                if stages[i].replace(s.stage).is_some() {
                    return Err(PipeError::Protocol {
                        node: ep.node(),
                        msg: format!("final layer {i} published twice"),
                    });
                }
            }
            Message::Metrics(m) => records.push(sample_to_record(&m)),
            Message::Control(Control {
                kind: ControlKind::Done,
                node,
                ..
            }) if (node as usize) < plan.nodes => done[node as usize] = true,
            other => {
                return Err(PipeError::Protocol {
                    node: ep.node(),
                    msg: format!("unexpected {:?} from node {from}", other.msg_type()),
                })
            }
        }
    }
    let missing: Vec<usize> = (0..layers).filter(|&i| stages[i].is_none()).collect();
    if !missing.is_empty() {
        return Err(PipeError::Protocol {
            node: ep.node(),
            msg: format!("workers finished without publishing final layers {missing:?}"),
        });
    }
    let stages = stages.into_iter().map(|s| s.expect("checked")).collect();
    let model = Model::from_stages(stages, plan.num_classes, plan.classifier)?;
    records.sort_by_key(|r| r.node);
    Ok((model, records))
}
