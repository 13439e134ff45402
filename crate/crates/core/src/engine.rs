//! The chapter step shared by every schedule.
//!
//! Training one layer for one chapter depends only on the layer's state,
//! the inputs produced by the layers below, the chapter's negative labels
//! and the plan. Sequential, pipelined and federated runs all call
//! [`train_chapter`]; they differ only in where those inputs come from.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::classify::SoftmaxHead;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ff::{embed_labels, embed_neutral_all, ff_batch_update, network_input, FFLayer};
use crate::model::Model;
use crate::neg::{assign_adaptive_neg, assign_fixed_neg, resample_random_neg, NegAssignment, NegStrategy};
use crate::perfopt::{train_perfopt_layer, PerLayerHead};
use crate::plan::{ClassifierMode, TrainingPlan};
use crate::real::Real;
use crate::rng::{permutation, stream, Purpose};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchEvent {
    pub layer: usize,
    pub chapter: u32,
    pub epoch: u32,
    pub batch: usize,
    pub rows: usize,
    /// Negative rows consumed by this update.
    pub negative_rows: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochEvent {
    pub layer: usize,
    pub chapter: u32,
    pub epoch: u32,
    pub batches: usize,
    pub mean_loss: f64,
}

/// Hooks into the training loop. Both methods default to doing nothing.
pub trait Observer {
    fn on_batch(&mut self, _event: &BatchEvent) {}
    fn on_epoch(&mut self, _event: &EpochEvent) {}
}

impl Observer for () {}

/// Input streams for the layer about to be trained in a chapter.
///
/// Built from the raw data, then pushed through each trained layer below
/// with [`ChapterInputs::advance`].
#[derive(Clone, Debug)]
pub struct ChapterInputs<R> {
    /// Positive rows (perfopt: the only rows).
    pub pos: Matrix<R>,
    pub neg: Option<Matrix<R>>,
    /// Neutral-overlay rows feeding the softmax head.
    pub neutral: Option<Matrix<R>>,
    /// Normalized neutral activities of head input layers already passed.
    pub head_features: Vec<Matrix<R>>,
    depth: usize,
}

impl<R: Real> ChapterInputs<R> {
    /// Inputs for the first layer.
    pub fn first(plan: &TrainingPlan, data: &Dataset<R>, negatives: Option<&NegAssignment>) -> Result<Self> {
        if data.dim() != plan.layer_dims[0] {
            return Err(Error::shape(
                "chapter inputs",
                format!("{} features", plan.layer_dims[0]),
                format!("{}", data.dim()),
            ));
        }
        let x = network_input(&data.images);
        if plan.classifier.is_perfopt() {
            return Ok(ChapterInputs {
                pos: x,
                neg: None,
                neutral: None,
                head_features: Vec::new(),
                depth: 0,
            });
        }
        let negatives = negatives.ok_or_else(|| Error::Config("FF training needs negative labels".into()))?;
        if !negatives.is_valid_for(&data.labels) {
            return Err(Error::Config("negative labels do not fit the data".into()));
        }
        let c = plan.num_classes;
        Ok(ChapterInputs {
            pos: embed_labels(&x, &data.labels, c)?,
            neg: Some(embed_labels(&x, &negatives.labels, c)?),
            neutral: if plan.classifier == ClassifierMode::Softmax {
                Some(embed_neutral_all(&x, c)?)
            } else {
                None
            },
            head_features: Vec::new(),
            depth: 0,
        })
    }

    /// Number of layers already applied.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Pushes every stream through a trained layer.
    pub fn advance(&mut self, layer: &FFLayer<R>) -> Result<()> {
        self.pos = layer.forward(&self.pos)?.row_normalize();
        if let Some(neg) = &self.neg {
            self.neg = Some(layer.forward(neg)?.row_normalize());
        }
        if let Some(neutral) = &self.neutral {
            let next = layer.forward(neutral)?.row_normalize();
            if self.depth >= 1 {
                self.head_features.push(next.clone());
            }
            self.neutral = Some(next);
        }
        self.depth += 1;
        Ok(())
    }

    /// Inputs for layer `layers.len()`, given every layer below it.
    pub fn through(plan: &TrainingPlan, data: &Dataset<R>, negatives: Option<&NegAssignment>, layers: &[FFLayer<R>]) -> Result<Self> {
        let mut inputs = Self::first(plan, data, negatives)?;
        for layer in layers {
            inputs.advance(layer)?;
        }
        Ok(inputs)
    }
}

/// Negative labels in force during `chapter`.
///
/// Adaptive chapters up to `neg_lag` use the initial fixed draw; later ones
/// need `adaptive`, computed after chapter `chapter - neg_lag`.
pub fn negatives_for_chapter(
    plan: &TrainingPlan,
    labels: &[u8],
    chapter: u32,
    adaptive: Option<NegAssignment>,
) -> Result<NegAssignment> {
    let c = plan.num_classes;
    match plan.neg_strategy {
        NegStrategy::Fixed => assign_fixed_neg(labels, c, plan.seed),
        NegStrategy::Random => resample_random_neg(labels, c, chapter - 1, plan.seed),
        NegStrategy::Adaptive if chapter <= plan.neg_lag => {
            let mut a = assign_fixed_neg(labels, c, plan.seed)?;
            a.strategy = NegStrategy::Adaptive;
            Ok(a)
        }
        NegStrategy::Adaptive => adaptive.ok_or_else(|| {
            Error::Config(format!(
                "adaptive negatives for chapter {chapter} (from chapter {}) are missing",
                chapter - plan.neg_lag
            ))
        }),
    }
}

/// Adaptive negatives from the given network state.
pub fn adaptive_negatives<R: Real>(layers: &[FFLayer<R>], data: &Dataset<R>) -> Result<NegAssignment> {
    assign_adaptive_neg(layers, &data.images, &data.labels, data.num_classes)
}

/// Whether the network after `chapter` feeds a later chapter's negatives.
pub fn refreshes_negatives(plan: &TrainingPlan, chapter: u32) -> bool {
    plan.uses_negatives() && plan.neg_strategy == NegStrategy::Adaptive && chapter + plan.neg_lag <= plan.splits
}

/// Trains one layer (with its probe or head) through every epoch of
/// `chapter`.
///
/// `head`, when present, must belong to the last layer; it takes one step
/// per FF batch on the neutral features of all head input layers.
#[allow(clippy::too_many_arguments)]
pub fn train_chapter<R: Real>(
    plan: &TrainingPlan,
    layer_index: usize,
    chapter: u32,
    layer: &mut FFLayer<R>,
    mut probe: Option<&mut PerLayerHead<R>>,
    mut head: Option<&mut SoftmaxHead<R>>,
    inputs: &ChapterInputs<R>,
    labels: &[u8],
    observer: &mut dyn Observer,
) -> Result<()> {
    if inputs.depth != layer_index {
        return Err(Error::Config(format!(
            "inputs for layer {} used to train layer {layer_index}",
            inputs.depth
        )));
    }
    let n = inputs.pos.rows();
    if labels.len() != n {
        return Err(Error::shape("train_chapter", format!("{n} labels"), format!("{}", labels.len())));
    }
    let perfopt = plan.classifier.is_perfopt();
    if perfopt && probe.is_none() {
        return Err(Error::Config("perfopt training needs the layer's probe".into()));
    }
    if head.is_some() && (layer_index + 1 != plan.layer_count() || inputs.neutral.is_none()) {
        return Err(Error::Config("the softmax head trains with the last layer only".into()));
    }
    let empty = Matrix::zeros(0, inputs.pos.cols());
    for epoch in plan.chapter_epoch_range(chapter) {
        let lr = plan.lr_ff_at(epoch);
        let order: Vec<usize> = if plan.shuffle {
            permutation(&mut stream(plan.seed, Purpose::Shuffle, layer_index as u16, epoch), n)
        } else {
            (0..n).collect()
        };
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(plan.batch_size).enumerate() {
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let pos = inputs.pos.select_rows(idx);
            let (loss, negative_rows) = if let Some(probe) = probe.as_deref_mut() {
                (train_perfopt_layer(layer, probe, &pos, &y, lr)?, 0)
            } else {
                let neg = inputs.neg.as_ref().map_or_else(|| empty.clone(), |m| m.select_rows(idx));
                let loss = ff_batch_update(layer, &pos, &neg, lr)?;
                if let (Some(head), Some(neutral)) = (head.as_deref_mut(), inputs.neutral.as_ref()) {
                    let top = layer.forward(&neutral.select_rows(idx))?.row_normalize();
                    let mut parts: Vec<Matrix<R>> = inputs.head_features.iter().map(|f| f.select_rows(idx)).collect();
                    parts.push(top);
                    let features = Matrix::hstack(&parts.iter().collect::<Vec<_>>())?;
                    head.step(&features, &y, plan.lr_head_at(epoch))?;
                }
                (loss, neg.rows())
            };
            let loss = loss.as_f64();
            total += loss;
            batches += 1;
            observer.on_batch(&BatchEvent {
                layer: layer_index,
                chapter,
                epoch,
                batch: b,
                rows: idx.len(),
                negative_rows,
                loss,
            });
        }
        observer.on_epoch(&EpochEvent {
            layer: layer_index,
            chapter,
            epoch,
            batches,
            mean_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
        });
    }
    Ok(())
}

/// Trains stage `l` of `model` for `chapter`; the usual single-process call.
pub fn train_model_stage<R: Real>(
    plan: &TrainingPlan,
    model: &mut Model<R>,
    l: usize,
    chapter: u32,
    inputs: &ChapterInputs<R>,
    labels: &[u8],
    observer: &mut dyn Observer,
) -> Result<()> {
    let last = l + 1 == model.layers.len();
    let probe = model.probes.get_mut(l);
    let head = if last { model.head.as_mut() } else { None };
    train_chapter(plan, l, chapter, &mut model.layers[l], probe, head, inputs, labels, observer)
}

/// Trains every layer of `model` for one chapter, bottom-up, each layer
/// seeing the freshly trained layers below it.
pub fn train_full_chapter<R: Real>(
    plan: &TrainingPlan,
    model: &mut Model<R>,
    data: &Dataset<R>,
    chapter: u32,
    negatives: Option<&NegAssignment>,
    observer: &mut dyn Observer,
) -> Result<()> {
    let mut inputs = ChapterInputs::first(plan, data, negatives)?;
    for l in 0..model.layers.len() {
        train_model_stage(plan, model, l, chapter, &inputs, &data.labels, observer)?;
        if l + 1 < model.layers.len() {
            inputs.advance(&model.layers[l])?;
        }
    }
    Ok(())
}

/// Adaptive negatives computed but not yet due, keyed by target chapter.
#[derive(Clone, Debug, Default)]
pub struct PendingNegatives {
    due: BTreeMap<u32, NegAssignment>,
}

impl PendingNegatives {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the state after `chapter` when it feeds a later chapter.
    pub fn after_chapter<R: Real>(
        &mut self,
        plan: &TrainingPlan,
        chapter: u32,
        layers: &[FFLayer<R>],
        data: &Dataset<R>,
    ) -> Result<()> {
        if refreshes_negatives(plan, chapter) {
            self.due.insert(chapter + plan.neg_lag, adaptive_negatives(layers, data)?);
        }
        Ok(())
    }

    pub fn insert(&mut self, chapter: u32, negatives: NegAssignment) {
        self.due.insert(chapter, negatives);
    }

    /// Negatives for `chapter`, or `None` for perfopt plans.
    pub fn take(&mut self, plan: &TrainingPlan, labels: &[u8], chapter: u32) -> Result<Option<NegAssignment>> {
        if !plan.uses_negatives() {
            return Ok(None);
        }
        negatives_for_chapter(plan, labels, chapter, self.due.remove(&chapter)).map(Some)
    }
}

/// The whole schedule on one worker: every chapter, every layer.
pub fn train_sequential<R: Real>(plan: &TrainingPlan, data: &Dataset<R>, observer: &mut dyn Observer) -> Result<Model<R>> {
    let mut model = Model::init(plan)?;
    let mut pending = PendingNegatives::new();
    for chapter in 1..=plan.splits {
        let negatives = pending.take(plan, &data.labels, chapter)?;
        train_full_chapter(plan, &mut model, data, chapter, negatives.as_ref(), observer)?;
        pending.after_chapter(plan, chapter, &model.layers, data)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_blobs;
    use crate::perfopt::PerfoptReadout;
    use alloc::vec;

    fn small_plan() -> TrainingPlan {
        TrainingPlan {
            layer_dims: vec![16, 12, 10, 8],
            num_classes: 4,
            epochs: 6,
            splits: 3,
            batch_size: 16,
            lr_ff: 0.02,
            lr_head: 0.01,
            cooldown_start_epoch: 3,
            ..TrainingPlan::desk()
        }
    }

    #[derive(Default)]
    struct Tally {
        batches: usize,
        negative_rows: usize,
        epochs: Vec<(usize, u32, u32)>,
    }

    impl Observer for Tally {
        fn on_batch(&mut self, e: &BatchEvent) {
            self.batches += 1;
            self.negative_rows += e.negative_rows;
        }
        fn on_epoch(&mut self, e: &EpochEvent) {
            self.epochs.push((e.layer, e.chapter, e.epoch));
        }
    }

    #[test]
    fn sequential_visits_every_layer_epoch_in_order() {
        let plan = small_plan();
        let data = synthetic_blobs::<f64>(100, 16, 4, 3.0, 1).unwrap();
        let mut t = Tally::default();
        train_sequential(&plan, &data, &mut t).unwrap();
        let mut want = Vec::new();
        for c in 1..=3u32 {
            for l in 0..3 {
                for e in plan.chapter_epoch_range(c) {
                    want.push((l, c, e));
                }
            }
        }
        assert_eq!(t.epochs, want);
        // 100 rows in batches of 16: 7 per epoch, 6 epochs, 3 layers
        assert_eq!(t.batches, 7 * 6 * 3);
        assert_eq!(t.negative_rows, 100 * 6 * 3);
    }

    #[test]
    fn sequential_is_deterministic() {
        for strategy in [NegStrategy::Adaptive, NegStrategy::Random, NegStrategy::Fixed] {
            let plan = TrainingPlan {
                neg_strategy: strategy,
                ..small_plan()
            };
            let data = synthetic_blobs::<f64>(80, 16, 4, 3.0, 2).unwrap();
            let a = train_sequential(&plan, &data, &mut ()).unwrap();
            let b = train_sequential(&plan, &data, &mut ()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn perfopt_uses_no_negatives() {
        let plan = TrainingPlan {
            classifier: ClassifierMode::Perfopt(PerfoptReadout::LastLayer),
            ..small_plan()
        };
        let data = synthetic_blobs::<f64>(64, 16, 4, 3.0, 3).unwrap();
        let mut t = Tally::default();
        let m = train_sequential(&plan, &data, &mut t).unwrap();
        assert_eq!(t.negative_rows, 0);
        assert!(t.batches > 0);
        assert_eq!(m.probes.len(), 3);
    }

    #[test]
    fn softmax_head_trains_and_ff_layers_ignore_it() {
        let data = synthetic_blobs::<f64>(120, 16, 4, 4.0, 4).unwrap();
        let goodness = train_sequential(&small_plan(), &data, &mut ()).unwrap();
        let plan = TrainingPlan {
            classifier: ClassifierMode::Softmax,
            ..small_plan()
        };
        let softmax = train_sequential(&plan, &data, &mut ()).unwrap();
        assert_eq!(goodness.layers, softmax.layers);
        let fresh = Model::<f64>::init(&plan).unwrap();
        assert_ne!(fresh.head, softmax.head);
    }

    #[test]
    fn adaptive_lag_controls_which_state_is_used() {
        let data = synthetic_blobs::<f64>(60, 16, 4, 3.0, 5).unwrap();
        let plan = small_plan();
        // chapters up to the lag use the initial draw
        let first = negatives_for_chapter(&plan, &data.labels, 1, None).unwrap();
        assert_eq!(first.labels, assign_fixed_neg(&data.labels, 4, plan.seed).unwrap().labels);
        assert!(negatives_for_chapter(&plan, &data.labels, 2, None).is_err());
        let lag3 = TrainingPlan { neg_lag: 3, ..plan.clone() };
        assert!(negatives_for_chapter(&lag3, &data.labels, 3, None).is_ok());
        assert!(!refreshes_negatives(&lag3, 1));
        assert!(refreshes_negatives(&plan, 2) && !refreshes_negatives(&plan, 3));
    }

    #[test]
    fn random_negatives_follow_the_chapter() {
        let plan = TrainingPlan {
            neg_strategy: NegStrategy::Random,
            ..small_plan()
        };
        let labels: Vec<u8> = (0..200).map(|i| (i % 4) as u8).collect();
        let a = negatives_for_chapter(&plan, &labels, 2, None).unwrap();
        assert_eq!(a, resample_random_neg(&labels, 4, 1, plan.seed).unwrap());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let plan = small_plan();
        let data = synthetic_blobs::<f64>(20, 16, 4, 3.0, 6).unwrap();
        let negs = negatives_for_chapter(&plan, &data.labels, 1, None).unwrap();
        let inputs = ChapterInputs::first(&plan, &data, Some(&negs)).unwrap();
        let mut m = Model::<f64>::init(&plan).unwrap();
        assert!(train_model_stage(&plan, &mut m, 1, 1, &inputs, &data.labels, &mut ()).is_err());
        assert!(ChapterInputs::first(&plan, &data, None).is_err());
    }
}
