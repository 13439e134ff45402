//! Run configuration and the epoch/split/chapter arithmetic.
//!
//! `E` epochs are cut into `S` splits; a chapter is `C = E / S` consecutive
//! epochs of one layer. Chapters are numbered from 1 and the global epoch
//! of chapter `c`, local epoch `m` (1-based) is `(c - 1)·C + m`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::neg::NegStrategy;
use crate::perfopt::PerfoptReadout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Sequential,
    SingleLayer,
    AllLayers,
    Federated,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sequential => "seq",
            Mode::SingleLayer => "single",
            Mode::AllLayers => "all",
            Mode::Federated => "fed",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(Mode::Sequential),
            "single" | "single-layer" => Ok(Mode::SingleLayer),
            "all" | "all-layers" => Ok(Mode::AllLayers),
            "fed" | "federated" => Ok(Mode::Federated),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// What the layers are trained for and how the model predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassifierMode {
    Goodness,
    Softmax,
    Perfopt(PerfoptReadout),
}

impl ClassifierMode {
    pub fn is_perfopt(self) -> bool {
        matches!(self, ClassifierMode::Perfopt(_))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierMode::Goodness => "goodness",
            ClassifierMode::Softmax => "softmax",
            ClassifierMode::Perfopt(PerfoptReadout::LastLayer) => "perfopt-last",
            ClassifierMode::Perfopt(PerfoptReadout::AllLayers) => "perfopt-all",
        }
    }
}

impl fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "goodness" => Ok(ClassifierMode::Goodness),
            "softmax" => Ok(ClassifierMode::Softmax),
            "perfopt-last" => Ok(ClassifierMode::Perfopt(PerfoptReadout::LastLayer)),
            "perfopt-all" => Ok(ClassifierMode::Perfopt(PerfoptReadout::AllLayers)),
            other => Err(Error::Config(format!("unknown classifier mode `{other}`"))),
        }
    }
}

/// Linear learning-rate cooldown: `base_lr` through epoch `start`, then a
/// linear decay reaching `base_lr / (E - start)` at epoch `E`.
///
/// With `start = E/2` this is `base_lr · 2·(1 + E − e)/E`.
pub fn lr_cooldown(base_lr: f64, epoch: u32, total_epochs: u32, start: u32) -> f64 {
    debug_assert!(epoch >= 1 && epoch <= total_epochs);
    if epoch <= start || total_epochs <= start {
        base_lr
    } else {
        base_lr * (1 + total_epochs - epoch) as f64 / (total_epochs - start) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPlan {
    /// `[input, hidden_1, …, hidden_L]`
    pub layer_dims: Vec<usize>,
    pub num_classes: usize,
    /// Total epochs `E`.
    pub epochs: u32,
    /// Splits `S`.
    pub splits: u32,
    /// Node count `N`.
    pub nodes: usize,
    pub batch_size: usize,
    pub lr_ff: f64,
    pub lr_head: f64,
    pub cooldown_start_epoch: u32,
    pub theta: f64,
    pub seed: u64,
    pub neg_strategy: NegStrategy,
    /// Adaptive negatives used in chapter `c` come from the network as it
    /// stood after chapter `c - neg_lag`.
    pub neg_lag: u32,
    pub classifier: ClassifierMode,
    pub mode: Mode,
    pub adam: AdamConfig,
    /// Reshuffle batch order every epoch.
    pub shuffle: bool,
}

impl TrainingPlan {
    /// `[784, 2000, 2000, 2000, 2000]`, batch 64, 100 epochs in 100 splits,
    /// Adam at 0.01 (FF) / 0.0001 (head) with cooldown after epoch 50,
    /// θ = 0.01, adaptive negatives with goodness prediction.
    pub fn paper() -> Self {
        TrainingPlan {
            layer_dims: vec![784, 2000, 2000, 2000, 2000],
            num_classes: 10,
            epochs: 100,
            splits: 100,
            nodes: 1,
            batch_size: 64,
            lr_ff: 0.01,
            lr_head: 0.0001,
            cooldown_start_epoch: 50,
            theta: 0.01,
            seed: 1,
            neg_strategy: NegStrategy::Adaptive,
            neg_lag: 1,
            classifier: ClassifierMode::Goodness,
            mode: Mode::Sequential,
            adam: AdamConfig::default(),
            shuffle: true,
        }
    }

    /// Desk-scale variant: `[784, 500, 500, 500]`, 20 epochs in 20 splits.
    pub fn desk() -> Self {
        TrainingPlan {
            layer_dims: vec![784, 500, 500, 500],
            epochs: 20,
            splits: 20,
            cooldown_start_epoch: 10,
            ..Self::paper()
        }
    }

    /// The lag at which the owner of a chapter can refresh adaptive
    /// negatives without stalling the pipeline.
    pub fn natural_neg_lag(mode: Mode, nodes: usize, layers: usize) -> u32 {
        match mode {
            Mode::Sequential => 1,
            Mode::AllLayers | Mode::Federated => nodes.max(1) as u32,
            // the last node finishes chapter c one stagger step after the
            // first node starts chapter c + L
            Mode::SingleLayer => layers.max(1) as u32 + 1,
        }
    }

    /// Sets mode and node count, with the matching negative lag.
    pub fn with_mode(mut self, mode: Mode, nodes: usize) -> Self {
        self.mode = mode;
        self.nodes = nodes;
        self.neg_lag = Self::natural_neg_lag(mode, nodes, self.layer_count());
        self
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    /// Epochs per chapter, `C = E / S`.
    pub fn chapter_epochs(&self) -> u32 {
        self.epochs / self.splits
    }

    /// Global epochs of chapter `c` (1-based).
    pub fn chapter_epoch_range(&self, chapter: u32) -> core::ops::RangeInclusive<u32> {
        let c = self.chapter_epochs();
        (chapter - 1) * c + 1..=chapter * c
    }

    pub fn lr_ff_at(&self, epoch: u32) -> f64 {
        lr_cooldown(self.lr_ff, epoch, self.epochs, self.cooldown_start_epoch)
    }

    pub fn lr_head_at(&self, epoch: u32) -> f64 {
        lr_cooldown(self.lr_head, epoch, self.epochs, self.cooldown_start_epoch)
    }

    /// Node (0-based) that trains chapter `c` in the ring modes.
    pub fn ring_owner(&self, chapter: u32) -> usize {
        (chapter as usize - 1) % self.nodes
    }

    /// Chapters handled by `node` in the ring modes.
    pub fn ring_chapters(&self, node: usize) -> impl Iterator<Item = u32> {
        let (n, s) = (self.nodes as u32, self.splits);
        (node as u32 + 1..=s).step_by(n.max(1) as usize)
    }

    pub fn uses_negatives(&self) -> bool {
        !self.classifier.is_perfopt()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.layer_dims.len() < 2 || self.layer_dims.iter().any(|&d| d == 0) {
            return fail(format!("need an input and at least one hidden layer, got {:?}", self.layer_dims));
        }
        if self.layer_dims.len() > u16::MAX as usize {
            return fail("too many layers".into());
        }
        if self.epochs == 0 || self.splits == 0 || self.epochs % self.splits != 0 {
            return fail(format!("splits ({}) must divide epochs ({})", self.splits, self.epochs));
        }
        if self.splits > u16::MAX as u32 {
            return fail(format!("at most {} splits", u16::MAX));
        }
        if self.nodes == 0 || self.batch_size == 0 {
            return fail("nodes and batch_size must be at least 1".into());
        }
        if self.mode == Mode::Sequential && self.nodes != 1 {
            return fail(format!("sequential runs use one node, got {}", self.nodes));
        }
        if self.mode == Mode::SingleLayer && self.nodes != self.layer_count() {
            return fail(format!(
                "single-layer mode needs one node per layer ({} layers, {} nodes)",
                self.layer_count(),
                self.nodes
            ));
        }
        if !(self.theta >= 0.0) {
            return fail(format!("theta must be non-negative, got {}", self.theta));
        }
        if !(self.lr_ff >= 0.0 && self.lr_head >= 0.0) {
            return fail("learning rates must be non-negative".into());
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return fail(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.uses_negatives() && self.layer_dims[0] < self.num_classes {
            return fail(format!(
                "input dimension {} cannot hold a {}-class label overlay",
                self.layer_dims[0], self.num_classes
            ));
        }
        if self.classifier == ClassifierMode::Softmax && self.layer_count() < 2 {
            return fail("softmax classification needs at least two hidden layers".into());
        }
        if self.neg_lag == 0 {
            return fail("neg_lag must be at least 1".into());
        }
        if self.mode == Mode::Federated
            && self.uses_negatives()
            && self.neg_strategy == NegStrategy::Adaptive
            && self.neg_lag as usize % self.nodes != 0
        {
            return fail(format!(
                "federated adaptive negatives must be computed on the owning node's data: neg_lag ({}) must be a multiple of nodes ({})",
                self.neg_lag, self.nodes
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cooldown_schedule() {
        assert_eq!(lr_cooldown(0.01, 1, 100, 50), 0.01);
        assert_eq!(lr_cooldown(0.01, 50, 100, 50), 0.01);
        assert!((lr_cooldown(0.01, 100, 100, 50) - 0.02 * 0.01).abs() < 1e-18);
        assert!((lr_cooldown(1.0, 51, 100, 50) - 1.0).abs() < 1e-15);
        assert!((lr_cooldown(1.0, 75, 100, 50) - 2.0 * 26.0 / 100.0).abs() < 1e-15);
    }

    #[test]
    fn paper_settings() {
        let p = TrainingPlan::paper();
        assert_eq!(p.layer_dims, vec![784, 2000, 2000, 2000, 2000]);
        assert_eq!((p.batch_size, p.epochs, p.splits), (64, 100, 100));
        assert_eq!((p.lr_ff, p.lr_head, p.theta), (0.01, 0.0001, 0.01));
        assert_eq!(p.chapter_epochs(), 1);
        assert_eq!(p.cooldown_start_epoch, 50);
        p.validate().unwrap();
        let d = TrainingPlan::desk();
        assert_eq!(d.layer_dims, vec![784, 500, 500, 500]);
        assert_eq!((d.epochs, d.splits), (20, 20));
        d.validate().unwrap();
    }

    #[test]
    fn chapter_arithmetic() {
        let mut p = TrainingPlan::desk();
        p.epochs = 12;
        p.splits = 3;
        assert_eq!(p.chapter_epochs(), 4);
        assert_eq!(p.chapter_epoch_range(2), 5..=8);
        p.splits = 1;
        assert_eq!(p.chapter_epoch_range(1), 1..=12);
        p.splits = 5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn ring_ownership() {
        let p = TrainingPlan {
            splits: 6,
            epochs: 6,
            layer_dims: vec![10, 4, 4, 4],
            ..TrainingPlan::desk()
        }
        .with_mode(Mode::AllLayers, 3);
        assert_eq!(p.ring_chapters(0).collect::<Vec<_>>(), vec![1, 4]);
        assert_eq!(p.ring_chapters(2).collect::<Vec<_>>(), vec![3, 6]);
        assert_eq!((1..=6).map(|c| p.ring_owner(c)).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(p.neg_lag, 3);
    }

    #[test]
    fn validation_rules() {
        let single = TrainingPlan::desk().with_mode(Mode::SingleLayer, 2);
        assert!(single.validate().is_err());
        assert!(TrainingPlan::desk().with_mode(Mode::SingleLayer, 3).validate().is_ok());
        let mut seq = TrainingPlan::desk();
        seq.nodes = 2;
        assert!(seq.validate().is_err());
        let mut fed = TrainingPlan::desk().with_mode(Mode::Federated, 2);
        fed.neg_lag = 3;
        assert!(fed.validate().is_err());
        fed.neg_strategy = NegStrategy::Random;
        assert!(fed.validate().is_ok());
        let mut zero = TrainingPlan::desk();
        zero.batch_size = 0;
        assert!(zero.validate().is_err());
    }

    #[test]
    fn names_parse() {
        for m in [Mode::Sequential, Mode::SingleLayer, Mode::AllLayers, Mode::Federated] {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        for c in ["goodness", "softmax", "perfopt-last", "perfopt-all"] {
            assert_eq!(c.parse::<ClassifierMode>().unwrap().as_str(), c);
        }
    }
}
