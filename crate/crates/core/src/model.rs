//! A whole network and the per-layer stages it is exchanged in.

use alloc::format;
use alloc::vec::Vec;

use crate::classify::{predict_goodness_batch, predict_softmax_batch, SoftmaxHead};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ff::FFLayer;
use crate::perfopt::{predict_perfopt_batch, PerLayerHead};
use crate::plan::{ClassifierMode, TrainingPlan};
use crate::real::Real;
use crate::rng::{derive_seed, Purpose};
use crate::tensor::Matrix;

/// One layer plus whatever trains alongside it: the perfopt probe of that
/// layer, and for the last layer the softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<R> {
    pub index: usize,
    pub layer: FFLayer<R>,
    pub probe: Option<PerLayerHead<R>>,
    pub head: Option<SoftmaxHead<R>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<R> {
    pub layers: Vec<FFLayer<R>>,
    /// One per layer in perfopt mode, otherwise empty.
    pub probes: Vec<PerLayerHead<R>>,
    pub head: Option<SoftmaxHead<R>>,
    pub num_classes: usize,
    pub classifier: ClassifierMode,
}

impl<R: Real> Model<R> {
    /// Fresh parameters; every node calling this with the same plan gets the
    /// same model.
    pub fn init(plan: &TrainingPlan) -> Result<Self> {
        plan.validate()?;
        let dims = &plan.layer_dims;
        let layers: Vec<FFLayer<R>> = dims
            .windows(2)
            .enumerate()
            .map(|(l, d)| FFLayer::new(d[0], d[1], plan.theta, derive_seed(plan.seed, Purpose::Init, l as u16, 0), plan.adam))
            .collect();
        let probes = if plan.classifier.is_perfopt() {
            (0..layers.len())
                .map(|l| {
                    PerLayerHead::new(
                        dims[l + 1],
                        plan.num_classes,
                        l,
                        derive_seed(plan.seed, Purpose::HeadInit, l as u16, 0),
                        plan.adam,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let head = if plan.classifier == ClassifierMode::Softmax {
            Some(SoftmaxHead::for_network(
                &dims[1..],
                plan.num_classes,
                derive_seed(plan.seed, Purpose::HeadInit, layers.len() as u16, 0),
                plan.adam,
            )?)
        } else {
            None
        };
        Ok(Model {
            layers,
            probes,
            head,
            num_classes: plan.num_classes,
            classifier: plan.classifier,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_dim()).collect()
    }

    /// Copy of stage `i`.
    pub fn stage(&self, i: usize) -> Stage<R> {
        Stage {
            index: i,
            layer: self.layers[i].clone(),
            probe: self.probes.get(i).cloned(),
            head: if i + 1 == self.layers.len() { self.head.clone() } else { None },
        }
    }

    /// Replaces stage `stage.index` in place.
    pub fn set_stage(&mut self, stage: Stage<R>) -> Result<()> {
        let i = stage.index;
        if i >= self.layers.len() {
            return Err(Error::Config(format!("stage {i} out of range for {} layers", self.layers.len())));
        }
        let old = &self.layers[i];
        if old.weights.shape() != stage.layer.weights.shape() {
            return Err(Error::shape(
                "set_stage",
                format!("{:?}", old.weights.shape()),
                format!("{:?}", stage.layer.weights.shape()),
            ));
        }
        self.layers[i] = stage.layer;
        match (stage.probe, self.probes.get_mut(i)) {
            (Some(p), Some(slot)) => *slot = p,
            (None, None) => {}
            _ => return Err(Error::Config(format!("stage {i}: perfopt probe mismatch"))),
        }
        if let Some(h) = stage.head {
            if i + 1 != self.layers.len() || self.head.is_none() {
                return Err(Error::Config(format!("stage {i} carries an unexpected softmax head")));
            }
            self.head = Some(h);
        }
        Ok(())
    }

    /// Rebuilds a model from a complete set of stages.
    pub fn from_stages(mut stages: Vec<Stage<R>>, num_classes: usize, classifier: ClassifierMode) -> Result<Self> {
        stages.sort_by_key(|s| s.index);
        if stages.iter().enumerate().any(|(i, s)| s.index != i) || stages.is_empty() {
            return Err(Error::Config("stages must be exactly 0..L".into()));
        }
        let n = stages.len();
        let mut layers = Vec::with_capacity(n);
        let mut probes = Vec::new();
        let mut head = None;
        for s in stages {
            if s.index + 1 == n {
                head = s.head;
            }
            layers.push(s.layer);
            if let Some(p) = s.probe {
                probes.push(p);
            }
        }
        let model = Model {
            layers,
            probes,
            head,
            num_classes,
            classifier,
        };
        model.check()?;
        Ok(model)
    }

    /// Structural consistency: chained widths and the pieces the classifier
    /// mode needs.
    pub fn check(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(
                    "model",
                    format!("layer input {}", w[0].out_dim()),
                    format!("{}", w[1].in_dim()),
                ));
            }
        }
        let ok = match self.classifier {
            ClassifierMode::Goodness => true,
            ClassifierMode::Softmax => self.head.is_some(),
            ClassifierMode::Perfopt(_) => self.probes.len() == self.layers.len(),
        };
        if !ok || self.layers.is_empty() {
            return Err(Error::Config(format!("model incomplete for {} classification", self.classifier)));
        }
        Ok(())
    }

    /// Predictions for a batch; `sweeps` counts full forward passes.
    pub fn predict_batch(&self, images: &Matrix<R>, sweeps: &mut usize) -> Result<Vec<usize>> {
        match self.classifier {
            ClassifierMode::Goodness => predict_goodness_batch(&self.layers, images, self.num_classes, sweeps),
            ClassifierMode::Softmax => {
                let head = self.head.as_ref().ok_or_else(|| Error::Config("missing softmax head".into()))?;
                predict_softmax_batch(head, &self.layers, images, sweeps)
            }
            ClassifierMode::Perfopt(readout) => {
                *sweeps += 1;
                predict_perfopt_batch(&self.layers, &self.probes, images, readout)
            }
        }
    }

    pub fn classify(&self, image: &[R]) -> Result<usize> {
        let x = Matrix::from_vec(1, image.len(), image.to_vec())?;
        Ok(self.predict_batch(&x, &mut 0)?[0])
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &Dataset<R>) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict_batch(&data.images, &mut 0)?;
        let hits = pred.iter().zip(&data.labels).filter(|(&p, &t)| p == t as usize).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfopt::PerfoptReadout;
    use alloc::vec;

    fn plan(classifier: ClassifierMode) -> TrainingPlan {
        TrainingPlan {
            layer_dims: vec![12, 6, 5, 4],
            num_classes: 3,
            classifier,
            ..TrainingPlan::desk()
        }
    }

    #[test]
    fn init_is_reproducible_and_layers_differ() {
        let a = Model::<f64>::init(&plan(ClassifierMode::Goodness)).unwrap();
        let b = Model::<f64>::init(&plan(ClassifierMode::Goodness)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.widths(), vec![6, 5, 4]);
        assert_ne!(a.layers[1].weights.get(0, 0), a.layers[2].weights.get(0, 0));
        assert!(a.probes.is_empty() && a.head.is_none());
    }

    #[test]
    fn stages_round_trip() {
        for mode in [
            ClassifierMode::Goodness,
            ClassifierMode::Softmax,
            ClassifierMode::Perfopt(PerfoptReadout::AllLayers),
        ] {
            let m = Model::<f64>::init(&plan(mode)).unwrap();
            let stages: Vec<_> = (0..3).rev().map(|i| m.stage(i)).collect();
            assert!(stages[0].head.is_some() == (mode == ClassifierMode::Softmax));
            assert!(stages[1].head.is_none());
            let back = Model::from_stages(stages, 3, mode).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn set_stage_rejects_mismatches() {
        let mut m = Model::<f64>::init(&plan(ClassifierMode::Goodness)).unwrap();
        let mut s = m.stage(0);
        s.index = 1;
        assert!(m.set_stage(s).is_err());
        let s = m.stage(2);
        m.set_stage(s).unwrap();
        assert!(Model::<f64>::from_stages(vec![m.stage(0), m.stage(2)], 3, ClassifierMode::Goodness).is_err());
    }

    #[test]
    fn classify_agrees_with_batch() {
        let m = Model::<f64>::init(&plan(ClassifierMode::Softmax)).unwrap();
        let x = Matrix::from_vec(2, 12, (0..24).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let batch = m.predict_batch(&x, &mut 0).unwrap();
        assert_eq!(m.classify(x.row(1)).unwrap(), batch[1]);
    }
}
