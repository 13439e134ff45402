//! Negative-label strategies.
//!
//! A negative example is a training image overlaid with a wrong label. The
//! three strategies differ only in how that wrong label is chosen:
//!
//! * `Fixed`: drawn uniformly once at the start of training.
//! * `Random`: redrawn uniformly at every chapter boundary, from a stream
//!   keyed by the chapter so that every worker draws the same labels.
//! * `Adaptive`: the wrong label the current network finds most plausible.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::classify::goodness_scores;
use crate::error::{Error, Result};
use crate::ff::FFLayer;
use crate::real::Real;
use crate::rng::{stream, Purpose};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NegStrategy {
    Adaptive,
    Random,
    Fixed,
}

impl NegStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            NegStrategy::Adaptive => "adaptive",
            NegStrategy::Random => "random",
            NegStrategy::Fixed => "fixed",
        }
    }
}

impl fmt::Display for NegStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NegStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(NegStrategy::Adaptive),
            "random" => Ok(NegStrategy::Random),
            "fixed" => Ok(NegStrategy::Fixed),
            other => Err(Error::Config(alloc::format!("unknown negative strategy `{other}`"))),
        }
    }
}

/// One negative label per training instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegAssignment {
    pub strategy: NegStrategy,
    pub labels: Vec<u8>,
    pub rng_seed: u64,
    pub num_classes: usize,
}

impl NegAssignment {
    /// True when every label is in range and differs from its true label.
    pub fn is_valid_for(&self, true_labels: &[u8]) -> bool {
        self.labels.len() == true_labels.len()
            && self
                .labels
                .iter()
                .zip(true_labels)
                .all(|(&n, &t)| n != t && (n as usize) < self.num_classes)
    }
}

fn uniform_wrong<G: Rng>(rng: &mut G, truth: u8, num_classes: usize) -> u8 {
    let r = rng.random_range(0..num_classes - 1) as u8;
    if r >= truth {
        r + 1
    } else {
        r
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 || num_classes > 256 {
        return Err(Error::Config(alloc::format!(
            "negative labels need 2..=256 classes, got {num_classes}"
        )));
    }
    Ok(())
}

/// Uniform wrong labels drawn once, reproducible from `rng_seed`.
pub fn assign_fixed_neg(true_labels: &[u8], num_classes: usize, rng_seed: u64) -> Result<NegAssignment> {
    check_classes(num_classes)?;
    let mut rng = stream(rng_seed, Purpose::FixedNeg, 0, 0);
    Ok(NegAssignment {
        strategy: NegStrategy::Fixed,
        labels: true_labels.iter().map(|&t| uniform_wrong(&mut rng, t, num_classes)).collect(),
        rng_seed,
        num_classes,
    })
}

/// Fresh uniform wrong labels for the boundary after `chapter`; every caller
/// with the same `(rng_seed, chapter)` gets the same labels.
pub fn resample_random_neg(true_labels: &[u8], num_classes: usize, chapter: u32, rng_seed: u64) -> Result<NegAssignment> {
    check_classes(num_classes)?;
    let mut rng = stream(rng_seed, Purpose::RandomNeg, 0, chapter);
    Ok(NegAssignment {
        strategy: NegStrategy::Random,
        labels: true_labels.iter().map(|&t| uniform_wrong(&mut rng, t, num_classes)).collect(),
        rng_seed,
        num_classes,
    })
}

/// Picks, per row, the wrong label with the highest score; ties go to the
/// lowest label.
pub fn hardest_wrong<R: Real>(scores: &Matrix<R>, true_labels: &[u8]) -> Vec<u8> {
    scores
        .row_iter()
        .zip(true_labels)
        .map(|(row, &t)| {
            let mut best: Option<usize> = None;
            for (c, &s) in row.iter().enumerate() {
                if c == t as usize {
                    continue;
                }
                match best {
                    Some(b) if !(s > row[b]) => {}
                    _ => best = Some(c),
                }
            }
            best.unwrap_or(0) as u8
        })
        .collect()
}

/// The most plausible wrong label for each instance under goodness
/// prediction with `network`.
pub fn assign_adaptive_neg<R: Real>(
    network: &[FFLayer<R>],
    x: &Matrix<R>,
    true_labels: &[u8],
    num_classes: usize,
) -> Result<NegAssignment> {
    check_classes(num_classes)?;
    if network.is_empty() {
        return Err(Error::Config("adaptive negatives need a non-empty network".into()));
    }
    let scores = goodness_scores(network, x, num_classes, &mut 0)?;
    Ok(NegAssignment {
        strategy: NegStrategy::Adaptive,
        labels: hardest_wrong(&scores, true_labels),
        rng_seed: 0,
        num_classes,
    })
}
