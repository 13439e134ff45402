//! Goodness prediction and the softmax head.
//!
//! Goodness prediction runs the network once per candidate label and picks
//! the label whose overlay produces the most goodness, summed over every
//! hidden layer except the first. Softmax prediction runs the network once
//! on a neutral overlay and reads a linear softmax head fed with the
//! normalized activities of the same layers. The head never sends gradient
//! into the FF layers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::ff::{embed_constant, embed_neutral_all, network_input, FFLayer};
use crate::real::Real;
use crate::tensor::{init_layer, Matrix};

/// Rows pushed through the network at once when scoring a dataset.
const SCORE_CHUNK: usize = 2048;

/// Raw activities of every layer; each layer sees the row-normalized output
/// of the one below.
pub fn forward_all<R: Real>(layers: &[FFLayer<R>], x: &Matrix<R>) -> Result<Vec<Matrix<R>>> {
    let mut acts = Vec::with_capacity(layers.len());
    let mut input = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        let y = layer.forward(&input)?;
        if i + 1 < layers.len() {
            input = y.row_normalize();
        }
        acts.push(y);
    }
    Ok(acts)
}

/// Layers whose goodness counts toward prediction: all but the first, or
/// the only one for a single-layer network.
fn scored_layers(n: usize) -> core::ops::Range<usize> {
    if n >= 2 {
        1..n
    } else {
        0..n
    }
}

/// `n × num_classes` accumulated goodness for every candidate label.
/// Adds one to `sweeps` per candidate label, each being a full forward pass
/// over the batch.
pub fn goodness_scores<R: Real>(
    layers: &[FFLayer<R>],
    images: &Matrix<R>,
    num_classes: usize,
    sweeps: &mut usize,
) -> Result<Matrix<R>> {
    let n = images.rows();
    let mut scores = Matrix::zeros(n, num_classes);
    let scored = scored_layers(layers.len());
    let mut start = 0;
    while start < n {
        let end = (start + SCORE_CHUNK).min(n);
        let chunk = network_input(&images.slice_rows(start, end));
        for c in 0..num_classes {
            let acts = forward_all(layers, &embed_constant(&chunk, c, num_classes)?)?;
            let mut total = vec![R::zero(); end - start];
            for act in &acts[scored.clone()] {
                for (t, g) in total.iter_mut().zip(act.row_sum_squares()) {
                    *t = *t + g;
                }
            }
            for (r, t) in total.into_iter().enumerate() {
                scores.set(start + r, c, t);
            }
        }
        start = end;
    }
    *sweeps += num_classes;
    Ok(scores)
}

/// Class with the highest accumulated goodness; ties go to the lowest label.
pub fn predict_goodness<R: Real>(layers: &[FFLayer<R>], image: &[R], num_classes: usize) -> Result<usize> {
    predict_goodness_counted(layers, image, num_classes, &mut 0)
}

pub fn predict_goodness_counted<R: Real>(
    layers: &[FFLayer<R>],
    image: &[R],
    num_classes: usize,
    sweeps: &mut usize,
) -> Result<usize> {
    let x = Matrix::from_vec(1, image.len(), image.to_vec())?;
    Ok(predict_goodness_batch(layers, &x, num_classes, sweeps)?[0])
}

pub fn predict_goodness_batch<R: Real>(
    layers: &[FFLayer<R>],
    images: &Matrix<R>,
    num_classes: usize,
    sweeps: &mut usize,
) -> Result<Vec<usize>> {
    Ok(goodness_scores(layers, images, num_classes, sweeps)?.argmax_rows())
}

/// Linear softmax classifier over the normalized activities of hidden
/// layers `input_layers` (0-based; every layer but the first).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead<R> {
    pub weights: Matrix<R>,
    pub bias: Matrix<R>,
    pub adam_w: AdamState<R>,
    pub adam_b: AdamState<R>,
    pub input_layers: Vec<usize>,
}

impl<R: Real> SoftmaxHead<R> {
    /// A head for a network with the given layer widths.
    pub fn for_network(widths: &[usize], num_classes: usize, seed: u64, adam: AdamConfig) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("a softmax head needs at least two hidden layers".into()));
        }
        let input_layers: Vec<usize> = (1..widths.len()).collect();
        let in_dim = input_layers.iter().map(|&i| widths[i]).sum();
        let (weights, bias) = init_layer(in_dim, num_classes, seed);
        Ok(SoftmaxHead {
            weights,
            bias: Matrix::from_vec(1, num_classes, bias)?,
            adam_w: AdamState::new(in_dim, num_classes, adam),
            adam_b: AdamState::new(1, num_classes, adam),
            input_layers,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, features: &Matrix<R>) -> Result<Matrix<R>> {
        if features.cols() != self.in_dim() {
            return Err(Error::shape(
                "softmax head",
                format!("{} features", self.in_dim()),
                format!("{}", features.cols()),
            ));
        }
        let mut z = features.matmul(&self.weights)?;
        z.add_row_vector(self.bias.as_slice())?;
        Ok(z)
    }

    /// Mean cross-entropy and its gradients for precomputed features.
    pub fn loss_and_grads(&self, features: &Matrix<R>, labels: &[u8]) -> Result<(R, Matrix<R>, Matrix<R>)> {
        let logits = self.logits(features)?;
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        let gw = features.matmul_tn(&dlogits)?;
        let gb = Matrix::from_vec(1, dlogits.cols(), dlogits.column_sums())?;
        Ok((loss, gw, gb))
    }

    /// One Adam step on precomputed features; returns the loss before it.
    pub fn step(&mut self, features: &Matrix<R>, labels: &[u8], lr: f64) -> Result<R> {
        let (loss, gw, gb) = self.loss_and_grads(features, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax head"));
        }
        self.adam_w.step(&mut self.weights, &gw, lr)?;
        self.adam_b.step(&mut self.bias, &gb, lr)?;
        Ok(loss)
    }
}

/// Mean cross-entropy of `logits` against `labels` and `d loss / d logits`.
pub fn cross_entropy<R: Real>(logits: &Matrix<R>, labels: &[u8]) -> Result<(R, Matrix<R>)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels", logits.rows()),
            format!("{}", labels.len()),
        ));
    }
    let n = R::from_f64(logits.rows().max(1) as f64);
    let logp = logits.log_softmax_rows();
    let mut loss = R::zero();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= logits.cols() {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: logits.cols(),
            });
        }
        loss = loss - logp.get(r, y);
        for c in 0..logits.cols() {
            let p = logp.get(r, c).exp();
            let target = if c == y { R::one() } else { R::zero() };
            grad.set(r, c, (p - target) / n);
        }
    }
    Ok((loss / n, grad))
}

/// Head input for `images`: neutral overlay, one forward pass, normalized
/// activities of the head's input layers side by side.
pub fn head_features<R: Real>(
    layers: &[FFLayer<R>],
    input_layers: &[usize],
    images: &Matrix<R>,
    num_classes: usize,
) -> Result<Matrix<R>> {
    let acts = forward_all(layers, &embed_neutral_all(&network_input(images), num_classes)?)?;
    let normalized: Vec<Matrix<R>> = input_layers.iter().map(|&i| acts[i].row_normalize()).collect();
    Matrix::hstack(&normalized.iter().collect::<Vec<_>>())
}

/// One head update on a batch; FF layers are only read.
pub fn train_softmax_head<R: Real>(
    head: &mut SoftmaxHead<R>,
    layers: &[FFLayer<R>],
    x: &Matrix<R>,
    labels: &[u8],
    lr: f64,
) -> Result<R> {
    let features = head_features(layers, &head.input_layers, x, head.num_classes())?;
    head.step(&features, labels, lr)
}

pub fn predict_softmax<R: Real>(head: &SoftmaxHead<R>, layers: &[FFLayer<R>], image: &[R]) -> Result<usize> {
    let x = Matrix::from_vec(1, image.len(), image.to_vec())?;
    Ok(predict_softmax_batch(head, layers, &x, &mut 0)?[0])
}

/// Softmax-mode predictions; one forward sweep for the whole batch.
pub fn predict_softmax_batch<R: Real>(
    head: &SoftmaxHead<R>,
    layers: &[FFLayer<R>],
    images: &Matrix<R>,
    sweeps: &mut usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.rows());
    let mut start = 0;
    while start < images.rows() {
        let end = (start + SCORE_CHUNK).min(images.rows());
        let f = head_features(layers, &head.input_layers, &images.slice_rows(start, end), head.num_classes())?;
        out.extend(head.logits(&f)?.argmax_rows());
        start = end;
    }
    *sweeps += 1;
    Ok(out)
}
