//! Performance-optimized layers: each FF layer gets its own softmax probe
//! and the pair is trained by two-layer backpropagation on cross-entropy.
//! No negative data is involved; the layer's input is the detached,
//! normalized output of the layer below (normalized pixels for the first layer).

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::adam::{AdamConfig, AdamState};
use crate::classify::cross_entropy;
use crate::error::{Error, Result};
use crate::ff::{network_input, FFLayer};
use crate::real::Real;
use crate::tensor::{argmax, init_layer, Matrix};

/// Softmax classifier attached to one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PerLayerHead<R> {
    pub weights: Matrix<R>,
    pub bias: Matrix<R>,
    pub adam_w: AdamState<R>,
    pub adam_b: AdamState<R>,
    pub layer_index: usize,
}

impl<R: Real> PerLayerHead<R> {
    pub fn new(width: usize, num_classes: usize, layer_index: usize, seed: u64, adam: AdamConfig) -> Self {
        let (weights, bias) = init_layer(width, num_classes, seed);
        PerLayerHead {
            weights,
            bias: Matrix::from_vec(1, num_classes, bias).expect("bias shape"),
            adam_w: AdamState::new(width, num_classes, adam),
            adam_b: AdamState::new(1, num_classes, adam),
            layer_index,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, activations: &Matrix<R>) -> Result<Matrix<R>> {
        if activations.cols() != self.weights.rows() {
            return Err(Error::shape(
                "perfopt head",
                format!("{} activations", self.weights.rows()),
                format!("{}", activations.cols()),
            ));
        }
        let mut z = activations.matmul(&self.weights)?;
        z.add_row_vector(self.bias.as_slice())?;
        Ok(z)
    }
}

/// Gradients of the two-layer block.
pub struct BlockGrads<R> {
    pub loss: R,
    pub layer_w: Matrix<R>,
    pub layer_b: Matrix<R>,
    pub head_w: Matrix<R>,
    pub head_b: Matrix<R>,
}

/// Cross-entropy of `head(relu(x_in·W + b))` and its gradients with respect
/// to both blocks. `x_in` gets no gradient.
pub fn block_loss_and_grads<R: Real>(
    layer: &FFLayer<R>,
    head: &PerLayerHead<R>,
    x_in: &Matrix<R>,
    labels: &[u8],
) -> Result<BlockGrads<R>> {
    let pre = layer.pre_activation(x_in)?;
    let h = pre.relu();
    let logits = head.logits(&h)?;
    let (loss, dlogits) = cross_entropy(&logits, labels)?;
    let head_w = h.matmul_tn(&dlogits)?;
    let head_b = Matrix::from_vec(1, dlogits.cols(), dlogits.column_sums())?;
    let mut dpre = dlogits.matmul_nt(&head.weights)?;
    for (d, &p) in dpre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if !(p > R::zero()) {
            *d = R::zero();
        }
    }
    let layer_w = x_in.matmul_tn(&dpre)?;
    let layer_b = Matrix::from_vec(1, dpre.cols(), dpre.column_sums())?;
    Ok(BlockGrads {
        loss,
        layer_w,
        layer_b,
        head_w,
        head_b,
    })
}

/// One Adam step on both the layer and its head; returns the loss before
/// the step.
pub fn train_perfopt_layer<R: Real>(
    layer: &mut FFLayer<R>,
    head: &mut PerLayerHead<R>,
    x_in: &Matrix<R>,
    labels: &[u8],
    lr: f64,
) -> Result<R> {
    let g = block_loss_and_grads(layer, head, x_in, labels)?;
    if !g.loss.is_finite() {
        return Err(Error::NonFinite("train_perfopt_layer"));
    }
    layer.adam_w.step(&mut layer.weights, &g.layer_w, lr)?;
    layer.adam_b.step(&mut layer.bias, &g.layer_b, lr)?;
    head.adam_w.step(&mut head.weights, &g.head_w, lr)?;
    head.adam_b.step(&mut head.bias, &g.head_b, lr)?;
    Ok(g.loss)
}

/// How a trained perfopt network turns its heads into one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerfoptReadout {
    /// Argmax of the final layer's head.
    LastLayer,
    /// Argmax of the mean per-head log-probability.
    AllLayers,
}

impl fmt::Display for PerfoptReadout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerfoptReadout::LastLayer => "last",
            PerfoptReadout::AllLayers => "all",
        })
    }
}

impl FromStr for PerfoptReadout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(PerfoptReadout::LastLayer),
            "all" => Ok(PerfoptReadout::AllLayers),
            other => Err(Error::Config(format!("unknown perfopt readout `{other}`"))),
        }
    }
}

/// Per-layer log-probabilities for a batch of raw images.
pub fn head_log_probs<R: Real>(
    layers: &[FFLayer<R>],
    heads: &[PerLayerHead<R>],
    images: &Matrix<R>,
) -> Result<Vec<Matrix<R>>> {
    if heads.len() != layers.len() {
        return Err(Error::shape(
            "perfopt heads",
            format!("{} heads", layers.len()),
            format!("{}", heads.len()),
        ));
    }
    let mut out = Vec::with_capacity(layers.len());
    let mut input = network_input(images);
    for (layer, head) in layers.iter().zip(heads) {
        let h = layer.forward(&input)?;
        out.push(head.logits(&h)?.log_softmax_rows());
        input = h.row_normalize();
    }
    Ok(out)
}

pub fn predict_perfopt_batch<R: Real>(
    layers: &[FFLayer<R>],
    heads: &[PerLayerHead<R>],
    images: &Matrix<R>,
    readout: PerfoptReadout,
) -> Result<Vec<usize>> {
    let logp = head_log_probs(layers, heads, images)?;
    let Some(last) = logp.last() else {
        return Err(Error::Config("perfopt prediction needs at least one layer".into()));
    };
    match readout {
        PerfoptReadout::LastLayer => Ok(last.argmax_rows()),
        PerfoptReadout::AllLayers => {
            let k = R::from_f64(logp.len() as f64);
            Ok((0..images.rows())
                .map(|r| {
                    let mut mean: Vec<R> = alloc::vec![R::zero(); last.cols()];
                    for m in &logp {
                        for (acc, &v) in mean.iter_mut().zip(m.row(r)) {
                            *acc = *acc + v;
                        }
                    }
                    mean.iter_mut().for_each(|v| *v = *v / k);
                    argmax(&mean)
                })
                .collect())
        }
    }
}

pub fn predict_perfopt<R: Real>(
    layers: &[FFLayer<R>],
    heads: &[PerLayerHead<R>],
    image: &[R],
    readout: PerfoptReadout,
) -> Result<usize> {
    let x = Matrix::from_vec(1, image.len(), image.to_vec())?;
    Ok(predict_perfopt_batch(layers, heads, &x, readout)?[0])
}
