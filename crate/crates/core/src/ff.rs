//! The Forward-Forward layer and its local objective.
//!
//! A layer scores an input by its goodness, the sum of squared ReLU
//! activities, and is trained so that `σ(goodness − θ)` is high on positive
//! (correctly labelled) rows and low on negative rows. The per-batch loss is
//!
//! ```text
//! L = mean_pos softplus(θ − g) + mean_neg softplus(g − θ)
//! ```
//!
//! whose gradient reaches the weights only through this layer: nothing is
//! propagated to the layer below.

use alloc::format;
use alloc::vec::Vec;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{init_layer, Matrix};

/// Value written into every class slot by [`embed_neutral`].
pub const NEUTRAL_LABEL_VALUE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct FFLayer<R> {
    /// `in_dim × out_dim`
    pub weights: Matrix<R>,
    /// `1 × out_dim`
    pub bias: Matrix<R>,
    pub adam_w: AdamState<R>,
    pub adam_b: AdamState<R>,
    pub theta: f64,
}

impl<R: Real> FFLayer<R> {
    pub fn new(in_dim: usize, out_dim: usize, theta: f64, seed: u64, adam: AdamConfig) -> Self {
        assert!(theta >= 0.0, "threshold must be non-negative");
        let (weights, bias) = init_layer(in_dim, out_dim, seed);
        FFLayer {
            weights,
            bias: Matrix::from_vec(1, out_dim, bias).expect("bias shape"),
            adam_w: AdamState::new(in_dim, out_dim, adam),
            adam_b: AdamState::new(1, out_dim, adam),
            theta,
        }
    }

    /// Builds a layer from explicit parameters with fresh optimizer state.
    pub fn from_parts(weights: Matrix<R>, bias: Vec<R>, theta: f64, adam: AdamConfig) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::shape(
                "FFLayer::from_parts",
                format!("{} bias entries", weights.cols()),
                format!("{}", bias.len()),
            ));
        }
        let (i, o) = weights.shape();
        Ok(FFLayer {
            bias: Matrix::from_vec(1, o, bias)?,
            weights,
            adam_w: AdamState::new(i, o, adam),
            adam_b: AdamState::new(1, o, adam),
            theta,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    /// `relu(x·W + b)`, not normalized.
    pub fn forward(&self, x: &Matrix<R>) -> Result<Matrix<R>> {
        let mut pre = self.pre_activation(x)?;
        pre.relu_in_place();
        Ok(pre)
    }

    pub(crate) fn pre_activation(&self, x: &Matrix<R>) -> Result<Matrix<R>> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "forward",
                format!("{} input columns", self.in_dim()),
                format!("{}", x.cols()),
            ));
        }
        let mut pre = x.matmul(&self.weights)?;
        pre.add_row_vector(self.bias.as_slice())?;
        Ok(pre)
    }

    /// Loss and parameter gradients for one positive/negative batch pair.
    /// Either batch may be empty, in which case its term is dropped.
    pub fn loss_and_grads(&self, pos: &Matrix<R>, neg: &Matrix<R>) -> Result<(R, Matrix<R>, Matrix<R>)> {
        let stacked = pos.vstack(neg)?;
        let y = self.forward(&stacked)?;
        let g = y.row_sum_squares();
        let theta = R::from_f64(self.theta);
        let (np, nn) = (pos.rows(), neg.rows());

        let mut loss_pos = R::zero();
        let mut loss_neg = R::zero();
        // dL/dg per row
        let mut dg = Vec::with_capacity(np + nn);
        for (i, &gi) in g.iter().enumerate() {
            if i < np {
                loss_pos = loss_pos + softplus(theta - gi);
                dg.push(-logistic(theta - gi) / R::from_f64(np as f64));
            } else {
                loss_neg = loss_neg + softplus(gi - theta);
                dg.push(logistic(gi - theta) / R::from_f64(nn as f64));
            }
        }
        let mut loss = R::zero();
        if np > 0 {
            loss = loss + loss_pos / R::from_f64(np as f64);
        }
        if nn > 0 {
            loss = loss + loss_neg / R::from_f64(nn as f64);
        }

        // δ = dL/dg · 2y; relu'(pre) is already folded in since y = 0 there
        let two = R::from_f64(2.0);
        let mut delta = y;
        let cols = delta.cols();
        for (row, &d) in delta.as_mut_slice().chunks_exact_mut(cols.max(1)).zip(&dg) {
            let scale = d * two;
            for v in row {
                *v = *v * scale;
            }
        }
        let grad_w = stacked.matmul_tn(&delta)?;
        let grad_b = Matrix::from_vec(1, cols, delta.column_sums())?;
        Ok((loss, grad_w, grad_b))
    }
}

/// Loss of a batch pair without updating anything.
pub fn ff_loss<R: Real>(layer: &FFLayer<R>, pos: &Matrix<R>, neg: &Matrix<R>) -> Result<R> {
    layer.loss_and_grads(pos, neg).map(|(l, _, _)| l)
}

/// One Adam step on the FF objective; returns the loss before the step.
pub fn ff_batch_update<R: Real>(layer: &mut FFLayer<R>, pos: &Matrix<R>, neg: &Matrix<R>, lr: f64) -> Result<R> {
    let (loss, gw, gb) = layer.loss_and_grads(pos, neg)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("ff_batch_update"));
    }
    layer.adam_w.step(&mut layer.weights, &gw, lr)?;
    layer.adam_b.step(&mut layer.bias, &gb, lr)?;
    Ok(loss)
}

#[inline]
pub fn logistic<R: Real>(z: R) -> R {
    if z >= R::zero() {
        R::one() / (R::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (R::one() + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
#[inline]
pub fn softplus<R: Real>(z: R) -> R {
    z.max(R::zero()) + (-z.abs()).exp().ln_1p()
}

/// Per-row goodness: the sum of squared activities.
pub fn goodness<R: Real>(activations: &Matrix<R>) -> Vec<R> {
    activations.row_sum_squares()
}

/// `σ(g − θ)`.
pub fn p_real<R: Real>(g: R, theta: f64) -> R {
    logistic(g - R::from_f64(theta))
}

/// Overwrites the first `num_classes` entries with a one-hot encoding of
/// `label`.
pub fn embed_label<R: Real>(image: &mut [R], label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    if image.len() < num_classes {
        return Err(Error::shape(
            "embed_label",
            format!("at least {num_classes} pixels"),
            format!("{}", image.len()),
        ));
    }
    for (i, v) in image[..num_classes].iter_mut().enumerate() {
        *v = if i == label { R::one() } else { R::zero() };
    }
    Ok(())
}

/// Sets the first `num_classes` entries to [`NEUTRAL_LABEL_VALUE`].
pub fn embed_neutral<R: Real>(image: &mut [R], num_classes: usize) -> Result<()> {
    if image.len() < num_classes {
        return Err(Error::shape(
            "embed_neutral",
            format!("at least {num_classes} pixels"),
            format!("{}", image.len()),
        ));
    }
    let v = R::from_f64(NEUTRAL_LABEL_VALUE);
    image[..num_classes].iter_mut().for_each(|x| *x = v);
    Ok(())
}

/// Conditions raw images for the first layer: every row scaled to unit
/// length, like the input of every later layer. Label overlays go on after
/// this step.
pub fn network_input<R: Real>(images: &Matrix<R>) -> Matrix<R> {
    images.row_normalize()
}

/// Copies `images` with row `i` labelled `labels[i]`.
pub fn embed_labels<R: Real>(images: &Matrix<R>, labels: &[u8], num_classes: usize) -> Result<Matrix<R>> {
    if labels.len() != images.rows() {
        return Err(Error::shape(
            "embed_labels",
            format!("{} labels", images.rows()),
            format!("{}", labels.len()),
        ));
    }
    let mut out = images.clone();
    for (r, &l) in labels.iter().enumerate() {
        embed_label(out.row_mut(r), l as usize, num_classes)?;
    }
    Ok(out)
}

/// Copies `images` with every row labelled `label`.
pub fn embed_constant<R: Real>(images: &Matrix<R>, label: usize, num_classes: usize) -> Result<Matrix<R>> {
    let mut out = images.clone();
    for r in 0..out.rows() {
        embed_label(out.row_mut(r), label, num_classes)?;
    }
    Ok(out)
}

/// Copies `images` with the neutral label on every row.
pub fn embed_neutral_all<R: Real>(images: &Matrix<R>, num_classes: usize) -> Result<Matrix<R>> {
    let mut out = images.clone();
    for r in 0..out.rows() {
        embed_neutral(out.row_mut(r), num_classes)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rand_matrix(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix<f64> {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn label_embedding_is_one_hot_and_local() {
        let mut img: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let orig = img.clone();
        embed_label(&mut img, 3, 10).unwrap();
        assert_eq!(&img[..10], &[0., 0., 0., 1., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(&img[10..], &orig[10..]);
        embed_label(&mut img, 0, 10).unwrap();
        assert_eq!(img[0], 1.0);
        assert!(img[1..10].iter().all(|&v| v == 0.0));
        assert_eq!(
            embed_label(&mut img, 10, 10),
            Err(Error::LabelOutOfRange { label: 10, num_classes: 10 })
        );
    }

    #[test]
    fn neutral_embedding() {
        let mut img = vec![0.7f64; 16];
        embed_neutral(&mut img, 10).unwrap();
        assert!(img[..10].iter().all(|&v| v == 0.1));
        assert!((img[..10].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(img[10..].iter().all(|&v| v == 0.7));
    }

    #[test]
    fn forward_cases() {
        let zero = FFLayer::<f64>::from_parts(Matrix::zeros(3, 2), vec![0.0; 2], 0.01, AdamConfig::default()).unwrap();
        assert_eq!(zero.forward(&Matrix::from_rows(&[[1.0, 2.0, 3.0]])).unwrap(), Matrix::zeros(1, 2));
        let id = FFLayer::<f64>::from_parts(Matrix::from_rows(&[[1.0]]), vec![0.0], 0.01, AdamConfig::default()).unwrap();
        assert_eq!(id.forward(&Matrix::from_rows(&[[2.0]])).unwrap(), Matrix::from_rows(&[[2.0]]));
        assert!(id.forward(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn forward_matches_composition_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let layer = FFLayer::<f64>::new(6, 5, 0.01, 9, AdamConfig::default());
        let x = rand_matrix(&mut rng, 4, 6, 0.0, 1.0);
        let mut oracle = x.matmul(&layer.weights).unwrap();
        oracle.add_row_vector(layer.bias.as_slice()).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), oracle.relu());
    }

    #[test]
    fn goodness_cases() {
        assert_eq!(goodness(&Matrix::from_rows(&[[0.0, 0.0, 0.0]])), vec![0.0]);
        assert_eq!(goodness(&Matrix::from_rows(&[[1.0, 2.0]])), vec![5.0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = rand_matrix(&mut rng, 1, 50, -3.0, 3.0);
        let mut oracle = 0.0;
        for &v in m.row(0) {
            oracle += v * v;
        }
        assert!((goodness(&m)[0] - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn p_real_cases() {
        assert_eq!(p_real(0.01f64, 0.01), 0.5);
        assert_eq!(p_real(2.5f64, 2.5), 0.5);
        let p = p_real(0.0f64, 0.01);
        assert!((p - 1.0 / (1.0 + 0.01f64.exp())).abs() < 1e-15);
        assert!((p - 0.4975).abs() < 1e-4);
        assert!(p_real(3.0f64, 0.01) > p_real(2.0f64, 0.01));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut layer = FFLayer::<f64>::new(5, 4, 0.01, 3, AdamConfig::default());
        let before = (layer.weights.clone(), layer.bias.clone());
        let pos = rand_matrix(&mut rng, 3, 5, 0.0, 1.0);
        let neg = rand_matrix(&mut rng, 3, 5, 0.0, 1.0);
        let loss = ff_batch_update(&mut layer, &pos, &neg, 0.0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!((layer.weights, layer.bias), before);
    }

    /// Central finite differences of [`ff_loss`] over every parameter.
    fn max_rel_fd_error(layer: &FFLayer<f64>, pos: &Matrix<f64>, neg: &Matrix<f64>) -> f64 {
        let h = 1e-5;
        let (_, gw, gb) = layer.loss_and_grads(pos, neg).unwrap();
        let mut worst: f64 = 0.0;
        let mut check = |analytic: f64, numeric: f64| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        };
        for idx in 0..layer.weights.as_slice().len() {
            let mut plus = layer.clone();
            plus.weights.as_mut_slice()[idx] += h;
            let mut minus = layer.clone();
            minus.weights.as_mut_slice()[idx] -= h;
            let numeric = (ff_loss(&plus, pos, neg).unwrap() - ff_loss(&minus, pos, neg).unwrap()) / (2.0 * h);
            check(gw.as_slice()[idx], numeric);
        }
        for idx in 0..layer.bias.as_slice().len() {
            let mut plus = layer.clone();
            plus.bias.as_mut_slice()[idx] += h;
            let mut minus = layer.clone();
            minus.bias.as_mut_slice()[idx] -= h;
            let numeric = (ff_loss(&plus, pos, neg).unwrap() - ff_loss(&minus, pos, neg).unwrap()) / (2.0 * h);
            check(gb.as_slice()[idx], numeric);
        }
        worst
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
            // 5x4 layer; theta near the typical goodness so both terms matter
            let layer = FFLayer::<f64>::new(5, 4, 0.3, seed, AdamConfig::default());
            let pos = rand_matrix(&mut rng, 3, 5, 0.0, 1.0);
            let neg = rand_matrix(&mut rng, 3, 5, 0.0, 1.0);
            let err = max_rel_fd_error(&layer, &pos, &neg);
            assert!(err < 1e-4, "seed {seed}: {err}");
            // single-sided passes
            let empty = Matrix::zeros(0, 5);
            assert!(max_rel_fd_error(&layer, &pos, &empty) < 1e-4);
            assert!(max_rel_fd_error(&layer, &empty, &neg) < 1e-4);
        }
    }

    fn mean_goodness(layer: &FFLayer<f64>, x: &Matrix<f64>) -> f64 {
        let g = goodness(&layer.forward(x).unwrap());
        g.iter().sum::<f64>() / g.len() as f64
    }

    fn plain_gd(layer: &mut FFLayer<f64>, pos: &Matrix<f64>, neg: &Matrix<f64>, lr: f64) {
        let (_, gw, gb) = layer.loss_and_grads(pos, neg).unwrap();
        for (w, g) in layer.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *w -= lr * g;
        }
        for (b, g) in layer.bias.as_mut_slice().iter_mut().zip(gb.as_slice()) {
            *b -= lr * g;
        }
    }

    proptest! {
        #[test]
        fn positive_step_raises_and_negative_step_lowers_goodness(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let layer = FFLayer::<f64>::new(6, 5, 0.01, seed, AdamConfig::default());
            let x = rand_matrix(&mut rng, 4, 6, 0.0, 1.0);
            let empty = Matrix::zeros(0, 6);

            let mut up = layer.clone();
            plain_gd(&mut up, &x, &empty, 1e-4);
            prop_assert!(mean_goodness(&up, &x) >= mean_goodness(&layer, &x));

            let mut down = layer.clone();
            plain_gd(&mut down, &empty, &x, 1e-4);
            prop_assert!(mean_goodness(&down, &x) <= mean_goodness(&layer, &x));
        }

        #[test]
        fn p_real_is_a_probability(g in 0.0f64..30.0, theta in 0.0f64..30.0) {
            let p = p_real(g, theta);
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn embedded_label_reads_back(label in 0usize..10, fill in 0.0f64..1.0) {
            let mut img = vec![fill; 30];
            embed_label(&mut img, label, 10).unwrap();
            prop_assert_eq!(crate::tensor::argmax(&img[..10]), label);
        }
    }

    #[test]
    fn separable_toy_problem_is_learned() {
        // class 0 lights up the left half of the input, class 1 the right half
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let d = 12;
        let mut images = Matrix::<f64>::zeros(n, d);
        let mut labels = vec![0u8; n];
        for i in 0..n {
            let class = i % 2;
            labels[i] = class as u8;
            for j in 2..d {
                let on = (j < 7) == (class == 0);
                images.set(i, j, if on { rng.random_range(0.6..1.0) } else { rng.random_range(0.0..0.1) });
            }
        }
        let wrong: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
        let pos = embed_labels(&images, &labels, 2).unwrap();
        let neg = embed_labels(&images, &wrong, 2).unwrap();
        // goodness is non-negative, so p(neg) >= logistic(-theta); theta must
        // be well above zero for p(neg) < 0.1 to be reachable
        let theta = 3.0;
        let mut layer = FFLayer::<f64>::new(d, 16, theta, 1, AdamConfig::default());
        for _ in 0..200 {
            ff_batch_update(&mut layer, &pos, &neg, 0.01).unwrap();
        }
        let mean_p = |x: &Matrix<f64>| {
            let g = goodness(&layer.forward(x).unwrap());
            g.iter().map(|&g| p_real(g, theta)).sum::<f64>() / g.len() as f64
        };
        let (pp, pn) = (mean_p(&pos), mean_p(&neg));
        assert!(pp > 0.9, "positive {pp}");
        assert!(pn < 0.1, "negative {pn}");
    }
}
