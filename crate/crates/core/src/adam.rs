use alloc::format;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub m: Matrix<R>,
    pub v: Matrix<R>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<R: Real> AdamState<R> {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            config,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.m.shape()
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut Matrix<R>, grad: &Matrix<R>, lr: f64) -> Result<()> {
        adam_step(param, grad, self, lr)
    }
}

/// Applies one Adam step to `param` with gradient `grad`.
///
/// A zero gradient leaves `param` bitwise unchanged (the moments stay zero
/// and the update is exactly `0 / (0 + eps)`), and `t` always advances.
pub fn adam_step<R: Real>(
    param: &mut Matrix<R>,
    grad: &Matrix<R>,
    state: &mut AdamState<R>,
    lr: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.shape() {
        return Err(Error::shape(
            "adam_step",
            format!("{:?}", param.shape()),
            format!("grad {:?}, state {:?}", grad.shape(), state.shape()),
        ));
    }
    state.t += 1;
    let cfg = state.config;
    let b1 = R::from_f64(cfg.beta1);
    let b2 = R::from_f64(cfg.beta2);
    let one = R::one();
    let t = state.t as i32;
    let bc1 = R::from_f64(1.0 - libm_powi(cfg.beta1, t));
    let bc2 = R::from_f64(1.0 - libm_powi(cfg.beta2, t));
    let lr = R::from_f64(lr);
    let eps = R::from_f64(cfg.eps);
    let p = param.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((p, &g), m), v) in p.iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

fn libm_powi(base: f64, exp: i32) -> f64 {
    num_traits::Float::powi(base, exp)
}
