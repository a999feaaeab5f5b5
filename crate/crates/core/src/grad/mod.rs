//! Reverse-mode differentiation over a small op set, the Adam optimizer and
//! a central-difference gradient checker.

mod tape;
mod tensor;
#[cfg(test)]
mod tests;

pub use tape::{
    Activation, Gradients, Tape, Var, ELU_ALPHA, LEAKY_SLOPE, SELU_ALPHA, SELU_SCALE,
};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("slice {start}..{end} on axis {axis} out of range for shape {shape:?}")]
    BadSlice {
        axis: usize,
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamConfig,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(hyper: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            hyper,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), GradError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(GradError::ShapeMismatch {
                op: "adam",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step_count as i32);
        let c2 = 1.0 - beta2.powi(self.step_count as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.first_moment[k].data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.second_moment[k].data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (self.first_moment[k].data(), self.second_moment[k].data());
            for (i, pi) in p.data_mut().iter_mut().enumerate() {
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Largest relative disagreement between `analytic` and central differences
/// of `f` around `params`, taken over every coordinate as
/// `|a - c| / (|a| + |c| + 1e-12)`.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], analytic: &[Tensor], h: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        for i in 0..params[k].len() {
            let x0 = params[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = f(&work);
            work[k].data_mut()[i] = x0 - h;
            let fm = f(&work);
            work[k].data_mut()[i] = x0;
            let c = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[i];
            worst = worst.max((a - c).abs() / (a.abs() + c.abs() + 1e-12));
        }
    }
    worst
}
