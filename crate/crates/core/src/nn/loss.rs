//! Loss functions. Each returns the batch-mean value and its gradient with
//! respect to the prediction it takes.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A scalar loss and the gradient that seeds the reverse pass.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

impl<T: Scalar> LossOutput<T> {
    /// `self + weight * other`, for combined objectives.
    pub fn add_scaled(mut self, other: &LossOutput<T>, weight: f64) -> Result<Self> {
        if self.grad.shape() != other.grad.shape() {
            return Err(Error::structure("loss gradients have different shapes"));
        }
        self.value += weight * other.value;
        let w = T::of(weight);
        for (a, &b) in self.grad.data_mut().iter_mut().zip(other.grad.data()) {
            *a = *a + w * b;
        }
        Ok(self)
    }
}

fn logits_2d<T: Scalar>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    match logits.dims() {
        &[b, c] => Ok((b, c)),
        d => Err(Error::structure(format!("expected [batch, classes] logits, got {d:?}"))),
    }
}

/// Numerically stable softmax of one row, computed in f64.
pub fn softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.f64() - lse).collect()
}

/// Mean softmax cross-entropy against integer labels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    let (b, c) = logits_2d(logits)?;
    if labels.len() != b {
        return Err(Error::structure(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut grad = Vec::with_capacity(b * c);
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::usage(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(i);
        value -= log_softmax_row(row)[y];
        for (k, p) in softmax_row(row).into_iter().enumerate() {
            let target = if k == y { 1.0 } else { 0.0 };
            grad.push(T::of((p - target) / b as f64));
        }
    }
    Ok(LossOutput {
        value: value / b as f64,
        grad: Tensor::from_vec(logits.shape().clone(), grad)?,
    })
}

/// Mean KL(softmax(target) ‖ softmax(logits)). The target is treated as a
/// constant; the gradient is with respect to `logits` only.
pub fn kl_logits<T: Scalar>(target: &Tensor<T>, logits: &Tensor<T>) -> Result<LossOutput<T>> {
    let (b, c) = logits_2d(logits)?;
    if target.shape() != logits.shape() {
        return Err(Error::usage("KL target and logits differ in shape"));
    }
    let mut grad = Vec::with_capacity(b * c);
    let mut value = 0.0;
    for i in 0..b {
        let lt = log_softmax_row(target.row(i));
        let ls = log_softmax_row(logits.row(i));
        for k in 0..c {
            let pt = lt[k].exp();
            if pt > 0.0 {
                value += pt * (lt[k] - ls[k]);
            }
            grad.push(T::of((ls[k].exp() - pt) / b as f64));
        }
    }
    Ok(LossOutput {
        value: value / b as f64,
        grad: Tensor::from_vec(logits.shape().clone(), grad)?,
    })
}

/// `0.5 * Σ (pred - target)^2`, summed over every element.
pub fn half_squared_error<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossOutput<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::structure("prediction and target differ in shape"));
    }
    let diff: Vec<T> = pred.data().iter().zip(target.data()).map(|(&p, &t)| p - t).collect();
    let value = diff.iter().map(|d| 0.5 * d.f64() * d.f64()).sum();
    Ok(LossOutput {
        value,
        grad: Tensor::from_vec(pred.shape().clone(), diff)?,
    })
}
