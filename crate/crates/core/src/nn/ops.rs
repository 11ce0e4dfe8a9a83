//! Forward definitions of the differentiable primitives.
//!
//! [`Tape`](super::Tape) records these same functions and supplies their
//! derivatives; they are also usable directly on plain tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::SeedRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to the true-class probability inside [`cross_entropy`].
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Linear => v,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut SeedRng) -> Result<Vec<f64>> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Inverted dropout; identity when `training` is false or `rate` is 0.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut SeedRng, training: bool) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok(out)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Mean of squared differences over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.same_shape(target, "mse")?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Mean negative log-probability of the true class, floored at [`CE_FLOOR`].
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    probs.require_matrix("cross_entropy")?;
    if probs.rows() != labels.len() {
        return Err(Error::dim("cross_entropy", probs.shape(), &[labels.len()]));
    }
    let c = probs.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Index {
                what: "class labels",
                index: y,
                len: c,
            });
        }
        total -= probs.data()[i * c + y].max(CE_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}
