//! Numeric kernels shared by the model, the losses and the uncertainty metrics.
//!
//! Everything here works in `f64` and in natural logarithms. Entropy uses the
//! convention `0 · ln 0 = 0`.

use crate::error::{Error, Result};

/// Floor and ceiling applied to `tanh(H)` before it enters a logarithm.
pub const SCALED_ENTROPY_EPS: f64 = 1e-6;

const SUM_TOLERANCE: f64 = 1e-6;

/// A validated next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow(Vec<f64>);

impl ProbRow {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probability row is empty"));
        }
        check_finite(&probs)?;
        if let Some(i) = probs.iter().position(|&p| p < 0.0) {
            return Err(Error::invalid(format!("negative probability {} at {i}", probs[i])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(ProbRow(probs))
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Entropy of a distribution together with its clamped `tanh` scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenEntropy {
    pub h: f64,
    pub h_scaled: f64,
}

impl TokenEntropy {
    pub fn of(row: &ProbRow) -> Self {
        let h = entropy(row);
        TokenEntropy { h, h_scaled: clamp_scaled(h.tanh()) }
    }
}

pub(crate) fn check_finite(xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index, value: xs[index] }),
        None => Ok(()),
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbRow> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    check_finite(logits)?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbRow(out))
}

/// Unchecked in-place softmax used on hot paths. Inputs must be finite.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// `ln softmax(logits)`, computed with log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbRow) -> f64 {
    entropy_of(p.probs())
}

/// Entropy of a raw probability slice, skipping zero entries.
pub fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    // rounding can push a one-hot row a hair below zero
    h.max(0.0)
}

/// `clamp(tanh(h), eps, 1 - eps)`.
pub fn scaled_entropy(h: f64) -> Result<f64> {
    if !h.is_finite() {
        return Err(Error::NonFinite { index: 0, value: h });
    }
    if h < 0.0 {
        return Err(Error::invalid(format!("entropy must be non-negative, got {h}")));
    }
    Ok(clamp_scaled(h.tanh()))
}

pub(crate) fn clamp_scaled(t: f64) -> f64 {
    t.clamp(SCALED_ENTROPY_EPS, 1.0 - SCALED_ENTROPY_EPS)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let plus = f(&probe);
        probe[k] = x[k] - step;
        let minus = f(&probe);
        probe[k] = x[k];
        if !plus.is_finite() || !minus.is_finite() {
            let value = if plus.is_finite() { minus } else { plus };
            return Err(Error::NonFinite { index: k, value });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest elementwise relative error, with `floor` guarding near-zero entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}
