//! AdamW with decoupled weight decay, the warmup/linear-decay learning-rate
//! schedule, and global-norm gradient clipping.
//!
//! ```text
//! theta = theta * (1 - lr * wd)            (matrices only)
//! m     = b1 * m + (1 - b1) * g
//! v     = b2 * v + (1 - b2) * g^2
//! theta = theta - lr * m_hat / (sqrt(v_hat) + eps)
//! ```

use crate::error::{Error, Result};
use crate::model::{NamedArray, NamedArrayMut};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.001 }
    }
}

/// Optimizer state: first and second moments per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of `params` from `grads` (same order and sizes). A
    /// non-finite gradient rejects the whole step before anything changes.
    pub fn step(&mut self, params: Vec<NamedArrayMut<'_>>, grads: &[NamedArray<'_>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                expected: format!("{} gradient arrays", params.len()),
                actual: grads.len().to_string(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.data.len() != g.data.len() {
                return Err(Error::Shape {
                    expected: format!("{} values for {}", p.data.len(), p.name),
                    actual: g.data.len().to_string(),
                });
            }
            if let Some((i, &value)) = g.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite gradient {value} in {} at {i}", g.name)));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("parameter layout changed between optimizer steps"));
        }

        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let decay = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] = p.data[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: Vec<NamedArrayMut<'_>>, max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            g.data.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Learning rate at `step` (0-based) of `total_steps`: a linear ramp from 0 to
/// `peak` over `ceil(warmup_ratio * total_steps)` steps, then a linear decay
/// to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("learning-rate schedule over zero steps"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond {total_steps} total steps")));
    }
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(Error::Config("train.warmup_ratio must lie in [0, 1)".into()));
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    Ok(if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup).max(1) as f64
    })
}

pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps.saturating_sub(1))
}
