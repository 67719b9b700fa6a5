//! Training objectives over a block of next-token logits.
//!
//! Every function takes logits `[N, V]` whose row `i` predicts `labels[i]`;
//! `None` marks an unsupervised row. Rows from several sequences may be
//! packed together; only the unlikelihood objective needs the sequence
//! boundaries.
//!
//! The uncertainty-aware objective splits supervised rows by whether the
//! teacher-forced argmax equals the label:
//!
//! ```text
//! L = -1/|C~| sum_{i in C~} P_i ln(tanh H_i) - 1/|C| sum_{i in C} (1 - P_i) ln(1 - tanh H_i)
//! ```
//!
//! where `P_i` is the probability of the predicted token and `H_i` the entropy
//! of the full next-token distribution. `tanh H_i` is clamped to
//! `[1e-6, 1 - 1e-6]`. Set membership is treated as a constant; gradients flow
//! through both `P_i` and `H_i`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, clamp_scaled, entropy_of, log_sum_exp, softmax_in_place, SCALED_ENTROPY_EPS};

/// Probabilities inside the unlikelihood logarithm are clamped below this.
pub const UNLIKELIHOOD_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Clm,
    UaClm,
    Annealed,
    Ult,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Clm, LossKind::UaClm, LossKind::Annealed, LossKind::Ult];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Clm => "clm",
            LossKind::UaClm => "ua_clm",
            LossKind::Annealed => "annealed",
            LossKind::Ult => "ult",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            LossKind::Clm => 0,
            LossKind::UaClm => 1,
            LossKind::Annealed => 2,
            LossKind::Ult => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        LossKind::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?} (expected clm, ua_clm, annealed or ult)")))
    }
}

/// Weight schedule for `clm + beta * ua_clm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSchedule {
    pub beta_early: f64,
    pub beta_late: f64,
    pub switch_fraction: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { beta_early: 0.2, beta_late: 0.8, switch_fraction: 0.2 }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_early >= 0.0 && self.beta_late >= 0.0) {
            return Err(Error::Config("anneal betas must be non-negative".into()));
        }
        if !(self.switch_fraction > 0.0 && self.switch_fraction < 1.0) {
            return Err(Error::Config("anneal.switch_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// `beta_early` while `step <= switch_fraction * total_steps`.
    pub fn beta_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        self.validate()?;
        if step >= total_steps {
            return Err(Error::invalid(format!("step {step} outside 0..{total_steps}")));
        }
        Ok(if step as f64 <= self.switch_fraction * total_steps as f64 { self.beta_early } else { self.beta_late })
    }
}

/// The index sets `C` (argmax equals label) and `C~` (argmax differs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessMask {
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
    /// Argmax token per row, lowest id on ties.
    pub predicted_ids: Vec<u32>,
}

impl CorrectnessMask {
    pub fn num_supervised(&self) -> usize {
        self.correct.len() + self.incorrect.len()
    }
}

pub fn correctness_mask(logits: ArrayView2<'_, f64>, labels: &[Option<u32>]) -> Result<CorrectnessMask> {
    check_labels(logits, labels)?;
    let predicted_ids: Vec<u32> = logits
        .rows()
        .into_iter()
        .map(|row| match row.as_slice() {
            Some(r) => argmax(r) as u32,
            None => argmax(&row.to_vec()) as u32,
        })
        .collect();
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        match label {
            Some(l) if *l == predicted_ids[i] => correct.push(i),
            Some(_) => incorrect.push(i),
            None => {}
        }
    }
    Ok(CorrectnessMask { correct, incorrect, predicted_ids })
}

/// Per-step calibration telemetry over `C` and `C~`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenStats {
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub mean_entropy_correct: Option<f64>,
    pub mean_entropy_incorrect: Option<f64>,
    pub mean_p_correct: Option<f64>,
    pub mean_p_incorrect: Option<f64>,
}

/// Loss value, its gradient with respect to the logits, and the mask used.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
    pub mask: CorrectnessMask,
    pub stats: TokenStats,
}

fn check_labels(logits: ArrayView2<'_, f64>, labels: &[Option<u32>]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape { expected: format!("{} labels", logits.nrows()), actual: labels.len().to_string() });
    }
    let v = logits.ncols();
    if v == 0 {
        return Err(Error::invalid("logits have no vocabulary columns"));
    }
    for &id in labels.iter().flatten() {
        if id as usize >= v {
            return Err(Error::TokenOutOfRange { id, vocab_size: v });
        }
    }
    for (i, row) in logits.rows().into_iter().enumerate() {
        if let Some(value) = row.iter().copied().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index: i, value });
        }
    }
    Ok(())
}

/// Softmax rows plus everything the objectives share.
struct Prepared {
    probs: Array2<f64>,
    /// `log-sum-exp` of each supervised logit row.
    log_norm: Vec<f64>,
    logits: Array2<f64>,
    entropy: Vec<f64>,
    mask: CorrectnessMask,
}

fn prepare(logits: ArrayView2<'_, f64>, labels: &[Option<u32>]) -> Result<Prepared> {
    let mask = correctness_mask(logits, labels)?;
    if mask.num_supervised() == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    let mut probs = logits.to_owned();
    let mut entropy = vec![0.0; labels.len()];
    let mut log_norm = vec![0.0; labels.len()];
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        if labels[i].is_some() {
            let r = row.as_slice_mut().expect("contiguous rows");
            log_norm[i] = log_sum_exp(r);
            softmax_in_place(r);
            entropy[i] = entropy_of(r);
        }
    }
    Ok(Prepared { probs, log_norm, logits: logits.to_owned(), entropy, mask })
}

impl Prepared {
    fn p_pred(&self, i: usize) -> f64 {
        self.probs[[i, self.mask.predicted_ids[i] as usize]]
    }

    /// `1 - P` as the mass on every other token, accurate when `P` is near 1.
    fn q_pred(&self, i: usize) -> f64 {
        let k = self.mask.predicted_ids[i] as usize;
        self.probs.row(i).iter().enumerate().filter(|&(j, _)| j != k).map(|(_, p)| p).sum()
    }

    fn stats(&self) -> TokenStats {
        let mean = |idx: &[usize], f: &dyn Fn(usize) -> f64| {
            (!idx.is_empty()).then(|| idx.iter().map(|&i| f(i)).sum::<f64>() / idx.len() as f64)
        };
        let (c, w) = (&self.mask.correct, &self.mask.incorrect);
        TokenStats {
            n_correct: c.len(),
            n_incorrect: w.len(),
            mean_entropy_correct: mean(c, &|i| self.entropy[i]),
            mean_entropy_incorrect: mean(w, &|i| self.entropy[i]),
            mean_p_correct: mean(c, &|i| self.p_pred(i)),
            mean_p_incorrect: mean(w, &|i| self.p_pred(i)),
        }
    }

    fn zeros(&self) -> Array2<f64> {
        Array2::zeros(self.probs.raw_dim())
    }

    fn clm(&self, labels: &[Option<u32>], weight: f64, grad: &mut Array2<f64>) -> f64 {
        let n = self.mask.num_supervised() as f64;
        let mut total = 0.0;
        for (i, label) in labels.iter().enumerate() {
            let Some(label) = *label else { continue };
            let label = label as usize;
            total -= self.logits[[i, label]] - self.log_norm[i];
            let scale = weight / n;
            let mut g = grad.row_mut(i);
            g.scaled_add(scale, &self.probs.row(i));
            g[label] -= scale;
        }
        total / n
    }

    fn ua_clm(&self, weight: f64, grad: &mut Array2<f64>) -> f64 {
        let mut total = 0.0;
        let incorrect = &self.mask.incorrect;
        if !incorrect.is_empty() {
            let w = 1.0 / incorrect.len() as f64;
            let mut term = 0.0;
            for &i in incorrect {
                let (p, h) = (self.p_pred(i), self.entropy[i]);
                let (u, du_dh) = scaled_with_slope(h);
                term -= p * u.ln();
                // d/dz of -P ln u = -(dP ln u + P/u du/dH dH)
                let dp_coef = -u.ln();
                let dh_coef = -p / u * du_dh;
                self.accumulate(i, weight * w, dp_coef, dh_coef, grad);
            }
            total += w * term;
        }
        let correct = &self.mask.correct;
        if !correct.is_empty() {
            let w = 1.0 / correct.len() as f64;
            let mut term = 0.0;
            for &i in correct {
                let (q, h) = (self.q_pred(i), self.entropy[i]);
                let (u, du_dh) = scaled_with_slope(h);
                let log_1mu = (1.0 - u).ln();
                term -= q * log_1mu;
                // d/dz of -(1-P) ln(1-u) = dP ln(1-u) + (1-P)/(1-u) du/dH dH
                let dp_coef = log_1mu;
                let dh_coef = q / (1.0 - u) * du_dh;
                self.accumulate(i, weight * w, dp_coef, dh_coef, grad);
            }
            total += w * term;
        }
        total
    }

    /// Adds `scale * (dp_coef dP/dz + dh_coef dH/dz)` for row `i`, where
    /// `dP/dz_j = P (delta_jk - p_j)` and `dH/dz_j = -p_j (ln p_j + H)`.
    fn accumulate(&self, i: usize, scale: f64, dp_coef: f64, dh_coef: f64, grad: &mut Array2<f64>) {
        let k = self.mask.predicted_ids[i] as usize;
        let p_k = self.probs[[i, k]];
        let h = self.entropy[i];
        let mut g = grad.row_mut(i);
        for (j, (gj, &pj)) in g.iter_mut().zip(self.probs.row(i)).enumerate() {
            let dp = p_k * (f64::from(u8::from(j == k)) - pj);
            let dh = if pj > 0.0 { -pj * (pj.ln() + h) } else { 0.0 };
            *gj += scale * (dp_coef * dp + dh_coef * dh);
        }
    }

    fn unlikelihood(&self, labels: &[Option<u32>], offsets: &[usize], grad: &mut Array2<f64>) -> f64 {
        let n = self.mask.num_supervised() as f64;
        let mut total = 0.0;
        for seg in offsets.windows(2) {
            let mut seen: Vec<usize> = Vec::new();
            for (i, label) in labels.iter().enumerate().take(seg[1]).skip(seg[0]) {
                let Some(label) = *label else { continue };
                let label = label as usize;
                for &c in seen.iter().filter(|&&c| c != label) {
                    let pc = self.probs[[i, c]];
                    total -= (1.0 - pc.min(UNLIKELIHOOD_CLAMP)).ln();
                    if pc < UNLIKELIHOOD_CLAMP {
                        // d/dz_j -ln(1 - p_c) = p_c (delta_jc - p_j) / (1 - p_c)
                        let coef = pc / (1.0 - pc) / n;
                        let mut g = grad.row_mut(i);
                        g.scaled_add(-coef, &self.probs.row(i));
                        g[c] += coef;
                    }
                }
                if !seen.contains(&label) {
                    seen.push(label);
                }
            }
        }
        total / n
    }
}

/// Clamped `tanh h` and its derivative in `h` (zero where the clamp binds).
fn scaled_with_slope(h: f64) -> (f64, f64) {
    let t = h.tanh();
    let u = clamp_scaled(t);
    let slope = if t > SCALED_ENTROPY_EPS && t < 1.0 - SCALED_ENTROPY_EPS { 1.0 - t * t } else { 0.0 };
    (u, slope)
}

fn finish(prep: Prepared, value: f64, grad: Array2<f64>) -> LossOutput {
    let stats = prep.stats();
    LossOutput { value, grad, mask: prep.mask, stats }
}

/// Mean negative log-likelihood of the labels.
pub fn clm_loss(logits: ArrayView2<'_, f64>, labels: &[Option<u32>]) -> Result<LossOutput> {
    let prep = prepare(logits, labels)?;
    let mut grad = prep.zeros();
    let value = prep.clm(labels, 1.0, &mut grad);
    Ok(finish(prep, value, grad))
}

/// The uncertainty-aware objective. A term whose index set is empty is dropped.
pub fn ua_clm_loss(logits: ArrayView2<'_, f64>, labels: &[Option<u32>]) -> Result<LossOutput> {
    let prep = prepare(logits, labels)?;
    let mut grad = prep.zeros();
    let value = prep.ua_clm(1.0, &mut grad);
    Ok(finish(prep, value, grad))
}

/// `clm + beta * ua_clm` with `beta` from the schedule at `step`.
pub fn annealed_loss(
    step: usize,
    total_steps: usize,
    schedule: &AnnealSchedule,
    logits: ArrayView2<'_, f64>,
    labels: &[Option<u32>],
) -> Result<LossOutput> {
    let beta = schedule.beta_at(step, total_steps)?;
    let prep = prepare(logits, labels)?;
    let mut grad = prep.zeros();
    let clm = prep.clm(labels, 1.0, &mut grad);
    let ua = prep.ua_clm(beta, &mut grad);
    Ok(finish(prep, clm + beta * ua, grad))
}

/// Token-level unlikelihood training: `clm` plus, per supervised row,
/// `-sum_c ln(1 - p_c)` over earlier label tokens of the same sequence that
/// differ from the current label, averaged over supervised rows.
/// `offsets` delimit the packed sequences (`[0, N]` for a single one).
pub fn unlikelihood_loss(logits: ArrayView2<'_, f64>, labels: &[Option<u32>], offsets: &[usize]) -> Result<LossOutput> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&labels.len()) || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("sequence offsets must run from 0 to the number of rows"));
    }
    let prep = prepare(logits, labels)?;
    let mut grad = prep.zeros();
    let clm = prep.clm(labels, 1.0, &mut grad);
    let ul = prep.unlikelihood(labels, offsets, &mut grad);
    Ok(finish(prep, clm + ul, grad))
}

/// Where a step sits in training; only the annealed objective looks at it.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub step: usize,
    pub total_steps: usize,
}

/// Dispatches on [`LossKind`].
pub fn compute_loss(
    kind: LossKind,
    schedule: &AnnealSchedule,
    at: StepInfo,
    logits: ArrayView2<'_, f64>,
    labels: &[Option<u32>],
    offsets: &[usize],
) -> Result<LossOutput> {
    match kind {
        LossKind::Clm => clm_loss(logits, labels),
        LossKind::UaClm => ua_clm_loss(logits, labels),
        LossKind::Annealed => annealed_loss(at.step, at.total_steps, schedule, logits, labels),
        LossKind::Ult => unlikelihood_loss(logits, labels, offsets),
    }
}

/// Next-token labels for one sequence: row `t` predicts `ids[t + 1]`, and only
/// targets at index `>= supervised_from` count. The last row has no target.
pub fn shifted_labels(ids: &[u32], supervised_from: usize) -> Vec<Option<u32>> {
    (0..ids.len())
        .map(|t| {
            let target = t + 1;
            (target < ids.len() && target >= supervised_from.max(1)).then(|| ids[target])
        })
        .collect()
}
