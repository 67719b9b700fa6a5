//! The fine-tuning loop: seeded epoch shuffles, packed mini-batches, AdamW on
//! the trainable parameters and per-step calibration telemetry.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{compute_loss, shifted_labels, AnnealSchedule, LossKind, StepInfo};
use crate::model::{forward_with_tape, Dropout, ModelParams, TokenSequence};
use crate::optim::{clip_global_norm, lr_at, AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub anneal: AnnealSchedule,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    /// Supervise only the answer tokens of each question; otherwise every
    /// token after `<bos>`.
    pub answer_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.001,
            warmup_ratio: 0.03,
            epochs: 3,
            batch_size: 8,
            seed: 0,
            loss_kind: LossKind::UaClm,
            anneal: AnnealSchedule::default(),
            grad_clip: 1.0,
            answer_only: true,
        }
    }
}

impl TrainConfig {
    // negated comparisons so that NaN fails every check
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        if self.loss_kind == LossKind::Annealed {
            self.anneal.validate()?;
        }
        Ok(())
    }
}

/// One training sequence. Targets at index `>= supervised_from` are
/// supervised (`1` supervises every predictable token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    pub supervised_from: usize,
}

/// Which parameters an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    /// Adapters only; the base stays frozen.
    Adapters,
    /// Every base parameter (pretraining a model without adapters).
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub mean_entropy_correct: Option<f64>,
    pub mean_entropy_incorrect: Option<f64>,
    pub mean_p_correct: Option<f64>,
    pub mean_p_incorrect: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        // an empty log still gets its header
        if self.records.is_empty() {
            w.write_record([
                "step",
                "loss",
                "lr",
                "n_correct",
                "n_incorrect",
                "mean_entropy_correct",
                "mean_entropy_incorrect",
                "mean_p_correct",
                "mean_p_incorrect",
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let records = r.deserialize().collect::<std::result::Result<Vec<StepRecord>, _>>().map_err(csv_err)?;
        Ok(TrainLog { records })
    }

    /// Records from the final `fraction` of steps (at least one).
    pub fn tail(&self, fraction: f64) -> &[StepRecord] {
        let n = self.records.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1.min(n), n);
        &self.records[n - k..]
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Examples dropped for exceeding the context or having no targets.
    pub skipped: usize,
    pub total_steps: usize,
}

/// Number of optimizer steps `train` will take for `n` usable examples.
pub fn total_steps(n: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs * n.div_ceil(cfg.batch_size)
}

/// Runs `cfg.epochs` passes over `data`. `on_epoch_end(epoch, params)` is
/// called after every epoch, e.g. to write a checkpoint.
pub fn train(
    params: &mut ModelParams,
    data: &[TrainExample],
    cfg: &TrainConfig,
    target: TrainTarget,
    mut on_epoch_end: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    match target {
        TrainTarget::Adapters if params.adapters.is_none() => {
            return Err(Error::invalid("adapter training requires attached adapters"));
        }
        TrainTarget::Base if params.adapters.is_some() => {
            return Err(Error::invalid("full-parameter training expects a model without adapters"));
        }
        _ => {}
    }

    let ctx = params.config.context_len;
    let usable: Vec<&TrainExample> = data
        .iter()
        .filter(|ex| ex.ids.len() <= ctx && shifted_labels(&ex.ids, ex.supervised_from).iter().any(Option::is_some))
        .collect();
    let skipped = data.len() - usable.len();
    let total = total_steps(usable.len(), cfg);
    let mut log = TrainLog::default();
    if total == 0 {
        return Ok(TrainOutcome { log, skipped, total_steps: 0 });
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TokenSequence> =
                chunk.iter().map(|&i| TokenSequence::new(usable[i].ids.clone())).collect::<Result<_>>()?;
            let labels: Vec<Option<u32>> =
                chunk.iter().flat_map(|&i| shifted_labels(&usable[i].ids, usable[i].supervised_from)).collect();

            let (logits, tape) = forward_with_tape(params, &batch, Dropout::Train(&mut dropout_rng))?;
            let at = StepInfo { step, total_steps: total };
            let out = compute_loss(cfg.loss_kind, &cfg.anneal, at, logits.data.view(), &labels, logits.offsets())?;
            let lr = lr_at(step, total, cfg.learning_rate, cfg.warmup_ratio)?;

            match target {
                TrainTarget::Adapters => {
                    let mut grads = tape.backward(params, &out.grad)?;
                    clip_global_norm(grads.arrays_mut(), cfg.grad_clip);
                    let adapters = params.adapters.as_mut().expect("checked above");
                    opt.step(adapters.arrays_mut(), &grads.arrays(), lr)?;
                }
                TrainTarget::Base => {
                    let mut grads = tape.backward_base(params, &out.grad)?;
                    clip_global_norm(grads.arrays_mut(), cfg.grad_clip);
                    opt.step(params.base.arrays_mut(), &grads.arrays(), lr)?;
                }
            }

            let s = out.stats;
            log.records.push(StepRecord {
                step,
                loss: out.value,
                lr,
                n_correct: s.n_correct,
                n_incorrect: s.n_incorrect,
                mean_entropy_correct: s.mean_entropy_correct,
                mean_entropy_incorrect: s.mean_entropy_incorrect,
                mean_p_correct: s.mean_p_correct,
                mean_p_incorrect: s.mean_p_incorrect,
            });
            step += 1;
        }
        on_epoch_end(epoch, params)?;
    }
    Ok(TrainOutcome { log, skipped, total_steps: total })
}
