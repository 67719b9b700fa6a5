//! Greedy and temperature-sampled decoding.
//!
//! Every decoded step records the log-probability of the emitted token and the
//! entropy of the model's next-token distribution. The stop token ends a
//! response without appearing in it, but its step is recorded: the probability
//! of stopping is part of the probability of the response.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelParams, TokenSequence};
use crate::numeric::{argmax, entropy_of, log_softmax};
use crate::uncertainty::UncertaintyReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub num_samples: usize,
    pub seed: u64,
    pub stop_token: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { max_new_tokens: 16, temperature: 0.3, num_samples: 5, seed: 0, stop_token: 2 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("generate.max_new_tokens must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("generate.temperature must be positive".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("generate.num_samples must be positive".into()));
        }
        Ok(())
    }
}

/// One decoded continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Emitted tokens, stop token excluded.
    pub ids: Vec<u32>,
    /// Per-step log-probability under the distribution actually decoded from.
    pub logprobs: Vec<f64>,
    /// Per-step log-probability under the untempered model distribution.
    pub logprobs_untempered: Vec<f64>,
    /// Per-step entropy of the untempered distribution.
    pub entropies: Vec<f64>,
    /// Whether decoding ended on the stop token.
    pub stopped: bool,
}

impl Decoded {
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn logprob_untempered(&self) -> f64 {
        self.logprobs_untempered.iter().sum()
    }
}

fn decode_with(
    params: &ModelParams,
    prompt: &[u32],
    cfg: &GenConfig,
    mut pick: impl FnMut(&[f64]) -> Result<(u32, f64)>,
) -> Result<Decoded> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::invalid("prompt is empty"));
    }
    let context = params.config.context_len;
    if prompt.len() > context {
        return Err(Error::ContextOverflow { len: prompt.len(), context_len: context });
    }
    let mut seq = prompt.to_vec();
    let mut out = Decoded {
        ids: Vec::new(),
        logprobs: Vec::new(),
        logprobs_untempered: Vec::new(),
        entropies: Vec::new(),
        stopped: false,
    };
    while out.logprobs.len() < cfg.max_new_tokens && seq.len() < context {
        let logits = forward(params, &[TokenSequence::new(seq.clone())?])?;
        let row = logits.seq(0);
        let last: Vec<f64> = row.row(row.nrows() - 1).to_vec();
        let logp = log_softmax(&last);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let (token, lp) = pick(&last)?;
        out.logprobs.push(lp);
        out.logprobs_untempered.push(logp[token as usize]);
        out.entropies.push(entropy_of(&probs));
        if token == cfg.stop_token {
            out.stopped = true;
            break;
        }
        out.ids.push(token);
        seq.push(token);
    }
    Ok(out)
}

/// Argmax decoding, lowest id on ties.
pub fn greedy_decode(params: &ModelParams, prompt: &[u32], cfg: &GenConfig) -> Result<Decoded> {
    decode_with(params, prompt, cfg, |z| {
        let k = argmax(z);
        Ok((k as u32, log_softmax(z)[k]))
    })
}

/// Random generator for `(seed, stream_index)`.
pub fn sample_rng(seed: u64, stream_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_index);
    rng
}

/// Samples from `softmax(z / T)` at every step.
pub fn sample_decode(params: &ModelParams, prompt: &[u32], cfg: &GenConfig, stream_index: u64) -> Result<Decoded> {
    let mut rng = sample_rng(cfg.seed, stream_index);
    let t = cfg.temperature;
    decode_with(params, prompt, cfg, |z| {
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let logq = log_softmax(&scaled);
        let weights: Vec<f64> = logq.iter().map(|l| l.exp()).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("sampling weights: {e}")))?;
        let k = dist.sample(&mut rng);
        Ok((k as u32, logq[k]))
    })
}

/// `cfg.num_samples` samples on streams `0..M`.
pub fn multi_sample(params: &ModelParams, prompt: &[u32], cfg: &GenConfig) -> Result<Vec<Decoded>> {
    (0..cfg.num_samples as u64).map(|s| sample_decode(params, prompt, cfg, s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub text: String,
    /// Sequence log-probability under the tempered distribution.
    pub logprob: f64,
    pub logprob_untempered: f64,
    /// Decoded steps, stop step included.
    pub n_steps: usize,
}

/// One line of the generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub prompt: String,
    pub response: String,
    pub response_ids: Vec<u32>,
    pub token_logprobs: Vec<f64>,
    pub token_entropies: Vec<f64>,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<UncertaintyReport>,
}

impl GenerationRecord {
    /// Assembles a record from a greedy decode and its samples, rendering
    /// token ids through `detok`.
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        greedy: Decoded,
        samples: &[Decoded],
        detok: impl Fn(&[u32]) -> String,
    ) -> Self {
        GenerationRecord {
            id: id.into(),
            prompt: prompt.into(),
            response: detok(&greedy.ids),
            samples: samples
                .iter()
                .map(|s| SampleRecord {
                    text: detok(&s.ids),
                    logprob: s.logprob(),
                    logprob_untempered: s.logprob_untempered(),
                    n_steps: s.logprobs.len(),
                })
                .collect(),
            response_ids: greedy.ids,
            token_logprobs: greedy.logprobs,
            token_entropies: greedy.entropies,
            uncertainty: None,
        }
    }
}
