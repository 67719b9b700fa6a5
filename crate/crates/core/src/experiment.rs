//! The end-to-end workflow on a synthetic world: pretrain a base model,
//! fine-tune adapters with a chosen objective, decode every evaluation prompt
//! and score the answers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{greedy_decode, sample_decode, Decoded, GenConfig, GenerationRecord};
use crate::losses::LossKind;
use crate::metrics::{calibration_report, CalibrationReport, EvalRecord};
use crate::model::{adapter_seed, merge_adapters, LoraConfig, ModelConfig, ModelParams};
use crate::train::{train, TrainConfig, TrainExample, TrainLog, TrainTarget};
use crate::uncertainty::{report, UncertaintyOptions};
use crate::world::{encode_pair, encode_prompt, QAItem, Split, Vocab, WorldConfig};

/// Every knob of a run. `model.vocab_size` is replaced by the size of the
/// vocabulary built from the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub generate: GenConfig,
    pub uncertainty: UncertaintyOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            pretrain: TrainConfig {
                learning_rate: 3e-3,
                weight_decay: 0.0,
                epochs: 40,
                batch_size: 16,
                loss_kind: LossKind::Clm,
                ..TrainConfig::default()
            },
            finetune: TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() },
            generate: GenConfig::default(),
            uncertainty: UncertaintyOptions::default(),
        }
    }
}

impl RunConfig {
    /// Sets the model, training and sampling seeds. The world keeps its own
    /// seed so that several runs can share one corpus.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.generate.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.generate.validate()?;
        Ok(())
    }
}

/// `<bos> prompt answer <eos>` for every item of `split`, supervised from
/// `from_answer` (answer tokens only) or from the first token.
pub fn examples(items: &[QAItem], vocab: &Vocab, split: Split, answer_only: bool) -> Vec<TrainExample> {
    items
        .iter()
        .filter(|i| i.split == split)
        .map(|item| {
            let (ids, answer_start) = encode_pair(vocab, &item.prompt, &item.answers[0]);
            TrainExample { ids, supervised_from: if answer_only { answer_start } else { 1 } }
        })
        .collect()
}

/// Full-parameter training of a fresh base model on the pretraining split.
pub fn pretrain(
    model: &ModelConfig,
    cfg: &TrainConfig,
    items: &[QAItem],
    vocab: &Vocab,
) -> Result<(ModelParams, TrainLog)> {
    let model = ModelConfig { vocab_size: vocab.len(), ..model.clone() };
    let mut params = ModelParams::init_base(&model)?;
    let data = examples(items, vocab, Split::Pretrain, cfg.answer_only);
    let out = train(&mut params, &data, cfg, TrainTarget::Base, |_, _| Ok(()))?;
    Ok((params, out.log))
}

/// Attaches fresh adapters to `base` and trains them on the fine-tuning split.
pub fn finetune(
    base: &ModelParams,
    lora: &LoraConfig,
    cfg: &TrainConfig,
    items: &[QAItem],
    vocab: &Vocab,
) -> Result<(ModelParams, TrainLog)> {
    if base.adapters.is_some() {
        return Err(Error::invalid("fine-tuning expects a base model without adapters"));
    }
    let mut params = base.clone();
    params.attach_adapters(lora, adapter_seed(cfg.seed))?;
    let data = examples(items, vocab, Split::Finetune, cfg.answer_only);
    let out = train(&mut params, &data, cfg, TrainTarget::Adapters, |_, _| Ok(()))?;
    Ok((params, out.log))
}

/// Greedy answer plus `M` samples for each item. Item `k` samples on streams
/// `k * M .. (k + 1) * M`.
pub fn generate(
    params: &ModelParams,
    vocab: &Vocab,
    items: &[&QAItem],
    cfg: &GenConfig,
) -> Result<Vec<GenerationRecord>> {
    let model = decoding_model(params)?;
    items.iter().enumerate().map(|(k, item)| generate_item(&model, vocab, item, k, cfg)).collect()
}

/// The model used for decoding: adapters, if any, merged into the base.
pub fn decoding_model(params: &ModelParams) -> Result<ModelParams> {
    if params.adapters.is_some() {
        merge_adapters(params)
    } else {
        Ok(params.clone())
    }
}

/// One item of [`generate`], at position `k` of the item list. Independent of
/// every other item, so items can be decoded in any order or in parallel.
pub fn generate_item(
    model: &ModelParams,
    vocab: &Vocab,
    item: &QAItem,
    k: usize,
    cfg: &GenConfig,
) -> Result<GenerationRecord> {
    let cfg = GenConfig { stop_token: Vocab::EOS, ..cfg.clone() };
    let m = cfg.num_samples as u64;
    let prompt = encode_prompt(vocab, &item.prompt);
    let greedy = greedy_decode(model, &prompt, &cfg)?;
    let samples: Vec<Decoded> =
        (0..m).map(|s| sample_decode(model, &prompt, &cfg, k as u64 * m + s)).collect::<Result<_>>()?;
    Ok(GenerationRecord::new(item.id.clone(), item.prompt.clone(), greedy, &samples, |ids| vocab.decode(ids)))
}

/// Attaches uncertainty reports to `gens` and scores them against `items`.
pub fn evaluate(
    gens: &mut [GenerationRecord],
    items: &[QAItem],
    opts: &UncertaintyOptions,
) -> Result<(Vec<EvalRecord>, CalibrationReport)> {
    let by_id: std::collections::HashMap<&str, &QAItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut records = Vec::with_capacity(gens.len());
    for g in gens.iter_mut() {
        let item =
            by_id.get(g.id.as_str()).ok_or_else(|| Error::invalid(format!("generation {} has no item", g.id)))?;
        let u = report(g, opts)?;
        g.uncertainty = Some(u);
        records.push(EvalRecord::new(g.id.clone(), g.response.clone(), item.answers.clone(), item.ood, u)?);
    }
    let report = calibration_report(&records)?;
    Ok((records, report))
}

/// Eval and OOD items, in corpus order.
pub fn test_items(items: &[QAItem]) -> Vec<&QAItem> {
    items.iter().filter(|i| matches!(i.split, Split::Eval | Split::Ood)).collect()
}
