//! A from-scratch decoder-only transformer with frozen base weights and
//! trainable low-rank adapters.
//!
//! Blocks are pre-norm with GELU feed-forward and learned positional
//! embeddings. An adapted linear map computes `W x + (alpha / r) B A x`, with
//! dropout on the input of `A` during training only.

mod net;
mod params;

pub use net::{forward, forward_with_tape, Dropout, Logits, Tape};
pub use params::{
    adapter_seed, init_model, AdapterKey, Adapters, BaseParams, Block, LinearMap, LoraConfig, LoraPair, ModelConfig,
    ModelParams, NamedArray, NamedArrayMut, Norm,
};

use crate::error::{Error, Result};

/// A non-empty list of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

impl TryFrom<Vec<u32>> for TokenSequence {
    type Error = Error;

    fn try_from(ids: Vec<u32>) -> Result<Self> {
        TokenSequence::new(ids)
    }
}

/// Folds every adapter into its base map, `W += (alpha / r) B A`, and returns
/// a base-only model. Merging twice is an error.
pub fn merge_adapters(params: &ModelParams) -> Result<ModelParams> {
    if params.is_merged() {
        return Err(Error::AlreadyMerged);
    }
    let mut base = params.base.clone();
    if let Some(ad) = &params.adapters {
        let scale = ad.config.scale();
        for (&(layer, map), pair) in &ad.pairs {
            let delta = pair.b.dot(&pair.a);
            base.blocks[layer].map_mut(map).scaled_add(scale, &delta);
        }
    }
    let mut merged = ModelParams::from_parts(params.config.clone(), base, None)?;
    merged.set_merged(true);
    Ok(merged)
}
