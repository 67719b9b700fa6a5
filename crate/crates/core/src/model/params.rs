use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the tiny decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 256, d_model: 64, n_layers: 2, n_heads: 2, context_len: 64, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config("model.context_len must be at least 2".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("model.vocab_size does not fit token ids".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// The linear maps inside a block that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinearMap {
    #[serde(rename = "q_proj")]
    Query,
    #[serde(rename = "k_proj")]
    Key,
    #[serde(rename = "v_proj")]
    Value,
    #[serde(rename = "o_proj")]
    Output,
    #[serde(rename = "up_proj")]
    Up,
    #[serde(rename = "down_proj")]
    Down,
}

impl LinearMap {
    pub const ALL: [LinearMap; 6] =
        [LinearMap::Query, LinearMap::Key, LinearMap::Value, LinearMap::Output, LinearMap::Up, LinearMap::Down];

    pub fn name(self) -> &'static str {
        match self {
            LinearMap::Query => "q_proj",
            LinearMap::Key => "k_proj",
            LinearMap::Value => "v_proj",
            LinearMap::Output => "o_proj",
            LinearMap::Up => "up_proj",
            LinearMap::Down => "down_proj",
        }
    }

    /// `(d_in, d_out)` of this map.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.d_model;
        match self {
            LinearMap::Up => (d, cfg.ff_dim()),
            LinearMap::Down => (cfg.ff_dim(), d),
            _ => (d, d),
        }
    }
}

impl fmt::Display for LinearMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinearMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LinearMap::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown linear map {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target_maps: Vec<LinearMap>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            alpha: 64.0,
            dropout: 0.1,
            target_maps: vec![LinearMap::Query, LinearMap::Key, LinearMap::Value, LinearMap::Up, LinearMap::Down],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("lora.alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("lora.dropout must lie in [0, 1)".into()));
        }
        if self.target_maps.is_empty() {
            return Err(Error::Config("lora.target_maps is empty".into()));
        }
        for map in &self.target_maps {
            let (d_in, d_out) = map.dims(model);
            if self.rank > d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "lora.rank {} exceeds the dimensions of {map} ({d_in} -> {d_out})",
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl Norm {
    fn new(d: usize) -> Self {
        Norm { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    fn zeros(d: usize) -> Self {
        Norm { gamma: Array1::zeros(d), beta: Array1::zeros(d) }
    }
}

/// Weights of one pre-norm transformer block. Linear maps are stored
/// `[d_out, d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub o: Array2<f64>,
    pub ln2: Norm,
    pub up: Array2<f64>,
    pub down: Array2<f64>,
}

impl Block {
    pub fn map(&self, which: LinearMap) -> &Array2<f64> {
        match which {
            LinearMap::Query => &self.q,
            LinearMap::Key => &self.k,
            LinearMap::Value => &self.v,
            LinearMap::Output => &self.o,
            LinearMap::Up => &self.up,
            LinearMap::Down => &self.down,
        }
    }

    pub fn map_mut(&mut self, which: LinearMap) -> &mut Array2<f64> {
        match which {
            LinearMap::Query => &mut self.q,
            LinearMap::Key => &mut self.k,
            LinearMap::Value => &mut self.v,
            LinearMap::Output => &mut self.o,
            LinearMap::Up => &mut self.up,
            LinearMap::Down => &mut self.down,
        }
    }
}

/// The frozen base parameters. During fine-tuning these never change; during
/// pretraining the same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub head: Array2<f64>,
}

/// A named view of one parameter array.
pub struct NamedArray<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct NamedArrayMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    /// Whether decoupled weight decay applies (matrices yes, norms no).
    pub decay: bool,
}

fn view1<'a>(name: String, a: &'a Array1<f64>) -> NamedArray<'a> {
    NamedArray { name, shape: vec![a.len()], data: a.as_slice().expect("contiguous") }
}

fn view2<'a>(name: String, a: &'a Array2<f64>) -> NamedArray<'a> {
    NamedArray { name, shape: a.shape().to_vec(), data: a.as_slice().expect("contiguous") }
}

fn view1_mut(name: String, a: &mut Array1<f64>, decay: bool) -> NamedArrayMut<'_> {
    NamedArrayMut { name, data: a.as_slice_mut().expect("contiguous"), decay }
}

fn view2_mut(name: String, a: &mut Array2<f64>, decay: bool) -> NamedArrayMut<'_> {
    NamedArrayMut { name, data: a.as_slice_mut().expect("contiguous"), decay }
}

impl BaseParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let (d, ff, v) = (cfg.d_model, cfg.ff_dim(), cfg.vocab_size);
        let tok_emb = normal(&mut rng, (v, d), std);
        let pos_emb = normal(&mut rng, (cfg.context_len, d), std);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1: Norm::new(d),
                q: normal(&mut rng, (d, d), std),
                k: normal(&mut rng, (d, d), std),
                v: normal(&mut rng, (d, d), std),
                o: normal(&mut rng, (d, d), resid_std),
                ln2: Norm::new(d),
                up: normal(&mut rng, (ff, d), std),
                down: normal(&mut rng, (d, ff), resid_std),
            })
            .collect();
        let head = normal(&mut rng, (v, d), std);
        Ok(BaseParams { tok_emb, pos_emb, blocks, ln_f: Norm::new(d), head })
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.tok_emb.ncols();
        BaseParams {
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: Norm::zeros(d),
                    q: Array2::zeros(b.q.raw_dim()),
                    k: Array2::zeros(b.k.raw_dim()),
                    v: Array2::zeros(b.v.raw_dim()),
                    o: Array2::zeros(b.o.raw_dim()),
                    ln2: Norm::zeros(d),
                    up: Array2::zeros(b.up.raw_dim()),
                    down: Array2::zeros(b.down.raw_dim()),
                })
                .collect(),
            ln_f: Norm::zeros(d),
            head: Array2::zeros(self.head.raw_dim()),
        }
    }

    /// Every array in a fixed order. The order is the checkpoint order.
    pub fn arrays(&self) -> Vec<NamedArray<'_>> {
        let mut out = vec![view2("tok_emb".into(), &self.tok_emb), view2("pos_emb".into(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push(view1(format!("blocks.{l}.ln1.gamma"), &b.ln1.gamma));
            out.push(view1(format!("blocks.{l}.ln1.beta"), &b.ln1.beta));
            for map in LinearMap::ALL {
                out.push(view2(format!("blocks.{l}.{map}"), b.map(map)));
            }
            out.push(view1(format!("blocks.{l}.ln2.gamma"), &b.ln2.gamma));
            out.push(view1(format!("blocks.{l}.ln2.beta"), &b.ln2.beta));
        }
        out.push(view1("ln_f.gamma".into(), &self.ln_f.gamma));
        out.push(view1("ln_f.beta".into(), &self.ln_f.beta));
        out.push(view2("head".into(), &self.head));
        out
    }

    /// Mutable counterpart of [`BaseParams::arrays`], same order.
    pub fn arrays_mut(&mut self) -> Vec<NamedArrayMut<'_>> {
        let BaseParams { tok_emb, pos_emb, blocks, ln_f, head } = self;
        let mut out = vec![view2_mut("tok_emb".into(), tok_emb, false), view2_mut("pos_emb".into(), pos_emb, false)];
        for (l, b) in blocks.iter_mut().enumerate() {
            let Block { ln1, q, k, v, o, ln2, up, down } = b;
            out.push(view1_mut(format!("blocks.{l}.ln1.gamma"), &mut ln1.gamma, false));
            out.push(view1_mut(format!("blocks.{l}.ln1.beta"), &mut ln1.beta, false));
            out.push(view2_mut(format!("blocks.{l}.q_proj"), q, true));
            out.push(view2_mut(format!("blocks.{l}.k_proj"), k, true));
            out.push(view2_mut(format!("blocks.{l}.v_proj"), v, true));
            out.push(view2_mut(format!("blocks.{l}.o_proj"), o, true));
            out.push(view2_mut(format!("blocks.{l}.up_proj"), up, true));
            out.push(view2_mut(format!("blocks.{l}.down_proj"), down, true));
            out.push(view1_mut(format!("blocks.{l}.ln2.gamma"), &mut ln2.gamma, false));
            out.push(view1_mut(format!("blocks.{l}.ln2.beta"), &mut ln2.beta, false));
        }
        out.push(view1_mut("ln_f.gamma".into(), &mut ln_f.gamma, false));
        out.push(view1_mut("ln_f.beta".into(), &mut ln_f.beta, false));
        out.push(view2_mut("head".into(), head, true));
        out
    }
}

fn normal(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// A low-rank update `B A` for one linear map. `a` is `[r, d_in]`, `b` is
/// `[d_out, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraPair {
    fn zeros_like(&self) -> Self {
        LoraPair { a: Array2::zeros(self.a.raw_dim()), b: Array2::zeros(self.b.raw_dim()) }
    }
}

/// Key of an adapted map: `(layer, map)`.
pub type AdapterKey = (usize, LinearMap);

/// Trainable adapter parameters, or their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    pub config: LoraConfig,
    pub pairs: BTreeMap<AdapterKey, LoraPair>,
}

impl Adapters {
    /// Fresh adapters: `A` uniform in `±1/sqrt(d_in)`, `B` zero.
    pub fn init(model: &ModelConfig, lora: &LoraConfig, seed: u64) -> Result<Self> {
        lora.validate(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = BTreeMap::new();
        for layer in 0..model.n_layers {
            for &map in &lora.target_maps {
                let (d_in, d_out) = map.dims(model);
                let bound = 1.0 / (d_in as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("valid bounds");
                let a = Array2::from_shape_simple_fn((lora.rank, d_in), || dist.sample(&mut rng));
                let b = Array2::zeros((d_out, lora.rank));
                pairs.insert((layer, map), LoraPair { a, b });
            }
        }
        Ok(Adapters { config: lora.clone(), pairs })
    }

    pub fn zeros_like(&self) -> Self {
        Adapters { config: self.config.clone(), pairs: self.pairs.iter().map(|(k, p)| (*k, p.zeros_like())).collect() }
    }

    pub fn get(&self, layer: usize, map: LinearMap) -> Option<&LoraPair> {
        self.pairs.get(&(layer, map))
    }

    pub fn num_params(&self) -> usize {
        self.pairs.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    pub fn arrays(&self) -> Vec<NamedArray<'_>> {
        let mut out = Vec::with_capacity(2 * self.pairs.len());
        for ((layer, map), pair) in &self.pairs {
            out.push(view2(format!("lora.{layer}.{map}.a"), &pair.a));
            out.push(view2(format!("lora.{layer}.{map}.b"), &pair.b));
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<NamedArrayMut<'_>> {
        let mut out = Vec::with_capacity(2 * self.pairs.len());
        for ((layer, map), pair) in self.pairs.iter_mut() {
            out.push(view2_mut(format!("lora.{layer}.{map}.a"), &mut pair.a, true));
            out.push(view2_mut(format!("lora.{layer}.{map}.b"), &mut pair.b, true));
        }
        out
    }

    /// Flattened copy of every adapter value, in [`Adapters::arrays`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.arrays().iter().flat_map(|a| a.data.iter().copied()).collect()
    }

    /// Inverse of [`Adapters::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape {
                expected: format!("{} adapter values", self.num_params()),
                actual: values.len().to_string(),
            });
        }
        let mut offset = 0;
        for arr in self.arrays_mut() {
            let n = arr.data.len();
            arr.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Base parameters plus optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub base: BaseParams,
    pub adapters: Option<Adapters>,
    merged: bool,
}

impl ModelParams {
    pub fn from_parts(config: ModelConfig, base: BaseParams, adapters: Option<Adapters>) -> Result<Self> {
        config.validate()?;
        if let Some(ad) = &adapters {
            ad.config.validate(&config)?;
        }
        Ok(ModelParams { config, base, adapters, merged: false })
    }

    /// A base-only model.
    pub fn init_base(cfg: &ModelConfig) -> Result<Self> {
        Ok(ModelParams { config: cfg.clone(), base: BaseParams::init(cfg)?, adapters: None, merged: false })
    }

    /// Replaces any adapters with freshly initialized ones. The adapter seed is
    /// derived from the model seed so base initialization is unaffected.
    pub fn attach_adapters(&mut self, lora: &LoraConfig, seed: u64) -> Result<()> {
        self.adapters = Some(Adapters::init(&self.config, lora, seed)?);
        self.merged = false;
        Ok(())
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub(crate) fn set_merged(&mut self, merged: bool) {
        self.merged = merged;
    }
}

/// Seed used for adapter initialization given the model seed.
pub fn adapter_seed(model_seed: u64) -> u64 {
    model_seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Base parameters from `cfg.seed`, adapters attached with `B = 0`.
pub fn init_model(cfg: &ModelConfig, lora: &LoraConfig) -> Result<ModelParams> {
    lora.validate(cfg)?;
    let mut params = ModelParams::init_base(cfg)?;
    params.attach_adapters(lora, adapter_seed(cfg.seed))?;
    Ok(params)
}
