//! Binary checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        6 bytes   "UACAL1"
//! vocab_size   u32
//! d_model      u32
//! n_layers     u32
//! n_heads      u32
//! context_len  u32
//! model_seed   u64
//! has_lora     u8        0 or 1; the next four fields only when 1
//! rank         u32
//! alpha        f64
//! dropout      f64
//! n_targets    u8, then n_targets map names (u8 length + UTF-8 bytes)
//! loss_kind    u8        0 clm, 1 ua_clm, 2 annealed, 3 ult, 255 none
//! merged       u8        0 or 1
//! steps        u64       optimizer steps taken
//! n_arrays     u32
//! per array:
//!   name       u16 length + UTF-8 bytes
//!   ndim       u8, then ndim u32 dimensions
//!   data       f32 values, row-major
//! ```
//!
//! Base arrays come first in [`BaseParams::arrays`] order, then adapter
//! arrays in [`Adapters::arrays`] order. Values are stored as 32-bit floats,
//! so a loaded model equals the saved one up to `f32` rounding.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{Adapters, BaseParams, LinearMap, LoraConfig, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 6] = b"UACAL1";

/// Metadata stored next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub loss_kind: Option<LossKind>,
    pub steps: u64,
}

fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str, wide: bool) {
    if wide {
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    } else {
        out.push(s.len() as u8);
    }
    out.extend_from_slice(s.as_bytes());
}

/// Serializes `params` into checkpoint bytes.
pub fn to_bytes(params: &ModelParams, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let cfg = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.context_len] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    match &params.adapters {
        None => put_u8(&mut out, 0),
        Some(ad) => {
            put_u8(&mut out, 1);
            put_u32(&mut out, ad.config.rank)?;
            out.extend_from_slice(&ad.config.alpha.to_le_bytes());
            out.extend_from_slice(&ad.config.dropout.to_le_bytes());
            put_u8(&mut out, ad.config.target_maps.len() as u8);
            for m in &ad.config.target_maps {
                put_str(&mut out, m.name(), false);
            }
        }
    }
    put_u8(&mut out, meta.loss_kind.map_or(255, LossKind::code));
    put_u8(&mut out, params.is_merged() as u8);
    out.extend_from_slice(&meta.steps.to_le_bytes());

    let mut arrays = params.base.arrays();
    if let Some(ad) = &params.adapters {
        arrays.extend(ad.arrays());
    }
    put_u32(&mut out, arrays.len())?;
    for a in &arrays {
        put_str(&mut out, &a.name, true);
        put_u8(&mut out, a.shape.len() as u8);
        for &d in &a.shape {
            put_u32(&mut out, d)?;
        }
        for &v in a.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, wide: bool) -> Result<String> {
        let n = if wide { self.u16()? as usize } else { self.u8()? as usize };
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad {what} flag {b}"))),
        }
    }
}

/// Parses checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing UACAL1 magic".into()));
    }
    let config = ModelConfig {
        vocab_size: r.u32()?,
        d_model: r.u32()?,
        n_layers: r.u32()?,
        n_heads: r.u32()?,
        context_len: r.u32()?,
        seed: r.u64()?,
    };
    config.validate()?;
    let lora = if r.flag("lora")? {
        let rank = r.u32()?;
        let alpha = r.f64()?;
        let dropout = r.f64()?;
        let n = r.u8()?;
        let target_maps = (0..n).map(|_| r.str(false)?.parse::<LinearMap>()).collect::<Result<Vec<_>>>()?;
        Some(LoraConfig { rank, alpha, dropout, target_maps })
    } else {
        None
    };
    let loss_kind = match r.u8()? {
        255 => None,
        c => Some(LossKind::from_code(c).ok_or_else(|| Error::Checkpoint(format!("unknown loss code {c}")))?),
    };
    let merged = r.flag("merged")?;
    let steps = r.u64()?;

    let mut base = BaseParams::init(&config)?.zeros_like();
    let mut adapters = match &lora {
        Some(l) => Some(Adapters::init(&config, l, 0)?.zeros_like()),
        None => None,
    };
    let mut slots = base.arrays_mut();
    if let Some(ad) = adapters.as_mut() {
        slots.extend(ad.arrays_mut());
    }
    let n_arrays = r.u32()?;
    if n_arrays != slots.len() {
        return Err(Error::Checkpoint(format!("expected {} arrays, found {n_arrays}", slots.len())));
    }
    for slot in slots {
        let name = r.str(true)?;
        if name != slot.name {
            return Err(Error::Checkpoint(format!("expected array {}, found {name}", slot.name)));
        }
        let ndim = r.u8()? as usize;
        let mut len = 1usize;
        for _ in 0..ndim {
            len = len.saturating_mul(r.u32()?);
        }
        if len != slot.data.len() {
            return Err(Error::Checkpoint(format!("array {name} has {len} values, expected {}", slot.data.len())));
        }
        let raw = r.take(4 * len)?;
        for (dst, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut params = ModelParams::from_parts(config, base, adapters)?;
    params.set_merged(merged);
    Ok((params, CheckpointMeta { loss_kind, steps }))
}

pub fn save(path: &Path, params: &ModelParams, meta: CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(params, meta)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Rounds every parameter to `f32`, the precision a checkpoint keeps.
pub fn round_to_f32(params: &mut ModelParams) {
    let mut arrays = params.base.arrays_mut();
    if let Some(ad) = params.adapters.as_mut() {
        arrays.extend(ad.arrays_mut());
    }
    for a in arrays {
        a.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
