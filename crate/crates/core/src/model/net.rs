//! Forward pass with a recorded tape, and exact reverse-mode gradients.
//!
//! Sequences in a batch are packed row-wise into one `[tokens, d]` matrix so
//! the position-wise maps run as single matrix products; attention runs per
//! sequence segment.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Adapters, BaseParams, Block, LinearMap, LoraPair, ModelParams, Norm};
use super::TokenSequence;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Logits for a batch, packed row-wise: sequence `i` occupies rows
/// `offsets[i]..offsets[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub data: Array2<f64>,
    offsets: Vec<usize>,
}

impl Logits {
    pub fn num_seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn seq(&self, i: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![self.offsets[i]..self.offsets[i + 1], ..])
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

/// Adapter dropout source. Dropout only happens in training.
pub enum Dropout<'a> {
    Off,
    Train(&'a mut ChaCha8Rng),
}

struct NormTape {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LinearTape {
    /// Per-element dropout scale (`0` or `1/(1-p)`), when dropout was applied.
    drop_scale: Option<Array2<f64>>,
    /// Adapter input after dropout.
    xd: Option<Array2<f64>>,
    /// `xd A^T`.
    z: Option<Array2<f64>>,
}

struct BlockTape {
    ln1: NormTape,
    h1: Array2<f64>,
    q_lin: LinearTape,
    k_lin: LinearTape,
    v_lin: LinearTape,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    o_lin: LinearTape,
    ln2: NormTape,
    h2: Array2<f64>,
    up_lin: LinearTape,
    u: Array2<f64>,
    g: Array2<f64>,
    down_lin: LinearTape,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    ids: Vec<u32>,
    positions: Vec<usize>,
    offsets: Vec<usize>,
    blocks: Vec<BlockTape>,
    ln_f: NormTape,
    hf: Array2<f64>,
    vocab_size: usize,
}

impl Tape {
    pub fn num_tokens(&self) -> usize {
        self.ids.len()
    }

    /// Gradients for the adapter parameters only.
    pub fn backward(&self, params: &ModelParams, dlogits: &Array2<f64>) -> Result<Adapters> {
        if params.adapters.is_none() {
            return Err(Error::invalid("backward over adapters requires attached adapters"));
        }
        let (_, adapters) = self.backward_impl(params, dlogits, false)?;
        Ok(adapters.expect("adapters present"))
    }

    /// Gradients for every base parameter; used for full-parameter pretraining.
    pub fn backward_base(&self, params: &ModelParams, dlogits: &Array2<f64>) -> Result<BaseParams> {
        let (base, _) = self.backward_impl(params, dlogits, true)?;
        Ok(base.expect("base grads requested"))
    }

    fn backward_impl(
        &self,
        params: &ModelParams,
        dlogits: &Array2<f64>,
        want_base: bool,
    ) -> Result<(Option<BaseParams>, Option<Adapters>)> {
        let expected = (self.ids.len(), self.vocab_size);
        if dlogits.dim() != expected {
            return Err(Error::Shape { expected: format!("{expected:?}"), actual: format!("{:?}", dlogits.dim()) });
        }
        let base = &params.base;
        let cfg = &params.config;
        let mut gbase = want_base.then(|| base.zeros_like());
        let mut gad = params.adapters.as_ref().map(Adapters::zeros_like);

        let dhf = dlogits.dot(&base.head);
        if let Some(g) = gbase.as_mut() {
            g.head += &dlogits.t().dot(&self.hf);
        }
        let mut dx = norm_backward(&dhf, &self.ln_f, &base.ln_f, gbase.as_mut().map(|g| &mut g.ln_f));

        for (layer, (block, tape)) in base.blocks.iter().zip(&self.blocks).enumerate().rev() {
            let mut gblock = gbase.as_mut().map(|g| &mut g.blocks[layer]);
            let lora = |map| lora_for(params, layer, map);

            // feed-forward branch
            let dg = linear_backward(
                &dx,
                &tape.g,
                &block.down,
                lora(LinearMap::Down),
                &tape.down_lin,
                grad_slot(&mut gblock, LinearMap::Down),
                adapter_slot(&mut gad, layer, LinearMap::Down),
            );
            let du = gelu_backward(&dg, &tape.u);
            let dh2 = linear_backward(
                &du,
                &tape.h2,
                &block.up,
                lora(LinearMap::Up),
                &tape.up_lin,
                grad_slot(&mut gblock, LinearMap::Up),
                adapter_slot(&mut gad, layer, LinearMap::Up),
            );
            dx += &norm_backward(&dh2, &tape.ln2, &block.ln2, gblock.as_mut().map(|g| &mut g.ln2));

            // attention branch
            let dctx = linear_backward(
                &dx,
                &tape.ctx,
                &block.o,
                lora(LinearMap::Output),
                &tape.o_lin,
                grad_slot(&mut gblock, LinearMap::Output),
                adapter_slot(&mut gad, layer, LinearMap::Output),
            );
            let (dq, dk, dv) = attention_backward(&dctx, tape, &self.offsets, cfg.n_heads);
            let mut dh1 = linear_backward(
                &dq,
                &tape.h1,
                &block.q,
                lora(LinearMap::Query),
                &tape.q_lin,
                grad_slot(&mut gblock, LinearMap::Query),
                adapter_slot(&mut gad, layer, LinearMap::Query),
            );
            dh1 += &linear_backward(
                &dk,
                &tape.h1,
                &block.k,
                lora(LinearMap::Key),
                &tape.k_lin,
                grad_slot(&mut gblock, LinearMap::Key),
                adapter_slot(&mut gad, layer, LinearMap::Key),
            );
            dh1 += &linear_backward(
                &dv,
                &tape.h1,
                &block.v,
                lora(LinearMap::Value),
                &tape.v_lin,
                grad_slot(&mut gblock, LinearMap::Value),
                adapter_slot(&mut gad, layer, LinearMap::Value),
            );
            dx += &norm_backward(&dh1, &tape.ln1, &block.ln1, gblock.as_mut().map(|g| &mut g.ln1));
        }

        if let Some(g) = gbase.as_mut() {
            for (row, (&id, &pos)) in self.ids.iter().zip(&self.positions).enumerate() {
                let d = dx.row(row);
                let mut t = g.tok_emb.row_mut(id as usize);
                t += &d;
                let mut p = g.pos_emb.row_mut(pos);
                p += &d;
            }
        }
        Ok((gbase, gad))
    }
}

fn grad_slot<'a>(block: &'a mut Option<&mut Block>, map: LinearMap) -> Option<&'a mut Array2<f64>> {
    block.as_mut().map(|b| b.map_mut(map))
}

fn adapter_slot(ad: &mut Option<Adapters>, layer: usize, map: LinearMap) -> Option<&mut LoraPair> {
    ad.as_mut().and_then(|a| a.pairs.get_mut(&(layer, map)))
}

fn lora_for(params: &ModelParams, layer: usize, map: LinearMap) -> Option<(&LoraPair, f64)> {
    let ad = params.adapters.as_ref()?;
    ad.get(layer, map).map(|p| (p, ad.config.scale()))
}

/// Logits for every position of every sequence (no dropout).
pub fn forward(params: &ModelParams, batch: &[TokenSequence]) -> Result<Logits> {
    forward_with_tape(params, batch, Dropout::Off).map(|(logits, _)| logits)
}

/// Forward pass that records what [`Tape::backward`] needs.
pub fn forward_with_tape(
    params: &ModelParams,
    batch: &[TokenSequence],
    mut dropout: Dropout<'_>,
) -> Result<(Logits, Tape)> {
    let cfg = &params.config;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut offsets = vec![0];
    for seq in batch {
        if seq.len() > cfg.context_len {
            return Err(Error::ContextOverflow { len: seq.len(), context_len: cfg.context_len });
        }
        for (pos, &id) in seq.ids().iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
            }
            ids.push(id);
            positions.push(pos);
        }
        offsets.push(ids.len());
    }

    let base = &params.base;
    let n = ids.len();
    let mut x = Array2::zeros((n, cfg.d_model));
    for (row, (&id, &pos)) in ids.iter().zip(&positions).enumerate() {
        let mut r = x.row_mut(row);
        r.assign(&base.tok_emb.row(id as usize));
        r += &base.pos_emb.row(pos);
    }

    let p_drop = params.adapters.as_ref().map_or(0.0, |a| a.config.dropout);
    let mut blocks = Vec::with_capacity(base.blocks.len());
    for (layer, block) in base.blocks.iter().enumerate() {
        let lora = |map| lora_for(params, layer, map);
        let (h1, ln1) = norm_forward(&x, &block.ln1);
        let (q, q_lin) = linear_forward(&h1, &block.q, lora(LinearMap::Query), p_drop, &mut dropout);
        let (k, k_lin) = linear_forward(&h1, &block.k, lora(LinearMap::Key), p_drop, &mut dropout);
        let (v, v_lin) = linear_forward(&h1, &block.v, lora(LinearMap::Value), p_drop, &mut dropout);
        let (ctx, att) = attention_forward(&q, &k, &v, &offsets, cfg.n_heads);
        let (a, o_lin) = linear_forward(&ctx, &block.o, lora(LinearMap::Output), p_drop, &mut dropout);
        x += &a;
        let (h2, ln2) = norm_forward(&x, &block.ln2);
        let (u, up_lin) = linear_forward(&h2, &block.up, lora(LinearMap::Up), p_drop, &mut dropout);
        let g = u.mapv(gelu);
        let (m, down_lin) = linear_forward(&g, &block.down, lora(LinearMap::Down), p_drop, &mut dropout);
        x += &m;
        blocks.push(BlockTape {
            ln1,
            h1,
            q_lin,
            k_lin,
            v_lin,
            q,
            k,
            v,
            att,
            ctx,
            o_lin,
            ln2,
            h2,
            up_lin,
            u,
            g,
            down_lin,
        });
    }
    let (hf, ln_f) = norm_forward(&x, &base.ln_f);
    let logits = hf.dot(&base.head.t());
    let tape = Tape { ids, positions, offsets: offsets.clone(), blocks, ln_f, hf, vocab_size: cfg.vocab_size };
    Ok((Logits { data: logits, offsets }, tape))
}

fn norm_forward(x: &Array2<f64>, norm: &Norm) -> (Array2<f64>, NormTape) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let mut xhat = x - &mean.view().insert_axis(Axis(1));
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    xhat *= &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &norm.gamma + &norm.beta;
    (y, NormTape { xhat, inv_std })
}

fn norm_backward(dy: &Array2<f64>, tape: &NormTape, norm: &Norm, grad: Option<&mut Norm>) -> Array2<f64> {
    if let Some(g) = grad {
        g.gamma += &(dy * &tape.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * &norm.gamma;
    let mean_d = dxhat.sum_axis(Axis(1)) / d;
    let mean_dx = (&dxhat * &tape.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat;
    Zip::from(dx.rows_mut()).and(tape.xhat.rows()).and(&mean_d).and(&mean_dx).and(&tape.inv_std).for_each(
        |mut row, xh, &md, &mdx, &inv| {
            Zip::from(&mut row).and(&xh).for_each(|v, &xh| *v = inv * (*v - md - xh * mdx));
        },
    );
    dx
}

fn linear_forward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    lora: Option<(&LoraPair, f64)>,
    p_drop: f64,
    dropout: &mut Dropout<'_>,
) -> (Array2<f64>, LinearTape) {
    let mut y = x.dot(&w.t());
    let mut tape = LinearTape { drop_scale: None, xd: None, z: None };
    if let Some((pair, scale)) = lora {
        let xd = match dropout {
            Dropout::Train(rng) if p_drop > 0.0 => {
                let keep = 1.0 / (1.0 - p_drop);
                let mask =
                    Array2::from_shape_simple_fn(x.raw_dim(), || if rng.random::<f64>() < p_drop { 0.0 } else { keep });
                let xd = x * &mask;
                tape.drop_scale = Some(mask);
                xd
            }
            _ => x.clone(),
        };
        let z = xd.dot(&pair.a.t());
        y.scaled_add(scale, &z.dot(&pair.b.t()));
        tape.xd = Some(xd);
        tape.z = Some(z);
    }
    (y, tape)
}

/// Backward through `y = x W^T + s (xd A^T) B^T`. Accumulates into `gw` and
/// `gpair` when given; returns `dL/dx`.
fn linear_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    lora: Option<(&LoraPair, f64)>,
    tape: &LinearTape,
    gw: Option<&mut Array2<f64>>,
    gpair: Option<&mut LoraPair>,
) -> Array2<f64> {
    let mut dx = dy.dot(w);
    if let Some(gw) = gw {
        *gw += &dy.t().dot(x);
    }
    if let Some((pair, scale)) = lora {
        let xd = tape.xd.as_ref().expect("adapter tape");
        let z = tape.z.as_ref().expect("adapter tape");
        let dz = dy.dot(&pair.b) * scale;
        if let Some(g) = gpair {
            g.b.scaled_add(scale, &dy.t().dot(z));
            g.a += &dz.t().dot(xd);
        }
        let mut dxd = dz.dot(&pair.a);
        if let Some(mask) = &tape.drop_scale {
            dxd *= mask;
        }
        dx += &dxd;
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_backward(dg: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
    let mut du = dg.clone();
    Zip::from(&mut du).and(u).for_each(|d, &u| {
        let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
        *d *= 0.5 * (1.0 + t) + 0.5 * u * dt;
    });
    du
}

fn attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    offsets: &[usize],
    n_heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut atts = Vec::with_capacity((offsets.len() - 1) * n_heads);
    for w in offsets.windows(2) {
        let (start, end) = (w[0], w[1]);
        let t = end - start;
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![start..end, cols.clone()]);
            let kh = k.slice(s![start..end, cols.clone()]);
            let vh = v.slice(s![start..end, cols.clone()]);
            let mut att = qh.dot(&kh.t()) * scale;
            for i in 0..t {
                let mut row = att.row_mut(i);
                let max = row.iter().take(i + 1).copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, a) in row.iter_mut().enumerate() {
                    if j <= i {
                        *a = (*a - max).exp();
                        total += *a;
                    } else {
                        *a = 0.0;
                    }
                }
                row /= total;
            }
            ctx.slice_mut(s![start..end, cols]).assign(&att.dot(&vh));
            atts.push(att);
        }
    }
    (ctx, atts)
}

fn attention_backward(
    dctx: &Array2<f64>,
    tape: &BlockTape,
    offsets: &[usize],
    n_heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = dctx.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(dctx.raw_dim());
    let mut dk = Array2::zeros(dctx.raw_dim());
    let mut dv = Array2::zeros(dctx.raw_dim());
    let mut atts = tape.att.iter();
    for w in offsets.windows(2) {
        let (start, end) = (w[0], w[1]);
        for h in 0..n_heads {
            let att = atts.next().expect("one attention matrix per segment and head");
            let cols = h * dh..(h + 1) * dh;
            let qh = tape.q.slice(s![start..end, cols.clone()]);
            let kh = tape.k.slice(s![start..end, cols.clone()]);
            let vh = tape.v.slice(s![start..end, cols.clone()]);
            let dch = dctx.slice(s![start..end, cols.clone()]);
            let datt = dch.dot(&vh.t());
            dv.slice_mut(s![start..end, cols.clone()]).assign(&att.t().dot(&dch));
            let row_dot = (&datt * att).sum_axis(Axis(1));
            let mut dscores = datt - &row_dot.insert_axis(Axis(1));
            dscores *= att;
            dscores *= scale;
            dq.slice_mut(s![start..end, cols.clone()]).assign(&dscores.dot(&kh));
            dk.slice_mut(s![start..end, cols]).assign(&dscores.t().dot(&qh));
        }
    }
    (dq, dk, dv)
}
