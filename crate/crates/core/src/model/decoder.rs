//! Incremental decoding with a per-stream key/value cache.
//!
//! A [`Decoder`] advances several independent streams in lockstep: every
//! call to [`Decoder::step`] consumes one token per stream at the same
//! sequence index, so projections run as one `streams x hidden` GEMM.

use super::ops::{rmsnorm_row, silu, RopeTable};
use super::{ModelConfig, Params, PositionMap};
use crate::error::{ensure, Error, Result};
use crate::float::{matmul, Float};

pub struct Decoder<'a, T> {
    params: &'a Params<T>,
    cfg: &'a ModelConfig,
    streams: usize,
    rope: RopeTable<T>,
    max_len: usize,
    len: usize,
    /// `[layer][stream]`, each `len x hidden` of rotated keys / values.
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
}

impl<'a, T: Float> Decoder<'a, T> {
    pub fn new(params: &'a Params<T>, cfg: &'a ModelConfig, streams: usize) -> Result<Self> {
        ensure!(streams >= 1, "decoder needs at least one stream");
        let positions = PositionMap::new(cfg);
        let rope = RopeTable::new(cfg.head_dim(), positions.as_slice(), cfg.rope_base)?;
        let max_len = positions.0.len();
        let cap = max_len * cfg.hidden;
        let fresh = || vec![Vec::with_capacity(cap); streams];
        Ok(Self {
            params,
            cfg,
            streams,
            rope,
            max_len,
            len: 0,
            keys: (0..cfg.layers).map(|_| fresh()).collect(),
            values: (0..cfg.layers).map(|_| fresh()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn streams(&self) -> usize {
        self.streams
    }

    /// Feeds one token per stream; returns `streams x vocab` logits for the
    /// next position.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Vec<T>> {
        let cfg = self.cfg;
        let b = self.streams;
        ensure!(tokens.len() == b, "expected {b} tokens, got {}", tokens.len());
        if self.len >= self.max_len {
            return Err(Error::Validation(format!(
                "decoder is full ({} positions)",
                self.max_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab()) {
            return Err(Error::Validation(format!("token id {bad} >= vocab {}", cfg.vocab())));
        }
        let (h, heads, d, f, vocab) = (cfg.hidden, cfg.heads, cfg.head_dim(), cfg.ffn_dim(), cfg.vocab());
        let eps = T::lit(cfg.norm_eps);
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let pos = self.len;
        let p = self.params;

        let mut x = vec![T::zero(); b * h];
        for (s, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            x[s * h..(s + 1) * h].copy_from_slice(&p.tok_emb.data[t * h..(t + 1) * h]);
        }
        let mut a = vec![T::zero(); b * h];
        let mut q = vec![T::zero(); b * h];
        let mut k = vec![T::zero(); b * h];
        let mut v = vec![T::zero(); b * h];
        let mut o = vec![T::zero(); b * h];
        let mut tmp = vec![T::zero(); b * h];
        let mut gate = vec![T::zero(); b * f];
        let mut up = vec![T::zero(); b * f];
        let mut scores = vec![T::zero(); pos + 1];
        for (li, lp) in p.layers.iter().enumerate() {
            for s in 0..b {
                rmsnorm_row(&x[s * h..(s + 1) * h], &lp.attn_norm.data, eps, &mut a[s * h..(s + 1) * h]);
            }
            matmul(&a, &lp.wq.data, &mut q, b, h, h, false, false, T::zero());
            matmul(&a, &lp.wk.data, &mut k, b, h, h, false, false, T::zero());
            matmul(&a, &lp.wv.data, &mut v, b, h, h, false, false, T::zero());
            for s in 0..b {
                for hd in 0..heads {
                    let r = s * h + hd * d..s * h + (hd + 1) * d;
                    self.rope.rotate(&mut q[r.clone()], pos);
                    self.rope.rotate(&mut k[r], pos);
                }
                self.keys[li][s].extend_from_slice(&k[s * h..(s + 1) * h]);
                self.values[li][s].extend_from_slice(&v[s * h..(s + 1) * h]);
                let (kc, vc) = (&self.keys[li][s], &self.values[li][s]);
                for hd in 0..heads {
                    let qs = &q[s * h + hd * d..s * h + (hd + 1) * d];
                    let mut mx = T::neg_infinity();
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kj = &kc[j * h + hd * d..j * h + (hd + 1) * d];
                        *sc = qs.iter().zip(kj).fold(T::zero(), |acc, (x, y)| acc + *x * *y) * scale;
                        mx = mx.max(*sc);
                    }
                    let mut z = T::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - mx).exp();
                        z += *sc;
                    }
                    let out = &mut o[s * h + hd * d..s * h + (hd + 1) * d];
                    out.iter_mut().for_each(|x| *x = T::zero());
                    for (j, sc) in scores.iter().enumerate() {
                        let w = *sc / z;
                        let vj = &vc[j * h + hd * d..j * h + (hd + 1) * d];
                        out.iter_mut().zip(vj).for_each(|(x, y)| *x += w * *y);
                    }
                }
            }
            matmul(&o, &lp.wo.data, &mut tmp, b, h, h, false, false, T::zero());
            x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += *b);
            for s in 0..b {
                rmsnorm_row(&x[s * h..(s + 1) * h], &lp.ffn_norm.data, eps, &mut a[s * h..(s + 1) * h]);
            }
            matmul(&a, &lp.w_gate.data, &mut gate, b, h, f, false, false, T::zero());
            matmul(&a, &lp.w_up.data, &mut up, b, h, f, false, false, T::zero());
            gate.iter_mut().zip(&up).for_each(|(g, u)| *g = silu(*g) * *u);
            matmul(&gate, &lp.w_down.data, &mut tmp, b, f, h, false, false, T::zero());
            x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += *b);
        }
        for s in 0..b {
            rmsnorm_row(&x[s * h..(s + 1) * h], &p.final_norm.data, eps, &mut a[s * h..(s + 1) * h]);
        }
        let mut logits = vec![T::zero(); b * vocab];
        matmul(&a, &p.head.data, &mut logits, b, h, vocab, false, false, T::zero());
        self.len += 1;
        Ok(logits)
    }
}
