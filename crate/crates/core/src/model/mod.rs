//! Decoder-only transformer over `[condition | prompt | image]` sequences.
//!
//! Pre-norm residual blocks with RMSNorm, causal multi-head attention with
//! 2D rotary embeddings, and a SwiGLU feed-forward. All numerics are generic
//! over [`Float`](crate::float::Float); gradients are hand-derived in
//! [`transformer::backward`].

pub mod decoder;
pub mod ops;
pub mod transformer;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::float::Float;
use crate::prompts::LayoutMode;
use crate::rng::{self, Stream};

pub use decoder::Decoder;
pub use transformer::{backward, forward, forward_with_cache, DropoutMode, ForwardCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Image codebook size `K`: ids `[0, K)`.
    pub image_codes: usize,
    /// Class tokens occupy `[K, K + classes)`; `K + classes` is the null class.
    pub classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub prompt_len: usize,
    pub layout: LayoutMode,
    pub dropout: f64,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    fn base(layers: usize, hidden: usize, heads: usize, image_codes: usize, classes: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            image_codes,
            classes,
            grid_h: 8,
            grid_w: 8,
            prompt_len: 64,
            layout: LayoutMode::PromptFirst,
            dropout: 0.1,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    /// L=4, H=128, n=4.
    pub fn tiny(image_codes: usize, classes: usize) -> Self {
        Self::base(4, 128, 4, image_codes, classes)
    }

    /// L=8, H=256, n=8.
    pub fn small(image_codes: usize, classes: usize) -> Self {
        Self::base(8, 256, 8, image_codes, classes)
    }

    /// The 111M-parameter B configuration on a 16x16 grid.
    pub fn paper_b(image_codes: usize, classes: usize) -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            prompt_len: 256,
            ..Self::base(12, 768, 12, image_codes, classes)
        }
    }

    pub fn preset(name: &str, image_codes: usize, classes: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(image_codes, classes)),
            "small" => Ok(Self::small(image_codes, classes)),
            "b" | "paper_b" => Ok(Self::paper_b(image_codes, classes)),
            _ => Err(Error::Config(format!("unknown model preset {name:?}"))),
        }
    }

    pub fn vocab(&self) -> usize {
        self.image_codes + self.classes + 1
    }

    pub fn class_token(&self, class: usize) -> u32 {
        (self.image_codes + class) as u32
    }

    pub fn null_token(&self) -> u32 {
        (self.image_codes + self.classes) as u32
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// `8H/3` rounded up to a multiple of 32.
    pub fn ffn_dim(&self) -> usize {
        let raw = (8 * self.hidden).div_ceil(3);
        raw.div_ceil(32) * 32
    }

    pub fn image_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn seq_len(&self) -> usize {
        1 + self.prompt_len + self.image_len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.head_dim() % 4 != 0 {
            return bad(format!(
                "head_dim {} must be divisible by 4 for 2D rotary embeddings",
                self.head_dim()
            ));
        }
        if self.image_codes < 2 || self.classes < 1 {
            return bad("need at least 2 image codes and 1 class".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.prompt_len > self.image_len() {
            return bad(format!(
                "prompt length {} exceeds grid size {}",
                self.prompt_len,
                self.image_len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.rope_base <= 1.0 || self.norm_eps <= 0.0 {
            return bad("rope_base must exceed 1 and norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Canonical `key=value` lines, keys sorted.
    pub fn to_canonical_text(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("classes", self.classes.to_string());
        m.insert("dropout", format!("{:?}", self.dropout));
        m.insert("grid_h", self.grid_h.to_string());
        m.insert("grid_w", self.grid_w.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("hidden", self.hidden.to_string());
        m.insert("image_codes", self.image_codes.to_string());
        m.insert("layers", self.layers.to_string());
        m.insert("layout", self.layout.as_str().to_string());
        m.insert("norm_eps", format!("{:?}", self.norm_eps));
        m.insert("prompt_len", self.prompt_len.to_string());
        m.insert("rope_base", format!("{:?}", self.rope_base));
        m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line {line:?}")))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            m.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing config key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad integer for {k}")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad number for {k}")))
        };
        let cfg = Self {
            layers: num("layers")?,
            hidden: num("hidden")?,
            heads: num("heads")?,
            image_codes: num("image_codes")?,
            classes: num("classes")?,
            grid_h: num("grid_h")?,
            grid_w: num("grid_w")?,
            prompt_len: num("prompt_len")?,
            layout: get("layout")?.parse()?,
            dropout: real("dropout")?,
            rope_base: real("rope_base")?,
            norm_eps: real("norm_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// FNV-1a 64 of the canonical text.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_canonical_text().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Exact parameter count for a configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (v, h, f) = (cfg.vocab(), cfg.hidden, cfg.ffn_dim());
    let per_layer = 4 * h * h + 3 * h * f + 2 * h;
    v * h + cfg.layers * per_layer + h + h * v
}

/// 2D grid coordinate for every sequence index.
///
/// The condition token sits at `(0, 0)`, prompt token `i` at
/// `(i / w + 1, i % w)` and image token `j` at `(j / w + 1 + h, j % w)`,
/// independent of where the span sits in the sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionMap(pub Vec<(usize, usize)>);

impl PositionMap {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (h, w) = (cfg.grid_h, cfg.grid_w);
        let prompt = (0..cfg.prompt_len).map(|i| (i / w + 1, i % w));
        let image = (0..cfg.image_len()).map(|j| (j / w + 1 + h, j % w));
        let mut pos = vec![(0, 0)];
        match cfg.layout {
            LayoutMode::PromptFirst => {
                pos.extend(prompt);
                pos.extend(image);
            }
            LayoutMode::FullViewAfterGeneration => {
                pos.extend(image);
                pos.extend(prompt);
            }
        }
        PositionMap(pos)
    }

    pub fn as_slice(&self) -> &[(usize, usize)] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.name.clone(), self.shape.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// Weights are stored `in x out`, so a projection is `x * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

impl<T: Float> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (v, h, f) = (cfg.vocab(), cfg.hidden, cfg.ffn_dim());
        let layers = (0..cfg.layers)
            .map(|i| {
                let n = |s: &str| format!("layers.{i}.{s}");
                LayerParams {
                    attn_norm: Tensor::zeros(n("attn_norm"), vec![h]),
                    wq: Tensor::zeros(n("wq"), vec![h, h]),
                    wk: Tensor::zeros(n("wk"), vec![h, h]),
                    wv: Tensor::zeros(n("wv"), vec![h, h]),
                    wo: Tensor::zeros(n("wo"), vec![h, h]),
                    ffn_norm: Tensor::zeros(n("ffn_norm"), vec![h]),
                    w_gate: Tensor::zeros(n("w_gate"), vec![h, f]),
                    w_up: Tensor::zeros(n("w_up"), vec![h, f]),
                    w_down: Tensor::zeros(n("w_down"), vec![f, h]),
                }
            })
            .collect();
        Self {
            tok_emb: Tensor::zeros("tok_emb", vec![v, h]),
            layers,
            final_norm: Tensor::zeros("final_norm", vec![h]),
            head: Tensor::zeros("head", vec![h, v]),
        }
    }

    /// Truncated normal (std 0.02, cut at two std) for matrices, ones for
    /// norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        let mut rng = rng::stream(seed, Stream::Init);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        for t in p.tensors_mut() {
            if is_norm(&t.name) {
                t.data.iter_mut().for_each(|x| *x = T::one());
            } else {
                for x in t.data.iter_mut() {
                    let v = loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 0.04 {
                            break v;
                        }
                    };
                    *x = T::lit(v);
                }
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut()
            .into_iter()
            .for_each(|t| t.data.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    /// Canonical tensor order (also the checkpoint order).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.tok_emb];
        for l in &self.layers {
            out.extend([
                &l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> Params<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        Params {
            tok_emb: c(&self.tok_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    ffn_norm: c(&l.ffn_norm),
                    w_gate: c(&l.w_gate),
                    w_up: c(&l.w_up),
                    w_down: c(&l.w_down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            head: c(&self.head),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        let got = self.tensors();
        ensure!(
            got.len() == want.tensors().len(),
            "parameter tensor count {} != {}",
            got.len(),
            want.tensors().len()
        );
        for (a, b) in got.iter().zip(want.tensors()) {
            ensure!(
                a.name == b.name && a.shape == b.shape,
                "tensor {} {:?} does not match expected {} {:?}",
                a.name,
                a.shape,
                b.name,
                b.shape
            );
        }
        Ok(())
    }
}

pub(crate) fn is_norm(name: &str) -> bool {
    name.ends_with("norm")
}
