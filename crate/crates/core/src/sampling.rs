//! Autoregressive generation with prompt prefixes, classifier-free guidance
//! and top-k / top-p / temperature selection.
//!
//! Guided generation advances a conditional and an unconditional stream per
//! image. Both streams see the same prompt prefix and differ only in the
//! condition token. At image positions only the first `K` logits (image
//! codes) take part in sampling; class and null ids are masked out.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::float::Float;
use crate::model::{Decoder, ModelConfig, Params};
use crate::par;
use crate::prompts::LayoutMode;
use crate::rng::{self, Rng, Stream};
use crate::tokenizer::{raster_unflatten, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Keep the `top_k` most likely codes; `0` disables the filter.
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub cfg_scale: f64,
    /// Argmax decoding (the zero-temperature limit).
    pub greedy: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_k: 0,
            top_p: 1.0,
            temperature: 1.0,
            cfg_scale: 1.75,
            greedy: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        Ok(())
    }
}

/// `l_u + s (l_c - l_u)`, returning `l_c` at `s = 1` and `l_u` at `s = 0`
/// bit-for-bit.
pub fn cfg_combine<T: Float>(cond: &[T], uncond: &[T], scale: f64) -> Vec<T> {
    assert_eq!(cond.len(), uncond.len(), "cfg_combine shape mismatch");
    if scale == 1.0 {
        return cond.to_vec();
    }
    if scale == 0.0 {
        return uncond.to_vec();
    }
    let s = T::lit(scale);
    cond.iter()
        .zip(uncond)
        .map(|(&c, &u)| if c == u { c } else { u + s * (c - u) })
        .collect()
}

/// Sampling distribution after temperature, top-k and top-p, as a full
/// probability vector (zeros outside the support). `-inf` logits are
/// treated as excluded.
pub fn filtered_distribution(logits: &[f64], cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    ensure!(!logits.is_empty(), "empty logits");
    if let Some(bad) = logits.iter().find(|l| l.is_nan() || **l == f64::INFINITY) {
        return Err(Error::NonFinite {
            what: "sampling logits".into(),
            detail: format!("{bad}"),
        });
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ensure!(max.is_finite(), "every logit is masked");
    let mut p: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);

    // Descending probability, ties broken by the lower index.
    let mut order: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut keep = order.len();
    if cfg.top_k > 0 {
        keep = keep.min(cfg.top_k);
    }
    if cfg.top_p < 1.0 {
        let mass: f64 = order[..keep].iter().map(|&i| p[i]).sum();
        let mut cum = 0.0;
        for (n, &i) in order[..keep].iter().enumerate() {
            cum += p[i] / mass;
            if cum >= cfg.top_p {
                keep = n + 1;
                break;
            }
        }
    }
    let mut out = vec![0.0; p.len()];
    let z: f64 = order[..keep].iter().map(|&i| p[i]).sum();
    for &i in &order[..keep] {
        out[i] = p[i] / z;
    }
    Ok(out)
}

/// Draws an index from a probability vector by inverse CDF in index order.
pub fn sample_from(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.random::<f64>();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

pub fn filter_and_sample(logits: &[f64], cfg: &SamplerConfig, rng: &mut Rng) -> Result<usize> {
    if cfg.greedy {
        cfg.validate()?;
        return Ok(argmax(logits));
    }
    Ok(sample_from(&filtered_distribution(logits, cfg)?, rng))
}

/// One image to generate: condition, prompt prefix and RNG seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenRequest {
    pub class: usize,
    pub prompt: Vec<u32>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub grid: TokenGrid,
    /// Entropy in bits of each step's sampling distribution.
    pub step_entropy: Vec<f64>,
    /// Sequence positions occupied: condition, prompt and image tokens.
    pub positions: usize,
}

/// How guidance streams are arranged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guidance {
    /// Two streams unless `cfg_scale == 1`.
    Auto,
    /// Always run the unconditional stream, even when it cannot matter.
    TwoStream,
}

fn entropy_bits(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum()
}

/// Generates one image, consuming the prompt prefix of the trained layout.
pub fn generate<T: Float>(
    params: &Params<T>,
    cfg: &ModelConfig,
    class_id: usize,
    prompt: &[u32],
    sampler: &SamplerConfig,
) -> Result<TokenGrid> {
    ensure!(
        cfg.layout == LayoutMode::PromptFirst,
        "generate needs a prompt-first model; use generate_after_view"
    );
    let req = GenRequest {
        class: class_id,
        prompt: prompt.to_vec(),
        seed: sampler.seed,
    };
    Ok(generate_batch(params, cfg, &[req], sampler, Guidance::Auto)?.remove(0).grid)
}

/// Generation for a model trained with the prompt after the image: the
/// image tokens directly follow the condition token.
pub fn generate_after_view<T: Float>(
    params: &Params<T>,
    cfg: &ModelConfig,
    class_id: usize,
    sampler: &SamplerConfig,
) -> Result<TokenGrid> {
    ensure!(
        cfg.layout == LayoutMode::FullViewAfterGeneration,
        "checkpoint layout is {}, expected full_view_after_generation",
        cfg.layout.as_str()
    );
    let req = GenRequest {
        class: class_id,
        prompt: Vec::new(),
        seed: sampler.seed,
    };
    Ok(generate_batch(params, cfg, &[req], sampler, Guidance::Auto)?.remove(0).grid)
}

/// Generates every request; results match running each request alone.
/// Requests are split into chunks that run in parallel, each chunk
/// advancing its streams in lockstep over one KV cache.
pub fn generate_batch<T: Float>(
    params: &Params<T>,
    cfg: &ModelConfig,
    reqs: &[GenRequest],
    sampler: &SamplerConfig,
    guidance: Guidance,
) -> Result<Vec<Generated>> {
    sampler.validate()?;
    let expect = match cfg.layout {
        LayoutMode::PromptFirst => cfg.prompt_len,
        LayoutMode::FullViewAfterGeneration => 0,
    };
    for r in reqs {
        ensure!(
            r.prompt.len() == expect,
            "prompt has {} tokens, the model layout expects {expect}",
            r.prompt.len()
        );
        ensure!(r.class < cfg.classes, "class {} out of range ({} classes)", r.class, cfg.classes);
        if let Some(bad) = r.prompt.iter().find(|&&t| t as usize >= cfg.image_codes) {
            return Err(Error::Validation(format!("prompt token {bad} is not an image code")));
        }
    }
    let chunk = 8;
    let chunks: Vec<&[GenRequest]> = reqs.chunks(chunk).collect();
    let out = par::map_slice(&chunks, |c| generate_chunk(params, cfg, c, sampler, guidance));
    let mut all = Vec::with_capacity(reqs.len());
    for r in out {
        all.extend(r?);
    }
    Ok(all)
}

fn generate_chunk<T: Float>(
    params: &Params<T>,
    cfg: &ModelConfig,
    reqs: &[GenRequest],
    sampler: &SamplerConfig,
    guidance: Guidance,
) -> Result<Vec<Generated>> {
    let b = reqs.len();
    let two = guidance == Guidance::TwoStream || sampler.cfg_scale != 1.0;
    let streams = if two { 2 * b } else { b };
    let mut dec = Decoder::new(params, cfg, streams)?;
    let k = cfg.image_codes;
    let vocab = cfg.vocab();
    let t = cfg.image_len();
    let mut rngs: Vec<Rng> = reqs.iter().map(|r| rng::stream(r.seed, Stream::Sample)).collect();

    let mut tokens: Vec<u32> = reqs.iter().map(|r| cfg.class_token(r.class)).collect();
    if two {
        tokens.extend(std::iter::repeat_n(cfg.null_token(), b));
    }
    let mut logits = dec.step(&tokens)?;
    let plen = reqs[0].prompt.len();
    for i in 0..plen {
        let mut tok: Vec<u32> = reqs.iter().map(|r| r.prompt[i]).collect();
        if two {
            tok.extend_from_within(..);
        }
        logits = dec.step(&tok)?;
    }

    let mut ids = vec![Vec::with_capacity(t); b];
    let mut ent = vec![Vec::with_capacity(t); b];
    for step in 0..t {
        let mut next = Vec::with_capacity(b);
        for s in 0..b {
            let lc: Vec<f64> = logits[s * vocab..s * vocab + k].iter().map(|x| x.as_f64()).collect();
            let l = if two {
                let lu: Vec<f64> = logits[(b + s) * vocab..(b + s) * vocab + k]
                    .iter()
                    .map(|x| x.as_f64())
                    .collect();
                cfg_combine(&lc, &lu, sampler.cfg_scale)
            } else {
                lc
            };
            let id = if sampler.greedy {
                ent[s].push(0.0);
                argmax(&l)
            } else {
                let p = filtered_distribution(&l, sampler)?;
                ent[s].push(entropy_bits(&p));
                sample_from(&p, &mut rngs[s])
            };
            ids[s].push(id as u32);
            next.push(id as u32);
        }
        if step + 1 < t {
            if two {
                next.extend_from_within(..);
            }
            logits = dec.step(&next)?;
        }
    }
    let positions = dec.len() + 1;
    ids.into_iter()
        .zip(ent)
        .map(|(ids, step_entropy)| {
            Ok(Generated {
                grid: raster_unflatten(&ids, cfg.grid_h, cfg.grid_w)?,
                step_entropy,
                positions,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_arithmetic() {
        assert_eq!(cfg_combine(&[1.0f64], &[0.0], 1.75), vec![1.75]);
        let c = [0.3f64, -1.2, 7.0];
        let u = [0.1f64, 2.0, -3.0];
        assert_eq!(cfg_combine(&c, &u, 1.0), c.to_vec());
        assert_eq!(cfg_combine(&c, &u, 0.0), u.to_vec());
        assert_eq!(cfg_combine(&c, &c, 3.3), c.to_vec());
    }

    #[test]
    fn top_k_one_is_argmax() {
        let cfg = SamplerConfig {
            top_k: 1,
            ..Default::default()
        };
        let mut r = rng::seeded(0);
        let l = [0.1, 3.0, 2.9, -1.0];
        assert!((0..200).all(|_| filter_and_sample(&l, &cfg, &mut r).unwrap() == 1));
    }

    #[test]
    fn bad_temperature_is_config_error() {
        let cfg = SamplerConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(matches!(filtered_distribution(&[0.0, 1.0], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn masked_logits_never_sampled() {
        let cfg = SamplerConfig::default();
        let l = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 1.0];
        let p = filtered_distribution(&l, &cfg).unwrap();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[2], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
