//! Exact checks of the state-transition algebra and the conditional entropy
//! identities on small enumerable sources, plus a Monte-Carlo entropy probe
//! for trained models. Entropies are in bits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::float::Float;
use crate::model::{ModelConfig, Params};
use crate::rng::Rng;
use crate::sampling::{generate_batch, GenRequest, Guidance, SamplerConfig};

/// Per-step probabilities of predicting the optimal token. `steps[j - 1]`
/// is `p_j` for steps `1..=t`; `prompt` holds the `k` prompt-step
/// probabilities whose product is `T(c, k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub steps: Vec<f64>,
    pub prompt: Vec<f64>,
}

impl ChainSpec {
    pub fn new(steps: Vec<f64>, prompt: Vec<f64>) -> Result<Self> {
        let ok = |v: &[f64]| v.iter().all(|p| (0.0..=1.0).contains(p));
        ensure!(ok(&steps) && ok(&prompt), "chain probabilities must lie in [0, 1]");
        Ok(Self { steps, prompt })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn p(&self, j: usize) -> f64 {
        self.steps[j - 1]
    }
}

/// `T(i, j) = p_j` when `i = j - 1`, else `p_j · T(i, j - 1)` (1-based).
pub fn transition_prob(chain: &ChainSpec, i: usize, j: usize) -> Result<f64> {
    ensure!(i >= 1 && i < j, "transition needs 1 <= i < j, got i={i}, j={j}");
    ensure!(j <= chain.len(), "step {j} beyond chain length {}", chain.len());
    if i == j - 1 {
        Ok(chain.p(j))
    } else {
        Ok(chain.p(j) * transition_prob(chain, i, j - 1)?)
    }
}

/// Product of the prompt-step probabilities (1 for an empty prompt).
pub fn prompt_factor(chain: &ChainSpec) -> f64 {
    chain.prompt.iter().product()
}

/// `T(1, 2) · T(2, t)`, with `T(2, 2) = 1`.
pub fn path_prob_ar(chain: &ChainSpec) -> Result<f64> {
    let t = chain.len();
    ensure!(t >= 2, "path probability needs t >= 2, got {t}");
    let tail = if t == 2 { 1.0 } else { transition_prob(chain, 2, t)? };
    Ok(transition_prob(chain, 1, 2)? * tail)
}

/// `T(c, k) · T(1, 2) · T(2, t)`.
pub fn path_prob_vf(chain: &ChainSpec) -> Result<f64> {
    Ok(prompt_factor(chain) * path_prob_ar(chain)?)
}

/// Random chain with `t` in `2..=max_len` and up to 8 prompt steps.
pub fn random_chain(rng: &mut Rng, max_len: usize) -> ChainSpec {
    let t = rng.random_range(2..=max_len.max(2));
    let k = rng.random_range(0..=8);
    let draw = |rng: &mut Rng| {
        if rng.random::<f64>() < 0.1 {
            1.0
        } else {
            rng.random_range(0.05..1.0)
        }
    };
    let steps = (0..t).map(|_| draw(rng)).collect();
    let prompt = (0..k).map(|_| draw(rng)).collect();
    ChainSpec { steps, prompt }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpRow {
    pub chain: usize,
    pub len: usize,
    pub prompt_len: usize,
    /// Largest `|recursion - product|` over all `i < j`.
    pub recursion_err: f64,
    /// `|vf / ar - T(c, k)|`.
    pub ratio_err: f64,
    pub pass: bool,
}

/// Checks the recursion against the closed-form product for every `i < j`
/// and the vf/ar ratio on `n` random chains.
pub fn dp_check(n: usize, max_len: usize, rng: &mut Rng, tol: f64) -> Result<Vec<DpRow>> {
    (0..n)
        .map(|c| {
            let chain = random_chain(rng, max_len);
            let t = chain.len();
            let mut rec = 0.0f64;
            for i in 1..t {
                for j in i + 1..=t {
                    let closed: f64 = (i + 1..=j).map(|m| chain.p(m)).product();
                    rec = rec.max((transition_prob(&chain, i, j)? - closed).abs());
                }
            }
            let (ar, vf) = (path_prob_ar(&chain)?, path_prob_vf(&chain)?);
            let ratio_err = if ar > 0.0 {
                (vf / ar - prompt_factor(&chain)).abs()
            } else {
                vf.abs()
            };
            Ok(DpRow {
                chain: c,
                len: t,
                prompt_len: chain.prompt.len(),
                recursion_err: rec,
                ratio_err,
                pass: rec <= tol && ratio_err <= tol,
            })
        })
        .collect()
}

/// Joint tables `P(S, X | c)` for each condition `c`, row-major
/// `[s * |X| + x]`, with a prior over conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSource {
    pub s_size: usize,
    pub x_size: usize,
    pub prior: Vec<f64>,
    pub joint: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    S,
    X,
}

impl DiscreteSource {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.s_size >= 1 && self.x_size >= 1, "empty alphabet");
        ensure!(
            !self.prior.is_empty() && self.prior.len() == self.joint.len(),
            "prior has {} entries for {} tables",
            self.prior.len(),
            self.joint.len()
        );
        let pmf = |v: &[f64], what: &str| -> Result<()> {
            ensure!(v.iter().all(|p| p.is_finite() && *p >= 0.0), "{what} has negative or non-finite entries");
            let s: f64 = v.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-12, "{what} sums to {s}");
            Ok(())
        };
        pmf(&self.prior, "condition prior")?;
        for (c, t) in self.joint.iter().enumerate() {
            ensure!(t.len() == self.s_size * self.x_size, "table {c} has {} entries", t.len());
            pmf(t, &format!("table for condition {c}"))?;
        }
        Ok(())
    }

    fn key(&self, vars: &[Var], s: usize, x: usize) -> usize {
        let mut k = 0;
        for v in vars {
            k = match v {
                Var::S => k * self.s_size + s,
                Var::X => k * self.x_size + x,
            };
        }
        k
    }

    fn card(&self, vars: &[Var]) -> usize {
        vars.iter()
            .map(|v| match v {
                Var::S => self.s_size,
                Var::X => self.x_size,
            })
            .product()
    }
}

fn plogp_ratio(joint: f64, marginal: f64) -> f64 {
    if joint > 0.0 {
        -joint * (joint / marginal).log2()
    } else {
        0.0
    }
}

/// `H(target | given, c)` averaged over the condition prior, by direct
/// enumeration: `-Σ p(t, g | c) log2 p(t | g, c)`.
pub fn conditional_entropy(src: &DiscreteSource, target: &[Var], given: &[Var]) -> Result<f64> {
    src.validate()?;
    ensure!(!target.is_empty(), "empty target");
    ensure!(
        !target.iter().any(|t| given.contains(t)),
        "target and conditioning sets overlap"
    );
    let (nt, ng) = (src.card(target), src.card(given));
    let mut h = 0.0;
    for (c, table) in src.joint.iter().enumerate() {
        let mut tg = vec![0.0; nt * ng];
        let mut g = vec![0.0; ng];
        for s in 0..src.s_size {
            for x in 0..src.x_size {
                let p = table[s * src.x_size + x];
                let gk = src.key(given, s, x);
                tg[src.key(target, s, x) * ng + gk] += p;
                g[gk] += p;
            }
        }
        let hc: f64 = tg
            .iter()
            .enumerate()
            .map(|(i, &p)| plogp_ratio(p, g[i % ng]))
            .sum();
        h += src.prior[c] * hc;
    }
    Ok(h)
}

/// `H(X | S, c) − [H(X, S | c) − H(S | c)]`.
pub fn chain_rule_residual(src: &DiscreteSource) -> Result<f64> {
    let h_x_s = conditional_entropy(src, &[Var::X], &[Var::S])?;
    let h_xs = conditional_entropy(src, &[Var::X, Var::S], &[])?;
    let h_s = conditional_entropy(src, &[Var::S], &[])?;
    Ok(h_x_s - (h_xs - h_s))
}

/// `H(X | S, c) − H(X | c)`, which is `−I(X; S | c)`.
pub fn info_gap(src: &DiscreteSource) -> Result<f64> {
    Ok(conditional_entropy(src, &[Var::X], &[Var::S])? - conditional_entropy(src, &[Var::X], &[])?)
}

/// `I(X; S | c) = Σ p(s, x) log2 [p(s, x) / (p(s) p(x))]`, averaged over
/// conditions.
pub fn mutual_information(src: &DiscreteSource) -> Result<f64> {
    src.validate()?;
    let mut total = 0.0;
    for (c, t) in src.joint.iter().enumerate() {
        let ps: Vec<f64> = (0..src.s_size)
            .map(|s| t[s * src.x_size..(s + 1) * src.x_size].iter().sum())
            .collect();
        let px: Vec<f64> = (0..src.x_size)
            .map(|x| (0..src.s_size).map(|s| t[s * src.x_size + x]).sum())
            .collect();
        let mut i = 0.0;
        for s in 0..src.s_size {
            for x in 0..src.x_size {
                let p = t[s * src.x_size + x];
                if p > 0.0 {
                    i += p * (p / (ps[s] * px[x])).log2();
                }
            }
        }
        total += src.prior[c] * i;
    }
    Ok(total)
}

fn random_pmf(rng: &mut Rng, n: usize, sparse: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            if sparse && rng.random::<f64>() < 0.3 {
                0.0
            } else {
                -rng.random::<f64>().max(1e-300).ln()
            }
        })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        let i = rng.random_range(0..n);
        v[i] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Random source with alphabets of size `1..=max_alpha` and 1 to 3
/// conditions. About a fifth are independent (product) tables and a fifth
/// are deterministic couplings so both equality cases appear.
pub fn random_source(rng: &mut Rng, max_alpha: usize) -> DiscreteSource {
    let s_size = rng.random_range(1..=max_alpha);
    let x_size = rng.random_range(1..=max_alpha);
    let nc = rng.random_range(1..=3);
    let prior = random_pmf(rng, nc, false);
    let kind = rng.random_range(0..5);
    let joint = (0..nc)
        .map(|_| match kind {
            0 => {
                let a = random_pmf(rng, s_size, false);
                let b = random_pmf(rng, x_size, false);
                a.iter().flat_map(|p| b.iter().map(move |q| p * q)).collect()
            }
            1 => {
                let a = random_pmf(rng, s_size, false);
                let mut t = vec![0.0; s_size * x_size];
                for (s, p) in a.iter().enumerate() {
                    t[s * x_size + s % x_size] = *p;
                }
                t
            }
            _ => random_pmf(rng, s_size * x_size, kind == 2),
        })
        .collect();
    DiscreteSource {
        s_size,
        x_size,
        prior,
        joint,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub source: usize,
    pub s_size: usize,
    pub x_size: usize,
    pub residual: f64,
    pub gap: f64,
    pub mutual_info: f64,
    pub pass: bool,
}

/// Residual and gap checks on `n` random sources: `|residual| < tol`,
/// `gap <= tol`, and `gap < 0` whenever `I > 1e-9`.
pub fn entropy_check(n: usize, max_alpha: usize, rng: &mut Rng, tol: f64) -> Result<Vec<EntropyRow>> {
    (0..n)
        .map(|i| {
            let src = random_source(rng, max_alpha);
            let residual = chain_rule_residual(&src)?;
            let gap = info_gap(&src)?;
            let mi = mutual_information(&src)?;
            let pass = residual.abs() < tol && gap <= tol && (mi <= 1e-9 || gap < 0.0);
            Ok(EntropyRow {
                source: i,
                s_size: src.s_size,
                x_size: src.x_size,
                residual,
                gap,
                mutual_info: mi,
                pass,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// Mean per-step entropy of the next-token distribution, in bits.
    pub mean_bits: f64,
    /// Half-width of a normal 95% interval over per-sample means.
    pub ci95: f64,
    pub samples: usize,
}

fn estimate(per_sample: &[f64]) -> EntropyEstimate {
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let var = if per_sample.len() > 1 {
        per_sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    EntropyEstimate {
        mean_bits: mean,
        ci95: 1.96 * (var / n).sqrt(),
        samples: per_sample.len(),
    }
}

/// Mean per-step entropy over image positions for a prompted model and a
/// baseline, sampling `n` images from each with plain (unguided,
/// unfiltered) sampling. `prompt_for(class, i)` supplies the prompt of the
/// `i`-th prompted generation; classes cycle through `0..classes`.
pub fn empirical_entropy_probe<T: Float>(
    vf: (&Params<T>, &ModelConfig),
    base: (&Params<T>, &ModelConfig),
    mut prompt_for: impl FnMut(usize, usize) -> Result<Vec<u32>>,
    n: usize,
    seed: u64,
) -> Result<(EntropyEstimate, EntropyEstimate)> {
    let (a, b) = (vf.1, base.1);
    if a.image_codes != b.image_codes || a.classes != b.classes || (a.grid_h, a.grid_w) != (b.grid_h, b.grid_w) {
        return Err(Error::Validation(
            "entropy probe needs models over the same codes, classes and grid".into(),
        ));
    }
    ensure!(n >= 1, "entropy probe needs at least one sample");
    let sampler = SamplerConfig {
        cfg_scale: 1.0,
        seed,
        ..Default::default()
    };
    let mut run = |params: &Params<T>, cfg: &ModelConfig, prompted: bool| -> Result<EntropyEstimate> {
        let reqs = (0..n)
            .map(|i| {
                let class = i % cfg.classes;
                Ok(GenRequest {
                    class,
                    prompt: if prompted { prompt_for(class, i)? } else { Vec::new() },
                    seed: crate::rng::mix(seed ^ i as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = generate_batch(params, cfg, &reqs, &sampler, Guidance::Auto)?;
        let per: Vec<f64> = out
            .iter()
            .map(|g| g.step_entropy.iter().sum::<f64>() / g.step_entropy.len() as f64)
            .collect();
        Ok(estimate(&per))
    };
    let hv = run(vf.0, a, a.prompt_len > 0)?;
    let hb = run(base.0, b, b.prompt_len > 0)?;
    Ok((hv, hb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn transition_examples() {
        let ones = ChainSpec::new(vec![1.0; 6], vec![]).unwrap();
        assert_eq!(transition_prob(&ones, 1, 6).unwrap(), 1.0);
        let c = ChainSpec::new(vec![0.9, 0.5, 0.5], vec![]).unwrap();
        assert_eq!(transition_prob(&c, 1, 3).unwrap(), 0.25);
        assert!(transition_prob(&c, 2, 2).is_err());
        assert!(ChainSpec::new(vec![1.5], vec![]).is_err());
    }

    #[test]
    fn vf_reduces_to_ar() {
        let c = ChainSpec::new(vec![0.3, 0.7, 0.2, 0.9], vec![]).unwrap();
        assert_eq!(path_prob_vf(&c).unwrap(), path_prob_ar(&c).unwrap());
        let c1 = ChainSpec::new(c.steps.clone(), vec![1.0, 1.0]).unwrap();
        assert_eq!(path_prob_vf(&c1).unwrap(), path_prob_ar(&c1).unwrap());
        let short = ChainSpec::new(vec![0.5], vec![]).unwrap();
        assert!(path_prob_ar(&short).is_err());
    }

    fn src(t: Vec<f64>, s: usize, x: usize) -> DiscreteSource {
        DiscreteSource {
            s_size: s,
            x_size: x,
            prior: vec![1.0],
            joint: vec![t],
        }
    }

    #[test]
    fn entropy_examples() {
        let indep = src(vec![0.25; 4], 2, 2);
        let h = conditional_entropy(&indep, &[Var::X], &[Var::S]).unwrap();
        assert!((h - 1.0).abs() < 1e-15);
        assert!(info_gap(&indep).unwrap().abs() < 1e-15);
        let det = src(vec![0.3, 0.0, 0.0, 0.7], 2, 2);
        assert_eq!(conditional_entropy(&det, &[Var::X], &[Var::S]).unwrap(), 0.0);
        let hx = conditional_entropy(&det, &[Var::X], &[]).unwrap();
        assert!((info_gap(&det).unwrap() + hx).abs() < 1e-15);
        assert!(chain_rule_residual(&det).unwrap().abs() < 1e-15);
        assert!(src(vec![0.5, 0.6], 1, 2).validate().is_err());
    }

    #[test]
    fn random_checks_pass() {
        let mut r = seeded(3);
        assert!(dp_check(200, 12, &mut r, 1e-12).unwrap().iter().all(|x| x.pass));
        assert!(entropy_check(200, 6, &mut r, 1e-12).unwrap().iter().all(|x| x.pass));
    }
}
