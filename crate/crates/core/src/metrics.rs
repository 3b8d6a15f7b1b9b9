//! Desk-scale quality metrics: a fixed hand-crafted image embedding,
//! Fréchet distance between Gaussian fits, k-NN precision/recall and
//! image-token perplexity.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::float::Float;
use crate::image::Image;
use crate::model::{forward, DropoutMode, ModelConfig, Params, PositionMap};
use crate::par;
use crate::prompts::{assemble_sequence, LossPolicy};
use crate::rng::{self, Stream};
use crate::tokenizer::raster_flatten;
use crate::training::{PromptSource, TokenDataset};

/// Bumped whenever [`embed_features`] changes.
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 120;
const BLOCKS: usize = 4;
const BINS: usize = 8;

/// 120 features. For each block of a 4x4 grid (row-major) and each RGB
/// channel: the block mean and population variance (96 values). Then per
/// channel an 8-bin histogram over `[0, 1]`, normalized to sum to 1, with
/// bin `min(floor(8v), 7)` (24 values). Block `(i, j)` spans rows
/// `[iH/4, (i+1)H/4)` and columns `[jW/4, (j+1)W/4)`.
pub fn embed_features(image: &Image) -> Result<Vec<f64>> {
    let (h, w) = (image.height(), image.width());
    ensure!(h >= BLOCKS && w >= BLOCKS, "image {h}x{w} is smaller than the 4x4 block grid");
    let mut f = Vec::with_capacity(FEATURE_DIM);
    for bi in 0..BLOCKS {
        for bj in 0..BLOCKS {
            let (r0, r1) = (bi * h / BLOCKS, (bi + 1) * h / BLOCKS);
            let (c0, c1) = (bj * w / BLOCKS, (bj + 1) * w / BLOCKS);
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            for ch in 0..3 {
                let vals = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c)));
                let mean = vals.clone().map(|(r, c)| image.pixel(r, c)[ch] as f64).sum::<f64>() / n;
                let var = vals
                    .map(|(r, c)| (image.pixel(r, c)[ch] as f64 - mean).powi(2))
                    .sum::<f64>()
                    / n;
                f.push(mean);
                f.push(var);
            }
        }
    }
    let mut hist = [[0.0f64; BINS]; 3];
    for px in image.data().chunks_exact(3) {
        for ch in 0..3 {
            let b = ((px[ch] as f64 * BINS as f64) as usize).min(BINS - 1);
            hist[ch][b] += 1.0;
        }
    }
    let n = (h * w) as f64;
    for ch in hist {
        f.extend(ch.iter().map(|c| c / n));
    }
    Ok(f)
}

pub fn embed_all(images: &[Image]) -> Result<Vec<Vec<f64>>> {
    par::map_slice(images, embed_features).into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `D x D`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance plus `λI`, `λ = 1e-6 · trace / D`
/// (floored at `1e-12` so degenerate sets stay positive definite).
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let n = features.len();
    ensure!(n >= 2, "need at least 2 feature rows, got {n}");
    let d = features[0].len();
    ensure!(d >= 1, "empty feature vectors");
    ensure!(features.iter().all(|f| f.len() == d), "ragged feature rows");
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for f in features {
        let c: Vec<f64> = f.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let lambda = (1e-6 * trace / d as f64).max(1e-12);
    for i in 0..d {
        cov[i * d + i] += lambda;
    }
    Ok(FeatureStats { mean, cov, count: n })
}

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let d = m.nrows();
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("{what}: matrix has non-finite entries")));
    }
    SymmetricEigen::try_new(m.clone(), 1e-15, 100_000).ok_or_else(|| {
        let norm = m.norm();
        Error::Numerical(format!(
            "{what}: symmetric eigendecomposition of a {d}x{d} matrix (Frobenius norm {norm:.3e}) did not converge"
        ))
    })
}

/// Symmetric PSD square root via eigendecomposition, eigenvalues clamped
/// at zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let e = eigen(sym, "matrix square root")?;
    let s = e.eigenvalues.map(|x| x.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose())
}

/// `|μa − μb|² + tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    ensure!(b.dim() == d, "feature dimensions differ: {d} vs {}", b.dim());
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let ra = sqrtm_psd(&sa)?;
    let m = &ra * &sb * &ra;
    let e = eigen((&m + m.transpose()) * 0.5, "Fréchet cross term")?;
    let cross: f64 = e.eigenvalues.iter().map(|x| x.max(0.0).sqrt()).sum();
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let v = dm + sa.trace() + sb.trace() - 2.0 * cross;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("Fréchet distance is {v}")));
    }
    Ok(v.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance from each point to its k-th nearest other point.
fn knn_radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    par::map_indexed(points.len(), |i| {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, p)| sq_dist(&points[i], p))
            .collect();
        d.sort_by(f64::total_cmp);
        d[k - 1]
    })
}

fn coverage(manifold: &[Vec<f64>], radii: &[f64], queries: &[Vec<f64>]) -> f64 {
    let inside = par::map_slice(queries, |q| {
        manifold.iter().zip(radii).any(|(m, &r)| sq_dist(q, m) <= r)
    });
    inside.iter().filter(|&&b| b).count() as f64 / queries.len() as f64
}

/// Manifold precision (generated points inside real k-NN balls) and recall
/// (real points inside generated k-NN balls).
pub fn knn_precision_recall(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    ensure!(k >= 1, "k must be >= 1");
    ensure!(
        real.len() > k && gen.len() > k,
        "k-NN precision/recall needs more than k={k} points per set (real {}, generated {})",
        real.len(),
        gen.len()
    );
    let rr = knn_radii(real, k);
    let rg = knn_radii(gen, k);
    Ok((coverage(real, &rr, gen), coverage(gen, &rg, real)))
}

/// Masked cross-entropy with the softmax restricted to the first `k`
/// logits of each row (the image codes). Returns `(sum, count)`.
pub fn image_code_ce<T: Float>(logits: &[T], targets: &[u32], mask: &[bool], vocab: usize, k: usize) -> Result<(f64, usize)> {
    ensure!(logits.len() == targets.len() * vocab && mask.len() == targets.len(), "shape mismatch");
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (&t, &on)) in targets.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        ensure!((t as usize) < k, "target {t} at position {i} is not an image code");
        let row: Vec<f64> = logits[i * vocab..i * vocab + k].iter().map(|x| x.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        sum += lse - row[t as usize];
        n += 1;
    }
    Ok((sum, n))
}

/// `exp` of the mean image-position cross-entropy over `data`, with prompts
/// drawn from `prompts` (seeded per item) and no condition dropout.
pub fn perplexity<T: Float>(
    params: &Params<T>,
    cfg: &ModelConfig,
    data: &TokenDataset,
    prompts: &PromptSource,
    seed: u64,
) -> Result<f64> {
    ensure!(!data.is_empty(), "perplexity over an empty split");
    let positions = PositionMap::new(cfg);
    let per = par::map_indexed(data.len(), |i| -> Result<(f64, usize)> {
        let class = data.labels[i] as usize;
        let mut r = rng::substream(seed, Stream::Prompt, u64::MAX, i as u64);
        let prompt = prompts.prompt(class, None, &mut r)?;
        let seq = assemble_sequence(
            cfg.class_token(class),
            &prompt,
            &raster_flatten(&data.grids[i]),
            cfg.layout,
            LossPolicy::ImageOnly,
        )?;
        let logits = forward(params, cfg, &seq.input, positions.as_slice(), DropoutMode::Eval)?;
        image_code_ce(&logits, &seq.target, &seq.layout.image_target_mask().0, cfg.vocab(), cfg.image_codes)
    });
    let (mut sum, mut n) = (0.0, 0usize);
    for r in per {
        let (s, c) = r?;
        sum += s;
        n += c;
    }
    Ok((sum / n as f64).exp())
}
