//! k-means patch tokenizer: images <-> grids of codebook indices.
//!
//! An image is cut into non-overlapping `p x p` patches, each flattened to a
//! `d = p*p*3` vector (row-major pixels, RGB interleaved). A [`Codebook`] of
//! `K` such vectors is fitted with k-means++ seeding followed by Lloyd
//! iterations; encoding picks the nearest vector (lowest index on ties).

use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::{ensure, Error, Result};
use crate::image::{write_atomic, Image};
use crate::par;
use crate::rng::{self, Stream};

const CODEBOOK_MAGIC: &[u8; 4] = b"VFCB";
const CODEBOOK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    patch_size: usize,
    vectors: Vec<f32>,
}

/// `h x w` grid of codebook indices in raster order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, ids: Vec<u32>) -> Result<Self> {
        ensure!(
            ids.len() == h * w,
            "token grid {h}x{w} needs {} ids, got {}",
            h * w,
            ids.len()
        );
        Ok(Self { h, w, ids })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.w + col]
    }
}

/// Row-major flattening of a grid.
pub fn raster_flatten(grid: &TokenGrid) -> Vec<u32> {
    grid.ids.clone()
}

pub fn raster_unflatten(ids: &[u32], h: usize, w: usize) -> Result<TokenGrid> {
    TokenGrid::new(h, w, ids.to_vec())
}

impl Codebook {
    pub fn from_vectors(patch_size: usize, vectors: Vec<f32>) -> Result<Self> {
        ensure!(patch_size > 0, "patch size must be positive");
        let dim = patch_size * patch_size * 3;
        ensure!(
            !vectors.is_empty() && vectors.len() % dim == 0,
            "codebook data length {} is not a multiple of d={dim}",
            vectors.len()
        );
        let size = vectors.len() / dim;
        ensure!(size >= 2, "codebook needs K >= 2, got {size}");
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "codebook".into(),
                detail: "vector entries must be finite".into(),
            });
        }
        Ok(Self {
            size,
            patch_size,
            vectors,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors[id * d..(id + 1) * d]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Index of the closest vector; ties go to the lowest index.
    pub fn nearest(&self, patch: &[f32]) -> usize {
        nearest(&self.vectors, self.dim(), patch).0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.vectors.len() * 4);
        buf.extend_from_slice(CODEBOOK_MAGIC);
        for v in [CODEBOOK_VERSION, self.size as u32, self.dim() as u32, self.patch_size as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 4 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "VFCB".into(),
            });
        }
        if bytes.len() < 20 {
            return Err(Error::Truncated("codebook header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (version, k, d, p) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
        if version != CODEBOOK_VERSION {
            return Err(Error::BadVersion {
                found: version,
                expected: CODEBOOK_VERSION,
            });
        }
        ensure!(d == p * p * 3, "codebook header d={d} inconsistent with p={p}");
        let body = &bytes[20..];
        if body.len() != k * d * 4 {
            return Err(Error::Truncated(format!(
                "codebook body has {} bytes, expected {}",
                body.len(),
                k * d * 4
            )));
        }
        let vectors = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_vectors(p, vectors)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

fn nearest(centroids: &[f32], dim: usize, p: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Output of [`fit_codebook_traced`]: the codebook plus the k-means
/// objective (sum of squared distances) after each assignment step.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub objective: Vec<f64>,
}

pub fn fit_codebook(
    patches: &[f32],
    patch_size: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebook> {
    fit_codebook_traced(patches, patch_size, k, iters, seed).map(|f| f.codebook)
}

/// k-means++ seeding plus `iters` Lloyd rounds.
///
/// Empty clusters are re-seeded to the point farthest from its assigned
/// centroid. If a re-seeded (or final) vector coincides with another one,
/// which only happens when the data has fewer than `k` distinct patches, it
/// is nudged by a small deterministic offset so the codebook stays distinct.
pub fn fit_codebook_traced(
    patches: &[f32],
    patch_size: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeansFit> {
    ensure!(patch_size > 0, "patch size must be positive");
    ensure!(k >= 2, "codebook needs K >= 2, got {k}");
    ensure!(iters >= 1, "k-means needs at least one iteration");
    let dim = patch_size * patch_size * 3;
    ensure!(
        patches.len() % dim == 0,
        "patch buffer length {} is not a multiple of d={dim}",
        patches.len()
    );
    if let Some(i) = patches.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite patch value at patch {}",
            i / dim
        )));
    }
    let n = patches.len() / dim;
    if n < k {
        return Err(Error::InsufficientData { needed: k, got: n });
    }
    let point = |i: usize| &patches[i * dim..(i + 1) * dim];
    let mut rng = rng::stream(seed, Stream::KMeans);

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f64> = par::map_indexed(n, |i| sq_dist(point(i), point(first)));
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(point(pick));
        let c = centroids.len() / dim - 1;
        let cv = centroids[c * dim..].to_vec();
        let fresh: Vec<f64> = par::map_indexed(n, |i| sq_dist(point(i), &cv));
        for (a, b) in d2.iter_mut().zip(fresh) {
            *a = a.min(b);
        }
    }

    let mut objective = Vec::with_capacity(iters);
    for _ in 0..iters {
        let assign: Vec<(usize, f64)> = par::map_indexed(n, |i| nearest(&centroids, dim, point(i)));
        objective.push(assign.iter().map(|a| a.1).sum());

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, (c, _)) in assign.iter().enumerate() {
            counts[*c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += *v as f64;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = (*s / counts[c] as f64) as f32;
                }
            } else {
                let far = assign
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .fold((0usize, -1.0f64), |best, (i, a)| if a.1 > best.1 { (i, a.1) } else { best });
                taken[far.0] = true;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(far.0));
            }
        }
        make_distinct(&mut centroids, dim);
    }
    // Report the objective for the final centroids too.
    let last: f64 = par::map_indexed(n, |i| nearest(&centroids, dim, point(i)).1)
        .iter()
        .sum();
    objective.push(last);

    Ok(KMeansFit {
        codebook: Codebook::from_vectors(patch_size, centroids)?,
        objective,
    })
}

fn make_distinct(centroids: &mut [f32], dim: usize) {
    let k = centroids.len() / dim;
    for j in 1..k {
        let mut bump = 0;
        while (0..j).any(|i| centroids[i * dim..(i + 1) * dim] == centroids[j * dim..(j + 1) * dim]) {
            bump += 1;
            let slot = j * dim + (j + bump) % dim;
            let delta = 1e-3 * bump as f32;
            let v = centroids[slot];
            centroids[slot] = if v > 0.5 { v - delta } else { v + delta };
        }
    }
}

/// Cuts an image into `p x p` patches in raster order, `p*p*3` floats each.
pub fn extract_patches(image: &Image, p: usize) -> Result<Vec<f32>> {
    ensure!(p > 0, "patch size must be positive");
    ensure!(
        image.height() % p == 0 && image.width() % p == 0,
        "image {}x{} is not divisible by patch size {p}",
        image.height(),
        image.width()
    );
    let (h, w) = (image.height() / p, image.width() / p);
    let mut out = Vec::with_capacity(image.data().len());
    for gr in 0..h {
        for gc in 0..w {
            for r in 0..p {
                let o = ((gr * p + r) * image.width() + gc * p) * 3;
                out.extend_from_slice(&image.data()[o..o + p * 3]);
            }
        }
    }
    Ok(out)
}

pub fn encode(image: &Image, cb: &Codebook) -> Result<TokenGrid> {
    let p = cb.patch_size();
    let patches = extract_patches(image, p)?;
    let ids = patches
        .chunks_exact(cb.dim())
        .map(|patch| cb.nearest(patch) as u32)
        .collect();
    TokenGrid::new(image.height() / p, image.width() / p, ids)
}

pub fn decode(grid: &TokenGrid, cb: &Codebook) -> Result<Image> {
    if let Some(bad) = grid.ids.iter().find(|id| **id as usize >= cb.size()) {
        return Err(Error::Validation(format!(
            "token id {bad} out of range for codebook of size {}",
            cb.size()
        )));
    }
    let p = cb.patch_size();
    let (hh, ww) = (grid.h * p, grid.w * p);
    let mut data = vec![0.0f32; hh * ww * 3];
    for gr in 0..grid.h {
        for gc in 0..grid.w {
            let v = cb.vector(grid.get(gr, gc) as usize);
            for r in 0..p {
                let o = ((gr * p + r) * ww + gc * p) * 3;
                for (dst, src) in data[o..o + p * 3].iter_mut().zip(&v[r * p * 3..(r + 1) * p * 3]) {
                    *dst = src.clamp(0.0, 1.0);
                }
            }
        }
    }
    Image::new(hh, ww, data)
}

/// Four corner crops, the center crop, then the horizontal mirror of each,
/// in the order: top-left, top-right, bottom-left, bottom-right, center.
pub fn ten_crop(image: &Image, crop: usize, patch_size: usize) -> Result<Vec<Image>> {
    ensure!(crop > 0, "crop size must be positive");
    ensure!(
        crop <= image.height().min(image.width()),
        "crop {crop} larger than image {}x{}",
        image.height(),
        image.width()
    );
    ensure!(
        patch_size > 0 && crop % patch_size == 0,
        "crop {crop} is not a multiple of the patch size {patch_size}"
    );
    let (dh, dw) = (image.height() - crop, image.width() - crop);
    let offsets = [(0, 0), (0, dw), (dh, 0), (dh, dw), (dh / 2, dw / 2)];
    let mut out = Vec::with_capacity(10);
    for (t, l) in offsets {
        out.push(image.crop(t, l, crop, crop)?);
    }
    for i in 0..5 {
        let m = out[i].mirror_horizontal();
        out.push(m);
    }
    Ok(out)
}
