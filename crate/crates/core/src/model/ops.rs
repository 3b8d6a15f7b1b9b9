//! Building blocks: RMSNorm, SwiGLU, 2D rotary embeddings.

use crate::error::{Error, Result};
use crate::float::{matmul, Float};

/// `y_i = gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm<T: Float>(x: &[T], gain: &[T], eps: T) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    rmsnorm_row(x, gain, eps, &mut y);
    y
}

/// Normalizes one row into `out`, returning `1 / rms`.
#[inline]
pub(crate) fn rmsnorm_row<T: Float>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::lit(x.len() as f64);
    let ms = x.iter().fold(T::zero(), |a, v| a + *v * *v) / n;
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = *g * *v * inv;
    }
    inv
}

/// Backward of [`rmsnorm_row`]: accumulates into `dgain` and writes `dx`.
#[inline]
pub(crate) fn rmsnorm_row_backward<T: Float>(
    x: &[T],
    gain: &[T],
    inv: T,
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
) {
    let n = T::lit(x.len() as f64);
    let mut s = T::zero();
    for i in 0..x.len() {
        s += gain[i] * dy[i] * x[i];
        dgain[i] += dy[i] * x[i] * inv;
    }
    let c = inv * inv * inv * s / n;
    for i in 0..x.len() {
        dx[i] = inv * gain[i] * dy[i] - c * x[i];
    }
}

#[inline]
pub fn sigmoid<T: Float>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
pub fn silu<T: Float>(z: T) -> T {
    z * sigmoid(z)
}

#[inline]
pub(crate) fn silu_grad<T: Float>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

/// `down * (silu(gate * x) ⊙ (up * x))` for a single `hidden`-vector, with
/// `gate`/`up` stored `hidden x ffn` and `down` stored `ffn x hidden`.
pub fn swiglu<T: Float>(x: &[T], gate: &[T], up: &[T], down: &[T], ffn: usize) -> Vec<T> {
    let h = x.len();
    let mut g = vec![T::zero(); ffn];
    let mut u = vec![T::zero(); ffn];
    matmul(x, gate, &mut g, 1, h, ffn, false, false, T::zero());
    matmul(x, up, &mut u, 1, h, ffn, false, false, T::zero());
    let act: Vec<T> = g.iter().zip(&u).map(|(a, b)| silu(*a) * *b).collect();
    let mut out = vec![T::zero(); h];
    matmul(&act, down, &mut out, 1, ffn, h, false, false, T::zero());
    out
}

/// Per-position cosine/sine tables for 2D rotary embeddings.
///
/// For `head_dim = d`, coordinate pairs `(2j, 2j+1)` with `j < d/4` rotate by
/// `theta_j * row`, the remaining pairs by `theta_{j - d/4} * col`, where
/// `theta_j = base^(-2j / (d/2))`.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pairs: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Float> RopeTable<T> {
    pub fn new(head_dim: usize, positions: &[(usize, usize)], base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "head_dim {head_dim} must be a positive multiple of 4"
            )));
        }
        let pairs = head_dim / 2;
        let quarter = head_dim / 4;
        let half = (head_dim / 2) as f64;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &(row, col) in positions {
            for j in 0..pairs {
                let (coord, jj) = if j < quarter { (row, j) } else { (col, j - quarter) };
                let theta = base.powf(-2.0 * jj as f64 / half);
                let a = theta * coord as f64;
                cos.push(T::lit(a.cos()));
                sin.push(T::lit(a.sin()));
            }
        }
        Ok(Self { pairs, cos, sin })
    }

    pub fn len(&self) -> usize {
        self.cos.len() / self.pairs.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.cos.is_empty()
    }

    /// Rotates `v` (one head vector) in place for sequence index `i`.
    #[inline]
    pub fn rotate(&self, v: &mut [T], i: usize) {
        let (c, s) = (&self.cos[i * self.pairs..], &self.sin[i * self.pairs..]);
        for j in 0..self.pairs {
            let (a, b) = (v[2 * j], v[2 * j + 1]);
            v[2 * j] = a * c[j] - b * s[j];
            v[2 * j + 1] = a * s[j] + b * c[j];
        }
    }

    /// Applies the inverse (transpose) rotation; used for gradients.
    #[inline]
    pub fn unrotate(&self, v: &mut [T], i: usize) {
        let (c, s) = (&self.cos[i * self.pairs..], &self.sin[i * self.pairs..]);
        for j in 0..self.pairs {
            let (a, b) = (v[2 * j], v[2 * j + 1]);
            v[2 * j] = a * c[j] + b * s[j];
            v[2 * j + 1] = -a * s[j] + b * c[j];
        }
    }
}

/// Rotates a single head vector to grid position `pos`.
pub fn rope2d<T: Float>(v: &[T], pos: (usize, usize), base: f64) -> Result<Vec<T>> {
    let table = RopeTable::new(v.len(), &[pos], base)?;
    let mut out = v.to_vec();
    table.rotate(&mut out, 0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::float::dot;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn randv(n: usize, seed: u64) -> Vec<f64> {
        let mut r = seeded(seed);
        (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn rmsnorm_constant_and_zero() {
        let y = rmsnorm(&[3.0f64; 8], &[1.0; 8], 1e-12);
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let z = rmsnorm(&[0.0f64; 8], &[1.0; 8], 1e-5);
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rmsnorm_f32_matches_f64_formula() {
        let x = randv(37, 1);
        let g = randv(37, 2);
        let ms = x.iter().map(|v| v * v).sum::<f64>() / 37.0;
        let want: Vec<f64> = x.iter().zip(&g).map(|(v, g)| g * v / (ms + 1e-5).sqrt()).collect();
        let xf: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        let gf: Vec<f32> = g.iter().map(|v| *v as f32).collect();
        let got = rmsnorm(&xf, &gf, 1e-5);
        for (a, b) in got.iter().zip(&want) {
            assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn rmsnorm_backward_matches_finite_differences() {
        let x = randv(9, 3);
        let g = randv(9, 4);
        let dy = randv(9, 5);
        let eps = 1e-5;
        let loss = |x: &[f64], g: &[f64]| dot(&rmsnorm(x, g, eps), &dy);
        let mut ybuf = vec![0.0; 9];
        let inv = rmsnorm_row(&x, &g, eps, &mut ybuf);
        let mut dx = vec![0.0; 9];
        let mut dg = vec![0.0; 9];
        rmsnorm_row_backward(&x, &g, inv, &dy, &mut dx, &mut dg);
        let h = 1e-6;
        for i in 0..9 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp, &g) - loss(&xm, &g)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7, "dx[{i}]");
            let (mut gp, mut gm) = (g.clone(), g.clone());
            gp[i] += h;
            gm[i] -= h;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * h);
            assert!((fd - dg[i]).abs() < 1e-7, "dg[{i}]");
        }
    }

    fn swiglu_scalar(x: &[f64], gate: &[f64], up: &[f64], down: &[f64], f: usize) -> Vec<f64> {
        let h = x.len();
        let mut act = vec![0.0; f];
        for j in 0..f {
            let (mut g, mut u) = (0.0, 0.0);
            for i in 0..h {
                g += x[i] * gate[i * f + j];
                u += x[i] * up[i * f + j];
            }
            act[j] = g / (1.0 + (-g).exp()) * u;
        }
        (0..h)
            .map(|i| (0..f).map(|j| act[j] * down[j * h + i]).sum())
            .collect()
    }

    #[test]
    fn swiglu_cases() {
        let (h, f) = (6, 10);
        let (gate, up, down) = (randv(h * f, 1), randv(h * f, 2), randv(f * h, 3));
        assert!(swiglu(&vec![0.0; h], &gate, &up, &down, f).iter().all(|v| *v == 0.0));
        let x = randv(h, 4);
        let got = swiglu(&x, &gate, &up, &down, f);
        let want = swiglu_scalar(&x, &gate, &up, &down, f);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6));
        }
        // Large positive gate pre-activations: silu(z) ~ z.
        let big: Vec<f64> = x.iter().map(|v| v.abs() * 50.0 + 50.0).collect();
        let gate_pos = vec![1.0; h * f];
        let got = swiglu(&big, &gate_pos, &up, &down, f);
        let s: f64 = big.iter().sum();
        let want: Vec<f64> = (0..h)
            .map(|i| {
                (0..f)
                    .map(|j| {
                        let u: f64 = (0..h).map(|p| big[p] * up[p * f + j]).sum();
                        s * u * down[j * h + i]
                    })
                    .sum()
            })
            .collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rope_origin_is_identity_and_rejects_bad_dims() {
        let v = randv(8, 1);
        assert_eq!(rope2d(&v, (0, 0), 10_000.0).unwrap(), v);
        assert!(rope2d(&randv(6, 1), (1, 1), 10_000.0).is_err());
    }

    #[test]
    fn rope_rotates_halves_by_row_and_col() {
        let v = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let r = rope2d(&v, (1, 0), 10_000.0).unwrap();
        // theta_0 = 1 for the first row-pair; column pairs untouched.
        assert!((r[0] - 1f64.cos()).abs() < 1e-12 && (r[1] - 1f64.sin()).abs() < 1e-12);
        assert_eq!(&r[4..], &v[4..]);
        let c = rope2d(&v, (0, 2), 10_000.0).unwrap();
        assert_eq!(&c[..4], &v[..4]);
        assert!((c[4] - 2f64.cos()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rope_preserves_norm(seed in any::<u64>(), r in 0usize..40, c in 0usize..40) {
            let v = randv(16, seed);
            let out = rope2d(&v, (r, c), 10_000.0).unwrap();
            prop_assert!((dot(&v, &v).sqrt() - dot(&out, &out).sqrt()).abs() < 1e-9);
        }

        #[test]
        fn rope_inner_product_depends_on_offset_only(
            seed in any::<u64>(),
            p1 in (0usize..20, 0usize..20),
            p2 in (0usize..20, 0usize..20),
            d in (0usize..15, 0usize..15),
        ) {
            let q: Vec<f32> = randv(16, seed).iter().map(|v| *v as f32).collect();
            let k: Vec<f32> = randv(16, seed ^ 7).iter().map(|v| *v as f32).collect();
            let a = dot(&rope2d(&q, p1, 10_000.0).unwrap(), &rope2d(&k, p2, 10_000.0).unwrap());
            let s1 = (p1.0 + d.0, p1.1 + d.1);
            let s2 = (p2.0 + d.0, p2.1 + d.1);
            let b = dot(&rope2d(&q, s1, 10_000.0).unwrap(), &rope2d(&k, s2, 10_000.0).unwrap());
            prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn unrotate_inverts_rotate() {
        let t = RopeTable::<f64>::new(8, &[(3, 5)], 10_000.0).unwrap();
        let v = randv(8, 9);
        let mut w = v.clone();
        t.rotate(&mut w, 0);
        t.unrotate(&mut w, 0);
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
