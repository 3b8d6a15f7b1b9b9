//! Full-sequence forward pass with activation cache, and its backward pass.

use rand::Rng as _;

use super::ops::{rmsnorm_row, rmsnorm_row_backward, silu, silu_grad, RopeTable};
use super::{ModelConfig, Params};
use crate::error::{ensure, Result};
use crate::float::{matmul, Float};
use crate::rng::Rng;

/// Dropout is only active in `Train` mode with a positive rate.
pub enum DropoutMode<'a> {
    Eval,
    Train { rate: f64, rng: &'a mut Rng },
}

impl DropoutMode<'_> {
    /// Inverted-dropout scale mask: `0` or `1 / (1 - rate)` per element.
    fn mask<T: Float>(&mut self, len: usize) -> Option<Vec<T>> {
        match self {
            DropoutMode::Train { rate, rng } if *rate > 0.0 => {
                let keep = T::lit(1.0 / (1.0 - *rate));
                Some(
                    (0..len)
                        .map(|_| if rng.random::<f64>() < *rate { T::zero() } else { keep })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

fn apply_mask<T: Float>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(a, b)| *a *= *b);
    }
}

struct LayerCache<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    a: Vec<T>,
    /// Rotated queries/keys and values, head-major `[head][pos][d]`.
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities `[head][i][j]`, zero above the diagonal.
    probs: Vec<T>,
    o: Vec<T>,
    attn_mask: Option<Vec<T>>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    b: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    hact: Vec<T>,
    ffn_mask: Option<Vec<T>>,
}

/// Activations retained by [`forward_with_cache`] for [`backward`].
pub struct ForwardCache<T> {
    n: usize,
    ids: Vec<u32>,
    rope: RopeTable<T>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    inv_final: Vec<T>,
    y: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

fn to_heads<T: Float>(src: &[T], n: usize, heads: usize, d: usize) -> Vec<T> {
    let h = heads * d;
    let mut out = vec![T::zero(); n * h];
    for hd in 0..heads {
        for i in 0..n {
            out[(hd * n + i) * d..(hd * n + i + 1) * d]
                .copy_from_slice(&src[i * h + hd * d..i * h + (hd + 1) * d]);
        }
    }
    out
}

fn from_heads<T: Float>(src: &[T], n: usize, heads: usize, d: usize) -> Vec<T> {
    let h = heads * d;
    let mut out = vec![T::zero(); n * h];
    for hd in 0..heads {
        for i in 0..n {
            out[i * h + hd * d..i * h + (hd + 1) * d]
                .copy_from_slice(&src[(hd * n + i) * d..(hd * n + i + 1) * d]);
        }
    }
    out
}

/// Causal softmax attention on head-major, already rotated inputs.
/// Returns `(probs, output)` with the output in `n x (heads*d)` layout.
fn attend<T: Float>(q: &[T], k: &[T], v: &[T], n: usize, heads: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let mut probs = vec![T::zero(); heads * n * n];
    let mut oh = vec![T::zero(); heads * n * d];
    for hd in 0..heads {
        let qs = &q[hd * n * d..(hd + 1) * n * d];
        let ks = &k[hd * n * d..(hd + 1) * n * d];
        let vs = &v[hd * n * d..(hd + 1) * n * d];
        let p = &mut probs[hd * n * n..(hd + 1) * n * n];
        matmul(qs, ks, p, n, d, n, false, true, T::zero());
        for i in 0..n {
            let row = &mut p[i * n..(i + 1) * n];
            let mut mx = T::neg_infinity();
            for s in row[..=i].iter_mut() {
                *s *= scale;
                mx = mx.max(*s);
            }
            let mut sum = T::zero();
            for s in row[..=i].iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            for s in row[..=i].iter_mut() {
                *s /= sum;
            }
            row[i + 1..].iter_mut().for_each(|s| *s = T::zero());
        }
        matmul(p, vs, &mut oh[hd * n * d..(hd + 1) * n * d], n, n, d, false, false, T::zero());
    }
    (probs, from_heads(&oh, n, heads, d))
}

/// Multi-head causal attention on `n x (heads*d)` inputs before the output
/// projection: rotary embedding of `q`/`k`, scaled dot products, causal
/// softmax, weighted sum of `v`.
pub fn causal_attention<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    heads: usize,
    rope: &RopeTable<T>,
) -> Vec<T> {
    let d = q.len() / (n * heads);
    let mut qh = to_heads(q, n, heads, d);
    let mut kh = to_heads(k, n, heads, d);
    for hd in 0..heads {
        for i in 0..n {
            rope.rotate(&mut qh[(hd * n + i) * d..(hd * n + i + 1) * d], i);
            rope.rotate(&mut kh[(hd * n + i) * d..(hd * n + i + 1) * d], i);
        }
    }
    attend(&qh, &kh, &to_heads(v, n, heads, d), n, heads, d).1
}

fn validate_ids(ids: &[u32], positions: &[(usize, usize)], cfg: &ModelConfig) -> Result<()> {
    ensure!(!ids.is_empty(), "forward needs at least one token");
    ensure!(
        positions.len() >= ids.len(),
        "{} positions for {} tokens",
        positions.len(),
        ids.len()
    );
    if let Some(bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab()) {
        return Err(crate::error::Error::Validation(format!(
            "token id {bad} >= vocab {}",
            cfg.vocab()
        )));
    }
    Ok(())
}

/// Logits `n x V` for a sequence.
pub fn forward<T: Float>(
    params: &Params<T>,
    cfg: &ModelConfig,
    ids: &[u32],
    positions: &[(usize, usize)],
    dropout: DropoutMode,
) -> Result<Vec<T>> {
    forward_with_cache(params, cfg, ids, positions, dropout).map(|r| r.0)
}

pub fn forward_with_cache<T: Float>(
    params: &Params<T>,
    cfg: &ModelConfig,
    ids: &[u32],
    positions: &[(usize, usize)],
    mut dropout: DropoutMode,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    validate_ids(ids, positions, cfg)?;
    let n = ids.len();
    let (h, heads, d, f, vocab) = (cfg.hidden, cfg.heads, cfg.head_dim(), cfg.ffn_dim(), cfg.vocab());
    let eps = T::lit(cfg.norm_eps);
    let rope = RopeTable::new(d, &positions[..n], cfg.rope_base)?;

    let mut x = vec![T::zero(); n * h];
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        x[i * h..(i + 1) * h].copy_from_slice(&params.tok_emb.data[id * h..(id + 1) * h]);
    }
    let emb_mask = dropout.mask(n * h);
    apply_mask(&mut x, &emb_mask);

    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let x_in = x.clone();
        let mut a = vec![T::zero(); n * h];
        let mut inv1 = vec![T::zero(); n];
        for i in 0..n {
            inv1[i] = rmsnorm_row(&x[i * h..(i + 1) * h], &lp.attn_norm.data, eps, &mut a[i * h..(i + 1) * h]);
        }
        let mut q = vec![T::zero(); n * h];
        let mut k = vec![T::zero(); n * h];
        let mut v = vec![T::zero(); n * h];
        matmul(&a, &lp.wq.data, &mut q, n, h, h, false, false, T::zero());
        matmul(&a, &lp.wk.data, &mut k, n, h, h, false, false, T::zero());
        matmul(&a, &lp.wv.data, &mut v, n, h, h, false, false, T::zero());
        let mut qh = to_heads(&q, n, heads, d);
        let mut kh = to_heads(&k, n, heads, d);
        let vh = to_heads(&v, n, heads, d);
        for hd in 0..heads {
            for i in 0..n {
                rope.rotate(&mut qh[(hd * n + i) * d..(hd * n + i + 1) * d], i);
                rope.rotate(&mut kh[(hd * n + i) * d..(hd * n + i + 1) * d], i);
            }
        }
        let (probs, o) = attend(&qh, &kh, &vh, n, heads, d);
        let mut attn = vec![T::zero(); n * h];
        matmul(&o, &lp.wo.data, &mut attn, n, h, h, false, false, T::zero());
        let attn_mask = dropout.mask(n * h);
        apply_mask(&mut attn, &attn_mask);
        x.iter_mut().zip(&attn).for_each(|(a, b)| *a += *b);

        let x_mid = x.clone();
        let mut b = vec![T::zero(); n * h];
        let mut inv2 = vec![T::zero(); n];
        for i in 0..n {
            inv2[i] = rmsnorm_row(&x[i * h..(i + 1) * h], &lp.ffn_norm.data, eps, &mut b[i * h..(i + 1) * h]);
        }
        let mut gate = vec![T::zero(); n * f];
        let mut up = vec![T::zero(); n * f];
        matmul(&b, &lp.w_gate.data, &mut gate, n, h, f, false, false, T::zero());
        matmul(&b, &lp.w_up.data, &mut up, n, h, f, false, false, T::zero());
        let hact: Vec<T> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * *u).collect();
        let mut ffn = vec![T::zero(); n * h];
        matmul(&hact, &lp.w_down.data, &mut ffn, n, f, h, false, false, T::zero());
        let ffn_mask = dropout.mask(n * h);
        apply_mask(&mut ffn, &ffn_mask);
        x.iter_mut().zip(&ffn).for_each(|(a, b)| *a += *b);

        layers.push(LayerCache {
            x_in,
            inv1,
            a,
            q: qh,
            k: kh,
            v: vh,
            probs,
            o,
            attn_mask,
            x_mid,
            inv2,
            b,
            gate,
            up,
            hact,
            ffn_mask,
        });
    }

    let mut y = vec![T::zero(); n * h];
    let mut inv_final = vec![T::zero(); n];
    for i in 0..n {
        inv_final[i] = rmsnorm_row(&x[i * h..(i + 1) * h], &params.final_norm.data, eps, &mut y[i * h..(i + 1) * h]);
    }
    let mut logits = vec![T::zero(); n * vocab];
    matmul(&y, &params.head.data, &mut logits, n, h, vocab, false, false, T::zero());

    Ok((
        logits,
        ForwardCache {
            n,
            ids: ids.to_vec(),
            rope,
            emb_mask,
            layers,
            x_final: x,
            inv_final,
            y,
        },
    ))
}

/// Accumulates parameter gradients of `sum(dlogits ⊙ logits)` into `grads`.
pub fn backward<T: Float>(
    params: &Params<T>,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    dlogits: &[T],
    grads: &mut Params<T>,
) {
    let n = cache.n;
    let (h, heads, d, f, vocab) = (cfg.hidden, cfg.heads, cfg.head_dim(), cfg.ffn_dim(), cfg.vocab());
    assert_eq!(dlogits.len(), n * vocab, "dlogits shape");
    let one = T::one();
    let scale = T::lit(1.0 / (d as f64).sqrt());

    matmul(&cache.y, dlogits, &mut grads.head.data, h, n, vocab, true, false, one);
    let mut dy = vec![T::zero(); n * h];
    matmul(dlogits, &params.head.data, &mut dy, n, vocab, h, false, true, T::zero());
    let mut dx = vec![T::zero(); n * h];
    for i in 0..n {
        let r = i * h..(i + 1) * h;
        rmsnorm_row_backward(
            &cache.x_final[r.clone()],
            &params.final_norm.data,
            cache.inv_final[i],
            &dy[r.clone()],
            &mut dx[r],
            &mut grads.final_norm.data,
        );
    }

    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut grads.layers[li];

        // Feed-forward branch.
        let mut dffn = dx.clone();
        apply_mask(&mut dffn, &lc.ffn_mask);
        matmul(&lc.hact, &dffn, &mut lg.w_down.data, f, n, h, true, false, one);
        let mut dhact = vec![T::zero(); n * f];
        matmul(&dffn, &lp.w_down.data, &mut dhact, n, h, f, false, true, T::zero());
        let mut dgate = vec![T::zero(); n * f];
        let mut dup = vec![T::zero(); n * f];
        for idx in 0..n * f {
            let g = lc.gate[idx];
            dgate[idx] = dhact[idx] * lc.up[idx] * silu_grad(g);
            dup[idx] = dhact[idx] * silu(g);
        }
        matmul(&lc.b, &dgate, &mut lg.w_gate.data, h, n, f, true, false, one);
        matmul(&lc.b, &dup, &mut lg.w_up.data, h, n, f, true, false, one);
        let mut db = vec![T::zero(); n * h];
        matmul(&dgate, &lp.w_gate.data, &mut db, n, f, h, false, true, T::zero());
        matmul(&dup, &lp.w_up.data, &mut db, n, f, h, false, true, one);
        let mut tmp = vec![T::zero(); h];
        for i in 0..n {
            let r = i * h..(i + 1) * h;
            rmsnorm_row_backward(
                &lc.x_mid[r.clone()],
                &lp.ffn_norm.data,
                lc.inv2[i],
                &db[r.clone()],
                &mut tmp,
                &mut lg.ffn_norm.data,
            );
            dx[r].iter_mut().zip(&tmp).for_each(|(a, b)| *a += *b);
        }

        // Attention branch.
        let mut dattn = dx.clone();
        apply_mask(&mut dattn, &lc.attn_mask);
        matmul(&lc.o, &dattn, &mut lg.wo.data, h, n, h, true, false, one);
        let mut d_o = vec![T::zero(); n * h];
        matmul(&dattn, &lp.wo.data, &mut d_o, n, h, h, false, true, T::zero());
        let doh = to_heads(&d_o, n, heads, d);
        let mut dqh = vec![T::zero(); n * h];
        let mut dkh = vec![T::zero(); n * h];
        let mut dvh = vec![T::zero(); n * h];
        let mut dp = vec![T::zero(); n * n];
        for hd in 0..heads {
            let s = hd * n * d..(hd + 1) * n * d;
            let p = &lc.probs[hd * n * n..(hd + 1) * n * n];
            matmul(&doh[s.clone()], &lc.v[s.clone()], &mut dp, n, d, n, false, true, T::zero());
            matmul(p, &doh[s.clone()], &mut dvh[s.clone()], n, n, d, true, false, T::zero());
            for i in 0..n {
                let row_p = &p[i * n..(i + 1) * n];
                let row_d = &mut dp[i * n..(i + 1) * n];
                let dotp = row_p[..=i]
                    .iter()
                    .zip(&row_d[..=i])
                    .fold(T::zero(), |acc, (a, b)| acc + *a * *b);
                for j in 0..=i {
                    row_d[j] = row_p[j] * (row_d[j] - dotp) * scale;
                }
                row_d[i + 1..].iter_mut().for_each(|x| *x = T::zero());
            }
            matmul(&dp, &lc.k[s.clone()], &mut dqh[s.clone()], n, n, d, false, false, T::zero());
            matmul(&dp, &lc.q[s.clone()], &mut dkh[s.clone()], n, n, d, true, false, T::zero());
            for i in 0..n {
                cache.rope.unrotate(&mut dqh[(hd * n + i) * d..(hd * n + i + 1) * d], i);
                cache.rope.unrotate(&mut dkh[(hd * n + i) * d..(hd * n + i + 1) * d], i);
            }
        }
        let dq = from_heads(&dqh, n, heads, d);
        let dk = from_heads(&dkh, n, heads, d);
        let dv = from_heads(&dvh, n, heads, d);
        matmul(&lc.a, &dq, &mut lg.wq.data, h, n, h, true, false, one);
        matmul(&lc.a, &dk, &mut lg.wk.data, h, n, h, true, false, one);
        matmul(&lc.a, &dv, &mut lg.wv.data, h, n, h, true, false, one);
        let mut da = vec![T::zero(); n * h];
        matmul(&dq, &lp.wq.data, &mut da, n, h, h, false, true, T::zero());
        matmul(&dk, &lp.wk.data, &mut da, n, h, h, false, true, one);
        matmul(&dv, &lp.wv.data, &mut da, n, h, h, false, true, one);
        for i in 0..n {
            let r = i * h..(i + 1) * h;
            rmsnorm_row_backward(
                &lc.x_in[r.clone()],
                &lp.attn_norm.data,
                lc.inv1[i],
                &da[r.clone()],
                &mut tmp,
                &mut lg.attn_norm.data,
            );
            dx[r].iter_mut().zip(&tmp).for_each(|(a, b)| *a += *b);
        }
    }

    apply_mask(&mut dx, &cache.emb_mask);
    for (i, &id) in cache.ids.iter().enumerate() {
        let id = id as usize;
        let row = &mut grads.tok_emb.data[id * h..(id + 1) * h];
        row.iter_mut().zip(&dx[i * h..(i + 1) * h]).for_each(|(a, b)| *a += *b);
    }
}
