//! Masked cross-entropy, gradient clipping and AdamW.

use crate::error::{ensure, Error, Result};
use crate::float::Float;
use crate::model::{is_norm, Params};
use crate::prompts::LossMask;

/// Mean of `-log softmax(logits)[target]` over masked positions.
pub fn cross_entropy<T: Float>(logits: &[T], targets: &[u32], mask: &LossMask, vocab: usize) -> Result<f64> {
    let count = mask.count();
    ensure!(count > 0, "loss mask has no active positions");
    let (sum, _) = masked_ce_sum(logits, targets, mask, vocab, None)?;
    Ok(sum / count as f64)
}

/// Sum of masked token losses; when `grad` is given, writes
/// `(softmax - onehot) * grad_scale` for masked rows and zero elsewhere.
pub(crate) fn masked_ce_sum<T: Float>(
    logits: &[T],
    targets: &[u32],
    mask: &LossMask,
    vocab: usize,
    grad: Option<(&mut [T], f64)>,
) -> Result<(f64, usize)> {
    ensure!(
        logits.len() == targets.len() * vocab && mask.len() == targets.len(),
        "cross-entropy shape mismatch: {} logits, {} targets, mask {}",
        logits.len(),
        targets.len(),
        mask.len()
    );
    let mut total = 0.0;
    let mut count = 0;
    let mut grad = grad;
    if let Some((g, _)) = grad.as_mut() {
        g.iter_mut().for_each(|x| *x = T::zero());
    }
    for (i, (&t, &on)) in targets.iter().zip(&mask.0).enumerate() {
        if !on {
            continue;
        }
        ensure!((t as usize) < vocab, "target {t} >= vocab {vocab}");
        let row = &logits[i * vocab..(i + 1) * vocab];
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let z: f64 = row.iter().map(|v| (v.as_f64() - mx).exp()).sum();
        let lse = mx + z.ln();
        total += lse - row[t as usize].as_f64();
        count += 1;
        if let Some((g, scale)) = grad.as_mut() {
            let gr = &mut g[i * vocab..(i + 1) * vocab];
            for (j, (gv, lv)) in gr.iter_mut().zip(row).enumerate() {
                let p = (lv.as_f64() - lse).exp();
                let onehot = if j == t as usize { 1.0 } else { 0.0 };
                *gv = T::lit((p - onehot) * *scale);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            what: "cross-entropy".into(),
            detail: format!("loss sum {total}"),
        });
    }
    Ok((total, count))
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm<T: Float>(grads: &Params<T>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut Params<T>, max_norm: f64) -> Result<f64> {
    for t in grads.tensors() {
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient {}", t.name),
                detail: format!("element {i} = {}", t.data[i]),
            });
        }
    }
    let g = global_norm(grads);
    if g > max_norm {
        let s = T::lit(max_norm / g);
        grads
            .tensors_mut()
            .into_iter()
            .for_each(|t| t.data.iter_mut().for_each(|v| *v *= s));
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moments mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
}

impl<T: Float> OptimState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Weight decay applies to projection matrices and the output head; norm
/// gains and the token embedding are excluded.
pub fn decays(name: &str) -> bool {
    !(is_norm(name) || name == "tok_emb")
}

/// Decoupled weight decay followed by the bias-corrected Adam update.
pub fn adamw_step<T: Float>(params: &mut Params<T>, grads: &Params<T>, state: &mut OptimState<T>, cfg: &AdamWConfig) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (ob1, ob2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let lr = cfg.lr;
    let shrink = T::lit(1.0 - cfg.lr * cfg.weight_decay);
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        let decay = decays(&p.name) && cfg.weight_decay != 0.0;
        for i in 0..p.data.len() {
            if decay {
                p.data[i] *= shrink;
            }
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + ob1 * gi;
            v.data[i] = b2 * v.data[i] + ob2 * gi * gi;
            let mhat = m.data[i].as_f64() / bc1;
            let vhat = v.data[i].as_f64() / bc2;
            p.data[i] -= T::lit(lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn mask(v: &[bool]) -> LossMask {
        LossMask(v.to_vec())
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let l = vec![0.3f32; 4 * 7];
        let ce = cross_entropy(&l, &[0, 1, 2, 6], &mask(&[true; 4]), 7).unwrap();
        assert!((ce - 7f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let mut l = vec![0.0f64; 2 * 5];
        l[3] = 60.0;
        l[5 + 1] = 60.0;
        let ce = cross_entropy(&l, &[3, 1], &mask(&[true, true]), 5).unwrap();
        assert!(ce < 1e-20);
    }

    #[test]
    fn random_case_matches_direct_formula() {
        let mut r = seeded(8);
        let l: Vec<f32> = (0..15).map(|_| r.random::<f32>() * 6.0 - 3.0).collect();
        let t = [4u32, 0, 2];
        let m = mask(&[true, false, true]);
        let got = cross_entropy(&l, &t, &m, 5).unwrap();
        let row_loss = |i: usize| {
            let row: Vec<f64> = l[i * 5..i * 5 + 5].iter().map(|v| *v as f64).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t[i] as usize].exp() / z).ln()
        };
        let want = (row_loss(0) + row_loss(2)) / 2.0;
        assert!((got - want).abs() < 1e-6);
        assert!(cross_entropy(&l, &t, &mask(&[false; 3]), 5).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut r = seeded(2);
        let l: Vec<f64> = (0..12).map(|_| r.random::<f64>()).collect();
        let t = [1u32, 3, 0];
        let m = mask(&[true, true, false]);
        let mut g = vec![0.0; 12];
        masked_ce_sum(&l, &t, &m, 4, Some((&mut g, 0.5))).unwrap();
        for i in 0..12 {
            let (mut a, mut b) = (l.clone(), l.clone());
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (cross_entropy(&a, &t, &m, 4).unwrap() - cross_entropy(&b, &t, &m, 4).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    fn tiny_params() -> Params<f64> {
        let mut c = ModelConfig::tiny(8, 2);
        c.layers = 1;
        c.hidden = 8;
        c.heads = 2;
        Params::init(&c, 1).unwrap()
    }

    #[test]
    fn clip_small_norm_is_identity_and_large_norm_scales() {
        let mut g = tiny_params().zeros_like();
        g.head.data[0] = 0.6;
        let before = g.clone();
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 0.6);
        assert_eq!(g, before);
        g.head.data[0] = 4.0;
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 4.0);
        assert_eq!(g.head.data[0], 1.0);
    }

    #[test]
    fn clip_random_grads_to_min_of_norm_and_one() {
        let mut r = seeded(5);
        for _ in 0..20 {
            let mut g = tiny_params().zeros_like();
            let scale = r.random::<f64>() * 0.1;
            g.tensors_mut()
                .into_iter()
                .for_each(|t| t.data.iter_mut().for_each(|v| *v = (r.random::<f64>() - 0.5) * scale));
            let before = global_norm(&g);
            clip_grad_norm(&mut g, 1.0).unwrap();
            assert!((global_norm(&g) - before.min(1.0)).abs() < 1e-6);
        }
        let mut g = tiny_params().zeros_like();
        g.layers[0].wq.data[3] = f64::NAN;
        let err = clip_grad_norm(&mut g, 1.0).unwrap_err();
        assert!(err.to_string().contains("layers.0.wq"));
    }

    #[test]
    fn zero_grads_only_shrink_decayed_tensors() {
        let mut p = tiny_params();
        let orig = p.clone();
        let g = p.zeros_like();
        let mut s = OptimState::new(&p);
        let cfg = AdamWConfig { lr: 1e-2, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 };
        adamw_step(&mut p, &g, &mut s, &cfg);
        for (a, b) in p.tensors().iter().zip(orig.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let want = if decays(&a.name) { y * (1.0 - 1e-2 * 0.05) } else { *y };
                assert!((x - want).abs() < 1e-15, "{}", a.name);
            }
        }
    }

    #[test]
    fn single_scalar_step_matches_hand_computation() {
        let mut p = tiny_params();
        let mut g = p.zeros_like();
        let w0 = p.head.data[0];
        g.head.data[0] = 1.0;
        let mut s = OptimState::new(&p);
        let cfg = AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 };
        adamw_step(&mut p, &g, &mut s, &cfg);
        // m = 0.1, v = 0.05, mhat = 1, vhat = 1
        let want = w0 * (1.0 - 1e-4 * 0.05) - 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p.head.data[0] - want).abs() < 1e-15);
        assert!((s.m.head.data[0] - 0.1).abs() < 1e-15);
        assert!((s.v.head.data[0] - 0.05).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }
}
