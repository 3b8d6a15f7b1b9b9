//! Acceptance checks. Each test prints one `PASS`/`FAIL` line on stdout
//! (bypassing the harness capture) and then asserts on it.
//!
//! The last three tests share one lab, so models trained for the
//! convergence check are reused by the blank-prompt and guidance checks.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;

use vfgen_core::float::Float;
use vfgen_core::harness::{self, DatasetSpec, ExperimentConfig, Lab, Setup};
use vfgen_core::image::Image;
use vfgen_core::metrics;
use vfgen_core::model::{forward, DropoutMode, ModelConfig, Params, PositionMap};
use vfgen_core::prompts::{assemble_sequence, AssembledSequence, LayoutMode, LossPolicy, PromptSetting};
use vfgen_core::rng;
use vfgen_core::sampling::{
    cfg_combine, filter_and_sample, filtered_distribution, generate_batch, GenRequest, Guidance, SamplerConfig,
};
use vfgen_core::theorylab;
use vfgen_core::tokenizer::{decode, encode, Codebook};
use vfgen_core::training::{
    self, batch_gradients, cross_entropy, OptimState, PromptConfig, PromptSource, TokenDataset, TrainConfig, Trainer,
};

fn verdict(name: &str, pass: bool, detail: String) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" }).unwrap();
    out.flush().unwrap();
    assert!(pass, "{name}: {detail}");
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

/// L=2, H=16, two heads, V=80, twelve positions.
fn grad_model() -> ModelConfig {
    let mut c = ModelConfig::tiny(64, 15);
    c.layers = 2;
    c.hidden = 16;
    c.heads = 2;
    c.grid_h = 2;
    c.grid_w = 3;
    c.prompt_len = 5;
    c.dropout = 0.0;
    c
}

/// Weights spread well away from init so every nonlinearity is exercised.
fn rough_params(cfg: &ModelConfig, seed: u64) -> Params<f64> {
    let mut p = Params::<f64>::zeros(cfg);
    let mut r = rng::seeded(seed);
    for t in p.tensors_mut() {
        let norm = t.name.contains("norm");
        for x in t.data.iter_mut() {
            let u: f64 = r.random_range(-0.4..0.4);
            *x = if norm { 1.0 + u } else { u };
        }
    }
    p
}

fn grad_sequence(cfg: &ModelConfig) -> AssembledSequence {
    let k = cfg.image_codes as u32;
    let prompt = [3, 17, 60, 9, 41];
    let image = [12, 0, 63, 12, 5, 30];
    assemble_sequence(k + 4, &prompt, &image, LayoutMode::PromptFirst, LossPolicy::ImageOnly).unwrap()
}

fn loss_f64(p: &Params<f64>, cfg: &ModelConfig, seq: &AssembledSequence, pos: &PositionMap) -> f64 {
    let logits = forward(p, cfg, &seq.input, pos.as_slice(), DropoutMode::Eval).unwrap();
    cross_entropy(&logits, &seq.target, &seq.mask, cfg.vocab()).unwrap()
}

/// Per tensor `max |analytic - fd| / max |fd|`, worst tensor returned.
fn worst_relative_error<T: Float>(analytic: &Params<T>, at: &Params<f64>, cfg: &ModelConfig, h: f64) -> (f64, String) {
    let seq = grad_sequence(cfg);
    let pos = PositionMap::new(cfg);
    let mut probe = at.clone();
    let mut worst = (0.0, String::new());
    for (ti, a) in analytic.tensors().iter().enumerate() {
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for i in 0..a.data.len() {
            let x = at.tensors()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = x + h;
            let up = loss_f64(&probe, cfg, &seq, &pos);
            probe.tensors_mut()[ti].data[i] = x - h;
            let down = loss_f64(&probe, cfg, &seq, &pos);
            probe.tensors_mut()[ti].data[i] = x;
            let fd = (up - down) / (2.0 * h);
            err = err.max((a.data[i].as_f64() - fd).abs());
            scale = scale.max(fd.abs());
        }
        let rel = err / scale.max(1e-12);
        if rel >= worst.0 {
            worst = (rel, a.name.clone());
        }
    }
    worst
}

#[test]
fn c01_gradient_contract() {
    let t = Instant::now();
    let cfg = grad_model();
    assert_eq!(cfg.vocab(), 80);
    assert_eq!(cfg.seq_len(), 12);
    let tc = TrainConfig {
        dropout: 0.0,
        ..Default::default()
    };
    let seq = grad_sequence(&cfg);
    let p64 = rough_params(&cfg, 11);
    let (g64, _) = batch_gradients(&p64, &cfg, &tc, std::slice::from_ref(&seq), 0).unwrap();
    let (e64, n64) = worst_relative_error(&g64, &p64, &cfg, 1e-5);

    // 32-bit gradients against a 64-bit difference oracle at the same point.
    let p32: Params<f32> = p64.cast();
    let (g32, _) = batch_gradients(&p32, &cfg, &tc, std::slice::from_ref(&seq), 0).unwrap();
    let (e32, n32) = worst_relative_error(&g32, &p32.cast(), &cfg, 1e-5);

    let (fast, time) = within(t, Duration::from_secs(60));
    verdict(
        "gradient_contract",
        e64 < 1e-6 && e32 < 1e-3 && fast,
        format!(
            "{} tensors, worst rel err f64 {e64:.2e} ({n64}) < 1e-6, f32 {e32:.2e} ({n32}) < 1e-3, {time}",
            g64.tensors().len()
        ),
    );
}

fn logits_prefix_unchanged<T: Float>(cfg: &ModelConfig) -> (usize, usize) {
    let pos = PositionMap::new(cfg);
    let params: Params<T> = rough_params(cfg, 5).cast();
    let v = cfg.vocab();
    let mut r = rng::seeded(9);
    let ids: Vec<u32> = (0..cfg.seq_len()).map(|_| r.random_range(0..v as u32)).collect();
    let base = forward(&params, cfg, &ids, pos.as_slice(), DropoutMode::Eval).unwrap();
    let (mut checked, mut broken) = (0, 0);
    for t in 1..ids.len() {
        for tok in 0..v as u32 {
            if tok == ids[t] {
                continue;
            }
            let mut m = ids.clone();
            m[t] = tok;
            let out = forward(&params, cfg, &m, pos.as_slice(), DropoutMode::Eval).unwrap();
            checked += 1;
            if out[..t * v].iter().zip(&base[..t * v]).any(|(a, b)| a.as_f64().to_bits() != b.as_f64().to_bits()) {
                broken += 1;
            }
        }
    }
    (checked, broken)
}

#[test]
fn c02_causality() {
    let t = Instant::now();
    let cfg = grad_model();
    let (n64, b64) = logits_prefix_unchanged::<f64>(&cfg);
    let (n32, b32) = logits_prefix_unchanged::<f32>(&cfg);
    let (fast, time) = within(t, Duration::from_secs(10));
    verdict(
        "causality",
        b64 == 0 && b32 == 0 && fast,
        format!("{} mutations, earlier logits changed in {} (f64) and {} (f32), {time}", n64 + n32, b64, b32),
    );
}

#[test]
fn c03_theory_dp() {
    let t = Instant::now();
    let rows = theorylab::dp_check(1000, 12, &mut rng::seeded(3), 1e-12).unwrap();
    let rec = rows.iter().map(|r| r.recursion_err).fold(0.0, f64::max);
    let ratio = rows.iter().map(|r| r.ratio_err).fold(0.0, f64::max);
    let (fast, time) = within(t, Duration::from_secs(5));
    verdict(
        "theory_dp",
        rows.len() == 1000 && rows.iter().all(|r| r.pass && r.len <= 12) && fast,
        format!("1000 chains, max recursion err {rec:.1e}, max ratio err {ratio:.1e} (tol 1e-12), {time}"),
    );
}

#[test]
fn c04_entropy() {
    let t = Instant::now();
    let rows = theorylab::entropy_check(1000, 6, &mut rng::seeded(4), 1e-12).unwrap();
    let res = rows.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    let gap = rows.iter().map(|r| r.gap).fold(f64::NEG_INFINITY, f64::max);
    let informative: Vec<_> = rows.iter().filter(|r| r.mutual_info > 1e-9).collect();
    let strict = informative.iter().all(|r| r.gap < 0.0);
    let small = rows.iter().all(|r| r.s_size <= 6 && r.x_size <= 6);
    let (fast, time) = within(t, Duration::from_secs(10));
    verdict(
        "entropy",
        rows.iter().all(|r| r.pass) && res < 1e-12 && gap <= 1e-12 && strict && small && fast,
        format!(
            "1000 sources, max |residual| {res:.1e}, max gap {gap:.2e}, strict on {}/{} informative, {time}",
            informative.iter().filter(|r| r.gap < 0.0).count(),
            informative.len()
        ),
    );
}

/// Exhaustive definition: a code survives if fewer than `top_k` codes
/// precede it and the renormalized top-k mass preceding it is below
/// `top_p`. `j` precedes `i` if it is more likely, or equally likely with a
/// lower index.
fn oracle_distribution(logits: &[f64], cfg: &SamplerConfig) -> Vec<f64> {
    let z: f64 = logits.iter().map(|l| (l / cfg.temperature).exp()).sum();
    let p: Vec<f64> = logits.iter().map(|l| (l / cfg.temperature).exp() / z).collect();
    let n = p.len();
    let precedes = |j: usize, i: usize| p[j] > p[i] || (p[j] == p[i] && j < i);
    let rank = |i: usize| (0..n).filter(|&j| p[j] > 0.0 && precedes(j, i)).count();
    let in_k: Vec<bool> = (0..n).map(|i| p[i] > 0.0 && (cfg.top_k == 0 || rank(i) < cfg.top_k)).collect();
    let mass_k: f64 = (0..n).filter(|&i| in_k[i]).map(|i| p[i]).sum();
    let keep: Vec<bool> = (0..n)
        .map(|i| {
            in_k[i] && {
                let before: f64 = (0..n).filter(|&j| in_k[j] && precedes(j, i)).map(|j| p[j]).sum();
                cfg.top_p >= 1.0 || before / mass_k < cfg.top_p
            }
        })
        .collect();
    let kept: f64 = (0..n).filter(|&i| keep[i]).map(|i| p[i]).sum();
    (0..n).map(|i| if keep[i] { p[i] / kept } else { 0.0 }).collect()
}

/// Upper `alpha = 0.01` point of chi-square (Wilson-Hilferty).
fn chi2_critical_99(df: usize) -> f64 {
    let d = df as f64;
    let z = 2.326_347_874;
    d * (1.0 - 2.0 / (9.0 * d) + z * (2.0 / (9.0 * d)).sqrt()).powi(3)
}

#[test]
fn c05_sampler() {
    let t = Instant::now();
    let mut r = rng::seeded(5);
    let (mut support_ok, mut worst) = (true, 0.0f64);
    let mut cases = 0;
    for case in 0..400 {
        let n = r.random_range(2..40);
        let mut logits: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
        if case % 4 == 0 {
            // Tied logits exercise the index tie-break.
            for i in (1..n).step_by(3) {
                logits[i] = logits[i - 1];
            }
        }
        let cfg = SamplerConfig {
            top_k: [0, 1, 3, 10][case % 4],
            top_p: [1.0, 0.9, 0.5, 0.25, 0.97][case % 5],
            temperature: [1.0, 0.7, 1.6][case % 3],
            ..Default::default()
        };
        let got = filtered_distribution(&logits, &cfg).unwrap();
        let want = oracle_distribution(&logits, &cfg);
        support_ok &= got.iter().zip(&want).all(|(a, b)| (*a > 0.0) == (*b > 0.0));
        worst = worst.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        cases += 1;
    }

    let logits: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 2.5).collect();
    let mut chi = Vec::new();
    for cfg in [
        SamplerConfig {
            top_k: 12,
            top_p: 0.9,
            temperature: 0.8,
            ..Default::default()
        },
        SamplerConfig::default(),
    ] {
        let p = oracle_distribution(&logits, &cfg);
        let draws = 100_000;
        let mut counts = vec![0usize; p.len()];
        let mut rs = rng::seeded(17);
        for _ in 0..draws {
            counts[filter_and_sample(&logits, &cfg, &mut rs).unwrap()] += 1;
        }
        let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
        let outside = (0..p.len()).filter(|&i| p[i] == 0.0).map(|i| counts[i]).sum::<usize>();
        let stat: f64 = support
            .iter()
            .map(|&i| {
                let e = p[i] * draws as f64;
                (counts[i] as f64 - e).powi(2) / e
            })
            .sum();
        let crit = chi2_critical_99(support.len() - 1);
        chi.push((stat, crit, outside));
    }
    let chi_ok = chi.iter().all(|&(s, c, o)| s < c && o == 0);
    let (fast, time) = within(t, Duration::from_secs(30));
    verdict(
        "sampler",
        support_ok && worst <= 1e-9 && chi_ok && fast,
        format!(
            "{cases} cases, support {}, max |p - oracle| {worst:.1e}; chi2 {} at alpha 0.01; {time}",
            if support_ok { "exact" } else { "MISMATCH" },
            chi.iter()
                .map(|(s, c, o)| format!("{s:.1}<{c:.1} (outside {o})"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

#[test]
fn c06_cfg_algebra() {
    let t = Instant::now();
    let mut r = rng::seeded(6);
    let mut exact = true;
    for _ in 0..200 {
        let c: Vec<f64> = (0..64).map(|_| r.random_range(-30.0..30.0)).collect();
        let u: Vec<f64> = (0..64).map(|_| r.random_range(-30.0..30.0)).collect();
        exact &= cfg_combine(&c, &u, 1.0) == c && cfg_combine(&c, &u, 0.0) == u;
        let (c32, u32): (Vec<f32>, Vec<f32>) = c.iter().zip(&u).map(|(a, b)| (*a as f32, *b as f32)).unzip();
        exact &= cfg_combine(&c32, &u32, 1.0) == c32 && cfg_combine(&c32, &u32, 0.0) == u32;
    }

    let mut cfg = ModelConfig::tiny(64, 8);
    cfg.prompt_len = 16;
    cfg.grid_h = 4;
    cfg.grid_w = 4;
    let params = Params::<f32>::init(&cfg, 2).unwrap();
    let reqs: Vec<GenRequest> = (0..12)
        .map(|i| GenRequest {
            class: i % 8,
            prompt: (0..16).map(|j| ((i * 7 + j * 3) % 64) as u32).collect(),
            seed: 100 + i as u64,
        })
        .collect();
    let sampler = SamplerConfig {
        cfg_scale: 1.0,
        top_k: 20,
        top_p: 0.95,
        ..Default::default()
    };
    let single = generate_batch(&params, &cfg, &reqs, &sampler, Guidance::Auto).unwrap();
    let paired = generate_batch(&params, &cfg, &reqs, &sampler, Guidance::TwoStream).unwrap();
    let same = single.iter().zip(&paired).filter(|(a, b)| a.grid == b.grid).count();
    let (fast, time) = within(t, Duration::from_secs(60));
    verdict(
        "cfg_algebra",
        exact && same == reqs.len() && fast,
        format!(
            "combine exact at s=1 and s=0: {exact}; s=1 two-stream equals single-stream on {same}/{} images; {time}",
            reqs.len()
        ),
    );
}

fn small_shapes() -> (TokenDataset, Codebook) {
    let spec = DatasetSpec {
        per_class: 12,
        seed: 21,
        ..Default::default()
    };
    let (images, labels) = harness::generate(&spec).unwrap();
    let mut ec = ExperimentConfig::default();
    ec.tokenizer.fit_images = 96;
    let cb = harness::lab::fit_tokenizer(&ec, &images).unwrap();
    (TokenDataset::from_images(&images, &labels, spec.classes, &cb).unwrap(), cb)
}

#[test]
fn c07_reduction() {
    let t = Instant::now();
    let (data, _) = small_shapes();
    let mut model = ModelConfig::tiny(64, 8);
    model.prompt_len = 0;
    let mut identical = Vec::new();
    for seed in [0u64, 1] {
        let run = |kind: PromptSetting| {
            let cfg = TrainConfig {
                seed,
                steps: 60,
                batch_size: 4,
                lr: 1e-3,
                prompt: PromptConfig {
                    kind,
                    length: 0,
                    ..Default::default()
                },
                ..Default::default()
            };
            let mut tr = Trainer::new(model.clone(), cfg.clone(), &data, None).unwrap();
            let curve = tr.run(cfg.steps, |_| {}).unwrap();
            let src = PromptSource::new(&cfg.prompt, 64, &data, None).unwrap();
            let reqs: Vec<GenRequest> = (0..16)
                .map(|i| {
                    let mut pr = rng::substream(seed, rng::Stream::Prompt, 1, i);
                    GenRequest {
                        class: i as usize % 8,
                        prompt: src.prompt(i as usize % 8, None, &mut pr).unwrap(),
                        seed: seed * 1000 + i,
                    }
                })
                .collect();
            let sampler = SamplerConfig {
                seed,
                ..Default::default()
            };
            let out = generate_batch(&tr.params, &model, &reqs, &sampler, Guidance::Auto).unwrap();
            (curve, tr.params, out)
        };
        let (ca, pa, sa) = run(PromptSetting::None);
        let (cb, pb, sb) = run(PromptSetting::Universal);
        let bits = |c: &[training::CurvePoint]| -> Vec<u64> { c.iter().map(|p| p.loss.to_bits()).collect() };
        identical.push(bits(&ca) == bits(&cb) && ca == cb && pa == pb && sa == sb);
    }
    let (fast, time) = within(t, Duration::from_secs(300));
    verdict(
        "reduction",
        identical.iter().all(|&x| x) && fast,
        format!("none vs universal k=0, losses, params and samples bit-identical per seed: {identical:?}, {time}"),
    );
}

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| Lab::prepare(ExperimentConfig::default()).unwrap())
}

fn universal() -> Setup {
    Setup::prompted(PromptSetting::Universal, 64, LossPolicy::Full)
}

#[test]
fn c08_convergence() {
    let t = Instant::now();
    let lab = lab();
    let c = &lab.cfg;
    assert_eq!((c.dataset.classes, c.dataset.per_class, c.dataset.image_size), (8, 256, 32));
    assert_eq!((c.tokenizer.codes, c.preset.as_str(), c.train.steps, c.seeds.len()), (64, "tiny", 2000, 3));
    let mut rows = Vec::new();
    for &seed in &c.seeds {
        let base = lab.train(&Setup::baseline(), seed).unwrap();
        let vf = lab.train(&universal(), seed).unwrap();
        rows.push((
            base.final_image_ce(harness::experiments::FINAL_WINDOW),
            vf.final_image_ce(harness::experiments::FINAL_WINDOW),
        ));
    }
    let wins = rows.iter().filter(|(b, v)| v <= b).count();
    let (fast, time) = within(t, Duration::from_secs(30 * 60));
    verdict(
        "convergence",
        wins >= 2 && fast,
        format!(
            "final image CE baseline vs universal {}; universal <= baseline on {wins}/3, {time}",
            rows.iter().map(|(b, v)| format!("{b:.4}/{v:.4}")).collect::<Vec<_>>().join(" ")
        ),
    );
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",")
}

#[test]
fn c09_blank_prompt() {
    let t = Instant::now();
    let lab = lab();
    let blank = Setup::prompted(PromptSetting::Blank, 64, LossPolicy::Full);
    let (mut base, mut bl, mut vf) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &lab.cfg.seeds {
        let s = lab.sampler(seed, lab.cfg.sampler.cfg_scale);
        let fid = |setup: &Setup, infer| lab.evaluate(&lab.train(setup, seed).unwrap(), infer, &s).unwrap().frechet;
        base.push(fid(&Setup::baseline(), PromptSetting::None));
        bl.push(fid(&blank, PromptSetting::Blank));
        vf.push(fid(&universal(), PromptSetting::Universal));
    }
    let overlap = harness::experiments::ranges_overlap(&bl, &base);
    let wins = vf.iter().zip(&base).filter(|(v, b)| v < b).count();
    let (fast, time) = within(t, Duration::from_secs(45 * 60));
    verdict(
        "blank_prompt",
        overlap && wins >= 2 && fast,
        format!(
            "desk-FID baseline [{}] blank [{}] universal [{}]; blank overlaps baseline: {overlap}; universal better on {wins}/3, {time}",
            fmt(&base),
            fmt(&bl),
            fmt(&vf)
        ),
    );
}

#[test]
fn c10_cfg_sweep() {
    let t = Instant::now();
    let lab = lab();
    let scales = [1.0, 1.75, 2.5];
    let (mut interior, mut prec, mut rec) = (0, 0, 0);
    let mut lines = Vec::new();
    for &seed in &lab.cfg.seeds {
        let m = lab.train(&universal(), seed).unwrap();
        let ms: Vec<_> = scales
            .iter()
            .map(|&s| lab.evaluate(&m, PromptSetting::Universal, &lab.sampler(seed, s)).unwrap())
            .collect();
        interior += (ms[1].frechet < ms[0].frechet && ms[1].frechet < ms[2].frechet) as usize;
        prec += ms.windows(2).all(|w| w[1].precision >= w[0].precision) as usize;
        rec += ms.windows(2).all(|w| w[1].recall <= w[0].recall) as usize;
        lines.push(format!(
            "seed {seed} fid [{}] P [{}] R [{}]",
            fmt(&ms.iter().map(|e| e.frechet).collect::<Vec<_>>()),
            fmt(&ms.iter().map(|e| e.precision).collect::<Vec<_>>()),
            fmt(&ms.iter().map(|e| e.recall).collect::<Vec<_>>())
        ));
    }
    let n = lab.cfg.seeds.len();
    let maj = |k: usize| 2 * k > n;
    let (fast, time) = within(t, Duration::from_secs(20 * 60));
    verdict(
        "cfg_sweep",
        maj(interior) && maj(prec) && maj(rec) && fast,
        format!(
            "scales 1.0/1.75/2.5: interior min {interior}/{n}, precision up {prec}/{n}, recall down {rec}/{n}; {}; {time}",
            lines.join("; ")
        ),
    );
}

fn f32_bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn c11_tokenizer_persistence() {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let (images, _) = harness::generate(&cfg.dataset).unwrap();
    let cb = harness::lab::fit_tokenizer(&cfg, &images).unwrap();

    let recon: f64 = images
        .iter()
        .map(|im| im.mse(&decode(&encode(im, &cb).unwrap(), &cb).unwrap()).unwrap())
        .sum::<f64>()
        / images.len() as f64;
    // The best constant image under MSE is the pixel-wise mean.
    let len = images[0].data().len();
    let mut mean = vec![0.0f64; len];
    for im in &images {
        mean.iter_mut().zip(im.data()).for_each(|(m, x)| *m += *x as f64);
    }
    let mean = Image::new(
        images[0].height(),
        images[0].width(),
        mean.iter().map(|m| (m / images.len() as f64) as f32).collect(),
    )
    .unwrap();
    let constant = images.iter().map(|im| im.mse(&mean).unwrap()).sum::<f64>() / images.len() as f64;

    let dir = tempfile::tempdir().unwrap();
    let cb_path = dir.path().join("codebook.vfcb");
    cb.save(&cb_path).unwrap();
    let cb2 = Codebook::load(&cb_path).unwrap();
    let cb_exact = f32_bits(cb.vectors()) == f32_bits(cb2.vectors()) && cb.patch_size() == cb2.patch_size();

    let model = cfg.base_model().unwrap();
    let params = Params::<f32>::init(&model, 8).unwrap();
    let mut state = OptimState::new(&params);
    let mut r = rng::seeded(8);
    for t in state.m.tensors_mut().into_iter().chain(state.v.tensors_mut()) {
        t.data.iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
    }
    state.step = 37;
    let ck_path = dir.path().join("model.vfck");
    training::save_checkpoint(&ck_path, &params, Some(&state), &model).unwrap();
    let ck = training::load_checkpoint_for(&ck_path, &model).unwrap();
    let st = ck.state.as_ref().unwrap();
    let all_bits = |p: &Params<f32>| p.tensors().iter().flat_map(|t| f32_bits(&t.data)).collect::<Vec<_>>();
    let ck_exact = ck.config == model
        && all_bits(&ck.params) == all_bits(&params)
        && all_bits(&st.m) == all_bits(&state.m)
        && all_bits(&st.v) == all_bits(&state.v)
        && st.step == state.step;

    let feats = metrics::embed_all(&images[..512]).unwrap();
    let stats = metrics::fit_gaussian(&feats).unwrap();
    let self_fd = metrics::frechet_distance(&stats, &stats).unwrap();

    let (fast, time) = within(t, Duration::from_secs(120));
    verdict(
        "tokenizer_persistence",
        recon < constant && cb_exact && ck_exact && self_fd < 1e-8 && fast,
        format!(
            "recon mse {recon:.5} < mean-image mse {constant:.5}; codebook round-trip exact: {cb_exact}; checkpoint exact: {ck_exact}; self Frechet {self_fd:.1e}; {time}"
        ),
    );
}
