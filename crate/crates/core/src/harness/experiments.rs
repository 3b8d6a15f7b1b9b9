//! The ablations and the convergence comparison. Each returns a
//! [`Report`]; published reference numbers ride along as annotations only.

use std::collections::BTreeMap;

use serde_json::json;

use super::lab::{EvalMetrics, Lab, Setup, TrainedModel};
use super::report::{majority, Curve, Report, Row, SeedResult};
use crate::error::Result;
use crate::prompts::{LayoutMode, PromptSetting};

/// Image-masked CE is averaged over this many trailing steps.
pub const FINAL_WINDOW: usize = 100;

fn seed_result(lab: &Lab, m: &TrainedModel, infer: PromptSetting, scale: f64) -> Result<SeedResult> {
    let metrics = lab.evaluate(m, infer, &lab.sampler(m.seed, scale))?;
    Ok(SeedResult {
        seed: m.seed,
        metrics: Some(metrics),
        final_image_ce: m.final_image_ce(FINAL_WINDOW),
    })
}

fn row(label: &str, setup: &Setup, infer: PromptSetting, scale: f64, per_seed: Vec<SeedResult>, reference_fid: Option<f64>) -> Row {
    Row {
        label: label.into(),
        train_prompt: setup.prompt,
        infer_prompt: infer,
        prompt_len: setup.length,
        layout: setup.layout,
        cfg_scale: scale,
        mean: mean_metrics(&per_seed),
        per_seed,
        reference_fid,
    }
}

fn mean_metrics(rs: &[SeedResult]) -> Option<EvalMetrics> {
    let ms: Vec<&EvalMetrics> = rs.iter().filter_map(|r| r.metrics.as_ref()).collect();
    if ms.is_empty() {
        return None;
    }
    let n = ms.len() as f64;
    Some(EvalMetrics {
        frechet: ms.iter().map(|m| m.frechet).sum::<f64>() / n,
        precision: ms.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: ms.iter().map(|m| m.recall).sum::<f64>() / n,
        perplexity: ms.iter().map(|m| m.perplexity).sum::<f64>() / n,
    })
}

fn fids(r: &Row) -> Vec<f64> {
    r.per_seed.iter().filter_map(|s| s.metrics.map(|m| m.frechet)).collect()
}

/// Per seed, whether `a` has lower desk-FID than `b`.
fn beats(a: &Row, b: &Row) -> Vec<bool> {
    fids(a).iter().zip(fids(b)).map(|(x, y)| *x < y).collect()
}

fn vf_setup(lab: &Lab, kind: PromptSetting, length: usize) -> Setup {
    if length == 0 || kind == PromptSetting::None {
        Setup::baseline()
    } else {
        Setup::prompted(kind, length, lab.cfg.prompt.loss)
    }
}

fn default_vf_kind(lab: &Lab) -> PromptSetting {
    match lab.cfg.prompt.kind {
        PromptSetting::None | PromptSetting::Blank => PromptSetting::Universal,
        k => k,
    }
}

/// Trains `setup` for every seed and evaluates with `infer` at `scale`.
fn cell(lab: &Lab, label: &str, setup: &Setup, infer: PromptSetting, scale: f64, reference: Option<f64>) -> Result<Row> {
    let per_seed = lab
        .cfg
        .seeds
        .iter()
        .map(|&s| seed_result(lab, &*lab.train(setup, s)?, infer, scale))
        .collect::<Result<Vec<_>>>()?;
    Ok(row(label, setup, infer, scale, per_seed, reference))
}

/// Training/inference prompt combinations against the no-prompt baseline.
pub fn run_ablation_prompts(lab: &Lab) -> Result<Report> {
    use PromptSetting::*;
    let k = lab.cfg.prompt.length.max(1);
    let scale = lab.cfg.sampler.cfg_scale;
    let cells = [
        ("none", None, None, 5.46),
        ("class/class", Class, Class, 4.34),
        ("class/universal", Class, Universal, 4.36),
        ("universal/class", Universal, Class, 4.42),
        ("universal/universal", Universal, Universal, 4.39),
        ("mixture", Mixture, Mixture, 4.55),
    ];
    let mut rows = Vec::new();
    for (label, train, infer, reference) in cells {
        let setup = vf_setup(lab, train, if train == None { 0 } else { k });
        rows.push(cell(lab, label, &setup, infer, scale, Some(reference))?);
    }
    let mut flags = BTreeMap::new();
    let mut all = true;
    for r in &rows[1..] {
        let f = majority(&beats(r, &rows[0]));
        all &= f;
        flags.insert(format!("{}_beats_none", r.label), f);
    }
    flags.insert("vf_rows_beat_none".into(), all);
    Ok(Report::new(
        "prompts",
        lab,
        json!({
            "source": "Table 2, FID at 300 epochs (B model, ImageNet 256)",
            "fid": {"none": 5.46, "class/class": 4.34, "class/universal": 4.36,
                    "universal/class": 4.42, "universal/universal": 4.39, "mixture": 4.55}
        }),
        rows,
        flags,
    ))
}

/// Desk-FID as a function of prompt length; length 0 is the baseline.
pub fn run_ablation_length(lab: &Lab, lengths: &[usize]) -> Result<Report> {
    let kind = default_vf_kind(lab);
    let scale = lab.cfg.sampler.cfg_scale;
    let rows = lengths
        .iter()
        .map(|&l| {
            let setup = vf_setup(lab, kind, l);
            let infer = if l == 0 { PromptSetting::None } else { kind };
            cell(lab, &format!("k={l}"), &setup, infer, scale, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut flags = BTreeMap::new();
    if rows.len() >= 2 {
        let (first, last) = (&rows[0], &rows[rows.len() - 1]);
        let le: Vec<bool> = fids(last).iter().zip(fids(first)).map(|(a, b)| *a <= b).collect();
        flags.insert("monotone_trend".into(), majority(&le));
    }
    if rows.len() >= 3 {
        let m = |r: &Row| r.mean.map(|x| x.frechet).unwrap_or(f64::NAN);
        let n = rows.len();
        let big = (m(&rows[n - 1]) - m(&rows[n - 2])).abs();
        let small = (m(&rows[1]) - m(&rows[0])).abs();
        flags.insert("diminishing_returns".into(), big <= small);
    }
    Ok(Report::new(
        "length",
        lab,
        json!({
            "source": "Fig. 4, FID against number of prompt tokens at 50 epochs; gains slow down at larger lengths",
            "prompt_kind": kind.as_str()
        }),
        rows,
        flags,
    ))
}

/// Baseline, blank prompt, prompt after the image, and the VF prompt.
pub fn run_ablation_variants(lab: &Lab) -> Result<Report> {
    let kind = default_vf_kind(lab);
    let scale = lab.cfg.sampler.cfg_scale;
    let full = lab.full_length();
    let k = lab.cfg.prompt.length.max(1);
    let after = Setup {
        layout: LayoutMode::FullViewAfterGeneration,
        ..Setup::prompted(kind, k, lab.cfg.prompt.loss)
    };
    let rows = vec![
        cell(lab, "none", &Setup::baseline(), PromptSetting::None, scale, Some(8.69))?,
        cell(
            lab,
            "blank",
            &Setup::prompted(PromptSetting::Blank, full, lab.cfg.prompt.loss),
            PromptSetting::Blank,
            scale,
            Some(8.65),
        )?,
        cell(lab, "after_generation", &after, kind, scale, Some(8.70))?,
        cell(lab, "vf", &vf_setup(lab, kind, k), kind, scale, Some(6.07))?,
    ];
    let mut flags = BTreeMap::new();
    flags.insert("blank_overlaps_none".into(), ranges_overlap(&fids(&rows[1]), &fids(&rows[0])));
    flags.insert("vf_beats_none".into(), majority(&beats(&rows[3], &rows[0])));
    Ok(Report::new(
        "variants",
        lab,
        json!({
            "source": "Table 3, FID at 50 epochs",
            "fid": {"none": 8.69, "blank": 8.65, "after_generation": 8.70, "vf": 6.07}
        }),
        rows,
        flags,
    ))
}

pub fn ranges_overlap(a: &[f64], b: &[f64]) -> bool {
    let lo = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    !a.is_empty() && !b.is_empty() && lo(a) <= hi(b) && lo(b) <= hi(a)
}

/// Per-seed checks of a guidance sweep given metrics in scale order.
pub struct SweepShape {
    pub interior_min: bool,
    pub precision_up: bool,
    pub recall_down: bool,
}

pub fn sweep_shape(ms: &[EvalMetrics]) -> SweepShape {
    let n = ms.len();
    let interior_min = n >= 3 && {
        let best = ms[1..n - 1].iter().map(|m| m.frechet).fold(f64::INFINITY, f64::min);
        best < ms[0].frechet && best < ms[n - 1].frechet
    };
    SweepShape {
        interior_min,
        precision_up: ms.windows(2).all(|w| w[1].precision >= w[0].precision),
        recall_down: ms.windows(2).all(|w| w[1].recall <= w[0].recall),
    }
}

/// One trained model per seed, sampled at every guidance scale.
pub fn run_ablation_cfg(lab: &Lab, scales: &[f64]) -> Result<Report> {
    let kind = default_vf_kind(lab);
    let setup = vf_setup(lab, kind, lab.cfg.prompt.length);
    let reference = |s: f64| match (s * 100.0).round() as i64 {
        125 => Some(7.14),
        150 => Some(5.47),
        175 => Some(4.39),
        200 => Some(5.24),
        225 => Some(6.83),
        250 => Some(8.49),
        _ => None,
    };
    let models = lab
        .cfg
        .seeds
        .iter()
        .map(|&s| lab.train(&setup, s))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &scale in scales {
        let per_seed = models
            .iter()
            .map(|m| seed_result(lab, m, kind, scale))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row(&format!("cfg={scale}"), &setup, kind, scale, per_seed, reference(scale)));
    }
    let shapes: Vec<SweepShape> = (0..models.len())
        .map(|i| {
            let ms: Vec<EvalMetrics> = rows.iter().filter_map(|r| r.per_seed[i].metrics).collect();
            sweep_shape(&ms)
        })
        .collect();
    let mut flags = BTreeMap::new();
    flags.insert("u_shape".into(), majority(&shapes.iter().map(|s| s.interior_min).collect::<Vec<_>>()));
    flags.insert("precision_rises".into(), majority(&shapes.iter().map(|s| s.precision_up).collect::<Vec<_>>()));
    flags.insert("recall_falls".into(), majority(&shapes.iter().map(|s| s.recall_down).collect::<Vec<_>>()));
    Ok(Report::new(
        "cfg",
        lab,
        json!({
            "source": "Table 4, universal VF prompt, B model",
            "fid": {"1.25": 7.14, "1.50": 5.47, "1.75": 4.39, "2.00": 5.24, "2.25": 6.83, "2.50": 8.49},
            "precision": {"1.25": 0.71, "1.50": 0.80, "1.75": 0.85, "2.00": 0.88, "2.25": 0.91, "2.50": 0.92},
            "recall": {"1.25": 0.58, "1.50": 0.52, "1.75": 0.46, "2.00": 0.40, "2.25": 0.36, "2.50": 0.31}
        }),
        rows,
        flags,
    ))
}

/// Baseline and VF training curves under identical seeds and steps. With
/// `check_reduction` a `k = 0` VF run is also trained on the first seed and
/// compared step by step with the baseline.
pub fn run_convergence(lab: &Lab, check_reduction: bool) -> Result<Report> {
    let kind = default_vf_kind(lab);
    let vf = vf_setup(lab, kind, lab.cfg.prompt.length);
    let base = Setup::baseline();
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut le = Vec::new();
    let mut base_results = Vec::new();
    let mut vf_results = Vec::new();
    for &s in &lab.cfg.seeds {
        let b = lab.train(&base, s)?;
        let v = lab.train(&vf, s)?;
        let (fb, fv) = (b.final_image_ce(FINAL_WINDOW), v.final_image_ce(FINAL_WINDOW));
        le.push(fv <= fb);
        base_results.push(SeedResult {
            seed: s,
            metrics: None,
            final_image_ce: fb,
        });
        vf_results.push(SeedResult {
            seed: s,
            metrics: None,
            final_image_ce: fv,
        });
        curves.push(Curve::pair(
            s,
            "baseline",
            &b.curve.iter().map(|p| p.image_loss).collect::<Vec<_>>(),
            kind.as_str(),
            &v.curve.iter().map(|p| p.image_loss).collect::<Vec<_>>(),
        ));
    }
    rows.push(row("none", &base, PromptSetting::None, 1.0, base_results, None));
    rows.push(row(kind.as_str(), &vf, kind, 1.0, vf_results, None));
    let mut flags = BTreeMap::new();
    flags.insert("vf_le_baseline".into(), majority(&le));
    if check_reduction {
        let s = lab.cfg.seeds[0];
        let zero = Setup::prompted(PromptSetting::Universal, 0, lab.cfg.prompt.loss);
        let a = lab.train(&base, s)?;
        let z = lab.train(&zero, s)?;
        let same = a.curve.len() == z.curve.len()
            && a.curve.iter().zip(&z.curve).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits());
        flags.insert("reduction_identical".into(), same);
    }
    let mut r = Report::new(
        "convergence",
        lab,
        json!({"source": "Fig. 7: the VF model reaches a significantly smaller loss after the same steps"}),
        rows,
        flags,
    );
    r.curves = curves;
    Ok(r)
}

