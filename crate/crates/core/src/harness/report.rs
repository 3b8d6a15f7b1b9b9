//! Experiment reports: one JSON document plus CSV curve files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::lab::{EvalMetrics, Lab};
use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::prompts::{LayoutMode, PromptSetting};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<EvalMetrics>,
    pub final_image_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub train_prompt: PromptSetting,
    pub infer_prompt: PromptSetting,
    pub prompt_len: usize,
    pub layout: LayoutMode,
    pub cfg_scale: f64,
    pub per_seed: Vec<SeedResult>,
    pub mean: Option<EvalMetrics>,
    /// Published FID for the corresponding setting, for reference only.
    pub reference_fid: Option<f64>,
}

/// Per-step image-masked CE of two runs sharing a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub seed: u64,
    pub columns: [String; 2],
    pub values: Vec<[f64; 2]>,
}

impl Curve {
    pub fn pair(seed: u64, a: &str, va: &[f64], b: &str, vb: &[f64]) -> Self {
        Self {
            seed,
            columns: [a.into(), b.into()],
            values: va.iter().zip(vb).map(|(x, y)| [*x, *y]).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{},{}\n", self.columns[0], self.columns[1]);
        for (i, [a, b]) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{},{a},{b}", i + 1);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub config: Value,
    pub content_hash: String,
    pub reference: Value,
    pub rows: Vec<Row>,
    pub flags: BTreeMap<String, bool>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub curves: Vec<Curve>,
}

pub fn majority(v: &[bool]) -> bool {
    2 * v.iter().filter(|&&b| b).count() > v.len()
}

impl Report {
    pub fn new(experiment: &str, lab: &Lab, reference: Value, rows: Vec<Row>, flags: BTreeMap<String, bool>) -> Self {
        Self {
            experiment: experiment.into(),
            config: lab.cfg.to_json(),
            content_hash: format!("{:016x}", lab.content_hash),
            reference,
            rows,
            flags,
            curves: Vec::new(),
        }
    }

    /// Writes `<experiment>.json` and one `<experiment>_seed<S>.csv` per
    /// curve into `dir`; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        let json = dir.join(format!("{}.json", self.experiment));
        write_atomic(&json, serde_json::to_string_pretty(self)?.as_bytes())?;
        out.push(json);
        for c in &self.curves {
            let p = dir.join(format!("{}_seed{}.csv", self.experiment, c.seed));
            write_atomic(&p, c.to_csv().as_bytes())?;
            out.push(p);
        }
        Ok(out)
    }

    /// Plain-text table of per-row mean metrics and the flags.
    pub fn summary(&self) -> String {
        let mut s = format!("{} [{}]\n", self.experiment, self.content_hash);
        let _ = writeln!(s, "{:<22} {:>9} {:>9} {:>7} {:>7} {:>8} {:>9}", "row", "desk_fid", "ref", "prec", "recall", "ppl", "final_ce");
        for r in &self.rows {
            let ce = r.per_seed.iter().map(|x| x.final_image_ce).sum::<f64>() / r.per_seed.len().max(1) as f64;
            let reference = r.reference_fid.map(|p| format!("{p:.2}")).unwrap_or_else(|| "-".into());
            match r.mean {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        "{:<22} {:>9.4} {:>9} {:>7.3} {:>7.3} {:>8.3} {:>9.4}",
                        r.label, m.frechet, reference, m.precision, m.recall, m.perplexity, ce
                    );
                }
                None => {
                    let _ = writeln!(s, "{:<22} {:>9} {:>9} {:>7} {:>7} {:>8} {:>9.4}", r.label, "-", reference, "-", "-", "-", ce);
                }
            }
        }
        for (k, v) in &self.flags {
            let _ = writeln!(s, "flag {k}: {}", if *v { "pass" } else { "fail" });
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_needs_strictly_more_than_half() {
        assert!(majority(&[true, true, false]));
        assert!(!majority(&[true, false]));
        assert!(!majority(&[]));
    }

    #[test]
    fn curve_csv_has_one_row_per_step() {
        let c = Curve::pair(3, "baseline", &[1.0, 0.5], "universal", &[0.9, 0.4]);
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, ["step,baseline,universal", "1,1,0.9", "2,0.5,0.4"]);
    }
}
