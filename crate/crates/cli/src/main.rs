use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vfgen_core::harness::{self, DatasetSpec, ExperimentConfig, Lab};
use vfgen_core::image::Image;
use vfgen_core::metrics;
use vfgen_core::model::ModelConfig;
use vfgen_core::prompts::PromptSetting;
use vfgen_core::rng;
use vfgen_core::sampling::{generate_batch, GenRequest, Guidance, SamplerConfig};
use vfgen_core::theorylab;
use vfgen_core::tokenizer::{decode, Codebook};
use vfgen_core::training::{self, PromptSource, TokenDataset, Trainer};

#[derive(Parser)]
#[command(name = "vfgen", version, about = "Prompt-prefixed autoregressive image generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic shapes dataset.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Patch codebook.
    Tokenizer {
        #[command(subcommand)]
        cmd: TokenizerCmd,
    },
    Train(TrainArgs),
    Sample(SampleArgs),
    /// Desk-FID and k-NN precision/recall between two image directories.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Exact checks of the transition and entropy identities.
    Theory {
        #[command(subcommand)]
        cmd: TheoryCmd,
    },
    Ablate {
        #[command(subcommand)]
        cmd: AblateCmd,
    },
    /// Baseline vs prompted training curves.
    Convergence {
        #[command(flatten)]
        exp: ExpArgs,
        /// Also train a zero-length prompt run and compare it with the baseline.
        #[arg(long)]
        check_reduction: bool,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 256)]
        per_class: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Centered shapes at fixed scale and hue.
        #[arg(long)]
        no_jitter: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum TokenizerCmd {
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        codes: usize,
        #[arg(long, default_value_t = 4)]
        patch: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 512)]
        fit_images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the pre-tokenized dataset here.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TheoryCmd {
    Dp {
        /// Maximum chain length.
        #[arg(long, default_value_t = 12)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        chains: usize,
    },
    Entropy {
        #[arg(long, default_value_t = 1000)]
        sources: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        max_alpha: usize,
    },
}

#[derive(Subcommand)]
enum AblateCmd {
    Prompts(ExpArgs),
    Length {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 8, 16, 32, 64])]
        lengths: Vec<usize>,
    },
    Variants(ExpArgs),
    Cfg {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0f64, 1.25, 1.5, 1.75, 2.0, 2.5])]
        scales: Vec<f64>,
    },
}

#[derive(Args)]
struct ExpArgs {
    /// JSON or key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Report directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// Dataset directory written by `dataset gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Seed; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from an existing checkpoint with optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 1.75)]
    cfg: f64,
    #[arg(long, default_value_t = 0)]
    top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    temp: f64,
    /// Prompt kind at inference; defaults to the one used in training.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Codebook; defaults to the one recorded at training time.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Dataset for class prompts; defaults to the training data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "png")]
    format: String,
}

/// Written next to a checkpoint so `sample` can find its inputs.
fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn parse_pairs(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|s| {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn load_config(a: &ExpArgs) -> Result<ExperimentConfig> {
    let base = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&parse_pairs(&a.set)?)?;
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish(report: harness::Report, dir: &Path) -> Result<()> {
    let paths = report.write(dir)?;
    print!("{}", report.summary());
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.exp)?;
    cfg.data_dir = Some(a.data.clone());
    let (images, labels) = harness::load_dataset(&a.data)?;
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    cfg.dataset.classes = classes;
    let cb = Codebook::load(&a.codebook)?;
    cfg.tokenizer.codes = cb.size();
    cfg.tokenizer.patch_size = cb.patch_size();
    cfg.dataset.image_size = images.first().map(|i| i.height()).unwrap_or(0);
    let data = TokenDataset::from_images(&images, &labels, classes, &cb)?;
    let mut model = cfg.base_model()?;
    if cfg.prompt.kind == PromptSetting::None {
        model.prompt_len = 0;
        cfg.prompt.length = 0;
    }
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.prompt = cfg.prompt.clone();
    let blank = if cfg.prompt.kind == PromptSetting::Blank {
        let (h, w) = (model.grid_h, model.grid_w);
        Some(vfgen_core::prompts::make_blank_prompt(&cb, h * w, (h, w))?.tokens)
    } else {
        None
    };
    let mut t = match &a.resume {
        Some(p) => {
            let ck = training::load_checkpoint_for(p, &model)?;
            Trainer::resume(model.clone(), tc.clone(), &data, blank, ck.params, ck.state)?
        }
        None => Trainer::new(model.clone(), tc.clone(), &data, blank)?,
    };
    let total = tc.total_steps(data.len());
    let remaining = total.saturating_sub(t.steps_done());
    println!(
        "training {} params for {remaining} steps (prompt {} k={})",
        t.params.num_params(),
        tc.prompt.kind,
        model.prompt_len
    );
    let log = a.log_every.max(1);
    let curve = t.run(remaining, |p| {
        if p.step % log == 0 {
            println!("step {:>6} loss {:.4} image_ce {:.4} grad_norm {:.3}", p.step, p.loss, p.image_loss, p.grad_norm);
        }
    })?;
    training::save_checkpoint(&a.ckpt, &t.params, Some(&t.state), &model)?;
    let mut csv = String::from("step,loss,image_ce,grad_norm\n");
    for p in &curve {
        csv.push_str(&format!("{},{},{},{}\n", p.step, p.loss, p.image_loss, p.grad_norm));
    }
    let curve_path = a.ckpt.with_extension("curve.csv");
    fs::write(&curve_path, csv)?;
    let meta = json!({
        "codebook": fs::canonicalize(&a.codebook)?,
        "data": fs::canonicalize(&a.data)?,
        "prompt": cfg.prompt,
        "train": tc,
        "config_hash": format!("{:016x}", model.hash()),
    });
    fs::write(meta_path(&a.ckpt), serde_json::to_string_pretty(&meta)?)?;
    println!("wrote {} and {}", a.ckpt.display(), curve_path.display());
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let ck = training::load_checkpoint(&a.ckpt)?;
    let model: ModelConfig = ck.config;
    let meta: serde_json::Value = match fs::read_to_string(meta_path(&a.ckpt)) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => json!({}),
    };
    let from_meta = |key: &str| meta.get(key).and_then(|v| v.as_str()).map(PathBuf::from);
    let cb_path = a
        .codebook
        .clone()
        .or_else(|| from_meta("codebook"))
        .context("no --codebook given and none recorded next to the checkpoint")?;
    let cb = Codebook::load(&cb_path)?;
    if cb.size() != model.image_codes {
        bail!("codebook has {} codes, checkpoint expects {}", cb.size(), model.image_codes);
    }
    let trained_kind: PromptSetting = meta
        .pointer("/prompt/kind")
        .and_then(|v| v.as_str())
        .map(str::parse)
        .transpose()?
        .unwrap_or(if model.prompt_len == 0 { PromptSetting::None } else { PromptSetting::Universal });
    let kind: PromptSetting = match &a.prompt {
        Some(s) => s.parse()?,
        None => trained_kind,
    };
    let sampler = SamplerConfig {
        top_k: a.top_k,
        top_p: a.top_p,
        temperature: a.temp,
        cfg_scale: a.cfg,
        greedy: false,
        seed: a.seed,
    };
    sampler.validate()?;
    if a.class >= model.classes {
        bail!("class {} out of range ({} classes)", a.class, model.classes);
    }
    let prompt_len = match model.layout {
        vfgen_core::prompts::LayoutMode::PromptFirst => model.prompt_len,
        vfgen_core::prompts::LayoutMode::FullViewAfterGeneration => 0,
    };
    let needs_data = prompt_len > 0 && matches!(kind, PromptSetting::Class | PromptSetting::Mixture);
    let data = if needs_data {
        let dir = a.data.clone().or_else(|| from_meta("data")).context("class prompts need --data")?;
        let (images, labels) = harness::load_dataset(&dir)?;
        TokenDataset::from_images(&images, &labels, model.classes, &cb)?
    } else {
        TokenDataset::new(Vec::new(), Vec::new(), model.classes)?
    };
    let blank = (kind == PromptSetting::Blank)
        .then(|| vfgen_core::prompts::make_blank_prompt(&cb, prompt_len, (model.grid_h, model.grid_w)).map(|p| p.tokens))
        .transpose()?;
    let pc = training::PromptConfig {
        kind: if prompt_len == 0 { PromptSetting::None } else { kind },
        length: prompt_len,
        ..Default::default()
    };
    let src = PromptSource::new(&pc, model.image_codes, &data, blank)?;
    let reqs = (0..a.n)
        .map(|i| {
            let mut r = rng::substream(a.seed, rng::Stream::Prompt, a.class as u64, i as u64);
            Ok(GenRequest {
                class: a.class,
                prompt: src.prompt(a.class, None, &mut r)?,
                seed: rng::mix(a.seed ^ rng::mix(i as u64)),
            })
        })
        .collect::<vfgen_core::Result<Vec<_>>>()?;
    let out = generate_batch(&ck.params, &model, &reqs, &sampler, Guidance::Auto)?;
    fs::create_dir_all(&a.out)?;
    let ext = if a.format == "ppm" { "ppm" } else { "png" };
    let mut manifest = format!(
        "checkpoint {}\nconfig_hash {:016x}\nclass {}\nprompt {}\nprompt_len {}\ncfg {}\ntop_k {}\ntop_p {}\ntemperature {}\nseed {}\n",
        a.ckpt.display(),
        model.hash(),
        a.class,
        pc.kind,
        prompt_len,
        a.cfg,
        a.top_k,
        a.top_p,
        a.temp,
        a.seed
    );
    let mut tiles = Vec::new();
    for (i, (g, r)) in out.iter().zip(&reqs).enumerate() {
        let img = decode(&g.grid, &cb)?;
        let name = format!("sample_{i:05}.{ext}");
        img.save(&a.out.join(&name))?;
        manifest.push_str(&format!("{name} seed={} class={}\n", r.seed, r.class));
        tiles.push(img);
    }
    let cols = (a.n as f64).sqrt().ceil().max(1.0) as usize;
    if !tiles.is_empty() {
        Image::montage(&tiles, cols)?.save(&a.out.join(format!("montage.{ext}")))?;
    }
    fs::write(a.out.join("manifest.txt"), manifest)?;
    println!("wrote {} samples to {}", out.len(), a.out.display());
    Ok(())
}

fn eval(real: &Path, gen: &Path, out: &Path, k: usize) -> Result<()> {
    let r = harness::load_image_dir(real)?;
    let g = harness::load_image_dir(gen)?;
    let fr = metrics::embed_all(&r)?;
    let fg = metrics::embed_all(&g)?;
    let frechet = metrics::frechet_distance(&metrics::fit_gaussian(&fr)?, &metrics::fit_gaussian(&fg)?)?;
    let (precision, recall) = metrics::knn_precision_recall(&fr, &fg, k)?;
    let report = json!({
        "frechet": frechet,
        "precision": precision,
        "recall": recall,
        "n_real": r.len(),
        "n_gen": g.len(),
        "feature_version": metrics::FEATURE_VERSION,
    });
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!("{report}");
    Ok(())
}

fn theory(cmd: TheoryCmd) -> Result<bool> {
    match cmd {
        TheoryCmd::Dp { len, seed, chains } => {
            let rows = theorylab::dp_check(chains, len, &mut rng::seeded(seed), 1e-12)?;
            println!("chain\tlen\tprompt_len\trecursion_err\tratio_err\tpass");
            for r in &rows {
                println!("{}\t{}\t{}\t{:.3e}\t{:.3e}\t{}", r.chain, r.len, r.prompt_len, r.recursion_err, r.ratio_err, r.pass);
            }
            let ok = rows.iter().all(|r| r.pass);
            println!("summary\tdp\t{}\t{}", rows.len(), if ok { "pass" } else { "fail" });
            Ok(ok)
        }
        TheoryCmd::Entropy { sources, seed, max_alpha } => {
            let rows = theorylab::entropy_check(sources, max_alpha, &mut rng::seeded(seed), 1e-12)?;
            println!("source\ts_size\tx_size\tresidual\tgap\tmutual_info\tpass");
            for r in &rows {
                println!(
                    "{}\t{}\t{}\t{:.3e}\t{:.6e}\t{:.6e}\t{}",
                    r.source, r.s_size, r.x_size, r.residual, r.gap, r.mutual_info, r.pass
                );
            }
            let ok = rows.iter().all(|r| r.pass);
            println!("summary\tentropy\t{}\t{}", rows.len(), if ok { "pass" } else { "fail" });
            Ok(ok)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Dataset {
            cmd:
                DatasetCmd::Gen {
                    out,
                    size,
                    classes,
                    per_class,
                    noise,
                    no_jitter,
                    seed,
                },
        } => {
            let spec = DatasetSpec {
                image_size: size,
                classes,
                per_class,
                noise,
                jitter: !no_jitter,
                seed,
            };
            let (images, _) = harness::gen_dataset(&spec, &out)?;
            fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
            println!("wrote {} images to {}", images.len(), out.display());
        }
        Cmd::Tokenizer {
            cmd:
                TokenizerCmd::Fit {
                    data,
                    out,
                    codes,
                    patch,
                    iters,
                    fit_images,
                    seed,
                    tokens,
                },
        } => {
            let (images, labels) = harness::load_dataset(&data)?;
            let mut cfg = ExperimentConfig::default();
            cfg.tokenizer = harness::TokenizerSpec {
                codes,
                patch_size: patch,
                iters,
                fit_images,
                seed,
            };
            let cb = harness::lab::fit_tokenizer(&cfg, &images)?;
            cb.save(&out)?;
            let recon = harness::lab::reconstruct(&images, &cb)?;
            let mse = images.iter().zip(&recon).map(|(a, b)| a.mse(b)).sum::<vfgen_core::Result<f64>>()? / images.len() as f64;
            println!("codebook K={} p={} reconstruction mse {mse:.6}", cb.size(), cb.patch_size());
            if let Some(t) = tokens {
                let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
                TokenDataset::from_images(&images, &labels, classes, &cb)?.save(&t)?;
                println!("wrote {}", t.display());
            }
            println!("wrote {}", out.display());
        }
        Cmd::Train(a) => train(a)?,
        Cmd::Sample(a) => sample(a)?,
        Cmd::Eval { real, gen, out, k } => eval(&real, &gen, &out, k)?,
        Cmd::Theory { cmd } => return theory(cmd),
        Cmd::Ablate { cmd } => {
            let (exp, f): (ExpArgs, Box<dyn Fn(&Lab) -> vfgen_core::Result<harness::Report>>) = match cmd {
                AblateCmd::Prompts(e) => (e, Box::new(harness::run_ablation_prompts)),
                AblateCmd::Length { exp, lengths } => (exp, Box::new(move |l: &Lab| harness::run_ablation_length(l, &lengths))),
                AblateCmd::Variants(e) => (e, Box::new(harness::run_ablation_variants)),
                AblateCmd::Cfg { exp, scales } => (exp, Box::new(move |l: &Lab| harness::run_ablation_cfg(l, &scales))),
            };
            let cfg = load_config(&exp)?;
            let dir = cfg.out_dir.clone();
            let lab = Lab::prepare(cfg)?;
            finish(f(&lab)?, &dir)?;
        }
        Cmd::Convergence { exp, check_reduction } => {
            let cfg = load_config(&exp)?;
            let dir = cfg.out_dir.clone();
            let lab = Lab::prepare(cfg)?;
            finish(harness::run_convergence(&lab, check_reduction)?, &dir)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<vfgen_core::Error>().map(|e| e.code()).unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
