//! Shared experiment state: data, codebook, reference features and a cache
//! of trained models keyed by training setup and seed.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::{self, DatasetSpec};
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::metrics::{self, FeatureStats};
use crate::model::{fnv1a64, ModelConfig, Params};
use crate::par;
use crate::prompts::{make_blank_prompt, LayoutMode, LossPolicy, PromptSetting};
use crate::rng::{self, mix, Stream};
use crate::sampling::{generate_batch, GenRequest, Guidance, SamplerConfig};
use crate::tokenizer::{decode, encode, extract_patches, fit_codebook, Codebook, TokenGrid};
use crate::training::{CurvePoint, PromptConfig, PromptSource, TokenDataset, TrainConfig, Trainer};

/// A training setup: prompt kind and length, layout and loss policy.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Setup {
    pub prompt: PromptSetting,
    pub length: usize,
    pub layout: LayoutMode,
    pub loss: LossPolicy,
}

impl Setup {
    pub fn baseline() -> Self {
        Self {
            prompt: PromptSetting::None,
            length: 0,
            layout: LayoutMode::PromptFirst,
            loss: LossPolicy::Full,
        }
    }

    pub fn prompted(prompt: PromptSetting, length: usize, loss: LossPolicy) -> Self {
        Self {
            prompt,
            length,
            layout: LayoutMode::PromptFirst,
            loss,
        }
    }

    pub fn key(&self) -> String {
        format!("{}-{}-{}-{}", self.prompt, self.length, self.layout.as_str(), self.loss.as_str())
    }
}

pub struct TrainedModel {
    pub setup: Setup,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Params<f32>,
    pub curve: Vec<CurvePoint>,
}

impl TrainedModel {
    /// Mean image-masked training CE over the last `window` steps.
    pub fn final_image_ce(&self, window: usize) -> f64 {
        let n = self.curve.len();
        let tail = &self.curve[n.saturating_sub(window.max(1))..];
        tail.iter().map(|p| p.image_loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub perplexity: f64,
}

pub struct Lab {
    pub cfg: ExperimentConfig,
    pub images: Vec<Image>,
    pub labels: Vec<u16>,
    pub codebook: Codebook,
    pub train_data: TokenDataset,
    pub heldout: TokenDataset,
    /// Tokens of the all-black image.
    pub blank: Vec<u32>,
    /// Features of tokenizer reconstructions of the training images.
    pub real_features: Vec<Vec<f64>>,
    pub real_stats: FeatureStats,
    /// FNV-1a over the resolved config, codebook and token data.
    pub content_hash: u64,
    cache: Mutex<HashMap<(String, u64), Slot>>,
}

/// One cache entry; its own lock keeps concurrent callers from training the
/// same model twice.
type Slot = Arc<Mutex<Option<Arc<TrainedModel>>>>;

/// Tokenizer reconstructions, the images the generator can express.
pub fn reconstruct(images: &[Image], cb: &Codebook) -> Result<Vec<Image>> {
    par::map_slice(images, |img| decode(&encode(img, cb)?, cb))
        .into_iter()
        .collect()
}

pub fn fit_tokenizer(cfg: &ExperimentConfig, images: &[Image]) -> Result<Codebook> {
    let t = &cfg.tokenizer;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng::stream(t.seed, Stream::KMeans));
    let mut patches = Vec::new();
    for &i in order.iter().take(t.fit_images.max(1)) {
        patches.extend(extract_patches(&images[i], t.patch_size)?);
    }
    fit_codebook(&patches, t.patch_size, t.codes, t.iters, t.seed)
}

impl Lab {
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (images, labels) = match &cfg.data_dir {
            Some(d) => dataset::load_dataset(d)?,
            None => dataset::generate(&cfg.dataset)?,
        };
        let classes = cfg.dataset.classes;
        let held_spec = DatasetSpec {
            per_class: cfg.metrics.heldout_per_class.max(1),
            seed: mix(cfg.dataset.seed ^ 0x4845_4c44),
            ..cfg.dataset.clone()
        };
        let (held_images, held_labels) = dataset::generate(&held_spec)?;
        let codebook = fit_tokenizer(&cfg, &images)?;
        let train_data = TokenDataset::from_images(&images, &labels, classes, &codebook)?;
        let heldout = TokenDataset::from_images(&held_images, &held_labels, classes, &codebook)?;
        let (gh, gw) = train_data.grid_shape().unwrap_or((0, 0));
        let blank = make_blank_prompt(&codebook, gh * gw, (gh, gw))?.tokens;
        let real_features = metrics::embed_all(&reconstruct(&images, &codebook)?)?;
        let real_stats = metrics::fit_gaussian(&real_features)?;

        let mut bytes = serde_json::to_vec(&cfg.to_json())?;
        bytes.extend(codebook.vectors().iter().flat_map(|v| v.to_le_bytes()));
        for (g, l) in train_data.grids.iter().zip(&train_data.labels) {
            bytes.extend(l.to_le_bytes());
            bytes.extend(g.ids().iter().flat_map(|v| v.to_le_bytes()));
        }
        let content_hash = fnv1a64(&bytes);
        Ok(Self {
            cfg,
            images,
            labels,
            codebook,
            train_data,
            heldout,
            blank,
            real_features,
            real_stats,
            content_hash,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn model_config(&self, setup: &Setup) -> Result<ModelConfig> {
        let mut m = self.cfg.base_model()?;
        m.prompt_len = setup.length;
        m.layout = setup.layout;
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self, setup: &Setup, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            prompt: PromptConfig {
                kind: setup.prompt,
                length: setup.length,
                loss: setup.loss,
                mixture_class_prob: self.cfg.prompt.mixture_class_prob,
            },
            ..self.cfg.train.clone()
        }
    }

    fn blank_for(&self, setting: PromptSetting) -> Option<Vec<u32>> {
        (setting == PromptSetting::Blank).then(|| self.blank.clone())
    }

    /// Trains (or fetches from the cache) the model for `setup` and `seed`.
    pub fn train(&self, setup: &Setup, seed: u64) -> Result<Arc<TrainedModel>> {
        let slot = self
            .cache
            .lock()
            .unwrap()
            .entry((setup.key(), seed))
            .or_default()
            .clone();
        let mut slot = slot.lock().unwrap();
        if let Some(m) = slot.as_ref() {
            return Ok(m.clone());
        }
        let model = self.model_config(setup)?;
        let train = self.train_config(setup, seed);
        let mut t = Trainer::new(model.clone(), train.clone(), &self.train_data, self.blank_for(setup.prompt))?;
        let curve = t.run(train.total_steps(self.train_data.len()), |_| {})?;
        let trained = Arc::new(TrainedModel {
            setup: setup.clone(),
            seed,
            model,
            train,
            params: t.params,
            curve,
        });
        *slot = Some(trained.clone());
        Ok(trained)
    }

    pub fn prompt_source(&self, setting: PromptSetting, length: usize) -> Result<PromptSource<'_>> {
        let pc = PromptConfig {
            kind: if length == 0 { PromptSetting::None } else { setting },
            length,
            loss: LossPolicy::Full,
            mixture_class_prob: self.cfg.prompt.mixture_class_prob,
        };
        PromptSource::new(&pc, self.codebook.size(), &self.train_data, self.blank_for(setting))
    }

    /// Generation requests with classes cycling over `0..C`. Prompts come
    /// from the training split; one fresh prompt per image.
    pub fn requests(&self, m: &TrainedModel, infer: PromptSetting, n: usize, seed: u64) -> Result<Vec<GenRequest>> {
        let len = match m.model.layout {
            LayoutMode::PromptFirst => m.model.prompt_len,
            LayoutMode::FullViewAfterGeneration => 0,
        };
        let src = self.prompt_source(infer, len)?;
        (0..n)
            .map(|i| {
                let class = i % m.model.classes;
                let mut r = rng::substream(seed, Stream::Prompt, 1 << 40, i as u64);
                Ok(GenRequest {
                    class,
                    prompt: src.prompt(class, None, &mut r)?,
                    seed: mix(seed ^ mix(i as u64)),
                })
            })
            .collect()
    }

    pub fn generate(&self, m: &TrainedModel, infer: PromptSetting, sampler: &SamplerConfig, n: usize) -> Result<Vec<TokenGrid>> {
        let reqs = self.requests(m, infer, n, sampler.seed)?;
        Ok(generate_batch(&m.params, &m.model, &reqs, sampler, Guidance::Auto)?
            .into_iter()
            .map(|g| g.grid)
            .collect())
    }

    pub fn decode_all(&self, grids: &[TokenGrid]) -> Result<Vec<Image>> {
        par::map_slice(grids, |g| decode(g, &self.codebook)).into_iter().collect()
    }

    /// A class-balanced slice of the real features the same size as the
    /// generated set, for k-NN precision/recall.
    fn real_subset(&self, n: usize) -> Vec<Vec<f64>> {
        let c = self.cfg.dataset.classes;
        let per = self.train_data.len() / c;
        (0..n.min(self.train_data.len()))
            .map(|i| {
                let (class, j) = (i % c, i / c);
                self.real_features[class * per + j % per].clone()
            })
            .collect()
    }

    pub fn perplexity(&self, m: &TrainedModel, infer: PromptSetting) -> Result<f64> {
        let src = self.prompt_source(infer, m.model.prompt_len)?;
        metrics::perplexity(&m.params, &m.model, &self.heldout, &src, m.seed)
    }

    /// Desk-FID, precision/recall and held-out perplexity of one model.
    pub fn evaluate(&self, m: &TrainedModel, infer: PromptSetting, sampler: &SamplerConfig) -> Result<EvalMetrics> {
        let n = self.cfg.metrics.n_gen;
        ensure!(n > self.cfg.metrics.knn_k, "metrics.n_gen must exceed knn_k");
        let images = self.decode_all(&self.generate(m, infer, sampler, n)?)?;
        let feats = metrics::embed_all(&images)?;
        let stats = metrics::fit_gaussian(&feats)?;
        let frechet = metrics::frechet_distance(&self.real_stats, &stats)?;
        let (precision, recall) =
            metrics::knn_precision_recall(&self.real_subset(n), &feats, self.cfg.metrics.knn_k)?;
        Ok(EvalMetrics {
            frechet,
            precision,
            recall,
            perplexity: self.perplexity(m, infer)?,
        })
    }

    /// Sampler for `seed` at guidance `scale`, other settings from config.
    pub fn sampler(&self, seed: u64, scale: f64) -> SamplerConfig {
        SamplerConfig {
            seed,
            cfg_scale: scale,
            ..self.cfg.sampler.clone()
        }
    }

    pub fn full_length(&self) -> usize {
        self.cfg.base_model().map(|m| m.image_len()).unwrap_or(0)
    }
}
