//! Prompt-prefixed next-token training.

pub mod checkpoint;
pub mod data;
pub mod optim;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
pub use data::{Batcher, TokenDataset};
pub use optim::{adamw_step, clip_grad_norm, cross_entropy, global_norm, AdamWConfig, OptimState};

use crate::error::{ensure, Error, Result};
use crate::model::{backward, forward_with_cache, DropoutMode, ModelConfig, Params, PositionMap};
use crate::prompts::{
    assemble_sequence, choose_prompt_mixture, make_class_prompt, make_universal_prompt, AssembledSequence, ClassIndex,
    LossPolicy, PromptKind, PromptSetting,
};
use crate::rng::{self, Rng, Stream};
use crate::tokenizer::raster_flatten;
use crate::float::Float;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub kind: PromptSetting,
    pub length: usize,
    pub loss: LossPolicy,
    /// Probability of a class prompt under `mixture`.
    pub mixture_class_prob: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            kind: PromptSetting::None,
            length: 0,
            loss: LossPolicy::Full,
            mixture_class_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub cond_dropout_prob: f64,
    pub batch_size: usize,
    /// Used when `steps` is zero.
    pub epochs: usize,
    pub steps: usize,
    /// Linear warmup length; zero disables it.
    pub warmup_steps: usize,
    pub seed: u64,
    pub prompt: PromptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
            dropout: 0.1,
            cond_dropout_prob: 0.1,
            batch_size: 16,
            epochs: 1,
            steps: 0,
            warmup_steps: 0,
            seed: 0,
            prompt: PromptConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return bad(format!("cond_dropout_prob must lie in [0, 1], got {}", self.cond_dropout_prob));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.prompt.mixture_class_prob) {
            return bad("mixture_class_prob must lie in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.grad_clip <= 0.0 {
            return bad("grad_clip must be > 0".into());
        }
        if self.prompt.kind == PromptSetting::None && self.prompt.length != 0 {
            return bad("prompt.kind=none requires prompt.length=0".into());
        }
        Ok(())
    }

    /// Total optimizer steps: `steps`, or whole epochs over `n` examples.
    pub fn total_steps(&self, n: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * n.div_ceil(self.batch_size)
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    fn adamw(&self, step: usize) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr_at(step),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Replaces the condition token by `null` with probability `prob`.
pub fn cfg_condition_dropout(token: u32, null: u32, prob: f64, rng: &mut Rng) -> u32 {
    if prob >= 1.0 || (prob > 0.0 && rng.random::<f64>() < prob) {
        null
    } else {
        token
    }
}

/// Draws VF prompts for a dataset under one prompt setting. Training
/// excludes the target image from class prompts; inference does not.
#[derive(Clone, Debug)]
pub struct PromptSource<'a> {
    setting: PromptSetting,
    length: usize,
    codes: usize,
    mixture_class_prob: f64,
    data: &'a TokenDataset,
    index: ClassIndex,
    blank: Option<Vec<u32>>,
}

impl<'a> PromptSource<'a> {
    /// `blank` holds the all-black image tokens and is required for the
    /// blank setting.
    pub fn new(
        prompt: &PromptConfig,
        codes: usize,
        data: &'a TokenDataset,
        blank: Option<Vec<u32>>,
    ) -> Result<Self> {
        if prompt.kind == PromptSetting::Blank {
            let b = blank
                .as_ref()
                .ok_or_else(|| Error::Config("blank prompts need the black-image tokens".into()))?;
            ensure!(b.len() == prompt.length, "blank prompt has {} tokens, prompt.length is {}", b.len(), prompt.length);
        }
        Ok(Self {
            setting: prompt.kind,
            length: prompt.length,
            codes,
            mixture_class_prob: prompt.mixture_class_prob,
            data,
            index: data.class_index(),
            blank,
        })
    }

    pub fn setting(&self) -> PromptSetting {
        self.setting
    }

    pub fn prompt(&self, class: usize, exclude: Option<usize>, rng: &mut Rng) -> Result<Vec<u32>> {
        let k = self.length;
        let kind = match self.setting {
            PromptSetting::None => return Ok(Vec::new()),
            PromptSetting::Blank => return Ok(self.blank.clone().unwrap_or_default()),
            PromptSetting::Class => PromptKind::Class,
            PromptSetting::Universal => PromptKind::Universal,
            PromptSetting::Mixture => choose_prompt_mixture(self.mixture_class_prob, rng),
        };
        let p = match kind {
            PromptKind::Class => make_class_prompt(&self.data.grids, &self.index, class, exclude, k, rng)?,
            _ => make_universal_prompt(self.codes, k, rng)?,
        };
        Ok(p.tokens)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Mean masked cross-entropy of the batch.
    pub loss: f64,
    /// Mean cross-entropy over image-token targets only.
    pub image_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Forward, masked CE, backward, clip and one AdamW update. The loss is the
/// mean over all masked positions of the batch. `batch_id` seeds the
/// dropout masks and is reported if the loss is not finite.
pub fn train_step<T: Float>(
    params: &mut Params<T>,
    state: &mut OptimState<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batch: &[AssembledSequence],
    batch_id: u64,
) -> Result<StepMetrics> {
    let (grads, m) = batch_gradients(params, model, cfg, batch, batch_id)?;
    let mut grads = grads;
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip)?;
    adamw_step(params, &grads, state, &cfg.adamw(batch_id as usize));
    Ok(StepMetrics { grad_norm, ..m })
}

/// Mean-loss gradients of a batch, reduced in example order.
pub fn batch_gradients<T: Float>(
    params: &Params<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batch: &[AssembledSequence],
    batch_id: u64,
) -> Result<(Params<T>, StepMetrics)> {
    ensure!(!batch.is_empty(), "empty batch");
    let positions = PositionMap::new(model);
    let total: usize = batch.iter().map(|s| s.mask.count()).sum();
    ensure!(total > 0, "batch {batch_id} has no active loss positions");
    let scale = 1.0 / total as f64;
    let vocab = model.vocab();

    let results = par::map_indexed(batch.len(), |i| -> Result<(Params<T>, f64, f64, usize)> {
        let seq = &batch[i];
        ensure!(
            seq.input.len() < positions.0.len() + 1,
            "sequence of length {} exceeds the model layout ({})",
            seq.input.len(),
            positions.0.len()
        );
        let mut drng = rng::substream(cfg.seed, Stream::Dropout, batch_id, i as u64);
        let mode = if cfg.dropout > 0.0 {
            DropoutMode::Train {
                rate: cfg.dropout,
                rng: &mut drng,
            }
        } else {
            DropoutMode::Eval
        };
        let (logits, cache) = forward_with_cache(params, model, &seq.input, positions.as_slice(), mode)?;
        let mut dlogits = vec![T::zero(); logits.len()];
        let (sum, _) = optim::masked_ce_sum(&logits, &seq.target, &seq.mask, vocab, Some((&mut dlogits, scale)))
            .map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    what: format!("loss at batch {batch_id}"),
                    detail: format!("example {i}: {detail}"),
                },
                e => e,
            })?;
        let img = seq.layout.image_target_mask();
        let (img_sum, img_n) = optim::masked_ce_sum(&logits, &seq.target, &img, vocab, None)?;
        let mut g = params.zeros_like();
        backward(params, model, &cache, &dlogits, &mut g);
        Ok((g, sum, img_sum, img_n))
    });

    let mut grads: Option<Params<T>> = None;
    let (mut loss, mut img_loss, mut img_n) = (0.0, 0.0, 0usize);
    for r in results {
        let (g, s, is, n) = r?;
        loss += s;
        img_loss += is;
        img_n += n;
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    let loss = loss / total as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: format!("loss at batch {batch_id}"),
            detail: format!("{loss}"),
        });
    }
    let metrics = StepMetrics {
        loss,
        image_loss: img_loss / img_n.max(1) as f64,
        grad_norm: 0.0,
    };
    Ok((grads.unwrap(), metrics))
}

/// Builds the training sequence for dataset item `item` placed at `slot`
/// of batch `batch_id`. Prompt and condition-dropout draws come from
/// per-(batch, slot) substreams so batches are reproducible in isolation.
pub fn training_example(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TokenDataset,
    prompts: &PromptSource,
    item: usize,
    batch_id: u64,
    slot: usize,
) -> Result<AssembledSequence> {
    let class = data.labels[item] as usize;
    let mut crng = rng::substream(cfg.seed, Stream::CondDropout, batch_id, slot as u64);
    let cond = cfg_condition_dropout(model.class_token(class), model.null_token(), cfg.cond_dropout_prob, &mut crng);
    let image = raster_flatten(&data.grids[item]);
    if prompts.setting() == PromptSetting::None {
        return classic_example(cond, &image);
    }
    let mut prng = rng::substream(cfg.seed, Stream::Prompt, batch_id, slot as u64);
    let prompt = prompts.prompt(class, Some(item), &mut prng)?;
    assemble_sequence(cond, &prompt, &image, model.layout, cfg.prompt.loss)
}

/// Plain class-conditional next-token sequence without any prompt span.
pub fn classic_example(cond: u32, image: &[u32]) -> Result<AssembledSequence> {
    ensure!(!image.is_empty(), "image token sequence is empty");
    let mut input = Vec::with_capacity(image.len());
    input.push(cond);
    input.extend_from_slice(&image[..image.len() - 1]);
    let layout = crate::prompts::SequenceLayout::new(crate::prompts::LayoutMode::PromptFirst, 0, image.len());
    Ok(AssembledSequence {
        input,
        target: image.to_vec(),
        mask: crate::prompts::LossMask(vec![true; image.len()]),
        layout,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub image_loss: f64,
    pub grad_norm: f64,
}

/// Owns parameters and optimizer state for one training run.
pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: Params<f32>,
    pub state: OptimState<f32>,
    data: &'a TokenDataset,
    prompts: PromptSource<'a>,
    batcher: Batcher,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: ModelConfig,
        cfg: TrainConfig,
        data: &'a TokenDataset,
        blank: Option<Vec<u32>>,
    ) -> Result<Self> {
        let params = Params::init(&model, cfg.seed)?;
        Self::resume(model, cfg, data, blank, params, None)
    }

    pub fn resume(
        model: ModelConfig,
        cfg: TrainConfig,
        data: &'a TokenDataset,
        blank: Option<Vec<u32>>,
        params: Params<f32>,
        state: Option<OptimState<f32>>,
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        params.check_shapes(&model)?;
        ensure!(!data.is_empty(), "training set is empty");
        ensure!(
            model.prompt_len == cfg.prompt.length,
            "model prompt_len {} != prompt.length {}",
            model.prompt_len,
            cfg.prompt.length
        );
        ensure!(
            data.grid_shape() == Some((model.grid_h, model.grid_w)),
            "dataset grids {:?} do not match the model grid {}x{}",
            data.grid_shape(),
            model.grid_h,
            model.grid_w
        );
        ensure!(data.classes <= model.classes, "dataset has more classes than the model");
        let prompts = PromptSource::new(&cfg.prompt, model.image_codes, data, blank)?;
        let state = state.unwrap_or_else(|| OptimState::new(&params));
        let step = state.step as usize;
        let mut batcher = Batcher::new(data.len(), cfg.seed);
        for _ in 0..step {
            batcher.next_batch(cfg.batch_size);
        }
        Ok(Self {
            model,
            cfg,
            params,
            state,
            data,
            prompts,
            batcher,
            step,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn next_batch(&mut self) -> Result<Vec<AssembledSequence>> {
        let items = self.batcher.next_batch(self.cfg.batch_size);
        let id = self.step as u64;
        items
            .iter()
            .enumerate()
            .map(|(slot, &i)| training_example(&self.model, &self.cfg, self.data, &self.prompts, i, id, slot))
            .collect()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch()?;
        let m = train_step(
            &mut self.params,
            &mut self.state,
            &self.model,
            &self.cfg,
            &batch,
            self.step as u64,
        )?;
        self.step += 1;
        Ok(m)
    }

    /// Runs `steps` updates, recording every step's metrics.
    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(&CurvePoint)) -> Result<Vec<CurvePoint>> {
        let mut curve = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.step()?;
            let p = CurvePoint {
                step: self.step,
                loss: m.loss,
                image_loss: m.image_loss,
                grad_norm: m.grad_norm,
            };
            on_step(&p);
            curve.push(p);
        }
        Ok(curve)
    }
}
