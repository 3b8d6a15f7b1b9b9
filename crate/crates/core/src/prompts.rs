//! Vision full-view prompt construction and sequence assembly.
//!
//! A training or inference sequence is `[condition | prompt | image]`
//! (or `[condition | image | prompt]` for the after-generation control).
//! Inputs and targets are the usual one-token shift of that sequence.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::rng::Rng;
use crate::tokenizer::{encode, raster_flatten, Codebook, TokenGrid};

/// Where a concrete prompt came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Class,
    Universal,
    Blank,
}

/// The `prompt.kind` setting: which prompts a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSetting {
    None,
    Class,
    Universal,
    Blank,
    Mixture,
}

impl PromptSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptSetting::None => "none",
            PromptSetting::Class => "class",
            PromptSetting::Universal => "universal",
            PromptSetting::Blank => "blank",
            PromptSetting::Mixture => "mixture",
        }
    }
}

impl fmt::Display for PromptSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => PromptSetting::None,
            "class" => PromptSetting::Class,
            "universal" => PromptSetting::Universal,
            "blank" => PromptSetting::Blank,
            "mixture" => PromptSetting::Mixture,
            _ => return Err(Error::Config(format!("unknown prompt kind {s:?}"))),
        })
    }
}

/// `prompt.loss`: whether prompt targets contribute to the cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPolicy {
    #[default]
    Full,
    ImageOnly,
}

impl LossPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            LossPolicy::Full => "full",
            LossPolicy::ImageOnly => "image_only",
        }
    }
}

impl FromStr for LossPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossPolicy::Full),
            "image_only" => Ok(LossPolicy::ImageOnly),
            _ => Err(Error::Config(format!("unknown prompt.loss {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    #[default]
    PromptFirst,
    FullViewAfterGeneration,
}

impl LayoutMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LayoutMode::PromptFirst => "prompt_first",
            LayoutMode::FullViewAfterGeneration => "full_view_after_generation",
        }
    }
}

impl FromStr for LayoutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt_first" => Ok(LayoutMode::PromptFirst),
            "full_view_after_generation" | "after_generation" => {
                Ok(LayoutMode::FullViewAfterGeneration)
            }
            _ => Err(Error::Config(format!("unknown layout mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VfPrompt {
    pub kind: PromptKind,
    pub tokens: Vec<u32>,
}

impl VfPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-class member lists, built once per dataset.
#[derive(Clone, Debug)]
pub struct ClassIndex {
    members: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn new(labels: &[u16], classes: usize) -> Self {
        let mut members = vec![Vec::new(); classes];
        for (i, &c) in labels.iter().enumerate() {
            if (c as usize) < classes {
                members[c as usize].push(i);
            }
        }
        Self { members }
    }

    pub fn members(&self, class: usize) -> &[usize] {
        self.members.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Uniformly picks a member of `class` other than `exclude`.
    pub fn pick(&self, class: usize, exclude: Option<usize>, rng: &mut Rng) -> Result<usize> {
        let m = self.members(class);
        let excluded = exclude.is_some_and(|e| m.contains(&e));
        let needed = if exclude.is_some() { 2 } else { 1 };
        if m.len() < needed || (m.len() == 1 && excluded) {
            return Err(Error::InsufficientClassData {
                class,
                needed,
                got: m.len(),
            });
        }
        if excluded {
            let e = exclude.unwrap();
            let j = rng.random_range(0..m.len() - 1);
            let pos = m.iter().position(|&x| x == e).unwrap();
            Ok(m[if j >= pos { j + 1 } else { j }])
        } else {
            Ok(m[rng.random_range(0..m.len())])
        }
    }
}

fn truncate_to(tokens: Vec<u32>, k: usize) -> Result<Vec<u32>> {
    ensure!(
        tokens.len() >= k,
        "prompt source has {} tokens, prompt length is {k}",
        tokens.len()
    );
    let mut tokens = tokens;
    tokens.truncate(k);
    Ok(tokens)
}

/// Class prompt from pre-tokenized grids: tokens of a random same-class
/// image (not `exclude`), truncated in raster order to `k`.
pub fn make_class_prompt(
    grids: &[TokenGrid],
    index: &ClassIndex,
    class_id: usize,
    exclude: Option<usize>,
    k: usize,
    rng: &mut Rng,
) -> Result<VfPrompt> {
    let src = index.pick(class_id, exclude, rng)?;
    Ok(VfPrompt {
        kind: PromptKind::Class,
        tokens: truncate_to(raster_flatten(&grids[src]), k)?,
    })
}

/// Class prompt from raw images, encoding the selected image.
pub fn make_class_prompt_from_images(
    images: &[Image],
    index: &ClassIndex,
    class_id: usize,
    exclude: Option<usize>,
    cb: &Codebook,
    k: usize,
    rng: &mut Rng,
) -> Result<VfPrompt> {
    let src = index.pick(class_id, exclude, rng)?;
    let grid = encode(&images[src], cb)?;
    Ok(VfPrompt {
        kind: PromptKind::Class,
        tokens: truncate_to(raster_flatten(&grid), k)?,
    })
}

/// `k` i.i.d. uniform codebook indices.
pub fn make_universal_prompt(codebook_size: usize, k: usize, rng: &mut Rng) -> Result<VfPrompt> {
    ensure!(codebook_size >= 1, "codebook size must be >= 1");
    let tokens = (0..k)
        .map(|_| rng.random_range(0..codebook_size as u32))
        .collect();
    Ok(VfPrompt {
        kind: PromptKind::Universal,
        tokens,
    })
}

/// Tokens of an all-black image.
pub fn make_blank_prompt(cb: &Codebook, k: usize, grid_shape: (usize, usize)) -> Result<VfPrompt> {
    let (h, w) = grid_shape;
    ensure!(k == h * w, "blank prompt length {k} != grid size {h}x{w}");
    let p = cb.patch_size();
    let grid = encode(&Image::black(h * p, w * p), cb)?;
    Ok(VfPrompt {
        kind: PromptKind::Blank,
        tokens: raster_flatten(&grid),
    })
}

/// Picks class with probability `p_class`, otherwise universal.
pub fn choose_prompt_mixture(p_class: f64, rng: &mut Rng) -> PromptKind {
    if rng.random::<f64>() < p_class {
        PromptKind::Class
    } else {
        PromptKind::Universal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub mode: LayoutMode,
    pub prompt_len: usize,
    pub image_len: usize,
}

impl SequenceLayout {
    pub fn new(mode: LayoutMode, prompt_len: usize, image_len: usize) -> Self {
        Self {
            mode,
            prompt_len,
            image_len,
        }
    }

    pub fn total_len(&self) -> usize {
        1 + self.prompt_len + self.image_len
    }

    pub fn condition_span(&self) -> Range<usize> {
        0..1
    }

    pub fn prompt_span(&self) -> Range<usize> {
        match self.mode {
            LayoutMode::PromptFirst => 1..1 + self.prompt_len,
            LayoutMode::FullViewAfterGeneration => {
                1 + self.image_len..1 + self.image_len + self.prompt_len
            }
        }
    }

    pub fn image_span(&self) -> Range<usize> {
        match self.mode {
            LayoutMode::PromptFirst => 1 + self.prompt_len..self.total_len(),
            LayoutMode::FullViewAfterGeneration => 1..1 + self.image_len,
        }
    }

    /// Target positions (shifted by one) whose target is an image token.
    pub fn image_target_mask(&self) -> LossMask {
        let span = self.image_span();
        LossMask(
            (1..self.total_len())
                .map(|s| span.contains(&s))
                .collect(),
        )
    }

    pub fn loss_mask(&self, policy: LossPolicy) -> LossMask {
        match policy {
            LossPolicy::Full => LossMask(vec![true; self.total_len() - 1]),
            LossPolicy::ImageOnly => {
                let prompt = self.prompt_span();
                LossMask((1..self.total_len()).map(|s| !prompt.contains(&s)).collect())
            }
        }
    }
}

/// One boolean per shifted target position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledSequence {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub mask: LossMask,
    pub layout: SequenceLayout,
}

pub fn assemble_sequence(
    condition_token: u32,
    prompt: &[u32],
    image_tokens: &[u32],
    mode: LayoutMode,
    policy: LossPolicy,
) -> Result<AssembledSequence> {
    ensure!(!image_tokens.is_empty(), "image token sequence is empty");
    let layout = SequenceLayout::new(mode, prompt.len(), image_tokens.len());
    let mut seq = Vec::with_capacity(layout.total_len());
    seq.push(condition_token);
    match mode {
        LayoutMode::PromptFirst => {
            seq.extend_from_slice(prompt);
            seq.extend_from_slice(image_tokens);
        }
        LayoutMode::FullViewAfterGeneration => {
            seq.extend_from_slice(image_tokens);
            seq.extend_from_slice(prompt);
        }
    }
    let target = seq[1..].to_vec();
    seq.pop();
    Ok(AssembledSequence {
        input: seq,
        target,
        mask: layout.loss_mask(policy),
        layout,
    })
}
