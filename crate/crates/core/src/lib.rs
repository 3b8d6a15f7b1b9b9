//! Prompt-prefixed autoregressive image generation at desk scale.
//!
//! The crate covers the full pipeline: a k-means patch [`tokenizer`],
//! vision full-view [`prompts`], a decoder-only [`model`] with hand-derived
//! gradients, the [`training`] loop, guided [`sampling`], desk-scale
//! [`metrics`], exact-enumeration checks in [`theorylab`], and the
//! experiment [`harness`].

pub mod error;
pub mod float;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod model;
pub mod par;
pub mod prompts;
pub mod rng;
pub mod sampling;
pub mod theorylab;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
