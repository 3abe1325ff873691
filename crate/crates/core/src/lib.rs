//! Structured distillation of ReAct-style agent trajectories.
//!
//! Teacher episodes are split into reasoning and action spans, tokenized with
//! span-aligned masks, and used to train a small autoregressive student whose
//! loss is gated per span. A synthetic text world provides the teacher and
//! the closed-loop evaluation.

pub mod curriculum;
pub mod envkit;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod segmenter;
pub mod supervision;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
