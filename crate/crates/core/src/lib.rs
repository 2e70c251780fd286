//! Desk-scale laboratory for cascaded prompt learning on a dual-encoder
//! vision-language model.
//!
//! The pipeline, end to end:
//!
//! 1. [`domain`] forges procedural image domains (seeded sinusoid textures
//!    with per-domain rendering styles) and [`tokenizer`] supplies the closed
//!    vocabulary and caption templates.
//! 2. [`pretrain`] trains a larger teacher and a smaller student
//!    ([`model::MiniClip`]) from scratch with a contrastive objective, giving
//!    both a zero-shot classifier head.
//! 3. [`boost`] (phase one) distills *boosting* prompt tokens for the student
//!    from the teacher's logits over unlabeled images, then freezes them.
//! 4. [`adapt`] (phase two) tunes *adapting* prompt tokens on few-shot base
//!    classes, cascaded around the frozen boosting prompts ([`prompts`]),
//!    under four baseline layout strategies.
//! 5. [`eval`] measures base/novel/harmonic-mean accuracy and zero-shot
//!    transfer; [`experiment`] drives full runs, ablation grids, and reports.
//!
//! Everything is deterministic under `(config, seed)` and runs on a single
//! CPU core in minutes.

pub mod adapt;
pub mod boost;
pub mod domain;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod pretrain;
pub mod prompts;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};
