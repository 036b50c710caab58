//! Lifelong representation learning with a plastic working model and a slowly
//! refreshed memory model.
//!
//! The crate covers the full loop on synthetic multi-domain identity streams:
//!
//! - [`tensor`]: float64 tensors with reverse-mode autodiff and Adam.
//! - [`models`]: MLP extractor, expanding classifier, working/memory pair and
//!   parameter averaging.
//! - [`losses`]: cross-entropy, batch-hard triplet, JS distillation and the
//!   rehearsal/refreshing composites.
//! - [`data`]: stream generation, PK sampling and exemplar memory.
//! - [`trainer`]: the per-batch rehearsal-then-refreshing loop and schedules.
//! - [`evaluation`]: retrieval metrics and lifelong transfer metrics.
//! - [`baselines`]: naive fine-tuning, frozen-teacher rehearsal, joint training.
//! - [`experiment`]: config files, result directories and reports.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod baselines;
pub mod data;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod trainer;
