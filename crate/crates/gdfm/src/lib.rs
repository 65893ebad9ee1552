//! Streaming conversion-rate modeling under delayed feedback.
//!
//! Conversions confirm hours or days after the click, so a model trained
//! only on matured labels always lags the distribution it is scored on.
//! This crate treats every intermediate user action as a noisy, earlier
//! channel of the eventual label: actions train the model through a proxy
//! likelihood, weighted by how informative (conditional entropy) and how
//! early (reveal delay) each channel is, and a slow label-trained copy of
//! the model regularizes the fast one.
//!
//! The pieces compose bottom-up:
//!
//! - [`core`]: click/observation event types and the stream CSV format.
//! - [`datagen`]: synthetic drifting worlds and conversion-log ingestion.
//! - [`model`]: the conversion and action models with manual gradients.
//! - [`losses`]: the training objectives, including the importance-weight
//!   baselines.
//! - [`weights`]: entropy and delay based per-action training weights.
//! - [`engine`]: the pretrain-then-stream protocol and experiment suite.
//! - [`metrics`]: AUC, PR-AUC, NLL, and hour-averaged reports.
//! - [`analysis`]: recovery from action marginals, contraction studies,
//!   and dataset diagnostics.
//! - [`cli`]: the `gdfm` binary's subcommands.
//!
//! Heavy loops run data-parallel by default through the `parallel`
//! feature; disabling it (or passing [`par::Parallelism::Sequential`])
//! uses the sequential path, which produces bit-identical results.

pub mod analysis;
pub mod cli;
pub mod core;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod weights;

pub use error::{Error, Result};
