//! All-mask segmentation with a tiny decoder-only transformer.
//!
//! The model first answers an instruction autoregressively. When it emits the
//! in-vocabulary `<seg>` token, the key/value cache at that point is reused
//! for a single non-autoregressive pass over one `[mask]` placeholder per
//! image patch, each fused with its patch feature and grid position. A hybrid
//! attention mask keeps the history causal while the placeholders attend to
//! each other bidirectionally, and a linear head classifies every patch as
//! foreground or background at once.
//!
//! Modules:
//! - [`world`], [`dataset`], [`vocab`]: procedural scenes, samples and the closed vocabulary
//! - [`attention_mask`]: causal and hybrid attention layouts
//! - [`model`]: parameters, embeddings, forward/backward, checkpoints
//! - [`pipeline`]: two-phase inference and the next-token baseline
//! - [`training`]: losses, optimiser, training loop and gradient checks
//! - [`refine`]: keypoint sampling and region-growing refinement
//! - [`metrics`]: IoU metrics, evaluation, ablations and benchmarks
//! - [`config`]: flat `key = value` run configuration

pub mod attention_mask;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod training;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
