//! Boundary-guided camouflaged object detection, scaled down to run on a desk.
//!
//! The crate trains and evaluates a small encoder/decoder segmentation
//! network whose decoder is organized around an explicit boundary signal:
//! multi-scale features are enhanced by factorized residual branches
//! ([`rfem`]), distilled into an edge attention map ([`bam`]), and fused
//! back into a top-down cascade ([`cbfm`]). Everything runs on a
//! self-contained reverse-mode autodiff engine ([`tape`]) over `ndarray`,
//! in `f32` or `f64`, single-threaded and bitwise deterministic.
//!
//! What lives where:
//!
//! - [`tape`] — define-by-run computation graph: convolution (im2col +
//!   GEMM), batch norm, bilinear resizing, attention/gating primitives,
//!   losses' scalar algebra, and the backward pass, plus finite-difference
//!   helpers used heavily by the test suites.
//! - [`nn`] — layer structs (conv, batch norm, conv-BN-ReLU blocks),
//!   deterministic initialization, and the named-parameter visitor that
//!   the optimizer and checkpoints are built on.
//! - [`backbone`], [`rfem`], [`bam`], [`cbfm`], [`network`] — the model:
//!   a four-level pyramid encoder (a compact built-in one, plus a slot
//!   for an externally provided full-scale encoder) and the decoder
//!   modules, assembled into five ablation variants `M1`–`M5`.
//! - [`losses`] — boundary-weighted BCE + IoU for mask outputs, Dice for
//!   edge outputs, and the combined training objective.
//! - [`metrics`] — structure measure, enhanced-alignment measure,
//!   weighted F-measure and MAE, plus folder-level evaluation reports.
//! - [`data`] — dataset loading, edge ground-truth derivation, and a
//!   seeded synthetic camouflage generator so training needs no assets.
//! - [`trainer`] — Adam, the training loop, checkpointing, evaluation,
//!   and the ablation driver that compares variants on a shared dataset.
//! - [`config`], [`cli`] — TOML run configuration and the `codnet`
//!   command-line tool (`train`, `eval`, `predict`, `ablate`, `synth`,
//!   `metrics`).

pub mod backbone;
pub mod bam;
pub mod cbfm;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod rfem;
pub mod scalar;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
