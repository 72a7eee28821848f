//! Exit-aware distillation and convergence-based early-exit inference for
//! compact transformer text encoders.
//!
//! The crate bundles everything needed to train a small teacher on synthetic
//! data, distill students with and without the exit-quality objective, run
//! convergence-based early exit at inference time, and measure the result:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation and
//!   stop-gradient, rebuilt per forward pass (define-by-run).
//! - [`encoder`]: a transformer encoder exposing per-layer mean-pooled
//!   representations, plus checkpoint I/O.
//! - [`losses`]: the full distillation loss suite (final, intermediate,
//!   dual-target exit, contrastive, late-layer, redundancy).
//! - [`exit`]: convergence-based k-skip early exit, batched heterogeneous
//!   exit, and a patience-based baseline strategy.
//! - [`metrics`]: contraction ratios, directional convergence, exit
//!   distributions, NN@k overlap, Spearman, NDCG@k, Pareto sweeps.
//! - [`diagnostics`]: exit-incompatibility diagnostics and the deployment
//!   checklist.
//! - [`corpus`]: synthetic sentences and graded similarity pairs.
//! - [`train`]: Adam, LR/ramp schedules, teacher training, distillation,
//!   ablation and sensitivity sweeps.
//! - [`bench`]: wall-clock latency harness (warmup + measured iterations).
//! - [`experiment`]: end-to-end orchestration and report emission.
//!
//! Core math is generic over the scalar type via [`scalar::Scalar`]
//! (`f32`/`f64`). Training and gradient checking use `f64`; `f32` is meant
//! for the latency harness only.

pub mod bench;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod exit;
pub mod losses;
pub mod metrics;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{LeapError, Result};
pub use scalar::Scalar;

/// Default-precision aliases. Training, losses, and all gradient checking
/// run in these; the `f32` variants exist for the latency harness.
pub type TensorData64 = tensor::TensorData<f64>;
pub type Graph64 = tensor::Graph<f64>;
pub type EncoderModel64 = encoder::EncoderModel<f64>;
pub type LayerTrace64 = encoder::LayerTrace<f64>;

pub type TensorData32 = tensor::TensorData<f32>;
pub type EncoderModel32 = encoder::EncoderModel<f32>;
