//! Few-shot task-incremental continual learning on a frozen 3D UNet backbone
//! with per-task low-rank adapters, the standard continual-learning baselines
//! (sequential linear probing, full fine-tuning, EWC, LwF, replay), synthetic
//! stand-in tasks, and a metrics/statistics harness.
//!
//! The crate is organized bottom-up:
//!
//! - [`rng`]: seeded SplitMix64 streams and content hashing
//! - [`tensor`]: dense f64 tensors, 3D conv kernels, reverse-mode autodiff,
//!   losses
//! - [`backbone`]: parameter store, binary checkpoints, the small 3D UNet
//! - [`optim`]: Adam with bias correction over named parameters
//! - [`lora`]: low-rank adapters injected as 1x1x1 conv branches
//! - [`synth`]: seeded synthetic segmentation/regression datasets and
//!   preprocessing
//! - [`metrics`]: Dice/MAE, backward transfer, statistical tests
//! - [`continual`]: the task-sequence training engine and baselines
//! - [`harness`]: experiment grids, tables, and resource accounting
//!
//! With the default `parallel` feature, forward convolutions, batch
//! evaluation, and independent grid cells run on rayon; results are
//! bit-identical to the sequential build because parallelism never reorders
//! a floating-point reduction.

pub mod backbone;
pub mod continual;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
