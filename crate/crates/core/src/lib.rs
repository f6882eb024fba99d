//! Prompt-conditioned encoder-decoder for visual recognition and reasoning.
//!
//! Everything a task produces — bounding boxes, object counts, grid cells,
//! causal answers — is expressed as a token sequence decoded autoregressively
//! from a small set of per-frame "slot" embeddings. The crate bundles:
//!
//! - [`tensor`] / [`autograd`]: a dense-tensor engine with reverse-mode
//!   differentiation and the layer primitives the model needs.
//! - [`optim`]: Adam with decoupled weight decay and a linear
//!   warmup/decay schedule.
//! - [`codec`]: the shared token vocabulary and the mapping between
//!   structured task data and token sequences.
//! - [`worldgen`]: deterministic synthetic generators for the shell-game
//!   tracking benchmark and the blicket causal-inference benchmark, with
//!   exact oracle labels.
//! - [`model`]: the per-frame encoder, slot bottleneck, and autoregressive
//!   decoder.
//! - [`trainer`]: multi-task schedules, the training loop, and evaluation
//!   metrics (top-1, per-question-type accuracy, AP50).
//! - [`probe`]: frozen-encoder probing with per-slot detection reports and
//!   overlay rendering.
//! - [`checkpoint`]: deterministic tensor-container serialization.
//!
//! Data-parallel inner loops (batch kernels, dataset generation, evaluation)
//! run on rayon when the default `parallel` feature is enabled and fall back
//! to sequential iteration otherwise; results are bitwise identical either
//! way because every output element is reduced in a fixed order.

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod par;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod worldgen;
