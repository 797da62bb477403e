//! Cervical-vertebral-maturation staging from lateral cephalogram crops.
//!
//! The crate is organised as a pipeline:
//!
//! * [`dataset`] — manifest I/O, stage labels, stratified splitting, and a
//!   synthetic image generator for tests and benchmarks.
//! * [`pipeline`] — image primitives (crop, resize, translate, rotate,
//!   autocontrast), patch extraction, and the training-time augmentation
//!   policies. The evaluation path is a pure function of the input record.
//! * [`filters`] — the oriented directional-derivative filter bank that sits
//!   in front of every pod.
//! * [`nn`] — tensors, convolution/batch-norm/linear layers and their
//!   backward passes. Generic over `f32`/`f64`; training runs in `f32`, the
//!   finite-difference harness in `f64`.
//! * [`model`] — pod backbone and the multi-pod assembly with the age-aware
//!   fusion head.
//! * [`training`] — SGD with momentum and weight decay, the step learning-rate
//!   schedule, the epoch loop, run logs, and checkpoints.
//! * [`evaluation`] — per-record prediction, confusion matrices, and report
//!   export.
//!
//! Everything that draws randomness takes an explicit seeded RNG or derives
//! one from `(seed, epoch, record)` so results are independent of worker
//! scheduling. With the `parallel` feature (default) the batch and record
//! loops run on rayon; without it the same loops run sequentially and produce
//! byte-identical artifacts.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod filters;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
