//! Few-shot classification with tensor-feature hallucination.
//!
//! The crate is organised along the pipeline:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape, SGD and Adam.
//! * [`models`]: the conditioner/generator pair (tensor and vector variants),
//!   a small convolutional backbone with its classifier head, and the `HALC`
//!   checkpoint format.
//! * [`dataset`]: labelled feature files (`FTH1` + JSON manifest), synthetic
//!   data and N-way K-shot episode sampling.
//! * [`representation`]: cross-entropy pre-training and self-distillation.
//! * [`halluc_train`]: episodic training of the hallucinator against class
//!   prototypes.
//! * [`eval`]: nearest-prototype inference, per-task fine-tuning and
//!   confidence-interval reports.
//! * [`gradcheck`]: finite-difference verification of every operator.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod halluc_train;
pub mod models;
pub mod representation;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tape, Tensor, Var};
