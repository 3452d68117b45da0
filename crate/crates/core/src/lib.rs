//! Sharpness- and quantization-aware training on desk-scale models.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`] – tape-based reverse-mode differentiation with custom
//!   (straight-through) gradient nodes.
//! * [`quant`] – learned-step-size fake quantization.
//! * [`sam`] – sharpness-aware perturbation of quantized weights.
//! * [`train`] – FP / LSQ / Joint / SQuAT update rules, optimizers, epoch loop.
//! * [`sharpness`] – projected gradient ascent inside an l2 ball.
//! * [`model`], [`data`] – small architectures and synthetic datasets.
//! * [`checkpoint`], [`config`], [`experiment`] – persistence and the
//!   experiment runner behind the `squat` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod parallel;
pub mod quant;
pub mod rng;
pub mod sam;
pub mod sharpness;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
pub use train::TrainMode;
