//! Fast-adaptability evaluation of EEG motor-imagery classifiers.
//!
//! The crate bundles a small reverse-mode autodiff engine, an EEGNet-style
//! classifier with switchable batch/layer normalization, Physionet EEG
//! ingestion and episode sampling, first-order MAML and transfer-learning
//! pretraining, and the few-step fine-tuning protocol that produces
//! per-iteration accuracy curves.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod model_io;
pub mod optim;
pub mod report;
pub mod rng;
pub mod strategy;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Param, ParamSet, Tensor};
