//! Saliency erasing and boosting for video person re-identification.
//!
//! The crate bundles a small reverse-mode tensor engine ([`autodiff`]), the
//! two clip-level mechanisms built on it ([`tse`] erases what earlier frames
//! already attended to, [`tsb`] propagates salient evidence between frames),
//! a toy convolutional backbone, the full training pipeline, a synthetic
//! corpus with retrieval metrics, and the `tclnet` command line.

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod dump;
pub mod error;
pub mod eval;
mod kernel;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod tsb;
pub mod tse;

pub use autodiff::{grad_check, grad_check_many, BatchNormStats, BnMode, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
