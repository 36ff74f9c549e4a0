//! Feature enrichment for low-resolution vision-encoder features.
//!
//! A small guidance UNet looks at the full-resolution image and a stack of
//! learned joint bilateral upsampling layers uses its multi-scale output to
//! lift encoder features to image resolution. The enriched map is pooled back
//! to the encoder grid and concatenated with the original features.
//!
//! The crate also carries an analytic MAC model comparing single-pass,
//! multi-crop and enriched pipelines for first-token generation.

pub mod autodiff;
pub mod config;
pub mod costmodel;
pub mod encoder;
pub mod enricher;
pub mod error;
pub mod harness;
pub mod imageio;
pub mod jbu;
pub mod ops;
pub mod reference;
pub mod selftest;
pub mod tensor;
pub mod unet;
pub mod weights;

pub use autodiff::{grad_check, grad_check_sampled, no_grad, GradCheckReport, Parameter, Var};
pub use error::{Error, Result};
pub use tensor::{peek_hirt, DType, HirtWriter, Tensor};
