//! Masked rank-1 LoRA experts on a small frozen transformer.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experts;
pub mod masking;
pub mod numerics;
pub mod optim;
pub mod rng;
mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Gradients, Matrix, Tape, Var};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type ExpertBank64 = experts::ExpertBank<f64>;
pub type ExpertBank32 = experts::ExpertBank<f32>;
pub type BackboneModel64 = backbone::BackboneModel<f64>;
pub type BackboneModel32 = backbone::BackboneModel<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
