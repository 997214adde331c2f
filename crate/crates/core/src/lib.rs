//! Differentiable Gaussian splatting with expression-conditioned deformation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod deform;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod imageio;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
