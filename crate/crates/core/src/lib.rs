//! Sparse voxel feature fields distilled from noisy multi-view 2D features.
//!
//! The pipeline: sample a radiance field on a lattice ([`grid`]), render the
//! per-voxel features into each training view ([`render`]), pull the rendered
//! maps and a per-pixel 2D student ([`model`]) toward each other
//! ([`losses`], [`training`]), then index the trained grids for image and
//! scene queries ([`retrieval`]). Synthetic scenes and teachers come from
//! [`oracle`].

// `!(x >= 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod image;
pub mod io;
pub mod losses;
pub mod model;
pub mod oracle;
pub mod render;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
