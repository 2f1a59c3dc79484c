//! Coarse-to-fine, RANSAC-free template matching on edge maps.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the matrix math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod coarse_match;
pub mod consistency;
pub mod edge_maps;
pub mod error;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod pgm;
pub mod refine;
pub mod sampling;
pub mod weights;

pub use error::{Error, Result};
