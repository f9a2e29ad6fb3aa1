//! Point cloud completion by per-face candidate denoising.
//!
//! The crate is `no_std` (with `alloc`) and covers the numeric core: view
//! rigs and candidate generation, completion metrics, a small reverse-mode
//! autodiff engine, the completion network, and its training loop. File
//! formats, the command line, and threading live in the companion crate.

#![no_std]
extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod geometry;
mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{CloudRole, Point3, PointCloud};
