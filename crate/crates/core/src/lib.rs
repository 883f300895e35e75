//! Cross-view camera localization core.
//!
//! This crate implements the geometric and numeric machinery needed to
//! localize a ground camera against a satellite map through dense feature
//! matching:
//!
//! - [`tensor`] — dense feature maps, convolution, pooling, bilinear
//!   sampling, and the binary tensor file formats.
//! - [`weights`] — named-tensor stores and the `CVWT` weight file format.
//! - [`geometry`] — pinhole camera model, SE(2) pose algebra, and the
//!   ground-plane projection that produces bird's-eye-view (BEV) feature
//!   maps.
//! - [`refine`] — the convolutional refinement block applied to projected
//!   BEV features.
//! - [`correlation`] — all-pairs correlation volumes, pooled pyramids, and
//!   windowed lookup.
//! - [`flow`] — iterative dense flow estimation with pluggable update
//!   operators (a weight-free argmax matcher and a convolutional GRU).
//! - [`solver`] — confidence-weighted least-squares SE(2) alignment with
//!   an SVD path, an independent closed-form path, and analytic gradients.
//! - [`supervision`] — ground-truth flow generation and the matching /
//!   confidence / position losses with their training schedules.
//! - [`eval`] — localization error decomposition and recall tables.
//! - [`synth`] — seeded synthetic generators used as end-to-end oracles.

pub mod correlation;
mod error;
pub mod eval;
mod fileio;
pub mod flow;
pub mod geometry;
pub mod refine;
pub mod solver;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
