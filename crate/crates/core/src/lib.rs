//! Numerical core for temporal video analysis.
//!
//! The crate is organized bottom-up:
//!
//! - [`fields`]: images, flow fields, label maps, masks and the bilinear /
//!   nearest-neighbor warping primitives.
//! - [`losses`]: Charbonnier photometric and smoothness terms, block SSIM,
//!   ternary census distance, flow accuracy metrics.
//! - [`occlusion`]: forward-backward consistency masks and masked losses.
//! - [`solver`]: coarse-to-fine gradient-descent flow estimation that
//!   minimizes the unsupervised objective directly.
//! - [`propagate`]: joint image/label propagation, boundary relaxation loss,
//!   mean IoU.
//! - [`sampling`]: random temporal skipping, class-uniform crops, depth
//!   normalization and depth motion maps.
//! - [`url`]: NMF with a pairwise divergence constraint, orthogonal
//!   projections and nearest-prototype prediction.
//! - [`io`] and [`viz`]: file codecs and flow color coding.
//! - [`synth`]: seeded synthetic textures for tests and demos.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fields;
pub mod io;
pub mod losses;
pub mod occlusion;
pub mod propagate;
pub mod sampling;
pub mod solver;
pub mod synth;
pub mod url;
pub mod viz;

pub use error::{Error, Result};
pub use fields::{FlowField, Image, LabelMap, Mask, OcclusionMask, VOID};
pub use losses::{LossReport, LossWeights};
