//! Semi-automatic 3D segmentation of muscle groups from sparse polygon annotations.
//!
//! The pipeline corrects intensity inhomogeneity with prior-informed fuzzy
//! C-means, detects edges with a kernel + Heaviside-dictionary image model, turns
//! user markers into geodesic distance penalties and evolves one level set per
//! group.

// `!(x > 0.0)` is the NaN-rejecting form used throughout parameter validation;
// index loops mirror the stencil maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod filters;
pub mod flow;
pub mod geodesic;
pub mod metrics;
pub mod pbcfcm;
pub mod phantom;
pub mod pipeline;
pub mod rkhs;
pub mod volume;

pub use error::{Error, Result};
pub use geodesic::{AnnotationKind, AnnotationSet, PolygonAnnotation};
pub use volume::{LabelVolume, MaskVolume, ScalarVolume, VolumeGeometry};
