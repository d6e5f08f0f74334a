//! Annotation-driven volume segmentation and transfer-function design.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`featpipe`] merges per-axis 2D feature stacks into one feature volume
//!    (a deterministic toy extractor stands in for the vision transformer).
//! 2. [`simquery`] turns clicked annotations into a clamped mean-cosine
//!    similarity map, optionally scaled by proximity to the annotations.
//! 3. [`bls3d`] refines the low resolution map against the raw volume with a
//!    3D bilateral-grid solver.
//! 4. [`isoray`] renders similarity maps as shaded iso-surfaces.
//! 5. [`evalseg`] scores argmax labelings against ground truth.
//!
//! [`volgrid`] holds the dense grid types and file formats shared by every
//! stage; [`synthgen`] generates the synthetic fixtures used for testing.
//!
//! Data-parallel loops go through rayon when the `parallel` feature is
//! enabled (the default) and fall back to plain iterators otherwise.

#[macro_use]
mod par;

pub mod bls3d;
pub mod evalseg;
pub mod featpipe;
pub mod isoray;
pub mod simquery;
pub mod synthgen;
pub mod volgrid;

pub use volgrid::{Axis, Dims, FeatureStack, FeatureVolume, SimilarityVolume, Volume};

/// Number of worker threads the data-parallel kernels will use.
pub fn current_num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
