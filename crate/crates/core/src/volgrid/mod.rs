//! Dense grid types shared by every stage: scalar volumes, per-axis feature
//! stacks, merged feature volumes and similarity volumes.
//!
//! All grids are stored x-fastest (then y, then z). Feature data keeps the
//! feature components innermost.

mod io;
mod resample;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use crate::par::*;

pub use io::{
    load_feature_stack, load_feature_volume, load_raw, load_similarity_volume, load_volume,
    save_feature_stack, save_feature_volume, save_feature_volume_as, save_raw, save_similarity_volume, save_volume,
    sidecar_paths, RawSamples, Sidecar,
};
pub use resample::{box_pool, pool_weights, trilinear_sample, trilinear_sample_channels, GridView};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("missing sidecar {0}")]
    MissingSidecar(String),
    #[error("dimension mismatch: expected {expected} {unit}, found {actual}")]
    DimMismatch {
        expected: usize,
        actual: usize,
        unit: &'static str,
    },
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("sidecar: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Grid extent in voxels, `[x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Dims([x, y, z])
    }

    pub const fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.0[0] && y < self.0[1] && z < self.0[2]);
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.0[0];
        let r = i / self.0[0];
        [x, r % self.0[1], r / self.0[1]]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.0[a])
    }

    pub fn max(&self) -> usize {
        self.0.into_iter().max().unwrap_or(0)
    }

    pub fn min(&self) -> usize {
        self.0.into_iter().min().unwrap_or(0)
    }
}

impl std::ops::Index<usize> for Dims {
    type Output = usize;
    fn index(&self, a: usize) -> &usize {
        &self.0[a]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Principal slicing axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        Axis::ALL.get(i).copied()
    }

    /// The two in-slice axes, in increasing order.
    pub fn in_plane(self) -> [usize; 2] {
        match self {
            Axis::X => [1, 2],
            Axis::Y => [0, 2],
            Axis::Z => [0, 1],
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "x" | "0" => Ok(Axis::X),
            "y" | "1" => Ok(Axis::Y),
            "z" | "2" => Ok(Axis::Z),
            _ => Err(format!("unknown axis `{s}`")),
        }
    }
}

/// Storage precision of feature payloads. Data always widens to f32 in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureDtype {
    F32 = 0,
    F16 = 1,
}

/// Scalar volume with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub name: String,
    pub dims: Dims,
    /// Voxel spacing in mm.
    pub spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(name: impl Into<String>, dims: Dims, data: Vec<f32>) -> Result<Self, GridError> {
        check_len(dims.len(), data.len(), "samples")?;
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GridError::Invalid(format!(
                "volume sample {bad} outside [0, 1]"
            )));
        }
        Ok(Volume {
            name: name.into(),
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn view(&self) -> GridView<'_> {
        GridView::new(self.dims, &self.data)
    }

    /// Copy of the axis-aligned box `[lo, hi)`.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Volume {
        let data = crop_grid(self.dims, &self.data, lo, hi);
        Volume {
            name: self.name.clone(),
            dims: Dims([hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]),
            spacing: self.spacing,
            data,
        }
    }
}

pub(crate) fn crop_grid(dims: Dims, data: &[f32], lo: [usize; 3], hi: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]));
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            let row = dims.index(0, y, z);
            out.extend_from_slice(&data[row + lo[0]..row + hi[0]]);
        }
    }
    out
}

/// Per-axis 2D feature maps stacked along the slicing axis.
///
/// The slicing axis keeps the source resolution; the two in-plane axes are
/// reduced by the extractor's effective patch stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub axis: Axis,
    pub dims: Dims,
    pub feature_dim: usize,
    /// Precision used when the stack is written to disk.
    pub dtype: FeatureDtype,
    data: Vec<f32>,
}

impl FeatureStack {
    pub fn new(
        axis: Axis,
        dims: Dims,
        feature_dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, GridError> {
        if feature_dim == 0 {
            return Err(GridError::Invalid("feature_dim must be positive".into()));
        }
        check_len(dims.len() * feature_dim, data.len(), "feature values")?;
        Ok(FeatureStack {
            axis,
            dims,
            feature_dim,
            dtype: FeatureDtype::F32,
            data,
        })
    }

    pub fn with_dtype(mut self, dtype: FeatureDtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn feature(&self, voxel: usize) -> &[f32] {
        &self.data[voxel * self.feature_dim..(voxel + 1) * self.feature_dim]
    }
}

/// Component value used to replace all-zero feature vectors.
pub const DEFAULT_ZERO_EPSILON: f32 = 1e-6;

static NEXT_FEATURE_TAG: AtomicU64 = AtomicU64::new(1);

/// Merged feature grid with precomputed per-voxel L2 norms.
#[derive(Clone, Debug)]
pub struct FeatureVolume {
    pub dims: Dims,
    pub source_dims: Dims,
    pub feature_dim: usize,
    data: Vec<f32>,
    norms: Vec<f32>,
    tag: u64,
    zero_vectors_replaced: usize,
}

impl FeatureVolume {
    pub fn new(
        dims: Dims,
        source_dims: Dims,
        feature_dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, GridError> {
        Self::with_epsilon(dims, source_dims, feature_dim, data, DEFAULT_ZERO_EPSILON)
    }

    /// Like [`FeatureVolume::new`], replacing exact-zero vectors with
    /// `epsilon` in every component.
    pub fn with_epsilon(
        dims: Dims,
        source_dims: Dims,
        feature_dim: usize,
        mut data: Vec<f32>,
        epsilon: f32,
    ) -> Result<Self, GridError> {
        if feature_dim == 0 {
            return Err(GridError::Invalid("feature_dim must be positive".into()));
        }
        check_len(dims.len() * feature_dim, data.len(), "feature values")?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GridError::Invalid("non-finite feature value".into()));
        }
        let mut replaced = 0;
        for f in data.chunks_exact_mut(feature_dim) {
            if f.iter().all(|&v| v == 0.0) {
                f.fill(epsilon);
                replaced += 1;
            }
        }
        if replaced > 0 {
            log::warn!("replaced {replaced} all-zero feature vectors with epsilon {epsilon}");
        }
        let norms: Vec<f32> = cfg_chunks!(data, feature_dim)
            .map(|f| f.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32)
            .collect();
        Ok(FeatureVolume {
            dims,
            source_dims,
            feature_dim,
            data,
            norms,
            tag: NEXT_FEATURE_TAG.fetch_add(1, Ordering::Relaxed),
            zero_vectors_replaced: replaced,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn norms(&self) -> &[f32] {
        &self.norms
    }

    /// Identity of this feature grid; annotation caches key on it.
    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn zero_vectors_replaced(&self) -> usize {
        self.zero_vectors_replaced
    }

    #[inline]
    pub fn feature(&self, voxel: usize) -> &[f32] {
        &self.data[voxel * self.feature_dim..(voxel + 1) * self.feature_dim]
    }

    /// Maps a source-volume voxel position to continuous feature-grid
    /// coordinates by per-axis scaling.
    pub fn to_feature_coords(&self, p: [f32; 3]) -> [f32; 3] {
        std::array::from_fn(|a| p[a] * self.dims[a] as f32 / self.source_dims[a] as f32)
    }

    /// Trilinearly interpolated feature vector at continuous feature-grid
    /// coordinates.
    pub fn sample(&self, pos: [f32; 3]) -> Vec<f32> {
        trilinear_sample_channels(self.dims, self.feature_dim, &self.data, pos)
    }
}

/// Whether a similarity map lives on the feature grid or was refined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Low = 0,
    Refined = 1,
}

/// Per-class similarity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVolume {
    pub dims: Dims,
    pub resolution: Resolution,
    pub class_id: u32,
    data: Vec<f32>,
}

impl SimilarityVolume {
    pub fn new(
        dims: Dims,
        data: Vec<f32>,
        resolution: Resolution,
        class_id: u32,
    ) -> Result<Self, GridError> {
        check_len(dims.len(), data.len(), "samples")?;
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GridError::Invalid(format!(
                "similarity {bad} outside [0, 1]"
            )));
        }
        Ok(SimilarityVolume {
            dims,
            resolution,
            class_id,
            data,
        })
    }

    pub fn zeros(dims: Dims, resolution: Resolution, class_id: u32) -> Self {
        SimilarityVolume {
            dims,
            resolution,
            class_id,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn view(&self) -> GridView<'_> {
        GridView::new(self.dims, &self.data)
    }

    /// Trilinear resample onto `dims`, with the same coordinate scaling used
    /// to map annotations onto the feature grid.
    pub fn resample(&self, dims: Dims) -> SimilarityVolume {
        let view = self.view();
        let scale: [f32; 3] = std::array::from_fn(|a| self.dims[a] as f32 / dims[a] as f32);
        let data: Vec<f32> = cfg_into_iter!(0..dims.len())
            .map(|i| {
                let c = dims.coords(i);
                let p = std::array::from_fn(|a| c[a] as f32 * scale[a]);
                trilinear_sample(&view, p).clamp(0.0, 1.0)
            })
            .collect();
        SimilarityVolume {
            dims,
            resolution: self.resolution,
            class_id: self.class_id,
            data,
        }
    }
}

pub(crate) fn check_len(expected: usize, actual: usize, unit: &'static str) -> Result<(), GridError> {
    if expected != actual {
        return Err(GridError::DimMismatch {
            expected,
            actual,
            unit,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_index_roundtrip() {
        let d = Dims::new(3, 4, 5);
        for i in 0..d.len() {
            let [x, y, z] = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }

    #[test]
    fn volume_rejects_wrong_length_and_range() {
        assert!(matches!(
            Volume::new("v", Dims::cube(2), vec![0.0; 7]),
            Err(GridError::DimMismatch { .. })
        ));
        assert!(Volume::new("v", Dims::cube(1), vec![1.5]).is_err());
        assert!(Volume::new("v", Dims::cube(1), vec![f32::NAN]).is_err());
    }

    #[test]
    fn zero_features_are_perturbed() {
        let mut data = vec![1.0f32; 2 * 3];
        data[3..].fill(0.0);
        let fv = FeatureVolume::new(Dims::new(2, 1, 1), Dims::new(16, 8, 8), 3, data).unwrap();
        assert_eq!(fv.zero_vectors_replaced(), 1);
        assert!(fv.feature(1).iter().all(|&v| v == DEFAULT_ZERO_EPSILON));
        assert!(fv.norms().iter().all(|&n| n > 0.0));
    }

    #[test]
    fn norms_match_features() {
        let data: Vec<f32> = (0..4 * 5).map(|i| (i as f32 * 0.37).sin()).collect();
        let fv = FeatureVolume::new(Dims::new(4, 1, 1), Dims::cube(8), 5, data).unwrap();
        for i in 0..4 {
            let n = fv.feature(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - fv.norms()[i]).abs() <= 1e-5 * n);
        }
    }

    #[test]
    fn crop_extracts_box() {
        let d = Dims::new(4, 3, 2);
        let data: Vec<f32> = (0..d.len()).map(|i| i as f32 / 24.0).collect();
        let v = Volume::new("v", d, data).unwrap();
        let c = v.crop([1, 1, 1], [3, 3, 2]);
        assert_eq!(c.dims, Dims::new(2, 2, 1));
        assert_eq!(c.get(0, 0, 0), v.get(1, 1, 1));
        assert_eq!(c.get(1, 1, 0), v.get(2, 2, 1));
    }
}
