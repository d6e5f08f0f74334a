//! Volume to feature-volume pipeline.
//!
//! An external extractor slices the volume along each principal axis and
//! produces one [`FeatureStack`] per axis whose in-plane dimensions are
//! reduced by the patch stride. [`merge_stacks`] box-pools every stack to the
//! common target grid and averages the three. [`toy_extract`] is a
//! deterministic hand-crafted patch descriptor that lets the whole pipeline
//! run without a neural network.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{box_pool, Axis, Dims, FeatureStack, FeatureVolume, GridError, Volume};

#[cfg(feature = "parallel")]
use crate::par::*;

/// Patch size of the ViT-S/8 backbone.
pub const DEFAULT_PATCH: usize = 8;
/// Slice edge length fed to the extractor.
pub const DEFAULT_RESIZE: usize = 640;
/// Key dimension of the ViT-S/8 backbone.
pub const VIT_FEATURE_DIM: usize = 384;
/// Length of the toy descriptor.
pub const TOY_FEATURE_DIM: usize = 32;
/// Smallest allowed feature-grid extent per axis.
pub const MIN_FEATURE_EXTENT: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("degenerate volume {0}: every dimension must be at least 8")]
    DegenerateVolume(Dims),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("feature dimension mismatch: {0:?}")]
    FeatureDimMismatch([usize; 3]),
    #[error("incompatible dims: {0}")]
    IncompatibleDims(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Slicing and resizing plan handed to feature extractors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionPlan {
    pub source_dims: Dims,
    pub resize_target: usize,
    pub patch: usize,
    pub target_feature_dims: Dims,
    pub feature_dim: usize,
}

impl ExtractionPlan {
    pub fn with_feature_dim(mut self, feature_dim: usize) -> Self {
        self.feature_dim = feature_dim;
        self
    }

    /// Dims of the stack produced when slicing along `axis`.
    pub fn stack_dims(&self, axis: Axis) -> Dims {
        let mut d = self.target_feature_dims;
        d.0[axis.index()] = self.source_dims[axis.index()];
        d
    }
}

/// Builds the plan for a volume: the longest edge is resized to
/// `resize_target`, the others proportionally, and each is divided by the
/// patch size.
pub fn plan_for(source_dims: Dims, resize_target: usize, patch: usize) -> Result<ExtractionPlan, PipelineError> {
    if source_dims.min() < 8 {
        return Err(PipelineError::DegenerateVolume(source_dims));
    }
    if patch == 0 || resize_target < patch * MIN_FEATURE_EXTENT {
        return Err(PipelineError::InvalidPlan(format!(
            "resize target {resize_target} must be at least 4 x patch {patch}"
        )));
    }
    let longest = source_dims.max() as f64;
    let target = Dims(std::array::from_fn(|a| {
        let resized = (source_dims[a] as f64 * resize_target as f64 / longest).round() as usize;
        (resized / patch).max(MIN_FEATURE_EXTENT)
    }));
    Ok(ExtractionPlan {
        source_dims,
        resize_target,
        patch,
        target_feature_dims: target,
        feature_dim: VIT_FEATURE_DIM,
    })
}

/// Average-pools the three axis stacks to `target` and averages them.
/// Pooling uses fractional bin edges, so it also covers targets larger than
/// a stack along some axis.
pub fn merge_stacks(
    fx: &FeatureStack,
    fy: &FeatureStack,
    fz: &FeatureStack,
    target: Dims,
) -> Result<FeatureVolume, PipelineError> {
    let stacks = [fx, fy, fz];
    for (s, axis) in stacks.iter().zip(Axis::ALL) {
        if s.axis != axis {
            return Err(PipelineError::IncompatibleDims(format!(
                "expected {axis:?} stack, got {:?}",
                s.axis
            )));
        }
    }
    let fdim = fx.feature_dim;
    if fy.feature_dim != fdim || fz.feature_dim != fdim {
        return Err(PipelineError::FeatureDimMismatch([fdim, fy.feature_dim, fz.feature_dim]));
    }
    let source_dims = Dims([fx.dims[0], fy.dims[1], fz.dims[2]]);
    // Targets beyond a stack's extent (small volumes, upsampled slices) are
    // fine: fractional-edge pooling then spreads each cell.
    if target.is_empty() {
        return Err(PipelineError::IncompatibleDims(format!("empty target {target}")));
    }
    // In-plane extents come from one plan, so the two stacks sharing an
    // in-plane axis must agree on it.
    for a in 0..3 {
        let [p, q] = Axis::ALL[a].in_plane().map(|b| stacks[b].dims[a]);
        if p != q {
            return Err(PipelineError::IncompatibleDims(format!(
                "stacks disagree on the in-plane extent of axis {a}: {p} vs {q}"
            )));
        }
    }
    let pooled: Vec<Vec<f32>> = stacks
        .iter()
        .map(|s| box_pool(s.data(), s.dims, fdim, target))
        .collect();
    let mut merged = vec![0.0f32; target.len() * fdim];
    cfg_iter_mut!(merged).enumerate().for_each(|(i, m)| {
        *m = (pooled[0][i] + pooled[1][i] + pooled[2][i]) / 3.0;
    });
    Ok(FeatureVolume::new(target, source_dims, fdim, merged)?)
}

/// Outer radii, in pixels, of the dilated context rings around each patch.
const RING_RADII: [usize; 12] = [1, 2, 3, 4, 6, 8, 11, 16, 22, 32, 45, 64];

// Component weights of the toy descriptor, chosen so every group
// contributes a comparable share of the vector norm.
const W_MEAN: f32 = 1.0;
const W_STD: f32 = 2.0;
const W_HIST: f32 = 1.5;
const W_GRAD: f32 = 2.0;
const W_RING: f32 = 0.35;
const W_POS: f32 = 0.5;

/// Deterministic patch descriptors for the three slicing directions.
///
/// Each patch cell yields 32 values: mean, std, 8-bin intensity histogram,
/// 8-bin gradient-orientation histogram, 12 context-ring means and the
/// normalized in-slice position (modulated by the patch mean, so constant
/// zero input yields identical vectors everywhere).
pub fn toy_extract(v: &Volume, plan: &ExtractionPlan) -> Result<[FeatureStack; 3], PipelineError> {
    if plan.source_dims != v.dims {
        return Err(PipelineError::InvalidPlan(format!(
            "plan is for {}, volume is {}",
            plan.source_dims, v.dims
        )));
    }
    let stacks = Axis::ALL.map(|axis| extract_axis(v, plan, axis));
    let [x, y, z] = stacks;
    Ok([x?, y?, z?])
}

fn extract_axis(v: &Volume, plan: &ExtractionPlan, axis: Axis) -> Result<FeatureStack, PipelineError> {
    let dims = plan.stack_dims(axis);
    let a = axis.index();
    let [u_axis, v_axis] = axis.in_plane();
    let slices = v.dims[a];
    let per_slice = dims[u_axis] * dims[v_axis] * TOY_FEATURE_DIM;
    let mut slice_feats = vec![0.0f32; slices * per_slice];
    cfg_chunks_mut!(slice_feats, per_slice)
        .enumerate()
        .for_each(|(s, out)| {
            let img = SliceImage::extract(v, axis, s);
            img.describe(dims[u_axis], dims[v_axis], out);
        });
    // Scatter slice-major blocks into the x-fastest stack layout.
    let mut data = vec![0.0f32; dims.len() * TOY_FEATURE_DIM];
    let (cu, cv) = (dims[u_axis], dims[v_axis]);
    for s in 0..slices {
        for j in 0..cv {
            for i in 0..cu {
                let mut c = [0usize; 3];
                c[a] = s;
                c[u_axis] = i;
                c[v_axis] = j;
                let dst = dims.index(c[0], c[1], c[2]) * TOY_FEATURE_DIM;
                let src = s * per_slice + (j * cu + i) * TOY_FEATURE_DIM;
                data[dst..dst + TOY_FEATURE_DIM].copy_from_slice(&slice_feats[src..src + TOY_FEATURE_DIM]);
            }
        }
    }
    Ok(FeatureStack::new(axis, dims, TOY_FEATURE_DIM, data)?)
}

struct SliceImage {
    w: usize,
    h: usize,
    px: Vec<f32>,
    /// Summed-area table with a zero border, `(w + 1) x (h + 1)`.
    sat: Vec<f64>,
}

impl SliceImage {
    fn extract(v: &Volume, axis: Axis, s: usize) -> Self {
        let [ua, va] = axis.in_plane();
        let (w, h) = (v.dims[ua], v.dims[va]);
        let mut px = Vec::with_capacity(w * h);
        for j in 0..h {
            for i in 0..w {
                let mut c = [0usize; 3];
                c[axis.index()] = s;
                c[ua] = i;
                c[va] = j;
                px.push(v.get(c[0], c[1], c[2]));
            }
        }
        let mut sat = vec![0.0f64; (w + 1) * (h + 1)];
        for j in 0..h {
            let mut row = 0.0f64;
            for i in 0..w {
                row += px[j * w + i] as f64;
                sat[(j + 1) * (w + 1) + i + 1] = sat[j * (w + 1) + i + 1] + row;
            }
        }
        SliceImage { w, h, px, sat }
    }

    /// Sum over the pixel rectangle `[x0, x1) x [y0, y1)` clipped to the image.
    fn rect_sum(&self, x0: i64, y0: i64, x1: i64, y1: i64) -> f64 {
        let cx = |x: i64| x.clamp(0, self.w as i64) as usize;
        let cy = |y: i64| y.clamp(0, self.h as i64) as usize;
        let (x0, x1, y0, y1) = (cx(x0), cx(x1), cy(y0), cy(y1));
        if x0 >= x1 || y0 >= y1 {
            return 0.0;
        }
        let s = |x: usize, y: usize| self.sat[y * (self.w + 1) + x];
        s(x1, y1) - s(x0, y1) - s(x1, y0) + s(x0, y0)
    }

    fn gradient(&self, i: usize, j: usize) -> (f32, f32) {
        let at = |x: usize, y: usize| self.px[y * self.w + x];
        let gx = if self.w < 2 {
            0.0
        } else if i == 0 {
            at(1, j) - at(0, j)
        } else if i == self.w - 1 {
            at(i, j) - at(i - 1, j)
        } else {
            0.5 * (at(i + 1, j) - at(i - 1, j))
        };
        let gy = if self.h < 2 {
            0.0
        } else if j == 0 {
            at(i, 1) - at(i, 0)
        } else if j == self.h - 1 {
            at(i, j) - at(i, j - 1)
        } else {
            0.5 * (at(i, j + 1) - at(i, j - 1))
        };
        (gx, gy)
    }

    fn describe(&self, cells_u: usize, cells_v: usize, out: &mut [f32]) {
        let span = |c: usize, cells: usize, n: usize| {
            let start = (c * n / cells).min(n - 1);
            let end = ((c + 1) * n / cells).max(start + 1).min(n);
            (start, end)
        };
        for cv in 0..cells_v {
            let (y0, y1) = span(cv, cells_v, self.h);
            for cu in 0..cells_u {
                let (x0, x1) = span(cu, cells_u, self.w);
                let f = &mut out[(cv * cells_u + cu) * TOY_FEATURE_DIM..][..TOY_FEATURE_DIM];
                self.describe_cell(x0, x1, y0, y1, f);
                let mean = f[0] / W_MEAN;
                f[30] = W_POS * mean * ((cu as f32 + 0.5) / cells_u as f32 - 0.5);
                f[31] = W_POS * mean * ((cv as f32 + 0.5) / cells_v as f32 - 0.5);
            }
        }
    }

    fn describe_cell(&self, x0: usize, x1: usize, y0: usize, y1: usize, f: &mut [f32]) {
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        let mut sum = 0.0f64;
        let mut sum2 = 0.0f64;
        let mut hist = [0.0f64; 8];
        let mut orient = [0.0f64; 8];
        for j in y0..y1 {
            for i in x0..x1 {
                let p = self.px[j * self.w + i] as f64;
                sum += p;
                sum2 += p * p;
                hist[((p * 8.0) as usize).min(7)] += 1.0;
                let (gx, gy) = self.gradient(i, j);
                let mag = (gx * gx + gy * gy).sqrt() as f64;
                if mag > 1e-6 {
                    let theta = (gy as f64).atan2(gx as f64) + std::f64::consts::PI;
                    let bin = ((theta / std::f64::consts::TAU * 8.0) as usize).min(7);
                    orient[bin] += mag;
                }
            }
        }
        let mean = sum / n;
        let var = (sum2 / n - mean * mean).max(0.0);
        f[0] = W_MEAN * mean as f32;
        f[1] = W_STD * var.sqrt() as f32;
        for b in 0..8 {
            f[2 + b] = W_HIST * (hist[b] / n) as f32;
            f[10 + b] = W_GRAD * (orient[b] / n) as f32;
        }
        // Context rings: mean over the band between successive dilations of
        // the cell, counting pixels outside the slice as zero.
        let (x0, x1, y0, y1) = (x0 as i64, x1 as i64, y0 as i64, y1 as i64);
        let mut inner_sum = sum;
        let mut inner_area = n;
        for (k, &r) in RING_RADII.iter().enumerate() {
            let r = r as i64;
            let outer_sum = self.rect_sum(x0 - r, y0 - r, x1 + r, y1 + r);
            let outer_area = ((x1 - x0 + 2 * r) * (y1 - y0 + 2 * r)) as f64;
            let ring = (outer_sum - inner_sum) / (outer_area - inner_area);
            f[18 + k] = W_RING * ring as f32;
            inner_sum = outer_sum;
            inner_area = outer_area;
        }
    }
}
