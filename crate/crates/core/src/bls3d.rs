//! 3D fast bilateral solver.
//!
//! Voxels of the reference crop are hard-splatted onto a sparse lattice over
//! `(x, y, z, luma)`, each coordinate divided by its sigma. In that bilateral
//! space the solver minimizes an edge-aware smoothness term plus a
//! confidence-weighted data term, which yields the sparse SPD system
//!
//! ```text
//! A = lambda * (D_m - D_n B D_n) + diag(S c)      b = S (c * t)
//! ```
//!
//! with `S` the splat matrix, `m = S 1` the vertex masses, `B` the
//! `[1 2 1]` blur along each of the four lattice axes and `n` the
//! bistochastization scaling (`D_n B D_n 1 ~= m`). The system is solved by
//! Jacobi-preconditioned conjugate gradient and sliced back to voxels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{box_pool, Dims, GridError, Resolution, SimilarityVolume, Volume};

#[cfg(feature = "parallel")]
use crate::par::*;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("crop of {0} voxels is too small for the bilateral grid (need at least 8)")]
    DegenerateCrop(usize),
    #[error("no voxel exceeds the crop threshold {0}")]
    EmptySelection(f32),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("numerical breakdown at iteration {iteration}: residual {residual}")]
    NumericalBreakdown { iteration: usize, residual: f64 },
    #[error("invalid refine config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Refinement parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Spatial bandwidth in voxels of the refined grid.
    pub sigma_spatial: f32,
    /// Range bandwidth in intensity units scaled by 255.
    pub sigma_luma: f32,
    /// Accepted for parity with color images; scalar volumes have no chroma.
    pub sigma_chroma: f32,
    /// Smoothness weight.
    pub lambda: f64,
    /// Uniform per-voxel confidence.
    pub confidence: f64,
    /// Crop threshold on the upsampled similarity.
    pub tau: f32,
    /// Per-axis cap on the refined resolution.
    pub target_resolution: usize,
    pub pcg_tol: f64,
    pub pcg_max_iters: usize,
    pub bistoch_iters: usize,
    /// Padding around the thresholded bounding box, in voxels.
    pub crop_pad: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            sigma_spatial: 8.0,
            sigma_luma: 8.0,
            sigma_chroma: 8.0,
            lambda: 128.0,
            confidence: 1.0,
            tau: 0.25,
            target_resolution: 256,
            pcg_tol: 1e-5,
            pcg_max_iters: 25,
            bistoch_iters: 16,
            crop_pad: 4,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.into()));
        if !(self.sigma_spatial > 0.0 && self.sigma_luma > 0.0 && self.sigma_chroma > 0.0) {
            return bad("sigmas must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.confidence > 0.0) {
            return bad("confidence must be positive");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if self.target_resolution == 0 || self.pcg_max_iters == 0 || !(self.pcg_tol > 0.0) {
            return bad("target_resolution, pcg_max_iters and pcg_tol must be positive");
        }
        Ok(())
    }
}

const NONE: u32 = u32::MAX;
const FIELD_BITS: u32 = 16;
const FIELD_MASK: u64 = (1 << FIELD_BITS) - 1;
/// Center tap of the blur: weight 2 along each of the 4 lattice axes.
const CENTER_WEIGHT: f64 = 8.0;

fn pack(c: [u64; 4]) -> u64 {
    c[0] | c[1] << FIELD_BITS | c[2] << (2 * FIELD_BITS) | c[3] << (3 * FIELD_BITS)
}

fn unpack(k: u64) -> [u32; 4] {
    std::array::from_fn(|d| ((k >> (d as u32 * FIELD_BITS)) & FIELD_MASK) as u32)
}

/// Sparse bilateral lattice over a reference crop.
#[derive(Clone, Debug)]
pub struct BilateralGrid {
    dims: Dims,
    /// Sorted packed lattice coordinates; position = vertex index.
    keys: Vec<u64>,
    splat_index: Vec<u32>,
    /// Per vertex, `[-x, +x, -y, +y, -z, +z, -luma, +luma]` neighbors.
    neighbors: Vec<[u32; 8]>,
    mass: Vec<f64>,
    /// Vertex -> voxel lists in CSR form.
    voxel_start: Vec<u32>,
    voxel_list: Vec<u32>,
    bistoch: Option<Vec<f64>>,
}

impl BilateralGrid {
    pub fn build(reference: &Volume, cfg: &RefineConfig) -> Result<Self, SolverError> {
        let dims = reference.dims;
        let count = dims.len();
        if count < 8 {
            return Err(SolverError::DegenerateCrop(count));
        }
        let (ss, sl) = (cfg.sigma_spatial, cfg.sigma_luma);
        let data = reference.data();
        let voxel_keys: Vec<u64> = cfg_into_iter!(0..count)
            .map(|i| {
                let c = dims.coords(i);
                let luma = (255.0 * data[i].clamp(0.0, 1.0) / sl).floor() as u64;
                pack([
                    (c[0] as f32 / ss).floor() as u64,
                    (c[1] as f32 / ss).floor() as u64,
                    (c[2] as f32 / ss).floor() as u64,
                    luma,
                ])
            })
            .collect();
        let mut keys = voxel_keys.clone();
        #[cfg(feature = "parallel")]
        keys.par_sort_unstable();
        #[cfg(not(feature = "parallel"))]
        keys.sort_unstable();
        keys.dedup();
        let nv = keys.len();
        let splat_index: Vec<u32> = cfg_iter!(voxel_keys)
            .map(|k| keys.binary_search(k).expect("key present") as u32)
            .collect();
        let neighbors: Vec<[u32; 8]> = cfg_iter!(keys)
            .map(|&k| {
                let c = unpack(k);
                let mut nb = [NONE; 8];
                for d in 0..4 {
                    let unit = 1u64 << (d as u32 * FIELD_BITS);
                    if c[d] > 0 {
                        if let Ok(j) = keys.binary_search(&(k - unit)) {
                            nb[2 * d] = j as u32;
                        }
                    }
                    if (c[d] as u64) < FIELD_MASK {
                        if let Ok(j) = keys.binary_search(&(k + unit)) {
                            nb[2 * d + 1] = j as u32;
                        }
                    }
                }
                nb
            })
            .collect();
        let mut voxel_start = vec![0u32; nv + 1];
        for &v in &splat_index {
            voxel_start[v as usize + 1] += 1;
        }
        for v in 0..nv {
            voxel_start[v + 1] += voxel_start[v];
        }
        let mut fill = voxel_start.clone();
        let mut voxel_list = vec![0u32; count];
        for (i, &v) in splat_index.iter().enumerate() {
            voxel_list[fill[v as usize] as usize] = i as u32;
            fill[v as usize] += 1;
        }
        let mass = (0..nv)
            .map(|v| (voxel_start[v + 1] - voxel_start[v]) as f64)
            .collect();
        Ok(BilateralGrid {
            dims,
            keys,
            splat_index,
            neighbors,
            mass,
            voxel_start,
            voxel_list,
            bistoch: None,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_vertices(&self) -> usize {
        self.keys.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.splat_index.len()
    }

    pub fn splat_index(&self) -> &[u32] {
        &self.splat_index
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Lattice coordinates `(x, y, z, luma)` of a vertex.
    pub fn vertex_coords(&self, v: usize) -> [u32; 4] {
        unpack(self.keys[v])
    }

    pub fn vertex_index(&self, coords: [u32; 4]) -> Option<usize> {
        self.keys.binary_search(&pack(coords.map(u64::from))).ok()
    }

    /// Neighbor of `v` along lattice axis `dim` (0..4) at offset -1 or +1.
    pub fn neighbor(&self, v: usize, dim: usize, positive: bool) -> Option<usize> {
        let n = self.neighbors[v][2 * dim + positive as usize];
        (n != NONE).then_some(n as usize)
    }

    /// Bistochastization scaling, once computed.
    pub fn bistoch(&self) -> Option<&[f64]> {
        self.bistoch.as_deref()
    }

    fn check_voxels(&self, len: usize) -> Result<(), SolverError> {
        if len != self.num_voxels() {
            return Err(SolverError::LengthMismatch {
                expected: self.num_voxels(),
                actual: len,
            });
        }
        Ok(())
    }

    fn check_vertices(&self, len: usize) -> Result<(), SolverError> {
        if len != self.num_vertices() {
            return Err(SolverError::LengthMismatch {
                expected: self.num_vertices(),
                actual: len,
            });
        }
        Ok(())
    }

    /// Sums each voxel's value into its vertex.
    pub fn splat(&self, x: &[f64]) -> Result<Vec<f64>, SolverError> {
        self.check_voxels(x.len())?;
        Ok(self.splat_unchecked(x))
    }

    fn splat_unchecked(&self, x: &[f64]) -> Vec<f64> {
        cfg_into_iter!(0..self.num_vertices())
            .map(|v| {
                let (a, b) = (self.voxel_start[v] as usize, self.voxel_start[v + 1] as usize);
                self.voxel_list[a..b].iter().map(|&i| x[i as usize]).sum()
            })
            .collect()
    }

    /// Reads each voxel's vertex value.
    pub fn slice(&self, y: &[f64]) -> Result<Vec<f64>, SolverError> {
        self.check_vertices(y.len())?;
        Ok(cfg_iter!(self.splat_index).map(|&v| y[v as usize]).collect())
    }

    /// `[1 2 1]` blur along each lattice axis, summed; missing neighbors
    /// contribute nothing.
    pub fn blur(&self, y: &[f64]) -> Result<Vec<f64>, SolverError> {
        self.check_vertices(y.len())?;
        Ok(self.blur_unchecked(y))
    }

    fn blur_unchecked(&self, y: &[f64]) -> Vec<f64> {
        cfg_iter!(self.neighbors)
            .enumerate()
            .map(|(v, nb)| {
                let mut acc = CENTER_WEIGHT * y[v];
                for &n in nb {
                    if n != NONE {
                        acc += y[n as usize];
                    }
                }
                acc
            })
            .collect()
    }

    /// Iterates `n <- sqrt(n * m / (B n))` from `n = sqrt(m)` and stores the
    /// result.
    pub fn bistochastize(&mut self, iters: usize) -> &[f64] {
        let m = &self.mass;
        assert!(m.iter().all(|&v| v > 0.0), "every vertex holds at least one voxel");
        let mut n: Vec<f64> = m.iter().map(|v| v.sqrt()).collect();
        for _ in 0..iters {
            let bn = self.blur_unchecked(&n);
            cfg_iter_mut!(n)
                .zip(cfg_iter!(bn))
                .zip(cfg_iter!(m))
                .for_each(|((ni, &b), &mi)| *ni = (*ni * mi / b).sqrt());
        }
        self.bistoch = Some(n);
        self.bistoch.as_deref().unwrap()
    }

    /// `max_v |(D_n B D_n 1)_v - m_v| / max_v m_v`.
    pub fn bistoch_residual(&self) -> Option<f64> {
        let n = self.bistoch.as_ref()?;
        let bn = self.blur_unchecked(n);
        let mmax = self.mass.iter().cloned().fold(0.0, f64::max);
        let r = n
            .iter()
            .zip(&bn)
            .zip(&self.mass)
            .map(|((ni, b), mi)| (ni * b - mi).abs())
            .fold(0.0, f64::max);
        Some(r / mmax)
    }
}

/// The bilateral-space normal equations for one solve.
pub struct NormalSystem<'g> {
    grid: &'g BilateralGrid,
    n: Vec<f64>,
    lambda: f64,
    /// Splatted confidence, `S c`.
    conf_mass: Vec<f64>,
    rhs: Vec<f64>,
}

impl<'g> NormalSystem<'g> {
    /// Assembles `A` and `b` for target `t`. Bistochastizes the grid first
    /// if that has not happened yet.
    pub fn new(grid: &'g mut BilateralGrid, target: &[f32], cfg: &RefineConfig) -> Result<Self, SolverError> {
        grid.check_voxels(target.len())?;
        if grid.bistoch.is_none() {
            grid.bistochastize(cfg.bistoch_iters);
        }
        let grid: &'g BilateralGrid = grid;
        let n = grid.bistoch.clone().unwrap();
        let c = cfg.confidence;
        let conf_mass: Vec<f64> = grid.mass.iter().map(|m| c * m).collect();
        let ct: Vec<f64> = target.iter().map(|&t| c * t as f64).collect();
        let rhs = grid.splat_unchecked(&ct);
        Ok(NormalSystem {
            grid,
            n,
            lambda: cfg.lambda,
            conf_mass,
            rhs,
        })
    }

    pub fn grid(&self) -> &BilateralGrid {
        self.grid
    }

    pub fn bistoch(&self) -> &[f64] {
        &self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn conf_mass(&self) -> &[f64] {
        &self.conf_mass
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// `A y`.
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let ny: Vec<f64> = y.iter().zip(&self.n).map(|(a, b)| a * b).collect();
        let bny = self.grid.blur_unchecked(&ny);
        let m = &self.grid.mass;
        cfg_into_iter!(0..y.len())
            .map(|v| self.lambda * (m[v] * y[v] - self.n[v] * bny[v]) + self.conf_mass[v] * y[v])
            .collect()
    }

    /// Diagonal of `A`, the Jacobi preconditioner.
    pub fn diagonal(&self) -> Vec<f64> {
        let m = &self.grid.mass;
        (0..m.len())
            .map(|v| self.lambda * (m[v] - CENTER_WEIGHT * self.n[v] * self.n[v]) + self.conf_mass[v])
            .collect()
    }

    /// `b / (S c)`, the per-vertex confidence-weighted mean target.
    pub fn initial_guess(&self) -> Vec<f64> {
        self.rhs.iter().zip(&self.conf_mass).map(|(b, c)| b / c).collect()
    }
}

/// Convergence record of one PCG run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Smallest `||A y - b||_2` seen so far, at the initial guess and after
    /// every iteration. This is the residual of the returned iterate.
    pub residuals: Vec<f64>,
    /// Raw CG residual of each iterate; not monotone in general.
    pub raw_residuals: Vec<f64>,
    pub converged: bool,
    pub vertices: usize,
}

/// Jacobi-preconditioned conjugate gradient from `y0`, stopping when
/// `||r|| <= tol * ||b||` or after `max_iters` iterations. Returns the
/// iterate with the smallest residual.
pub fn pcg(
    sys: &NormalSystem<'_>,
    y0: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, SolveStats), SolverError> {
    let b = sys.rhs();
    let inv_diag: Vec<f64> = sys
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let b_norm = norm(b).max(f64::MIN_POSITIVE);

    let mut y = y0;
    let ay = sys.apply(&y);
    let mut r: Vec<f64> = b.iter().zip(&ay).map(|(b, a)| b - a).collect();
    let mut stats = SolveStats {
        vertices: y.len(),
        ..Default::default()
    };
    let mut r_norm = norm(&r);
    stats.residuals.push(r_norm);
    stats.raw_residuals.push(r_norm);
    let mut best: Option<Vec<f64>> = None;
    if r_norm <= tol * b_norm {
        stats.converged = true;
        return Ok((y, stats));
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dotp(&r, &z);
    for it in 1..=max_iters {
        let ap = sys.apply(&p);
        let pap = dotp(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            if pap == 0.0 && r_norm == 0.0 {
                break;
            }
            return Err(SolverError::NumericalBreakdown {
                iteration: it,
                residual: r_norm,
            });
        }
        let alpha = rz / pap;
        for ((yi, ri), (pi, api)) in y.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&ap)) {
            *yi += alpha * pi;
            *ri -= alpha * api;
        }
        r_norm = norm(&r);
        stats.iterations = it;
        stats.raw_residuals.push(r_norm);
        if !r_norm.is_finite() {
            return Err(SolverError::NumericalBreakdown {
                iteration: it,
                residual: r_norm,
            });
        }
        let prev = *stats.residuals.last().unwrap();
        if r_norm < prev {
            stats.residuals.push(r_norm);
            best = None;
        } else {
            stats.residuals.push(prev);
            if best.is_none() {
                best = Some(y.iter().zip(&p).map(|(yi, pi)| yi - alpha * pi).collect());
            }
        }
        if r_norm <= tol * b_norm {
            stats.converged = true;
            break;
        }
        for ((zi, ri), di) in z.iter_mut().zip(&r).zip(&inv_diag) {
            *zi = ri * di;
        }
        let rz_next = dotp(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Ok((best.unwrap_or(y), stats))
}

/// Solves for the refined per-voxel field of a crop, clamped to `[0, 1]`.
pub fn solve(
    grid: &mut BilateralGrid,
    target: &[f32],
    cfg: &RefineConfig,
) -> Result<(Vec<f32>, SolveStats), SolverError> {
    let sys = NormalSystem::new(grid, target, cfg)?;
    let (y, stats) = pcg(&sys, sys.initial_guess(), cfg.pcg_tol, cfg.pcg_max_iters)?;
    let out = sys
        .grid()
        .slice(&y)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    Ok((out, stats))
}

/// Axis-aligned crop `[lo, hi)` in refined-grid voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CropBox {
    pub fn dims(&self) -> Dims {
        Dims(std::array::from_fn(|a| self.hi[a] - self.lo[a]))
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.lo[a] && c[a] < self.hi[a])
    }
}

/// Result of [`refine`].
#[derive(Clone, Debug)]
pub struct Refined {
    pub volume: SimilarityVolume,
    pub crop: CropBox,
    pub stats: SolveStats,
}

/// Refined output resolution: the reference dims capped per axis.
pub fn refined_dims(reference: Dims, cfg: &RefineConfig) -> Dims {
    Dims(reference.0.map(|d| d.min(cfg.target_resolution)))
}

/// Bounding box of `{s > tau}` padded by `pad` and clipped, or `None` if no
/// voxel exceeds `tau`.
pub fn threshold_bbox(s: &SimilarityVolume, tau: f32, pad: usize) -> Option<CropBox> {
    let d = s.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in s.data().iter().enumerate() {
        if v > tau {
            any = true;
            let c = d.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a] + 1);
            }
        }
    }
    any.then(|| CropBox {
        lo: std::array::from_fn(|a| lo[a].saturating_sub(pad)),
        hi: std::array::from_fn(|a| (hi[a] + pad).min(d[a])),
    })
}

/// Upsample, crop, solve and write back a low resolution similarity map.
pub fn refine(sim: &SimilarityVolume, reference: &Volume, cfg: &RefineConfig) -> Result<Refined, SolverError> {
    cfg.validate()?;
    let out_dims = refined_dims(reference.dims, cfg);
    let reference = if out_dims == reference.dims {
        std::borrow::Cow::Borrowed(reference)
    } else {
        let data = box_pool(reference.data(), reference.dims, 1, out_dims);
        std::borrow::Cow::Owned(Volume::new(
            reference.name.clone(),
            out_dims,
            data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )?)
    };
    let up = sim.resample(out_dims);
    let crop = threshold_bbox(&up, cfg.tau, cfg.crop_pad).ok_or(SolverError::EmptySelection(cfg.tau))?;
    let ref_crop = reference.crop(crop.lo, crop.hi);
    let target = crate::volgrid::crop_grid(out_dims, up.data(), crop.lo, crop.hi);
    let mut grid = BilateralGrid::build(&ref_crop, cfg)?;
    grid.bistochastize(cfg.bistoch_iters);
    let (solved, stats) = solve(&mut grid, &target, cfg)?;
    let mut out = vec![0.0f32; out_dims.len()];
    let cd = crop.dims();
    for z in 0..cd[2] {
        for y in 0..cd[1] {
            let src = cd.index(0, y, z);
            let dst = out_dims.index(crop.lo[0], crop.lo[1] + y, crop.lo[2] + z);
            out[dst..dst + cd[0]].copy_from_slice(&solved[src..src + cd[0]]);
        }
    }
    log::debug!(
        "refined class {} at {out_dims}: crop {cd}, {} vertices, {} PCG iterations",
        sim.class_id,
        stats.vertices,
        stats.iterations
    );
    Ok(Refined {
        volume: SimilarityVolume::new(out_dims, out, Resolution::Refined, sim.class_id)?,
        crop,
        stats,
    })
}
