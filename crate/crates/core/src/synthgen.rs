//! Synthetic volumes with exact ground-truth labels: spheres, tori,
//! multi-shape phantoms and noisy step edges.
//!
//! Labels come from the implicit functions alone; intensity smoothing only
//! blends the intensity across a shell of `smooth` voxels centered on the
//! surface.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalseg::{EvalError, LabelVolume};
use crate::volgrid::{Axis, Dims, GridError, Volume};

#[cfg(feature = "parallel")]
use crate::par::*;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate torus: minor radius {minor} exceeds major radius {major}")]
    DegenerateTorus { major: f32, minor: f32 },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Implicit solids in voxel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f32; 3],
        radius: f32,
    },
    Ellipsoid {
        center: [f32; 3],
        radii: [f32; 3],
    },
    /// Ring around `axis` through `center`.
    Torus {
        center: [f32; 3],
        major: f32,
        minor: f32,
        #[serde(default = "default_axis")]
        axis: Axis,
    },
    /// Voxels with `lo <= x <= hi` on every axis.
    Cuboid {
        lo: [f32; 3],
        hi: [f32; 3],
    },
}

fn default_axis() -> Axis {
    Axis::Z
}

impl Shape {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidShape(m));
        match *self {
            Shape::Sphere { radius, .. } if !(radius >= 0.0) => bad(format!("sphere radius {radius}")),
            Shape::Ellipsoid { radii, .. } if !radii.iter().all(|&r| r >= 0.0) => bad(format!("ellipsoid radii {radii:?}")),
            Shape::Torus { major, minor, .. } => {
                if minor > major {
                    Err(SynthError::DegenerateTorus { major, minor })
                } else if !(minor >= 0.0) {
                    bad(format!("torus minor radius {minor}"))
                } else {
                    Ok(())
                }
            }
            Shape::Cuboid { lo, hi } if (0..3).any(|a| !(lo[a] <= hi[a])) => bad(format!("cuboid {lo:?}..{hi:?}")),
            _ => Ok(()),
        }
    }

    /// Approximate signed distance (negative inside). Exact for spheres,
    /// tori and cuboid faces; ellipsoids use the scaled-radius estimate.
    pub fn signed_distance(&self, p: [f32; 3]) -> f32 {
        match *self {
            Shape::Sphere { center, radius } => norm(sub(p, center)) - radius,
            Shape::Ellipsoid { center, radii } => {
                let d = sub(p, center);
                let k = norm(std::array::from_fn(|a| d[a] / radii[a].max(1e-6)));
                let rmin = radii.iter().cloned().fold(f32::INFINITY, f32::min);
                (k - 1.0) * rmin
            }
            Shape::Torus {
                center,
                major,
                minor,
                axis,
            } => {
                let d = sub(p, center);
                let [u, v] = axis.in_plane();
                let rho = (d[u] * d[u] + d[v] * d[v]).sqrt();
                let h = d[axis.index()];
                ((rho - major).powi(2) + h * h).sqrt() - minor
            }
            Shape::Cuboid { lo, hi } => {
                let q: [f32; 3] = std::array::from_fn(|a| (lo[a] - p[a]).max(p[a] - hi[a]));
                let outside = norm(q.map(|v| v.max(0.0)));
                outside + q.iter().cloned().fold(f32::NEG_INFINITY, f32::max).min(0.0)
            }
        }
    }

    pub fn contains(&self, p: [f32; 3]) -> bool {
        match *self {
            Shape::Sphere { center, radius } => radius > 0.0 && norm2(sub(p, center)) <= radius * radius,
            Shape::Ellipsoid { center, radii } => {
                let d = sub(p, center);
                radii.iter().all(|&r| r > 0.0) && (0..3).map(|a| (d[a] / radii[a]).powi(2)).sum::<f32>() <= 1.0
            }
            Shape::Torus { minor, .. } => minor > 0.0 && self.signed_distance(p) <= 0.0,
            Shape::Cuboid { lo, hi } => (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]),
        }
    }
}

fn sub(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    std::array::from_fn(|i| a[i] - b[i])
}

fn norm2(a: [f32; 3]) -> f32 {
    a.iter().map(|v| v * v).sum()
}

fn norm(a: [f32; 3]) -> f32 {
    norm2(a).sqrt()
}

/// One phantom component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub shape: Shape,
    pub intensity: f32,
    pub label: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default)]
    pub background: f32,
    /// Width of the intensity blend across each surface, in voxels.
    #[serde(default)]
    pub smooth: f32,
    pub shapes: Vec<ShapeSpec>,
}

/// Composites shapes in order; later shapes overwrite both intensity and
/// label.
pub fn gen_phantom(dims: Dims, spec: &PhantomSpec) -> Result<(Volume, LabelVolume), SynthError> {
    for s in &spec.shapes {
        s.shape.validate()?;
        if !(0.0..=1.0).contains(&s.intensity) {
            return Err(SynthError::InvalidShape(format!("intensity {} of {}", s.intensity, s.name)));
        }
    }
    if !(0.0..=1.0).contains(&spec.background) || !(spec.smooth >= 0.0) {
        return Err(SynthError::InvalidShape("background must lie in [0, 1] and smooth be >= 0".into()));
    }
    let voxels: Vec<(f32, u32)> = cfg_into_iter!(0..dims.len())
        .map(|i| {
            let c = dims.coords(i);
            let p = c.map(|v| v as f32);
            let mut value = spec.background;
            let mut label = 0u32;
            for s in &spec.shapes {
                if s.shape.contains(p) {
                    label = s.label;
                }
                let cover = if spec.smooth > 0.0 {
                    (0.5 - s.shape.signed_distance(p) / spec.smooth).clamp(0.0, 1.0)
                } else if s.shape.contains(p) {
                    1.0
                } else {
                    0.0
                };
                value += (s.intensity - value) * cover;
            }
            (value.clamp(0.0, 1.0), label)
        })
        .collect();
    let (data, labels): (Vec<f32>, Vec<u32>) = voxels.into_iter().unzip();
    let names: Vec<(u32, String)> = spec
        .shapes
        .iter()
        .filter(|s| s.label != 0)
        .map(|s| (s.label, s.name.clone()))
        .collect();
    Ok((Volume::new("phantom", dims, data)?, LabelVolume::new(dims, labels, names)?))
}

fn single(dims: Dims, name: &str, shape: Shape, inside: f32, outside: f32, smooth: f32) -> Result<(Volume, LabelVolume), SynthError> {
    let spec = PhantomSpec {
        background: outside,
        smooth,
        shapes: vec![ShapeSpec {
            shape,
            intensity: inside,
            label: 1,
            name: name.into(),
        }],
    };
    let (mut v, l) = gen_phantom(dims, &spec)?;
    v.name = name.into();
    Ok((v, l))
}

/// Ball `|x - center| <= radius` labeled 1.
pub fn gen_sphere(dims: Dims, center: [f32; 3], radius: f32, inside: f32, outside: f32, smooth: f32) -> Result<(Volume, LabelVolume), SynthError> {
    single(dims, "sphere", Shape::Sphere { center, radius }, inside, outside, smooth)
}

/// Solid torus `(sqrt(u^2 + v^2) - major)^2 + h^2 <= minor^2` around `axis`,
/// labeled 1.
#[allow(clippy::too_many_arguments)]
pub fn gen_torus(
    dims: Dims,
    center: [f32; 3],
    major: f32,
    minor: f32,
    axis: Axis,
    inside: f32,
    outside: f32,
    smooth: f32,
) -> Result<(Volume, LabelVolume), SynthError> {
    let shape = Shape::Torus {
        center,
        major,
        minor,
        axis,
    };
    single(dims, "torus", shape, inside, outside, smooth)
}

/// Three disjoint organ-like classes on a dark background: a ball, a slab
/// and a ring, each with its own intensity.
pub fn three_class_phantom(dims: Dims) -> PhantomSpec {
    let s = dims.0.map(|d| d as f32);
    let at = |fx: f32, fy: f32, fz: f32| [fx * s[0], fy * s[1], fz * s[2]];
    let m = s.iter().cloned().fold(f32::INFINITY, f32::min);
    PhantomSpec {
        background: 0.1,
        smooth: 0.0,
        shapes: vec![
            ShapeSpec {
                shape: Shape::Sphere {
                    center: at(0.28, 0.3, 0.5),
                    radius: 0.17 * m,
                },
                intensity: 0.45,
                label: 1,
                name: "ball".into(),
            },
            ShapeSpec {
                shape: Shape::Cuboid {
                    lo: at(0.58, 0.15, 0.25),
                    hi: at(0.85, 0.45, 0.75),
                },
                intensity: 0.7,
                label: 2,
                name: "slab".into(),
            },
            ShapeSpec {
                shape: Shape::Torus {
                    center: at(0.5, 0.72, 0.5),
                    major: 0.16 * m,
                    minor: 0.06 * m,
                    axis: Axis::Z,
                },
                intensity: 0.95,
                label: 3,
                name: "ring".into(),
            },
        ],
    }
}

/// Step along `axis`: `lo` below `position`, `hi` from it on, plus seeded
/// Gaussian noise, clamped to `[0, 1]`.
pub fn gen_step_edge(
    dims: Dims,
    axis: Axis,
    position: f32,
    lo: f32,
    hi: f32,
    noise_sigma: f32,
    seed: u64,
) -> Result<Volume, SynthError> {
    if !(noise_sigma >= 0.0) {
        return Err(SynthError::InvalidShape(format!("noise sigma {noise_sigma}")));
    }
    let a = axis.index();
    let mut data: Vec<f32> = (0..dims.len())
        .map(|i| if (dims.coords(i)[a] as f32) < position { lo } else { hi })
        .collect();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, noise_sigma).expect("finite sigma");
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Volume::new("edge", dims, data)?)
}

/// Whether the background passes through the hole of a ring: a 26-connected
/// path in the complement of `mask`, confined to the cylinder of radius
/// `major` around `axis`, joining the planes `center -/+ reach` along `axis`.
pub fn path_through_hole(mask: &[bool], dims: Dims, center: [f32; 3], major: f32, axis: Axis, reach: f32) -> bool {
    let a = axis.index();
    let [u, v] = axis.in_plane();
    let lo = (center[a] - reach).round().max(0.0) as usize;
    let hi = ((center[a] + reach).round() as usize).min(dims[a] - 1);
    let allowed = |c: [usize; 3]| {
        let du = c[u] as f32 - center[u];
        let dv = c[v] as f32 - center[v];
        c[a] >= lo && c[a] <= hi && du * du + dv * dv <= major * major && !mask[dims.index(c[0], c[1], c[2])]
    };
    let mut seen = vec![false; dims.len()];
    let mut queue = VecDeque::new();
    for i in 0..dims.len() {
        let c = dims.coords(i);
        if c[a] == lo && allowed(c) {
            seen[i] = true;
            queue.push_back(c);
        }
    }
    while let Some(c) = queue.pop_front() {
        if c[a] == hi {
            return true;
        }
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    if !dims.contains(n) {
                        continue;
                    }
                    let n = n.map(|x| x as usize);
                    let j = dims.index(n[0], n[1], n[2]);
                    if !seen[j] && allowed(n) {
                        seen[j] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
    }
    false
}
