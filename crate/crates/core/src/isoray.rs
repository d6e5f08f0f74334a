//! CPU iso-surface raycaster over similarity volumes, plus 2D slice overlays.
//!
//! World space is the source volume's voxel grid: the box spans voxel
//! centers `[0, W - 1]` on each axis. A class grid of `n` voxels along an
//! axis is addressed at `p * n / W`, the same scaling used when resampling
//! similarity maps, so low and refined maps line up.

use std::path::Path;

use image::Rgba;
pub use image::RgbaImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simquery::{AnnotationSet, ClassDef};
use crate::volgrid::{trilinear_sample, Axis, Dims, GridView, SimilarityVolume, Volume};

#[cfg(feature = "parallel")]
use crate::par::*;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no enabled classes to render")]
    NoEnabledClasses,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid render settings: {0}")]
    InvalidSettings(String),
    #[error("slice {index} outside 0..{len} along {axis:?}")]
    IndexOutOfRange { axis: Axis, index: usize, len: usize },
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

type V3 = [f32; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn scale(a: V3, s: f32) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: V3, b: V3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn length(a: V3) -> f32 {
    dot(a, a).sqrt()
}
fn normalize(a: V3) -> V3 {
    scale(a, 1.0 / length(a))
}

/// Pinhole camera in world (voxel) units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: V3,
    pub look_at: V3,
    pub up: V3,
    /// Vertical field of view in degrees.
    #[serde(alias = "vertical_fov")]
    pub fov: f32,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Three-quarter view of the whole volume from outside its bounding
    /// sphere.
    pub fn overview(world: Dims, width: u32, height: u32) -> Camera {
        let c = world.0.map(|d| (d as f32 - 1.0) / 2.0);
        let r = length(c).max(1.0);
        let dir = normalize([0.55, -0.75, 0.45]);
        Camera {
            eye: add(c, scale(dir, 3.2 * r)),
            look_at: c,
            up: [0.0, 0.0, 1.0],
            fov: 40.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::InvalidCamera(m.into()));
        if !(self.fov > 1.0 && self.fov < 179.0) {
            return bad("fov must lie in (1, 179) degrees");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image dims must be positive");
        }
        if !self.eye.iter().chain(&self.look_at).chain(&self.up).all(|v| v.is_finite()) {
            return bad("non-finite vector");
        }
        let f = sub(self.look_at, self.eye);
        if length(f) < 1e-6 {
            return bad("eye coincides with look_at");
        }
        if length(cross(normalize(f), self.up)) < 1e-6 * length(self.up).max(1e-30) || length(self.up) == 0.0 {
            return bad("up is parallel to the view direction");
        }
        Ok(())
    }

    /// Unit direction of the ray through the center of pixel `(i, j)`, row 0
    /// at the top.
    pub fn ray_dir(&self, i: u32, j: u32) -> V3 {
        let f = normalize(sub(self.look_at, self.eye));
        let r = normalize(cross(f, self.up));
        let u = cross(r, f);
        let th = (self.fov.to_radians() / 2.0).tan();
        let aspect = self.width as f32 / self.height as f32;
        let x = (2.0 * (i as f32 + 0.5) / self.width as f32 - 1.0) * th * aspect;
        let y = (1.0 - 2.0 * (j as f32 + 0.5) / self.height as f32) * th;
        normalize(add(f, add(scale(r, x), scale(u, y))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub step_size: f32,
    pub binary_search_iters: u32,
    pub early_termination_alpha: f32,
    pub ambient: f32,
    pub diffuse: f32,
    pub specular: f32,
    pub shininess: f32,
    /// Direction toward the light.
    pub light_dir: V3,
    /// Offset of shadow ray origins along `light_dir`; `None` means two steps.
    pub shadow_bias: Option<f32>,
    pub shadows: bool,
    pub background: [f32; 4],
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            step_size: 1.0,
            binary_search_iters: 8,
            early_termination_alpha: 0.99,
            ambient: 0.1,
            diffuse: 0.7,
            specular: 0.2,
            shininess: 32.0,
            light_dir: normalize([0.4, -0.5, 0.77]),
            shadow_bias: None,
            shadows: true,
            background: [0.0, 0.0, 0.0, 1.0],
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::InvalidSettings(m.into()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.early_termination_alpha > 0.0 && self.early_termination_alpha <= 1.0) {
            return bad("early_termination_alpha must lie in (0, 1]");
        }
        if !(length(self.light_dir) > 0.0) {
            return bad("light_dir must be nonzero");
        }
        if !self.background.iter().all(|v| (0.0..=1.0).contains(v)) {
            return bad("background must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn bias(&self) -> f32 {
        self.shadow_bias.unwrap_or(2.0 * self.step_size)
    }
}

/// One class prepared for marching.
#[derive(Clone, Copy)]
struct Layer<'a> {
    class: &'a ClassDef,
    grid: GridView<'a>,
    /// World -> grid coordinate scale per axis.
    to_grid: V3,
}

impl Layer<'_> {
    #[inline]
    fn sample(&self, p: V3) -> f32 {
        trilinear_sample(&self.grid, [p[0] * self.to_grid[0], p[1] * self.to_grid[1], p[2] * self.to_grid[2]])
    }

    /// World-space gradient by central differences over one class voxel.
    fn gradient(&self, p: V3) -> V3 {
        let q = [p[0] * self.to_grid[0], p[1] * self.to_grid[1], p[2] * self.to_grid[2]];
        std::array::from_fn(|a| {
            let mut lo = q;
            let mut hi = q;
            lo[a] -= 1.0;
            hi[a] += 1.0;
            (trilinear_sample(&self.grid, hi) - trilinear_sample(&self.grid, lo)) / 2.0 * self.to_grid[a]
        })
    }
}

fn layer<'a>(class: &'a ClassDef, s: &'a SimilarityVolume, world: Dims) -> Layer<'a> {
    Layer {
        class,
        grid: s.view(),
        to_grid: std::array::from_fn(|a| s.dims[a] as f32 / world[a] as f32),
    }
}

/// Parametric entry and exit of a ray through the world box, if it hits.
fn box_hit(world: Dims, o: V3, d: V3) -> Option<(f32, f32)> {
    let mut t0 = 0.0f32;
    let mut t1 = f32::INFINITY;
    for a in 0..3 {
        let hi = (world[a] as f32 - 1.0).max(0.0);
        if d[a].abs() < 1e-12 {
            if o[a] < 0.0 || o[a] > hi {
                return None;
            }
        } else {
            let (mut ta, mut tb) = ((0.0 - o[a]) / d[a], (hi - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

fn at(o: V3, d: V3, t: f32) -> V3 {
    add(o, scale(d, t))
}

/// Bisects `[lo, hi]` where `lo` is below `iso` and `hi` at or above it;
/// returns the final interval midpoint.
fn refine_crossing(l: &Layer<'_>, o: V3, d: V3, mut lo: f32, mut hi: f32, iters: u32) -> f32 {
    let iso = l.class.iso_value;
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if l.sample(at(o, d, mid)) >= iso {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// First up-crossing of `class`'s iso-value along the ray `o + t d`, with
/// `d` a unit vector. A ray entering the box already inside the surface
/// hits at the entry point.
pub fn surface_depth(class: &ClassDef, s: &SimilarityVolume, world: Dims, o: V3, d: V3, settings: &RenderSettings) -> Option<f32> {
    let l = layer(class, s, world);
    let (t0, t1) = box_hit(world, o, d)?;
    let step = settings.step_size;
    let mut prev_t = t0;
    if l.sample(at(o, d, t0)) >= class.iso_value {
        return Some(t0);
    }
    let mut k = 1u32;
    loop {
        let t = (t0 + k as f32 * step).min(t1);
        if l.sample(at(o, d, t)) >= class.iso_value {
            return Some(refine_crossing(&l, o, d, prev_t, t, settings.binary_search_iters));
        }
        if t >= t1 {
            return None;
        }
        prev_t = t;
        k += 1;
    }
}

fn in_shadow(layers: &[Layer<'_>], world: Dims, p: V3, l: V3, settings: &RenderSettings) -> bool {
    let o = at(p, l, settings.bias());
    let Some((t0, t1)) = box_hit(world, o, l) else {
        return false;
    };
    let mut t = t0;
    while t <= t1 {
        let q = at(o, l, t);
        if layers.iter().any(|ly| ly.sample(q) >= ly.class.iso_value) {
            return true;
        }
        t += settings.step_size;
    }
    false
}

fn shade(ly: &Layer<'_>, layers: &[Layer<'_>], world: Dims, p: V3, d: V3, settings: &RenderSettings) -> V3 {
    let g = ly.gradient(p);
    let view = scale(d, -1.0);
    let n = if length(g) > 1e-8 { normalize(scale(g, -1.0)) } else { view };
    let l = normalize(settings.light_dir);
    let lit = !(settings.shadows && in_shadow(layers, world, p, l, settings));
    let ndl = dot(n, l).max(0.0);
    let (diff, spec) = if lit && ndl > 0.0 {
        let r = sub(scale(n, 2.0 * dot(n, l)), l);
        (settings.diffuse * ndl, settings.specular * dot(r, view).max(0.0).powf(settings.shininess))
    } else {
        (0.0, 0.0)
    };
    let c = ly.class.color;
    std::array::from_fn(|k| (c[k] * (settings.ambient + diff) + spec).min(1.0))
}

/// Front-to-back color along one ray: premultiplied RGB and alpha.
fn trace(layers: &[Layer<'_>], world: Dims, o: V3, d: V3, settings: &RenderSettings) -> ([f32; 3], f32) {
    let mut rgb = [0.0f32; 3];
    let mut alpha = 0.0f32;
    let Some((t0, t1)) = box_hit(world, o, d) else {
        return (rgb, alpha);
    };
    let step = settings.step_size;
    let mut prev: Vec<f32> = layers.iter().map(|l| l.sample(at(o, d, t0))).collect();
    let mut hits: Vec<(f32, usize)> = Vec::with_capacity(layers.len());
    let composite = |t: f32, k: usize, rgb: &mut [f32; 3], alpha: &mut f32| {
        let ly = &layers[k];
        let p = at(o, d, t);
        let c = shade(ly, layers, world, p, d, settings);
        let a = ly.class.opacity;
        for ch in 0..3 {
            rgb[ch] += (1.0 - *alpha) * a * c[ch];
        }
        *alpha += (1.0 - *alpha) * a;
    };
    for (k, ly) in layers.iter().enumerate() {
        if prev[k] >= ly.class.iso_value {
            hits.push((t0, k));
        }
    }
    let mut prev_t = t0;
    let mut step_k = 1u32;
    loop {
        for &(t, k) in &hits {
            composite(t, k, &mut rgb, &mut alpha);
            if alpha >= settings.early_termination_alpha {
                return (rgb, alpha);
            }
        }
        hits.clear();
        if prev_t >= t1 {
            break;
        }
        let t = (t0 + step_k as f32 * step).min(t1);
        let p = at(o, d, t);
        for (k, ly) in layers.iter().enumerate() {
            let s = ly.sample(p);
            if prev[k] < ly.class.iso_value && s >= ly.class.iso_value {
                hits.push((refine_crossing(ly, o, d, prev_t, t, settings.binary_search_iters), k));
            }
            prev[k] = s;
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        prev_t = t;
        step_k += 1;
    }
    (rgb, alpha)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders every visible class as an iso-surface. `world` is the source
/// volume's dims; classes may have any grid size.
pub fn render(
    classes: &[(&ClassDef, &SimilarityVolume)],
    world: Dims,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<RgbaImage, RenderError> {
    cam.validate()?;
    settings.validate()?;
    let mut layers: Vec<Layer<'_>> = classes
        .iter()
        .filter(|(c, _)| c.visible && c.opacity > 0.0)
        .map(|(c, s)| layer(c, s, world))
        .collect();
    if layers.is_empty() {
        return Err(RenderError::NoEnabledClasses);
    }
    layers.sort_by_key(|l| l.class.id);
    let (w, h) = (cam.width, cam.height);
    let bg = settings.background;
    let bg_px = [to_u8(bg[0]), to_u8(bg[1]), to_u8(bg[2]), to_u8(bg[3])];
    let mut buf = vec![0u8; w as usize * h as usize * 4];
    cfg_chunks_mut!(buf, w as usize * 4)
        .enumerate()
        .for_each(|(j, row)| {
            for i in 0..w {
                let d = cam.ray_dir(i, j as u32);
                let (rgb, a) = trace(&layers, world, cam.eye, d, settings);
                let px = &mut row[i as usize * 4..i as usize * 4 + 4];
                if a <= 0.0 {
                    px.copy_from_slice(&bg_px);
                    continue;
                }
                let out_a = a + (1.0 - a) * bg[3];
                for k in 0..3 {
                    px[k] = to_u8((rgb[k] + (1.0 - a) * bg[k] * bg[3]) / out_a);
                }
                px[3] = to_u8(out_a);
            }
        });
    Ok(RgbaImage::from_raw(w, h, buf).expect("buffer sized to image"))
}

/// Alpha of the class tint in slice overlays.
pub const OVERLAY_ALPHA: f32 = 0.45;
/// Radius of annotation markers in slice overlays, in pixels.
pub const MARKER_RADIUS: f32 = 3.0;

/// Grayscale slice of `v` at `index` along `axis`, tinted where each class
/// reaches its iso-value, with that class's annotations on this slice drawn
/// as circles. Image x and y follow the two in-plane axes in order.
pub fn render_slice_overlay(
    v: &Volume,
    axis: Axis,
    index: usize,
    overlays: &[(&ClassDef, &SimilarityVolume, &AnnotationSet)],
) -> Result<RgbaImage, RenderError> {
    let d = v.dims;
    let a = axis.index();
    if index >= d[a] {
        return Err(RenderError::IndexOutOfRange {
            axis,
            index,
            len: d[a],
        });
    }
    let [u, w] = axis.in_plane();
    let (iw, ih) = (d[u] as u32, d[w] as u32);
    let mut img = RgbaImage::new(iw, ih);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let mut c = [0usize; 3];
        c[a] = index;
        c[u] = x as usize;
        c[w] = y as usize;
        let g = v.get(c[0], c[1], c[2]);
        let mut rgb = [g; 3];
        for (class, s, _) in overlays {
            let to: V3 = std::array::from_fn(|k| s.dims[k] as f32 / d[k] as f32);
            let q: V3 = std::array::from_fn(|k| c[k] as f32 * to[k]);
            if trilinear_sample(&s.view(), q) >= class.iso_value {
                for k in 0..3 {
                    rgb[k] = (1.0 - OVERLAY_ALPHA) * rgb[k] + OVERLAY_ALPHA * class.color[k];
                }
            }
        }
        *px = Rgba([to_u8(rgb[0]), to_u8(rgb[1]), to_u8(rgb[2]), 255]);
    }
    for (class, _, set) in overlays {
        let color = Rgba([to_u8(class.color[0]), to_u8(class.color[1]), to_u8(class.color[2]), 255]);
        for p in set.points() {
            if p[a] as usize == index {
                draw_circle(&mut img, p[u] as f32, p[w] as f32, MARKER_RADIUS, color);
            }
        }
    }
    Ok(img)
}

/// One-pixel circle outline.
fn draw_circle(img: &mut RgbaImage, cx: f32, cy: f32, r: f32, color: Rgba<u8>) {
    let (w, h) = img.dimensions();
    let reach = r.ceil() as i64 + 1;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let dist = ((dx * dx + dy * dy) as f32).sqrt();
            if (dist - r).abs() > 0.5 {
                continue;
            }
            let (x, y) = (cx as i64 + dx, cy as i64 + dy);
            if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

pub fn save_png(img: &RgbaImage, path: &Path) -> Result<(), RenderError> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn png_bytes(img: &RgbaImage) -> Result<Vec<u8>, RenderError> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Frame filled with the background color, for scenes with nothing to draw.
pub fn background_frame(cam: &Camera, settings: &RenderSettings) -> RgbaImage {
    let bg = settings.background;
    RgbaImage::from_pixel(cam.width, cam.height, Rgba([to_u8(bg[0]), to_u8(bg[1]), to_u8(bg[2]), to_u8(bg[3])]))
}
