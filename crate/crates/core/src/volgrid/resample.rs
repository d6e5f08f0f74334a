use super::Dims;

#[cfg(feature = "parallel")]
use crate::par::*;

/// Borrowed scalar grid.
#[derive(Clone, Copy, Debug)]
pub struct GridView<'a> {
    pub dims: Dims,
    pub data: &'a [f32],
}

impl<'a> GridView<'a> {
    pub fn new(dims: Dims, data: &'a [f32]) -> Self {
        assert_eq!(dims.len(), data.len(), "grid view length");
        GridView { dims, data }
    }
}

/// Lower corner index and fractional offset along one axis, clamped to the
/// grid.
#[inline]
fn axis_cell(p: f32, n: usize) -> (usize, usize, f32) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, (n - 1) as f32) };
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f32)
}

/// Trilinear interpolation at continuous voxel coordinates; positions
/// outside `[0, dim - 1]` are clamped.
#[inline]
pub fn trilinear_sample(g: &GridView<'_>, pos: [f32; 3]) -> f32 {
    let d = g.dims;
    let (x0, x1, fx) = axis_cell(pos[0], d[0]);
    let (y0, y1, fy) = axis_cell(pos[1], d[1]);
    let (z0, z1, fz) = axis_cell(pos[2], d[2]);
    let at = |x, y, z| g.data[d.index(x, y, z)];
    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Trilinear interpolation of a multi-channel grid (channels innermost).
pub fn trilinear_sample_channels(dims: Dims, channels: usize, data: &[f32], pos: [f32; 3]) -> Vec<f32> {
    let (x0, x1, fx) = axis_cell(pos[0], dims[0]);
    let (y0, y1, fy) = axis_cell(pos[1], dims[1]);
    let (z0, z1, fz) = axis_cell(pos[2], dims[2]);
    let mut out = vec![0.0f32; channels];
    for (z, wz) in [(z0, 1.0 - fz), (z1, fz)] {
        for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                let w = wx * wy * wz;
                if w == 0.0 {
                    continue;
                }
                let base = dims.index(x, y, z) * channels;
                for (o, v) in out.iter_mut().zip(&data[base..base + channels]) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

/// Area weights of fractional-edge box pooling from `n` input cells to `m`
/// output bins: `weights[o]` lists `(input index, weight)` pairs summing to 1.
pub fn pool_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let width = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let lo = o as f64 * width;
            let hi = (o + 1) as f64 * width;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|i| {
                    let overlap = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                    (overlap > 1e-12).then(|| (i, overlap / width))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted box resampling of a `channels`-wide grid from `dims` to
/// `target`. Separable: each axis is pooled in turn.
pub fn box_pool(data: &[f32], dims: Dims, channels: usize, target: Dims) -> Vec<f32> {
    assert_eq!(data.len(), dims.len() * channels, "box_pool input length");
    let mut cur = data.to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        if cur_dims[axis] == target[axis] {
            continue;
        }
        let mut next_dims = cur_dims;
        next_dims.0[axis] = target[axis];
        cur = pool_axis(&cur, cur_dims, channels, axis, target[axis]);
        cur_dims = next_dims;
    }
    cur
}

fn pool_axis(data: &[f32], dims: Dims, channels: usize, axis: usize, m: usize) -> Vec<f32> {
    let n = dims[axis];
    // Layout viewed as [outer][n][inner].
    let inner: usize = channels * dims.0[..axis].iter().product::<usize>();
    let outer: usize = dims.0[axis + 1..].iter().product();
    let weights = pool_weights(n, m);
    let mut out = vec![0.0f32; outer * m * inner];
    cfg_chunks_mut!(out, inner).enumerate().for_each(|(row, dst)| {
        let (o_outer, o) = (row / m, row % m);
        let mut acc = vec![0.0f64; inner];
        for &(i, w) in &weights[o] {
            let src = &data[(o_outer * n + i) * inner..(o_outer * n + i + 1) * inner];
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += w * v as f64;
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    });
    out
}
