//! Annotation-driven similarity queries.
//!
//! A class's similarity at feature voxel `i` is the clamped mean cosine
//! similarity between the annotated features and `F_i`:
//!
//! ```text
//! S_i = max( (1/|A|) * sum_a cos(F_a, F_i), 0 )
//! ```
//!
//! Because the mean of cosines equals the dot product of `F_i / |F_i|` with
//! the mean of the normalized annotation features, one pass over the feature
//! grid suffices regardless of the number of annotations.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bls3d::RefineConfig;
use crate::evalseg::LabelVolume;
use crate::volgrid::{Dims, FeatureVolume, GridError, Resolution, SimilarityVolume};

#[cfg(feature = "parallel")]
use crate::par::*;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("annotation set is empty")]
    EmptyAnnotationSet,
    #[error("point {point:?} outside volume {dims}")]
    OutOfBounds { point: [i64; 3], dims: Dims },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("invalid class: {0}")]
    InvalidClass(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// User-facing class definition: render style, thresholds and refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: u32,
    pub name: String,
    #[serde(default = "default_color")]
    pub color: [f32; 3],
    #[serde(default = "one")]
    pub opacity: f32,
    #[serde(default = "half", alias = "iso")]
    pub iso_value: f32,
    #[serde(default)]
    pub proximity: f32,
    #[serde(default)]
    pub use_solver: bool,
    #[serde(default)]
    pub solver_cfg: RefineConfig,
    #[serde(default)]
    pub cc_filter: bool,
    /// Hidden classes are skipped by the renderer.
    #[serde(default = "yes")]
    pub visible: bool,
}

fn default_color() -> [f32; 3] {
    [0.2, 0.5, 1.0]
}
fn one() -> f32 {
    1.0
}
fn half() -> f32 {
    0.5
}
fn yes() -> bool {
    true
}

impl ClassDef {
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        ClassDef {
            id,
            name: name.into(),
            color: default_color(),
            opacity: 1.0,
            iso_value: 0.5,
            proximity: 0.0,
            use_solver: false,
            solver_cfg: RefineConfig::default(),
            cc_filter: false,
            visible: true,
        }
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        if self.id == 0 {
            return Err(QueryError::InvalidClass("class id 0 is reserved for background".into()));
        }
        if !unit(self.iso_value) || !unit(self.proximity) || !unit(self.opacity) {
            return Err(QueryError::InvalidClass(format!(
                "class {}: iso_value, proximity and opacity must lie in [0, 1]",
                self.id
            )));
        }
        if !self.color.iter().copied().all(unit) {
            return Err(QueryError::InvalidClass(format!("class {}: color outside [0, 1]", self.id)));
        }
        self.solver_cfg
            .validate()
            .map_err(|e| QueryError::InvalidClass(format!("class {}: {e}", self.id)))
    }
}

/// Annotated voxels of one class plus their cached feature vectors.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub class_id: u32,
    points: Vec<[u32; 3]>,
    #[serde(skip)]
    cached: Vec<Vec<f32>>,
    #[serde(skip)]
    cache_tag: u64,
}

impl PartialEq for AnnotationSet {
    fn eq(&self, other: &Self) -> bool {
        self.class_id == other.class_id && self.points == other.points
    }
}

impl AnnotationSet {
    pub fn new(class_id: u32) -> Self {
        AnnotationSet {
            class_id,
            ..Default::default()
        }
    }

    pub fn points(&self) -> &[[u32; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Cached features; valid only for the feature volume they were sampled from.
    pub fn cached_features(&self) -> &[Vec<f32>] {
        &self.cached
    }

    pub fn is_cache_valid_for(&self, fv: &FeatureVolume) -> bool {
        self.cache_tag == fv.tag() && self.cached.len() == self.points.len()
    }

    /// Resamples every cached feature if the feature volume changed.
    pub fn refresh(&mut self, fv: &FeatureVolume) {
        if !self.is_cache_valid_for(fv) {
            self.cached = self.points.iter().map(|&p| sample_at(fv, p)).collect();
            self.cache_tag = fv.tag();
        }
    }

    /// Adds one voxel; returns `false` if it was already present.
    pub fn add(&mut self, p: [i64; 3], fv: &FeatureVolume) -> Result<bool, QueryError> {
        if !fv.source_dims.contains(p) {
            return Err(QueryError::OutOfBounds {
                point: p,
                dims: fv.source_dims,
            });
        }
        self.refresh(fv);
        let p = p.map(|v| v as u32);
        if self.points.contains(&p) {
            return Ok(false);
        }
        self.points.push(p);
        self.cached.push(sample_at(fv, p));
        Ok(true)
    }

    /// Adds a batch (e.g. a rasterized brush stroke). Bounds are checked for
    /// the whole batch before any point is inserted.
    pub fn add_all(&mut self, points: &[[i64; 3]], fv: &FeatureVolume) -> Result<usize, QueryError> {
        if let Some(&p) = points.iter().find(|&&p| !fv.source_dims.contains(p)) {
            return Err(QueryError::OutOfBounds {
                point: p,
                dims: fv.source_dims,
            });
        }
        let mut added = 0;
        for &p in points {
            added += self.add(p, fv)? as usize;
        }
        Ok(added)
    }

    /// Inserts points without sampling features (e.g. when loading a session);
    /// call [`AnnotationSet::refresh`] before querying.
    pub fn extend_points(&mut self, points: impl IntoIterator<Item = [u32; 3]>) {
        for p in points {
            if !self.points.contains(&p) {
                self.points.push(p);
            }
        }
        self.cache_tag = 0;
    }

    /// Delete brush: removes every point within Euclidean `radius` of `center`.
    pub fn remove_near(&mut self, center: [f32; 3], radius: f32) -> usize {
        let r2 = radius.max(0.0).powi(2);
        let keep: Vec<bool> = self
            .points
            .iter()
            .map(|p| {
                let d2: f32 = (0..3).map(|a| (p[a] as f32 - center[a]).powi(2)).sum();
                d2 > r2
            })
            .collect();
        let before = self.points.len();
        let cache_ok = self.cached.len() == self.points.len();
        let mut k = keep.iter();
        self.points.retain(|_| *k.next().unwrap());
        if cache_ok {
            let mut k = keep.iter();
            self.cached.retain(|_| *k.next().unwrap());
        } else {
            self.cache_tag = 0;
        }
        before - self.points.len()
    }

    /// Mean of the normalized annotation features.
    pub fn query_vector(&self, fv: &FeatureVolume) -> Result<Vec<f32>, QueryError> {
        if self.points.is_empty() {
            return Err(QueryError::EmptyAnnotationSet);
        }
        let fresh;
        let feats: &[Vec<f32>] = if self.is_cache_valid_for(fv) {
            &self.cached
        } else {
            fresh = self.points.iter().map(|&p| sample_at(fv, p)).collect::<Vec<_>>();
            &fresh
        };
        let mut q = vec![0.0f64; fv.feature_dim];
        for f in feats {
            let norm = f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (qi, &v) in q.iter_mut().zip(f) {
                    *qi += v as f64 / norm;
                }
            }
        }
        let n = feats.len() as f64;
        Ok(q.into_iter().map(|v| (v / n) as f32).collect())
    }
}

fn sample_at(fv: &FeatureVolume, p: [u32; 3]) -> Vec<f32> {
    fv.sample(fv.to_feature_coords(p.map(|v| v as f32)))
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent accumulators so the loop vectorizes.
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Clamped mean cosine similarity of every feature voxel to the annotations.
pub fn similarity_map(set: &AnnotationSet, fv: &FeatureVolume) -> Result<SimilarityVolume, QueryError> {
    let q = set.query_vector(fv)?;
    Ok(similarity_from_query(&q, fv, set.class_id))
}

/// Clamped cosine of every voxel against a precomputed query vector.
pub fn similarity_from_query(q: &[f32], fv: &FeatureVolume, class_id: u32) -> SimilarityVolume {
    let data = similarity_rows(q, fv, None);
    SimilarityVolume::new(fv.dims, data, Resolution::Low, class_id).expect("clamped similarity")
}

/// One pass over the feature data, row by row, optionally multiplying in
/// proximity weights while each row is hot.
fn similarity_rows(q: &[f32], fv: &FeatureVolume, proximity: Option<&Proximity>) -> Vec<f32> {
    let f = fv.feature_dim;
    let row = fv.dims[0];
    // Several x-rows per task keeps scheduling overhead negligible.
    let rows = (4096 / row).max(1);
    let norms = fv.norms();
    let mut out = vec![0.0f32; fv.dims.len()];
    cfg_chunks_mut!(out, rows * row)
        .zip(cfg_chunks!(fv.data(), rows * row * f))
        .enumerate()
        .for_each(|(c, (dst, feats))| {
            let base = c * rows * row;
            for (k, (o, fi)) in dst.iter_mut().zip(feats.chunks_exact(f)).enumerate() {
                *o = (dot(q, fi) / norms[base + k]).clamp(0.0, 1.0);
            }
            if let Some(p) = proximity {
                for (r, line) in dst.chunks_mut(row).enumerate() {
                    p.apply_row(c * rows + r, line, true);
                }
            }
        });
    out
}

/// Annotation anchors in normalized `[0, 1]^3` coordinates.
struct Proximity {
    anchors: Vec<[f32; 3]>,
    k: f32,
    dims: Dims,
    inv: [f32; 3],
}

impl Proximity {
    fn new(set: &AnnotationSet, target: Dims, source_dims: Dims, proximity: f32) -> Self {
        Proximity {
            anchors: set
                .points()
                .iter()
                .map(|p| std::array::from_fn(|a| p[a] as f32 / source_dims[a] as f32))
                .collect(),
            k: 10.0 * proximity,
            dims: target,
            inv: std::array::from_fn(|a| 1.0 / target[a] as f32),
        }
    }

    /// Writes (or multiplies in) the weights of x-row `row`.
    fn apply_row(&self, row: usize, dst: &mut [f32], multiply: bool) {
        let y = (row % self.dims[1]) as f32 * self.inv[1];
        let z = (row / self.dims[1]) as f32 * self.inv[2];
        // Squared (y, z) distance to each anchor is fixed along a row.
        let partial: Vec<f32> = self.anchors.iter().map(|a| (y - a[1]).powi(2) + (z - a[2]).powi(2)).collect();
        for (i, o) in dst.iter_mut().enumerate() {
            if multiply && *o == 0.0 {
                continue;
            }
            let x = i as f32 * self.inv[0];
            let d2 = partial
                .iter()
                .zip(&self.anchors)
                .map(|(p, a)| (x - a[0]).powi(2) + p)
                .fold(f32::INFINITY, f32::min);
            let w = (-self.k * d2.sqrt()).exp();
            *o = if multiply { *o * w } else { w };
        }
    }
}

/// `P(x) = max_a exp(-10 p |x - a|)` over a `target` grid, with voxel and
/// annotation positions normalized to `[0, 1]^3` by their grid extents.
pub fn proximity_weights(
    set: &AnnotationSet,
    target: Dims,
    source_dims: Dims,
    proximity: f32,
) -> Result<Vec<f32>, QueryError> {
    if set.is_empty() {
        return Err(QueryError::EmptyAnnotationSet);
    }
    if proximity == 0.0 {
        return Ok(vec![1.0; target.len()]);
    }
    let p = Proximity::new(set, target, source_dims, proximity);
    let mut out = vec![0.0f32; target.len()];
    cfg_chunks_mut!(out, target[0])
        .enumerate()
        .for_each(|(r, dst)| p.apply_row(r, dst, false));
    Ok(out)
}

/// Similarity map scaled elementwise by the proximity weights.
pub fn scaled_similarity(
    set: &AnnotationSet,
    fv: &FeatureVolume,
    proximity: f32,
) -> Result<SimilarityVolume, QueryError> {
    let q = set.query_vector(fv)?;
    let p = (proximity != 0.0).then(|| Proximity::new(set, fv.dims, fv.source_dims, proximity));
    let data = similarity_rows(&q, fv, p.as_ref());
    Ok(SimilarityVolume::new(fv.dims, data, Resolution::Low, set.class_id)?)
}

/// Argmax labeling: each voxel takes the class with the highest similarity
/// among those at or above their iso-value; ties go to the lowest class id;
/// 0 when no class qualifies.
pub fn label_volume(classes: &[(&ClassDef, &SimilarityVolume)]) -> Result<LabelVolume, QueryError> {
    let Some((_, first)) = classes.first() else {
        return Err(QueryError::DimMismatch("no classes to label".into()));
    };
    let dims = first.dims;
    if let Some((c, s)) = classes.iter().find(|(_, s)| s.dims != dims) {
        return Err(QueryError::DimMismatch(format!(
            "class {} has dims {}, expected {dims}",
            c.id, s.dims
        )));
    }
    let mut order: Vec<&(&ClassDef, &SimilarityVolume)> = classes.iter().collect();
    order.sort_by_key(|(c, _)| c.id);
    let labels: Vec<u32> = cfg_into_iter!(0..dims.len())
        .map(|i| {
            let mut best = 0u32;
            let mut best_s = f32::NEG_INFINITY;
            for (c, s) in &order {
                let v = s.data()[i];
                if v >= c.iso_value && v > best_s {
                    best = c.id;
                    best_s = v;
                }
            }
            best
        })
        .collect();
    let names: Vec<(u32, String)> = classes.iter().map(|(c, _)| (c.id, c.name.clone())).collect();
    Ok(LabelVolume::new(dims, labels, names).expect("labels drawn from class ids"))
}

/// Component selection for [`connected_components_filter`].
#[derive(Clone, Debug, PartialEq)]
pub enum KeepComponents {
    Largest,
    /// Components containing any of these voxels (in mask coordinates).
    Containing(Vec<[usize; 3]>),
}

/// 26-connected component labels (0 = background, components numbered from
/// 1 in scan order) and the size of each component.
pub fn label_components(mask: &[bool], dims: Dims) -> (Vec<u32>, Vec<usize>) {
    assert_eq!(mask.len(), dims.len());
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..mask.len() {
        if !mask[seed] || labels[seed] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[seed] = id;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let c = dims.coords(i).map(|v| v as i64);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if !dims.contains(n) {
                            continue;
                        }
                        let j = dims.index(n[0] as usize, n[1] as usize, n[2] as usize);
                        if mask[j] && labels[j] == 0 {
                            labels[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the selected 26-connected components of a binary mask.
pub fn connected_components_filter(
    mask: &[bool],
    dims: Dims,
    keep: &KeepComponents,
) -> Result<Vec<bool>, QueryError> {
    if mask.len() != dims.len() {
        return Err(QueryError::DimMismatch(format!(
            "mask has {} voxels, dims {dims}",
            mask.len()
        )));
    }
    let (labels, sizes) = label_components(mask, dims);
    let selected: Vec<u32> = match keep {
        KeepComponents::Largest => {
            if sizes.is_empty() {
                return Err(QueryError::EmptyMask);
            }
            // First maximal component in scan order.
            let best = sizes
                .iter()
                .enumerate()
                .fold(0, |b, (i, &s)| if s > sizes[b] { i } else { b });
            vec![best as u32 + 1]
        }
        KeepComponents::Containing(points) => points
            .iter()
            .filter(|p| (0..3).all(|a| p[a] < dims[a]))
            .map(|p| labels[dims.index(p[0], p[1], p[2])])
            .filter(|&l| l != 0)
            .collect(),
    };
    Ok(labels.iter().map(|l| *l != 0 && selected.contains(l)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Feature volume whose voxel `i` carries `feats[i]`.
    fn fv_from(dims: Dims, source: Dims, feats: &[Vec<f32>]) -> FeatureVolume {
        let f = feats[0].len();
        FeatureVolume::new(dims, source, f, feats.concat()).unwrap()
    }

    #[test]
    fn duplicate_points_are_ignored() {
        let fv = fv_from(Dims::new(2, 1, 1), Dims::new(2, 1, 1), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut set = AnnotationSet::new(1);
        assert!(set.add([0, 0, 0], &fv).unwrap());
        assert!(!set.add([0, 0, 0], &fv).unwrap());
        assert_eq!(set.len(), 1);
        assert!(matches!(set.add([2, 0, 0], &fv), Err(QueryError::OutOfBounds { .. })));
        assert!(matches!(set.add([0, -1, 0], &fv), Err(QueryError::OutOfBounds { .. })));
    }

    #[test]
    fn corner_annotation_samples_corner_feature() {
        let feats: Vec<Vec<f32>> = (0..8).map(|i| vec![i as f32 + 1.0, 1.0]).collect();
        let fv = fv_from(Dims::cube(2), Dims::cube(16), &feats);
        let mut set = AnnotationSet::new(1);
        set.add([0, 0, 0], &fv).unwrap();
        assert_eq!(set.cached_features()[0], vec![1.0, 1.0]);
    }

    #[test]
    fn brush_stroke_caches_every_point() {
        let feats: Vec<Vec<f32>> = (0..64).map(|i| vec![1.0, i as f32]).collect();
        let fv = fv_from(Dims::cube(4), Dims::cube(32), &feats);
        let mut set = AnnotationSet::new(1);
        let stroke: Vec<[i64; 3]> = (0..10).map(|k| [k, 5, 5]).collect();
        assert_eq!(set.add_all(&stroke, &fv).unwrap(), 10);
        assert_eq!(set.cached_features().len(), 10);
    }

    #[test]
    fn delete_brush_radius_semantics() {
        let fv = fv_from(Dims::cube(2), Dims::cube(16), &vec![vec![1.0]; 8]);
        let mut set = AnnotationSet::new(1);
        set.add([4, 4, 4], &fv).unwrap();
        assert_eq!(set.remove_near([4.0, 4.0, 4.0], 0.0), 1);
        for p in [[0, 0, 0], [3, 0, 0], [10, 0, 0]] {
            set.add(p, &fv).unwrap();
        }
        // distances 1 and 8 from (1,0,0): radius 2 removes the first two.
        assert_eq!(set.remove_near([1.0, 0.0, 0.0], 2.0), 2);
        assert_eq!(set.points(), &[[10, 0, 0]]);
        assert_eq!(set.cached_features().len(), 1);
        assert_eq!(set.remove_near([0.0; 3], 100.0), 1);
        assert!(set.is_empty());
    }

    #[test]
    fn similarity_hand_values() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let feats = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![s, s]];
        let fv = fv_from(Dims::new(4, 1, 1), Dims::new(4, 1, 1), &feats);
        let mut one = AnnotationSet::new(1);
        one.add([0, 0, 0], &fv).unwrap();
        let m = similarity_map(&one, &fv).unwrap();
        assert!((m.data()[0] - 1.0).abs() < 1e-6);
        assert_eq!(m.data()[2], 0.0);
        let mut two = AnnotationSet::new(1);
        two.add([0, 0, 0], &fv).unwrap();
        two.add([1, 0, 0], &fv).unwrap();
        let m = similarity_map(&two, &fv).unwrap();
        assert!((m.data()[3] - 0.70710677).abs() < 1e-6);
        assert!(matches!(
            similarity_map(&AnnotationSet::new(1), &fv),
            Err(QueryError::EmptyAnnotationSet)
        ));
    }

    #[test]
    fn proximity_values() {
        let fv = fv_from(Dims::cube(2), Dims::cube(10), &vec![vec![1.0]; 8]);
        let mut set = AnnotationSet::new(1);
        set.add([0, 0, 0], &fv).unwrap();
        assert!(proximity_weights(&set, Dims::cube(4), Dims::cube(10), 0.0)
            .unwrap()
            .iter()
            .all(|&w| w == 1.0));
        let w = proximity_weights(&set, Dims::new(2, 1, 1), Dims::cube(10), 0.1).unwrap();
        assert_eq!(w[0], 1.0);
        // Voxel 1 of a 2-wide grid sits at normalized x = 0.5.
        assert!((w[1] - (-0.5f32).exp()).abs() < 1e-6);
        let w = proximity_weights(&set, Dims::new(1, 1, 1), Dims::new(10, 10, 10), 0.1).unwrap();
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn proximity_unit_distance() {
        // Annotation at normalized (1,0,0) and voxel at the origin: distance 1.
        let fv = fv_from(Dims::cube(1), Dims::new(4, 4, 4), &[vec![1.0]]);
        let mut set = AnnotationSet::new(1);
        set.extend_points([[4, 0, 0]]);
        let w = proximity_weights(&set, Dims::cube(1), fv.source_dims, 0.1).unwrap();
        assert!((w[0] - 0.36787944).abs() < 1e-6);
    }

    #[test]
    fn labels_pick_highest_qualifying_class() {
        let a = ClassDef::new(1, "a");
        let b = ClassDef::new(2, "b");
        let d = Dims::new(4, 1, 1);
        let sa = SimilarityVolume::new(d, vec![0.6, 0.7, 0.2, 0.8], Resolution::Low, 1).unwrap();
        let sb = SimilarityVolume::new(d, vec![0.1, 0.9, 0.3, 0.8], Resolution::Low, 2).unwrap();
        let l = label_volume(&[(&b, &sb), (&a, &sa)]).unwrap();
        assert_eq!(l.labels, vec![1, 2, 0, 1]);
        let other = SimilarityVolume::zeros(Dims::cube(2), Resolution::Low, 3);
        assert!(matches!(
            label_volume(&[(&a, &sa), (&b, &other)]),
            Err(QueryError::DimMismatch(_))
        ));
    }

    fn blobs() -> (Vec<bool>, Dims) {
        let d = Dims::new(12, 4, 4);
        let mut m = vec![false; d.len()];
        // 10-voxel blob
        for x in 0..5 {
            for y in 0..2 {
                m[d.index(x, y, 0)] = true;
            }
        }
        // 3-voxel blob, diagonal chain (26-connected only)
        m[d.index(9, 1, 1)] = true;
        m[d.index(10, 2, 2)] = true;
        m[d.index(11, 3, 3)] = true;
        (m, d)
    }

    #[test]
    fn keeps_largest_or_annotated_component() {
        let (m, d) = blobs();
        let big = connected_components_filter(&m, d, &KeepComponents::Largest).unwrap();
        assert_eq!(big.iter().filter(|&&b| b).count(), 10);
        assert!(!big[d.index(10, 2, 2)]);
        let small =
            connected_components_filter(&m, d, &KeepComponents::Containing(vec![[10, 2, 2]])).unwrap();
        assert_eq!(small.iter().filter(|&&b| b).count(), 3);
        assert!(matches!(
            connected_components_filter(&vec![false; d.len()], d, &KeepComponents::Largest),
            Err(QueryError::EmptyMask)
        ));
    }

    #[test]
    fn solid_ball_is_unchanged() {
        let d = Dims::cube(9);
        let m: Vec<bool> = (0..d.len())
            .map(|i| {
                let c = d.coords(i);
                (0..3).map(|a| (c[a] as f32 - 4.0).powi(2)).sum::<f32>() <= 9.0
            })
            .collect();
        let f = connected_components_filter(&m, d, &KeepComponents::Largest).unwrap();
        assert_eq!(f, m);
    }

    #[test]
    fn class_validation() {
        assert!(ClassDef::new(1, "ok").validate().is_ok());
        assert!(ClassDef::new(0, "bg").validate().is_err());
        let mut c = ClassDef::new(2, "x");
        c.iso_value = 1.5;
        assert!(c.validate().is_err());
    }
}
