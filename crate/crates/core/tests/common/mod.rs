#![allow(dead_code)]

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use tfseg::bls3d::{refine, RefineConfig};
use tfseg::evalseg::LabelVolume;
use tfseg::featpipe::{merge_stacks, plan_for, toy_extract, DEFAULT_PATCH, DEFAULT_RESIZE};
use tfseg::simquery::{similarity_map, AnnotationSet};
use tfseg::{Dims, FeatureVolume, SimilarityVolume, Volume};

static SERIAL: Mutex<()> = Mutex::new(());

/// Timed criteria must not share the CPU with each other.
pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints one verdict line and returns whether it passed.
pub fn verdict(name: &str, pass: bool, detail: impl std::fmt::Display) -> bool {
    println!("ACCEPTANCE {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

pub fn toy_features(v: &Volume) -> FeatureVolume {
    let plan = plan_for(v.dims, DEFAULT_RESIZE, DEFAULT_PATCH).unwrap();
    let [fx, fy, fz] = toy_extract(v, &plan).unwrap();
    merge_stacks(&fx, &fy, &fz, plan.target_feature_dims).unwrap()
}

pub fn low_similarity(fv: &FeatureVolume, class_id: u32, points: &[[i64; 3]]) -> SimilarityVolume {
    let mut set = AnnotationSet::new(class_id);
    set.add_all(points, fv).unwrap();
    similarity_map(&set, fv).unwrap()
}

pub fn refined_mask(sim: &SimilarityVolume, v: &Volume, iso: f32) -> Vec<bool> {
    let r = refine(sim, v, &RefineConfig::default()).unwrap();
    assert_eq!(r.volume.dims, v.dims);
    r.volume.data().iter().map(|&s| s >= iso).collect()
}

pub fn iou(mask: &[bool], truth: &[bool]) -> f64 {
    let inter = mask.iter().zip(truth).filter(|(a, b)| **a && **b).count();
    let union = mask.iter().zip(truth).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

pub fn label_mask(l: &LabelVolume, c: u32) -> Vec<bool> {
    l.mask(c)
}

pub fn center(d: Dims) -> [f32; 3] {
    d.0.map(|n| (n as f32 - 1.0) / 2.0)
}
