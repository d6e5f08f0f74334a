// Kernel timings on a single-thread pool against the full rayon pool. Built
// with `--no-default-features` every kernel takes the sequential path and only
// the `seq` variants are meaningful.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tfseg::bls3d::{refine, BilateralGrid, NormalSystem, RefineConfig, pcg};
use tfseg::featpipe::{merge_stacks, plan_for, toy_extract};
use tfseg::isoray::{render, Camera, RenderSettings};
use tfseg::simquery::{similarity_map, AnnotationSet, ClassDef};
use tfseg::synthgen::gen_sphere;
use tfseg::volgrid::{box_pool, Resolution};
use tfseg::{Dims, SimilarityVolume};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let mut v = vec![("seq", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    v.push(("par", rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()));
    v
}

fn kernels(c: &mut Criterion) {
    let d = Dims::cube(64);
    let (v, labels) = gen_sphere(d, [31.5; 3], 20.0, 0.8, 0.2, 1.0).unwrap();
    let plan = plan_for(d, 224, 8).unwrap();
    let stacks = toy_extract(&v, &plan).unwrap();
    let [fx, fy, fz] = &stacks;
    let fv = merge_stacks(fx, fy, fz, plan.target_feature_dims).unwrap();
    let mut ann = AnnotationSet::new(1);
    ann.add_all(&[[32, 32, 32], [28, 30, 34]], &fv).unwrap();
    let sim = similarity_map(&ann, &fv).unwrap();
    let truth = SimilarityVolume::new(d, labels.labels.iter().map(|&l| l as f32).collect(), Resolution::Low, 1).unwrap();
    let cfg = RefineConfig::default();
    let class = ClassDef::new(1, "ball");
    let cam = Camera::overview(d, 128, 128);
    let settings = RenderSettings::default();

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("toy_extract", name), |b| {
            b.iter(|| pool.install(|| toy_extract(black_box(&v), &plan).unwrap()))
        });
        g.bench_function(BenchmarkId::new("merge_stacks", name), |b| {
            b.iter(|| pool.install(|| merge_stacks(black_box(fx), fy, fz, plan.target_feature_dims).unwrap()))
        });
        g.bench_function(BenchmarkId::new("box_pool", name), |b| {
            b.iter(|| pool.install(|| box_pool(black_box(v.data()), d, 1, Dims::cube(24))))
        });
        g.bench_function(BenchmarkId::new("similarity", name), |b| {
            b.iter(|| pool.install(|| similarity_map(black_box(&ann), &fv).unwrap()))
        });
        g.bench_function(BenchmarkId::new("grid_solve", name), |b| {
            b.iter(|| {
                pool.install(|| {
                    let mut grid = BilateralGrid::build(&v, &cfg).unwrap();
                    let t: Vec<f32> = truth.data().to_vec();
                    let sys = NormalSystem::new(&mut grid, &t, &cfg).unwrap();
                    pcg(&sys, sys.initial_guess(), cfg.pcg_tol, cfg.pcg_max_iters).unwrap()
                })
            })
        });
        g.bench_function(BenchmarkId::new("refine", name), |b| {
            b.iter(|| pool.install(|| refine(black_box(&sim), &v, &cfg).unwrap()))
        });
        g.bench_function(BenchmarkId::new("raycast", name), |b| {
            b.iter(|| pool.install(|| render(&[(&class, &truth)], d, &cam, &settings).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
