use proptest::prelude::*;
use tfseg::bls3d::{pcg, refine, BilateralGrid, NormalSystem, RefineConfig};
use tfseg::synthgen::gen_sphere;
use tfseg::volgrid::Resolution;
use tfseg::{Dims, SimilarityVolume, Volume};

fn crop() -> impl Strategy<Value = (Volume, RefineConfig)> {
    (2usize..10, 2usize..10, 2usize..10, 1.0f32..6.0, 4.0f32..64.0)
        .prop_filter("at least 8 voxels", |(x, y, z, _, _)| x * y * z >= 8)
        .prop_flat_map(|(x, y, z, ss, sl)| {
            let d = Dims::new(x, y, z);
            (prop::collection::vec(0.0f32..=1.0, d.len()), Just(d), Just(ss), Just(sl))
        })
        .prop_map(|(data, d, ss, sl)| {
            let cfg = RefineConfig {
                sigma_spatial: ss,
                sigma_luma: sl,
                ..Default::default()
            };
            (Volume::new("r", d, data).unwrap(), cfg)
        })
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_structure((v, cfg) in crop()) {
        let mut g = BilateralGrid::build(&v, &cfg).unwrap();
        prop_assert!(g.num_vertices() <= g.num_voxels());
        prop_assert_eq!(g.mass().iter().sum::<f64>(), g.num_voxels() as f64);
        prop_assert_eq!(g.splat(&vec![1.0; g.num_voxels()]).unwrap(), g.mass().to_vec());
        for vtx in 0..g.num_vertices() {
            for dim in 0..4 {
                if let Some(u) = g.neighbor(vtx, dim, true) {
                    prop_assert_eq!(g.neighbor(u, dim, false), Some(vtx));
                }
                if let Some(u) = g.neighbor(vtx, dim, false) {
                    prop_assert_eq!(g.neighbor(u, dim, true), Some(vtx));
                }
            }
        }
        prop_assert!(g.bistochastize(16).iter().all(|&n| n > 0.0));
    }

    #[test]
    fn system_is_symmetric_psd((v, cfg) in crop(), seed in any::<u64>()) {
        let mut g = BilateralGrid::build(&v, &cfg).unwrap();
        let t = vec![0.5f32; g.num_voxels()];
        let sys = NormalSystem::new(&mut g, &t, &cfg).unwrap();
        let nv = sys.grid().num_vertices();
        let r = |k: u64| -> Vec<f64> {
            (0..nv).map(|i| (((i as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15) ^ seed ^ k) % 2001) as f64 / 1000.0 - 1.0).collect()
        };
        let (y1, y2) = (r(1), r(2));
        let (a1, a2) = (sys.apply(&y1), sys.apply(&y2));
        let scale = dotp(&a1, &a1).sqrt() * dotp(&y2, &y2).sqrt();
        prop_assert!((dotp(&a1, &y2) - dotp(&y1, &a2)).abs() <= 1e-6 * scale.max(1.0));
        prop_assert!(dotp(&y1, &a1) >= -1e-8);
    }

    #[test]
    fn pcg_residual_non_increasing((v, cfg) in crop(), t in prop::collection::vec(0.0f32..=1.0, 1000)) {
        let mut g = BilateralGrid::build(&v, &cfg).unwrap();
        let t = &t[..g.num_voxels()];
        let sys = NormalSystem::new(&mut g, t, &cfg).unwrap();
        let (y, stats) = pcg(&sys, sys.initial_guess(), cfg.pcg_tol, cfg.pcg_max_iters).unwrap();
        for w in stats.residuals.windows(2) {
            prop_assert!(w[1] <= w[0], "{:?}", stats.residuals);
        }
        let ay = sys.apply(&y);
        let true_r = ay.iter().zip(sys.rhs()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let last = *stats.residuals.last().unwrap();
        prop_assert!((true_r - last).abs() <= 1e-6 * sys.rhs().iter().map(|b| b * b).sum::<f64>().sqrt().max(1.0));
    }

    #[test]
    fn refine_output_in_range_and_zero_outside_crop(
        (v, _) in crop(),
        low in prop::collection::vec(0.0f32..=1.0, 27),
    ) {
        let s = SimilarityVolume::new(Dims::cube(3), low, Resolution::Low, 2).unwrap();
        let cfg = RefineConfig::default();
        match refine(&s, &v, &cfg) {
            Ok(r) => {
                let d = r.volume.dims;
                for i in 0..d.len() {
                    let x = r.volume.data()[i];
                    prop_assert!((0.0..=1.0).contains(&x));
                    if !r.crop.contains(d.coords(i)) {
                        prop_assert_eq!(x, 0.0);
                    }
                }
            }
            Err(e) => {
                let msg = e.to_string();
                prop_assert!(msg.contains("too small") || msg.contains("no voxel"), "{}", msg);
            }
        }
    }
}

fn ball(d: Dims) -> (Volume, Vec<f32>, Vec<f32>) {
    let c = [(d[0] as f32 - 1.0) / 2.0; 3];
    let (v, l) = gen_sphere(d, c, 10.0, 0.8, 0.15, 0.0).unwrap();
    let sim: Vec<f32> = l.labels.iter().map(|&x| x as f32).collect();
    let dist: Vec<f32> = (0..d.len())
        .map(|i| {
            let p = d.coords(i);
            (0..3).map(|a| (p[a] as f32 - c[a]).powi(2)).sum::<f32>().sqrt() - 10.0
        })
        .collect();
    (v, sim, dist)
}

#[test]
fn refined_ball_matches_within_one_voxel_shell() {
    let d = Dims::cube(32);
    let (v, sim, dist) = ball(d);
    let s = SimilarityVolume::new(d, sim.clone(), Resolution::Low, 1).unwrap();
    let r = refine(&s, &v, &RefineConfig::default()).unwrap();
    for i in 0..d.len() {
        let inside = r.volume.data()[i] >= 0.5;
        if inside != (sim[i] == 1.0) {
            assert!(dist[i].abs() <= 1.0, "voxel {:?} at distance {}", d.coords(i), dist[i]);
        }
    }
}

#[test]
fn refining_aligned_map_is_nearly_idempotent() {
    let d = Dims::cube(32);
    let (v, sim, _) = ball(d);
    let s = SimilarityVolume::new(d, sim.clone(), Resolution::Low, 1).unwrap();
    let r = refine(&s, &v, &RefineConfig::default()).unwrap();
    let mad = r.volume.data().iter().zip(&sim).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / d.len() as f64;
    assert!(mad < 0.05, "mean abs change {mad}");
}
