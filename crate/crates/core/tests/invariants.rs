use nalgebra::Vector3;
use proptest::prelude::*;

use splatroom_core::config::{apply_text, to_text};
use splatroom_core::eval::{compute_metrics, f_score, KdTree};
use splatroom_core::losses::{align_depth, depth_loss, ncc};
use splatroom_core::scene::{filter_points, voxel_key, voxelize_seeds};
use splatroom_core::trainer::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use splatroom_core::{render, Camera, EvalConfig, Grid, PipelineConfig, RasterConfig, SeedConfig, SfmPoint, TrainState};

fn point() -> impl Strategy<Value = Vector3<f64>> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn sfm_points(max: usize) -> impl Strategy<Value = Vec<SfmPoint>> {
    prop::collection::vec((point(), 0u32..6), 1..max)
        .prop_map(|v| v.into_iter().map(|(p, m)| SfmPoint::new(p, m)).collect())
}

fn front_camera() -> Camera {
    Camera::look_at(
        Vector3::new(0.0, 0.0, -6.0),
        Vector3::z(),
        -Vector3::y(),
        [24.0, 24.0, 16.0, 12.0],
        32,
        24,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn filtering_keeps_exactly_the_supported_points(points in sfm_points(60), eps in 0u32..6) {
        let kept = filter_points(&points, eps);
        let expected: Vec<_> = points.iter().filter(|p| p.match_count >= eps).cloned().collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn one_seed_per_occupied_voxel(points in sfm_points(80), delta in 0.1..1.5f64, k in 1usize..6, seed in any::<u64>()) {
        let cfg = SeedConfig { delta, k, seed, ..SeedConfig::default() };
        let scene = voxelize_seeds(&points, &cfg).unwrap();
        let mut keys: Vec<_> = points.iter().map(|p| voxel_key(&p.position, delta)).collect();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(scene.seeds.len(), keys.len());
        prop_assert_eq!(scene.surfels.len(), keys.len() * k);
        prop_assert!(scene.check_integrity().is_ok());
    }

    #[test]
    fn renders_stay_in_range(points in sfm_points(40), seed in any::<u64>()) {
        let cfg = SeedConfig { delta: 0.5, k: 3, seed, ..SeedConfig::default() };
        let scene = voxelize_seeds(&points, &cfg).unwrap();
        let out = render(&scene, &front_camera(), &RasterConfig::default());
        for (a, c) in out.alpha.data.iter().zip(&out.color.data) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!(c.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
        prop_assert!(out.depth.data.iter().all(|d| d.is_finite() && *d >= 0.0));
    }

    #[test]
    fn checkpoints_roundtrip(points in sfm_points(30), seed in any::<u64>()) {
        let cfg = SeedConfig { delta: 0.7, k: 2, seed, ..SeedConfig::default() };
        let scene = voxelize_seeds(&points, &cfg).unwrap();
        let ck = Checkpoint {
            config: PipelineConfig::default().with_seed(seed),
            state: TrainState::new(&scene, seed),
            cameras: vec![("front".into(), front_camera())],
            scene,
        };
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&ck)).unwrap(), ck);
    }

    #[test]
    fn affine_priors_are_explained_exactly(
        depth in prop::collection::vec(0.5..5.0f64, 48),
        scale in 0.1..4.0f64,
        shift in -2.0..2.0f64,
    ) {
        let rendered = Grid::from_vec(8, 6, depth);
        prop_assume!(rendered.data.iter().any(|d| (d - rendered.data[0]).abs() > 1e-3));
        let prior = rendered.map(|d| scale * d + shift);
        let mask = Grid::new(8, 6, true);
        let a = align_depth(&rendered, &prior, &mask);
        prop_assert!((a.s - scale).abs() < 1e-9 * scale.max(1.0));
        prop_assert!((a.t - shift).abs() < 1e-8);
        let loss = depth_loss(&rendered, &prior, &mask, 0.5);
        prop_assert!(loss.value.abs() < 1e-12);
    }

    #[test]
    fn ncc_is_affine_invariant(a in prop::collection::vec(-1.0..1.0f64, 49), gain in 0.05..5.0f64, bias in -3.0..3.0f64) {
        let b: Vec<f64> = a.iter().map(|v| gain * v + bias).collect();
        let neg: Vec<f64> = a.iter().map(|v| -gain * v + bias).collect();
        if let Some(v) = ncc(&a, &b) {
            prop_assert!((v - 1.0).abs() < 1e-9);
            prop_assert!((ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ncc_is_bounded(a in prop::collection::vec(-1.0..1.0f64, 25), b in prop::collection::vec(-1.0..1.0f64, 25)) {
        if let Some(v) = ncc(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn fscore_is_a_symmetric_mean(p in 0.0..=1.0f64, r in 0.0..=1.0f64) {
        let f = f_score(p, r);
        prop_assert_eq!(f, f_score(r, p));
        prop_assert!(f <= p.max(r) + 1e-15);
        prop_assert!(f >= p.min(r) - 1e-15 || p + r == 0.0);
        prop_assert!(f <= (p + r) / 2.0 + 1e-15);
    }

    #[test]
    fn kd_tree_matches_brute_force(cloud in prop::collection::vec(point(), 1..120), queries in prop::collection::vec(point(), 1..20)) {
        let tree = KdTree::new(&cloud);
        for q in &queries {
            let brute = cloud.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(tree.nearest_sq(q), brute);
        }
    }

    #[test]
    fn identical_clouds_score_perfectly(cloud in prop::collection::vec(point(), 1..80)) {
        let m = compute_metrics(&cloud, &cloud, &EvalConfig::default()).unwrap();
        prop_assert_eq!(m.accuracy, 0.0);
        prop_assert_eq!(m.completion, 0.0);
        prop_assert_eq!(m.fscore, 1.0);
    }

    #[test]
    fn config_text_roundtrips(delta in 0.01..1.0f64, k in 1usize..20, iters in 1u32..50_000, lambda_d in 0.0..2.0f64, seed in any::<u64>()) {
        let mut cfg = PipelineConfig::default().with_seed(seed);
        cfg.seeds.delta = delta;
        cfg.seeds.k = k;
        cfg.train.total_iters = iters;
        cfg.loss.lambda_d = lambda_d;
        let mut back = PipelineConfig::default();
        apply_text(&mut back, &to_text(&cfg)).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn empty_point_sets_are_rejected() {
    assert!(voxelize_seeds(&[], &SeedConfig::default()).is_err());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let mut cfg = PipelineConfig::default();
    let before = cfg.clone();
    assert!(apply_text(&mut cfg, "seeds.no_such_key = 1").is_err());
    assert_eq!(cfg, before);
}

#[test]
fn kd_tree_on_a_lattice() {
    let lattice: Vec<Vector3<f64>> = (0..5)
        .flat_map(|i| (0..5).flat_map(move |j| (0..5).map(move |k| Vector3::new(i as f64, j as f64, k as f64))))
        .collect();
    let tree = KdTree::new(&lattice);
    assert_eq!(tree.len(), 125);
    assert!((tree.nearest_sq(&Vector3::new(2.2, 3.0, 0.9)) - 0.05).abs() < 1e-12);
}
