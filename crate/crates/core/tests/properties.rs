use proptest::prelude::*;

use icpcov::cloud::{self, estimate_normals, max_density_filter, transform_cloud, PointCloud};
use icpcov::dataset::{load_dataset, save_dataset, SequenceDataset};
use icpcov::descriptor::{augment, describe_pair, extract_overlap, DescriptorConfig, GridSpec, TrainingExample, Descriptor, FEATURES_PER_VOXEL};
use icpcov::eval::kl_divergence;
use icpcov::icp::{association_cost, minimize_point_to_plane, trim_outliers, Association, IcpConfig, PreparedPair};
use icpcov::kdtree::{brute_force_nearest, KdTree};
use icpcov::predictor::{Predictor, Theta, TrainConfig};
use icpcov::sampling::{sampled_covariance, SampleSet};
use icpcov::scene::{generate_scene, Archetype, SceneSpec};
use icpcov::se3::{transform_covariance, Mat6, Vec3, Vec6};
use icpcov::{Covariance, RigidTransform, Twist};

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-range..range).prop_map(|a| Vec3::new(a[0], a[1], a[2]))
}

fn twist(t: f64, r: f64) -> impl Strategy<Value = Twist> {
    (vec3(t), vec3(r)).prop_map(|(u, w)| Twist::new(u, w))
}

fn pose() -> impl Strategy<Value = RigidTransform> {
    twist(2.0, 1.5).prop_map(|x| x.exp())
}

fn psd() -> impl Strategy<Value = Covariance> {
    prop::collection::vec(-1.0..1.0f64, 36).prop_map(|v| {
        let a = Mat6::from_row_slice(&v);
        Covariance::new(a * a.transpose() + Mat6::identity() * 1e-3)
    })
}

fn points(n: std::ops::Range<usize>, range: f64) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(vec3(range), n)
}

fn cube(points: usize, seed: u64) -> icpcov::scene::ScenePair {
    generate_scene(&SceneSpec::new(Archetype::Cube).with_points(points).with_seed(seed).with_motion(Twist::zero())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_transform_keeps_psd(y in psd(), t in pose()) {
        let out = transform_covariance(&y, &t);
        let m = out.matrix();
        prop_assert!((m - m.transpose()).norm() <= 1e-12 * m.norm());
        prop_assert!(out.min_eigenvalue() > 0.0);
    }

    #[test]
    fn kl_is_zero_on_itself_and_non_negative(a in psd(), b in psd()) {
        prop_assert!(kl_divergence(&a, &a).unwrap().abs() < 1e-9);
        prop_assert!(kl_divergence(&a, &b).unwrap() >= -1e-9);
    }

    #[test]
    fn kdtree_matches_brute_force(pts in points(1..200, 5.0), q in vec3(6.0), k in 1usize..8) {
        let tree = KdTree::build(&pts).unwrap();
        prop_assert_eq!(tree.nearest(&q, k), brute_force_nearest(&pts, &q, k));
    }

    #[test]
    fn trimming_keeps_floor_of_ratio(d in prop::collection::vec(0.0..10.0f64, 1..400)) {
        let assoc: Vec<Association> = d
            .iter()
            .enumerate()
            .map(|(i, &dist2)| Association { reading: i, reference: i, dist2, normal: Vec3::z() })
            .collect();
        let n = assoc.len();
        let kept = trim_outliers(assoc, 0.7);
        prop_assert_eq!(kept.len(), (7 * n) / 10);
        let worst_kept = kept.iter().map(|a| a.dist2).fold(0.0, f64::max);
        let dropped = d.iter().filter(|&&x| x < worst_kept).count();
        prop_assert!(dropped <= kept.len());
    }

    #[test]
    fn density_filter_is_idempotent(pts in points(30..300, 1.0), limit in 50.0..5000.0f64) {
        let c = PointCloud::new(pts);
        let once = max_density_filter(&c, limit).unwrap();
        let twice = max_density_filter(&once, limit).unwrap();
        prop_assert_eq!(once.points, twice.points);
    }

    #[test]
    fn sampled_covariance_is_symmetric(xs in prop::collection::vec(twist(0.5, 0.5), 2..60)) {
        let y = sampled_covariance(&SampleSet::from_twists(xs)).unwrap().covariance;
        prop_assert_eq!(*y.matrix(), y.matrix().transpose());
    }

    /// Dropping samples that lie farther out than every kept one cannot
    /// raise the trace.
    #[test]
    fn removing_far_outliers_lowers_trace(core in prop::collection::vec(twist(0.05, 0.05), 5..50), far in prop::collection::vec(twist(1.0, 1.0), 1..10)) {
        let r_core = core.iter().map(|x| x.norm()).fold(0.0, f64::max);
        let far: Vec<Twist> = far
            .into_iter()
            .map(|x| Twist::from_vector(&(x.to_vector().normalize() * (r_core + 0.5))))
            .collect();
        let kept = sampled_covariance(&SampleSet::from_twists(core.clone())).unwrap();
        let all = sampled_covariance(&SampleSet::from_twists(core.into_iter().chain(far))).unwrap();
        prop_assert!(kept.covariance.trace() <= all.covariance.trace());
    }

    #[test]
    fn dataset_round_trip_is_lossless(clouds in prop::collection::vec(points(1..40, 20.0), 1..5), motions in prop::collection::vec(twist(10.0, 1.5), 5)) {
        let n = clouds.len();
        let names: Vec<String> = (0..n).map(|i| format!("scan_{i:03}")).collect();
        let clouds: Vec<PointCloud> = clouds.into_iter().zip(&names).map(|(p, name)| PointCloud::new(p).with_frame(name.clone())).collect();
        let poses: Vec<RigidTransform> = motions[..n].iter().map(|m| m.exp()).collect();
        let data = SequenceDataset::new(names, clouds, poses).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(back, data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn icp_step_does_not_raise_fixed_association_cost(seed in 0u64..1000, start in twist(0.05, 0.05)) {
        let pair = cube(400, seed);
        let prepared = PreparedPair::new(&pair.reading, &pair.reference, &IcpConfig::default()).unwrap();
        let t = start.exp();
        let (moved, assoc) = prepared.associations(&t);
        let step = minimize_point_to_plane(&assoc, &moved, &pair.reference.points);
        let before = association_cost(&assoc, &moved, &pair.reference.points, &RigidTransform::identity());
        let after = association_cost(&assoc, &moved, &pair.reference.points, &step.step.exp());
        prop_assert!(after <= before * (1.0 + 1e-9), "{after} > {before}");
    }

    #[test]
    fn icp_is_equivariant(seed in 0u64..1000, start in twist(0.05, 0.05), g in pose()) {
        // A fixed iteration count: the stopping test compares step norms,
        // which depend on the frame.
        let pair = cube(400, seed);
        let config = IcpConfig { max_iterations: 10, translation_tol: 0.0, rotation_tol: 0.0, ..Default::default() };
        let init = start.exp();
        let plain = PreparedPair::new(&pair.reading, &pair.reference, &config).unwrap().icp(&init);
        let moved = PreparedPair::new(&transform_cloud(&pair.reading, &g), &transform_cloud(&pair.reference, &g), &config)
            .unwrap()
            .icp(&g.compose(&init).compose(&g.inverse()));
        let expected = g.compose(&plain.transform).compose(&g.inverse());
        prop_assert!(expected.distance(&moved.transform) < 1e-6, "{}", expected.distance(&moved.transform));
    }

    #[test]
    fn icp_is_deterministic(seed in 0u64..1000, start in twist(0.1, 0.1)) {
        let pair = cube(300, seed);
        let prepared = PreparedPair::new(&pair.reading, &pair.reference, &IcpConfig::default()).unwrap();
        prop_assert_eq!(prepared.icp(&start.exp()), prepared.icp(&start.exp()));
    }

    #[test]
    fn descriptor_entries_in_unit_interval(seed in 0u64..1000, arch in 0usize..5, motion in twist(0.5, 0.3)) {
        let archetype = [Archetype::Cube, Archetype::CylinderPair, Archetype::Hallway, Archetype::Corner, Archetype::Planes][arch];
        let pair = generate_scene(&SceneSpec::new(archetype).with_points(500).with_sigma(0.01).with_seed(seed)).unwrap();
        let config = DescriptorConfig::default();
        let d = describe_pair(&pair.reading, &pair.reference, &motion.exp().compose(&pair.ground_truth), &config).unwrap();
        prop_assert_eq!(d.descriptor.len(), 704);
        prop_assert!(d.descriptor.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));

        // Histogram mass per voxel is the fraction of points with a valid normal.
        let surfaces = d.overlap.surfaces.as_ref().unwrap();
        let (cells, _) = icpcov::descriptor::voxelize(&d.overlap.points, &config.grid);
        for (v, cell) in cells.iter().enumerate() {
            let mass: f64 = d.descriptor.as_slice()[v * FEATURES_PER_VOXEL + 2..(v + 1) * FEATURES_PER_VOXEL].iter().sum();
            let expected = if cell.is_empty() { 0.0 } else { cell.iter().filter(|&&i| surfaces[i].valid).count() as f64 / cell.len() as f64 };
            prop_assert!((mass - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn overlap_is_symmetric(seed in 0u64..1000, motion in twist(0.3, 0.3)) {
        let pair = generate_scene(&SceneSpec::new(Archetype::Corner).with_points(300).with_sigma(0.01).with_seed(seed)).unwrap();
        let t = motion.exp().compose(&pair.ground_truth);
        let a = extract_overlap(&pair.reading, &pair.reference, &t, 0.5).unwrap();
        let b = transform_cloud(&extract_overlap(&pair.reference, &pair.reading, &t.inverse(), 0.5).unwrap(), &t);
        prop_assert_eq!(a.len(), b.len());
        let key = |p: &Vec3| [p.x, p.y, p.z].map(|c| (c * 1e6).round() as i64);
        let mut ka: Vec<_> = a.points.iter().map(key).collect();
        let mut kb: Vec<_> = b.points.iter().map(key).collect();
        ka.sort();
        kb.sort();
        prop_assert_eq!(ka, kb);
    }

    #[test]
    fn augmentations_compose(seed in 0u64..1000, t1 in -3.0..3.0f64, t2 in -3.0..3.0f64, y in psd()) {
        let pair = generate_scene(&SceneSpec::new(Archetype::Corner).with_points(300).with_sigma(0.01).with_seed(seed)).unwrap();
        let config = DescriptorConfig::default();
        let d = describe_pair(&pair.reading, &pair.reference, &pair.ground_truth, &config).unwrap();
        let (d12, y12) = augment(&d.overlap, &y, t1 + t2, &config.grid).unwrap();
        let once = transform_cloud(&d.overlap, &RigidTransform::rot_z(t1));
        let (d2, y2) = augment(&once, &y.transform(&RigidTransform::rot_z(t1)), t2, &config.grid).unwrap();
        let diff: f64 = d12.as_slice().iter().zip(d2.as_slice()).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(diff < 1e-9, "descriptor differs by {diff}");
        prop_assert!((y12.matrix() - y2.matrix()).norm() <= 1e-9 * y12.matrix().norm());
    }

    #[test]
    fn predictions_are_psd_and_zero_theta_is_baseline(ys in prop::collection::vec(psd(), 2..8), ds in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 704), 9), seed in 0u64..100) {
        let examples: Vec<TrainingExample> = ys
            .iter()
            .enumerate()
            .map(|(i, y)| TrainingExample { id: i.to_string(), descriptor: Descriptor(ds[i].clone()), covariance: *y, augmentation: 0.0 })
            .collect();
        let mut p = Predictor::new(examples, GridSpec::default(), TrainConfig { seed, ..Default::default() }).unwrap();
        let query = Descriptor(ds[8].clone());
        prop_assert!(p.predict(&query).unwrap().min_eigenvalue() > 0.0);
        p.theta = Theta::zeros(704);
        let base = p.baseline();
        let pred = p.predict(&query).unwrap();
        prop_assert!((pred.matrix() - base.matrix()).norm() <= 1e-12 * base.matrix().norm());
    }
}

#[test]
fn normals_survive_rigid_motion() {
    let pair = cube(500, 3);
    let g = Twist::from_vector(&Vec6::new(0.3, -0.2, 0.1, 0.2, -0.4, 0.7)).exp();
    let a = estimate_normals(&pair.reference, cloud::DEFAULT_NORMAL_NEIGHBORS).unwrap();
    let b = estimate_normals(&transform_cloud(&pair.reference, &g), cloud::DEFAULT_NORMAL_NEIGHBORS).unwrap();
    for (sa, sb) in a.surfaces.unwrap().iter().zip(b.surfaces.unwrap().iter()) {
        // Up to sign: orientation follows the cloud frame origin.
        assert!((g.rotation * sa.normal).dot(&sb.normal).abs() > 1.0 - 1e-9);
    }
}
