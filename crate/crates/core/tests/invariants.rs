use dance_core::autodiff::{Graph, Tensor};
use dance_core::geometry::{build_view_rig, generate_candidates, normalize_cloud};
use dance_core::metrics::{
    chamfer, density_aware_cd, f1_at_threshold, ChamferVariant, NnIndex, DEFAULT_DCD_ALPHA,
};
use dance_core::model::{complete, forward, Ablation, ModelConfig, ModelParams};
use dance_core::{CloudRole, Point3, PointCloud};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point3> {
    [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0]
}

fn cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point(), 1..max)
        .prop_map(|pts| PointCloud::new(pts, CloudRole::Input).unwrap())
}

fn dist_sq(a: Point3, b: Point3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

fn micro() -> ModelConfig {
    ModelConfig {
        d_en: 16,
        n_heads: 2,
        n_layers: 1,
        r: 3,
        mlp_widths: vec![8, 8],
        cls_hidden: 8,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kd_tree_distance_matches_brute_force(
        pts in prop::collection::vec(point(), 1..300),
        queries in prop::collection::vec(point(), 1..20),
        leaf in 1usize..16,
    ) {
        let index = NnIndex::with_leaf_size(&pts, leaf);
        for q in queries {
            let (i, d2) = index.nearest(q).unwrap();
            let best = pts.iter().map(|&p| dist_sq(p, q)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(d2, best);
            prop_assert_eq!(dist_sq(pts[i], q), best);
        }
    }

    #[test]
    fn chamfer_is_a_symmetric_premetric(a in cloud(80), b in cloud(80)) {
        for v in [ChamferVariant::L1, ChamferVariant::L2] {
            let ab = chamfer(&a, &b, v).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, chamfer(&b, &a, v).unwrap());
            prop_assert_eq!(chamfer(&a, &a, v).unwrap(), 0.0);
        }
    }

    #[test]
    fn bounded_metrics_stay_in_unit_range(a in cloud(80), b in cloud(80), tau in 1e-3f64..1.0) {
        let d = density_aware_cd(&a, &b, DEFAULT_DCD_ALPHA).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let f = f1_at_threshold(&a, &b, tau).unwrap();
        for x in [f.f1, f.precision, f.recall] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!(f.f1 <= f.precision.max(f.recall));
        prop_assert_eq!(f1_at_threshold(&a, &a, tau).unwrap().f1, 1.0);
    }

    #[test]
    fn normalization_fits_the_unit_box_and_inverts(c in cloud(100)) {
        let (n, t) = normalize_cloud(&c).unwrap();
        let bb = n.bounding_box().unwrap();
        prop_assert!(bb.max_side() <= 1.0 + 1e-12);
        for k in 0..3 {
            prop_assert!(bb.min[k] >= -0.5 - 1e-12 && bb.max[k] <= 0.5 + 1e-12);
        }
        for (p, q) in c.points().iter().zip(t.invert_cloud(&n).points()) {
            prop_assert!(dist_sq(*p, *q).sqrt() <= 1e-12 * (1.0 + p.iter().map(|v| v.abs()).sum::<f64>()));
        }
    }

    #[test]
    fn candidates_fill_every_cell_on_their_rays(
        c in cloud(60),
        r in 1usize..7,
        spread in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let (input, _) = normalize_cloud(&c).unwrap();
        let rig = build_view_rig(6, r, spread).unwrap();
        let cands = generate_candidates(&rig, &input, seed);
        prop_assert_eq!(cands.len(), rig.capacity());
        prop_assert_eq!(cands.len(), 6 * r * r);
        for m in 0..cands.len() {
            prop_assert_eq!(cands.view_index[m], m / (r * r));
            prop_assert_eq!(cands.slot_index(m), m % (r * r));
            prop_assert!(cands.depth[m] >= 0.0);
            let on_ray: Vec<f64> = (0..3)
                .map(|k| cands.ray_origin[m][k] + cands.depth[m] * cands.ray_dir[m][k])
                .collect();
            prop_assert!(dist_sq(cands.points[m], [on_ray[0], on_ray[1], on_ray[2]]) < 1e-18);
        }
        prop_assert_eq!(generate_candidates(&rig, &input, seed), cands);
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[rows, cols], scale, &mut rng));
        let s = g.softmax_lastdim(x).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn network_outputs_are_probabilities(c in cloud(50), seed in 0u64..1000) {
        let cfg = micro();
        let params = ModelParams::init(&cfg, seed).unwrap();
        let (input, _) = normalize_cloud(&c).unwrap();
        let rig = cfg.rig(0.25).unwrap();
        let cands = generate_candidates(&rig, &input, seed);
        let (pred, class) = forward(&params, &input, &cands, Ablation::default()).unwrap();
        prop_assert_eq!(pred.offsets.len(), cands.len());
        prop_assert!(pred.opacities.iter().all(|&o| (0.0..=1.0).contains(&o)));
        prop_assert!(class.probs().iter().all(|&p| p >= 0.0));
        prop_assert!((class.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn completion_follows_translation(
        c in cloud(50),
        shift in point(),
        seed in 0u64..1000,
    ) {
        let cfg = micro();
        let params = ModelParams::init(&cfg, seed).unwrap();
        let rig = cfg.rig(0.25).unwrap();
        let moved = PointCloud::new(
            c.points().iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect(),
            CloudRole::Input,
        ).unwrap();
        let a = complete(&params, &rig, &c, Ablation::default(), 0.5, seed).unwrap();
        let b = complete(&params, &rig, &moved, Ablation::default(), 0.5, seed).unwrap();
        prop_assert_eq!(a.predicted.len(), c.len() + a.output.len());
        // Opacities near the threshold may flip under rounding; compare only
        // when both runs kept the same candidates.
        if a.output.len() == b.output.len() {
            for (p, q) in a.output.points().iter().zip(b.output.points()) {
                let back = [q[0] - shift[0], q[1] - shift[1], q[2] - shift[2]];
                prop_assert!(dist_sq(*p, back).sqrt() < 1e-8);
            }
        }
    }
}
