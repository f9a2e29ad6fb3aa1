use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::*;
use crate::autodiff::{grad_check_many, DEFAULT_STEP};
use crate::geometry::build_view_rig;
use crate::rng::rng_for;

fn cfg(d_en: usize) -> ModelConfig {
    ModelConfig {
        d_en,
        n_heads: 4,
        mlp_widths: vec![16, 32],
        cls_hidden: 16,
        ..ModelConfig::default()
    }
}

fn micro() -> ModelConfig {
    ModelConfig {
        d_en: 16,
        n_heads: 2,
        n_layers: 1,
        c: 3,
        v_count: 6,
        r: 2,
        mlp_widths: vec![8, 8],
        cls_hidden: 8,
    }
}

fn cloud(seed: u64, n: usize) -> PointCloud {
    let mut r = rng_for(seed, &[42]);
    let pts = (0..n)
        .map(|_| {
            [
                r.random_range(-0.5..0.5),
                r.random_range(-0.4..0.3),
                r.random_range(-0.2..0.5),
            ]
        })
        .collect();
    PointCloud::new(pts, CloudRole::Input).unwrap()
}

fn candidates(r: usize, input: &PointCloud) -> CandidateSet {
    generate_candidates(&build_view_rig(6, r, 0.25).unwrap(), input, 9)
}

#[test]
fn config_validation_names_fields() {
    assert!(ModelConfig::default().validate().is_ok());
    let cases: [(&str, ModelConfig); 5] = [
        (
            "n_heads",
            ModelConfig {
                n_heads: 3,
                ..ModelConfig::default()
            },
        ),
        (
            "c",
            ModelConfig {
                c: 1,
                ..ModelConfig::default()
            },
        ),
        (
            "r",
            ModelConfig {
                r: 0,
                ..ModelConfig::default()
            },
        ),
        (
            "mlp_widths",
            ModelConfig {
                mlp_widths: vec![4, 0],
                ..ModelConfig::default()
            },
        ),
        (
            "v_count",
            ModelConfig {
                v_count: 4,
                ..ModelConfig::default()
            },
        ),
    ];
    for (field, c) in cases {
        match c.validate() {
            Err(Error::InvalidArgument(msg)) => assert!(msg.starts_with(field), "{msg}"),
            other => panic!("{field}: {other:?}"),
        }
    }
}

#[test]
fn init_is_deterministic_and_named_round_trip() {
    let c = micro();
    let a = ModelParams::init(&c, 3).unwrap();
    assert_eq!(a, ModelParams::init(&c, 3).unwrap());
    assert_ne!(a, ModelParams::init(&c, 4).unwrap());
    assert!(a.tensors().iter().all(Tensor::is_finite));
    assert_eq!(a.get("pos").unwrap().shape(), &[4, 16]);
    assert_eq!(a.get("fpos").unwrap().shape(), &[6, 16]);

    let named: Vec<_> = a.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(ModelParams::from_named(&c, named.clone()).unwrap(), a);

    let mut wrong = named.clone();
    wrong[0].1 = Tensor::zeros(&[2, 2]);
    assert!(ModelParams::from_named(&c, wrong).is_err());
    let mut renamed = named;
    renamed[1].0 = "bogus".to_string();
    assert!(ModelParams::from_named(&c, renamed).is_err());
}

#[test]
fn encoder_shape_and_equivariance() {
    let c = ModelConfig {
        mlp_widths: vec![64, 128],
        ..cfg(128)
    };
    let params = ModelParams::init(&c, 1).unwrap();
    let x = cloud(1, 2048);
    assert_eq!(params.encode(&x).unwrap().shape(), &[2048, 128]);

    let small = cloud(2, 64);
    let f = params.encode(&small).unwrap();
    let mut perm: Vec<usize> = (0..64).collect();
    perm.shuffle(&mut rng_for(5, &[]));
    let permuted: Vec<Point3> = perm.iter().map(|&i| small.points()[i]).collect();
    let fp = params
        .encode(&PointCloud::new(permuted, CloudRole::Input).unwrap())
        .unwrap();
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(fp.row(row), f.row(src));
    }
    assert_ne!(params.encode(&cloud(3, 64)).unwrap(), f);
    assert_eq!(
        params.encode(&PointCloud::empty(CloudRole::Input)),
        Err(Error::EmptyCloud)
    );
}

#[test]
fn global_feature_is_permutation_and_duplicate_invariant() {
    let params = ModelParams::init(&cfg(32), 2).unwrap();
    for trial in 0..20u64 {
        let x = cloud(100 + trial, 50 + trial as usize * 7);
        let f = params.global_feature(&x).unwrap();
        assert_eq!(f.shape(), &[1, 32]);
        let mut pts = x.points().to_vec();
        pts.shuffle(&mut rng_for(trial, &[1]));
        let shuffled = PointCloud::new(pts.clone(), CloudRole::Input).unwrap();
        assert_eq!(params.global_feature(&shuffled).unwrap(), f);
        pts.extend_from_slice(x.points());
        let doubled = PointCloud::new(pts, CloudRole::Input).unwrap();
        assert_eq!(params.global_feature(&doubled).unwrap(), f);
    }
}

#[test]
fn cross_attention_puts_unit_weight_on_the_global_token() {
    let params = ModelParams::init(&cfg(32), 4).unwrap();
    let input = cloud(4, 100);
    let cands = candidates(5, &input);
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let f_i = global_feature(&mut g, &p, input.points()).unwrap();
    let f_s = encode(&mut g, &p, &cands.points).unwrap();
    let (a, _) = attention_block(&mut g, &p, f_s, f_i, 1, "tf.0.cross").unwrap();
    let w = g.attention_weights(a).unwrap();
    assert_eq!(w.len(), 4 * cands.len());
    assert!(w.iter().all(|&x| x == 1.0));
}

#[test]
fn face_transformer_shape_at_paper_scale() {
    let params = ModelParams::init(&cfg(128), 5).unwrap();
    let input = cloud(5, 300);
    let cands = candidates(21, &input);
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f_i = global_feature(&mut g, &p, input.points()).unwrap();
    let f_s = encode(&mut g, &p, &cands.points).unwrap();
    let out = face_transformer(&mut g, &p, f_s, f_i, &cands).unwrap();
    assert_eq!(g.value(out).shape(), &[2646, 128]);

    let short = g.slice_cols(f_s, 0, 128).unwrap();
    let rows: Vec<usize> = (0..2645).collect();
    let short = g.gather_rows(short, &rows).unwrap();
    assert!(matches!(
        face_transformer(&mut g, &p, short, f_i, &cands),
        Err(Error::Grouping { .. })
    ));
}

#[test]
fn face_transformer_groups_are_independent() {
    let params = ModelParams::init(&cfg(32), 6).unwrap();
    let input = cloud(6, 120);
    let cands = candidates(4, &input);
    let group = cands.group_len();
    let run = |mask_group: Option<usize>| -> Tensor {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let f_i = global_feature(&mut g, &p, input.points()).unwrap();
        let f_s = encode(&mut g, &p, &cands.points).unwrap();
        let mut fs = g.value(f_s).clone();
        if let Some(v) = mask_group {
            let d = fs.shape()[1];
            fs.data_mut()[v * group * d..(v + 1) * group * d]
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let f_s = g.constant(fs);
        let out = face_transformer(&mut g, &p, f_s, f_i, &cands).unwrap();
        g.value(out).clone()
    };
    let base = run(None);
    let masked = run(Some(3));
    for m in 0..cands.len() {
        let same = base.row(m) == masked.row(m);
        assert_eq!(same, cands.view_index[m] != 3, "row {m}");
    }
}

#[test]
fn classifier_is_a_distribution() {
    let mut params = ModelParams::init(&cfg(32), 7).unwrap();
    for seed in 0..10 {
        let f = params.global_feature(&cloud(seed, 40)).unwrap();
        let p = params.classify(&f).unwrap();
        assert_eq!(p.probs().len(), 3);
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(params.classify(&f).unwrap().argmax(), p.argmax());
    }
    params.get_mut("cls.1.w").unwrap().data_mut().fill(0.0);
    params.get_mut("cls.1.b").unwrap().data_mut().fill(0.0);
    let f = params.global_feature(&cloud(1, 40)).unwrap();
    let p = params.classify(&f).unwrap();
    assert!(p.probs().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn class_distribution_validation() {
    assert!(ClassDistribution::new(vec![0.5, 0.5]).is_ok());
    assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
    assert!(ClassDistribution::new(vec![1.5, -0.5]).is_err());
    assert!(ClassDistribution::new(vec![]).is_err());
    assert_eq!(
        ClassDistribution::new(vec![0.2, 0.4, 0.4])
            .unwrap()
            .argmax(),
        1
    );
}

#[test]
fn fuse_zero_head_and_class_signal() {
    let c = ModelConfig { c: 8, ..cfg(32) };
    let mut params = ModelParams::init(&c, 8).unwrap();
    let input = cloud(8, 200);
    let cands = candidates(21, &input);
    let (pred, cls) = forward(&params, &input, &cands, Ablation::FULL).unwrap();
    assert_eq!(pred.len(), 2646);
    assert_eq!(cls.probs().len(), 8);
    assert!(pred.opacities.iter().all(|&s| s > 0.0 && s < 1.0));
    assert!(pred.offsets.iter().flatten().all(|o| o.abs() <= OFFSET_CAP));

    // Same features, two class vectors.
    let run = |params: &ModelParams, probs: Vec<f64>| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let f = g.constant(Tensor::randn(&[50, 32], 1.0, &mut rng_for(1, &[])));
        let pc = g.constant(Tensor::new(vec![1, 8], probs).unwrap());
        let (o, s) = fuse(&mut g, &p, f, pc).unwrap();
        (g.value(o).clone(), g.value(s).clone())
    };
    let one_hot = |k: usize| {
        (0..8)
            .map(|i| if i == k { 1.0 } else { 0.0 })
            .collect::<Vec<_>>()
    };
    assert_ne!(run(&params, one_hot(0)), run(&params, one_hot(5)));

    params.get_mut("fuse.head.w").unwrap().data_mut().fill(0.0);
    params.get_mut("fuse.head.b").unwrap().data_mut().fill(0.0);
    let (pred, _) = forward(&params, &input, &cands, Ablation::FULL).unwrap();
    assert!(pred.offsets.iter().flatten().all(|&o| o == 0.0));
    assert!(pred.opacities.iter().all(|&s| s == 0.5));
}

#[test]
fn ablations_change_the_right_stages() {
    let params = ModelParams::init(&cfg(32), 9).unwrap();
    let input = cloud(9, 100);
    let cands = candidates(3, &input);
    let no_cls = Ablation {
        use_classification: false,
        use_face_attention: true,
    };
    let (_, cls) = forward(&params, &input, &cands, no_cls).unwrap();
    assert_eq!(cls, ClassDistribution::uniform(3));

    // Without face attention the fusion input is the raw encoder output.
    let no_face = Ablation {
        use_classification: true,
        use_face_attention: false,
    };
    let (pred, cls) = forward(&params, &input, &cands, no_face).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f_s = encode(&mut g, &p, &cands.points).unwrap();
    let pc = g.constant(Tensor::new(vec![1, 3], cls.probs().to_vec()).unwrap());
    let (_, s) = fuse(&mut g, &p, f_s, pc).unwrap();
    assert_eq!(g.value(s).data(), pred.opacities.as_slice());
}

#[test]
fn resampling_matrix_properties() {
    let id = grid_resample_matrix(5, 5);
    for r in 0..25 {
        for c in 0..25 {
            assert_eq!(id.data()[r * 25 + c], if r == c { 1.0 } else { 0.0 });
        }
    }
    for (from, to) in [(21, 17), (21, 29), (3, 1), (1, 4)] {
        let w = grid_resample_matrix(from, to);
        for row in w.data().chunks_exact(from * from) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
        let table = Tensor::full(&[from * from, 3], 0.7);
        let out = resample_grid_embedding(&table, from, to).unwrap();
        assert_eq!(out.shape(), &[to * to, 3]);
        assert!(out.data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
    }
}

#[test]
fn density_agnostic_inference() {
    let params = ModelParams::init(&cfg(32), 10).unwrap();
    for r_prime in [17usize, 21, 29] {
        let rig = build_view_rig(6, r_prime, 0.25).unwrap();
        for n in [512usize, 1024, 2048] {
            let input = cloud(n as u64, n);
            let done = complete_normalized(&params, &rig, &input, Ablation::FULL, 0.5, 1).unwrap();
            assert_eq!(done.prediction.len(), 6 * r_prime * r_prime);
            assert!(done.output.len() <= 6 * r_prime * r_prime);
            assert_eq!(done.predicted.len(), n + done.output.len());
        }
    }
}

#[test]
fn complete_maps_back_to_the_input_frame() {
    let params = ModelParams::init(&micro(), 11).unwrap();
    let rig = build_view_rig(6, 2, 0.25).unwrap();
    let base = cloud(11, 80);
    let moved: Vec<Point3> = base
        .points()
        .iter()
        .map(|p| [p[0] * 3.0 + 10.0, p[1] * 3.0 - 4.0, p[2] * 3.0])
        .collect();
    let moved = PointCloud::new(moved, CloudRole::Input).unwrap();
    let a = complete(&params, &rig, &base, Ablation::FULL, 0.0, 2).unwrap();
    let b = complete(&params, &rig, &moved, Ablation::FULL, 0.0, 2).unwrap();
    assert_eq!(a.output.len(), 24);
    assert_eq!(&b.predicted.points()[..80], moved.points());
    let (_, t) = normalize_cloud(&base).unwrap();
    let (_, tm) = normalize_cloud(&moved).unwrap();
    for (pa, pb) in a.output.points().iter().zip(b.output.points()) {
        let (na, nb) = (t.apply(*pa), tm.apply(*pb));
        for k in 0..3 {
            assert!((na[k] - nb[k]).abs() < 1e-9);
        }
    }
}

#[test]
fn full_network_gradients_match_finite_differences() {
    let c = micro();
    let params = ModelParams::init(&c, 12).unwrap();
    let input = cloud(12, 30);
    let cands = candidates(2, &input);
    assert_eq!(cands.len(), 24);
    let inputs = params.tensors().to_vec();
    let err = grad_check_many(
        |g, vars| {
            let p = params.bind_vars(vars.to_vec())?;
            let out = forward_graph(g, &p, &input, &cands, Ablation::FULL)?;
            let wo = g.constant(Tensor::randn(&[24, 3], 1.0, &mut rng_for(1, &[])));
            let ws = g.constant(Tensor::randn(&[24, 1], 1.0, &mut rng_for(2, &[])));
            let wc = g.constant(Tensor::new(vec![1, 3], vec![0.3, -1.0, 0.6]).unwrap());
            let a = g.mul(out.offsets, wo)?;
            let b = g.mul(out.opacity, ws)?;
            let cc = g.mul(out.class_probs, wc)?;
            let (a, b, cc) = (g.sum(a), g.sum(b), g.sum(cc));
            let ab = g.add(a, b)?;
            g.add(ab, cc)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err:e}");
}
