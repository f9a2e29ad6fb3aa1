use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::error::Error;
use crate::geometry::LocalFrame;
use crate::rng::{rng_for, Rng as ChaCha};

const OP_TOL: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut ChaCha) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `sum(out * w)` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var, Error> {
    let w = Tensor::randn(g.value(out).shape(), 1.0, &mut rng_for(seed, &[99]));
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check_op<F>(name: &str, shapes: impl Fn(&mut ChaCha) -> Vec<Vec<usize>>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, Error>,
{
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, &[name.len() as u64]);
        let inputs: Vec<Tensor> = shapes(&mut rng)
            .iter()
            .map(|s| randn(s, &mut rng))
            .collect();
        let err = grad_check_many(
            |g, v| {
                let out = f(g, v)?;
                weighted_sum(g, out, seed)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < OP_TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

fn dim(rng: &mut ChaCha, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[test]
fn gradcheck_matmul_and_bias() {
    check_op(
        "matmul",
        |r| {
            let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            vec![vec![m, k], vec![k, n]]
        },
        |g, v| g.matmul(v[0], v[1]),
    );
    check_op(
        "linear",
        |r| {
            let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            vec![vec![m, k], vec![k, n], vec![1, n]]
        },
        |g, v| g.linear(v[0], v[1], v[2]),
    );
    check_op(
        "add_bias",
        |r| {
            let (m, d) = (dim(r, 1, 6), dim(r, 1, 6));
            vec![vec![m, d], vec![1, d]]
        },
        |g, v| g.add_bias(v[0], v[1]),
    );
}

#[test]
fn gradcheck_elementwise() {
    let pair = |r: &mut ChaCha| {
        let s = vec![dim(r, 1, 4), dim(r, 1, 5)];
        vec![s.clone(), s]
    };
    let single = |r: &mut ChaCha| vec![vec![dim(r, 1, 4), dim(r, 1, 5)]];
    check_op("add", pair, |g, v| g.add(v[0], v[1]));
    check_op("sub", pair, |g, v| g.sub(v[0], v[1]));
    check_op("mul", pair, |g, v| g.mul(v[0], v[1]));
    check_op("scale", single, |g, v| Ok(g.scale(v[0], -1.7)));
    check_op("relu", single, |g, v| Ok(g.relu(v[0])));
    check_op("sigmoid", single, |g, v| Ok(g.sigmoid(v[0])));
    check_op("tanh", single, |g, v| Ok(g.tanh(v[0])));
    check_op("sum", single, |g, v| Ok(g.sum(v[0])));
    check_op("mean", single, |g, v| Ok(g.mean(v[0])));
}

#[test]
fn gradcheck_normalizers() {
    check_op(
        "softmax",
        |r| vec![vec![dim(r, 1, 4), dim(r, 1, 7)]],
        |g, v| g.softmax_lastdim(v[0]),
    );
    check_op(
        "layer_norm",
        |r| {
            let (m, d) = (dim(r, 1, 4), dim(r, 2, 7));
            vec![vec![m, d], vec![1, d], vec![1, d]]
        },
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn gradcheck_shape_ops() {
    check_op(
        "maxpool",
        |r| vec![vec![dim(r, 1, 6), dim(r, 1, 5)]],
        |g, v| g.maxpool_over_rows(v[0]),
    );
    check_op(
        "concat_lastdim",
        |r| {
            let m = dim(r, 1, 4);
            vec![vec![m, dim(r, 1, 3)], vec![m, dim(r, 1, 3)]]
        },
        |g, v| g.concat_lastdim(v),
    );
    check_op(
        "concat_rows",
        |r| {
            let d = dim(r, 1, 4);
            vec![vec![dim(r, 1, 3), d], vec![dim(r, 1, 3), d]]
        },
        |g, v| g.concat_rows(v),
    );
    check_op(
        "slice_cols",
        |r| vec![vec![dim(r, 1, 4), dim(r, 3, 6)]],
        |g, v| g.slice_cols(v[0], 1, 2),
    );
    check_op(
        "gather_rows",
        |r| vec![vec![dim(r, 3, 5), dim(r, 1, 4)]],
        |g, v| g.gather_rows(v[0], &[2, 0, 2, 1, 0]),
    );
    check_op(
        "frame_transform",
        |_| vec![vec![3, 3]],
        |g, v| {
            let frames = [
                LocalFrame::identity(),
                LocalFrame::from_ray([0.6, 0.0, -0.8], [0.0, 1.0, 0.0]),
                LocalFrame::from_ray([0.0, -1.0, 0.0], [1.0, 0.0, 0.0]),
            ];
            g.frame_transform(v[0], &frames)
        },
    );
}

#[test]
fn gradcheck_attention() {
    check_op(
        "attention",
        |r| {
            let heads = dim(r, 1, 2);
            let d = heads * dim(r, 1, 3);
            let groups = dim(r, 1, 2);
            let lq = groups * dim(r, 1, 3);
            let lk = groups * dim(r, 1, 3);
            vec![vec![lq, d], vec![lk, d], vec![lk, d], vec![heads, groups]]
        },
        |g, v| {
            let hg = g.value(v[3]).shape().to_vec();
            g.attention(v[0], v[1], v[2], hg[0], hg[1])
        },
    );
}

#[test]
fn gradcheck_losses() {
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, &[7]);
        let k = dim(&mut rng, 2, 8);
        let pred = Tensor::randn(&[k, 3], 0.5, &mut rng);
        let target: Vec<[f64; 3]> = (0..dim(&mut rng, 2, 8))
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let err = grad_check(|g, x| g.chamfer_l1(x, &target), &pred, DEFAULT_STEP).unwrap();
        assert!(err < OP_TOL, "chamfer seed {seed}: {err:e}");

        let n = dim(&mut rng, 1, 8);
        let probs = Tensor::new(
            vec![n],
            (0..n).map(|_| rng.random_range(0.05..0.95)).collect(),
        )
        .unwrap();
        let targets: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let err = grad_check(|g, x| g.bce(x, &targets), &probs, DEFAULT_STEP).unwrap();
        assert!(err < OP_TOL, "bce seed {seed}: {err:e}");

        let c = dim(&mut rng, 2, 6);
        let logits = Tensor::randn(&[1, c], 1.0, &mut rng);
        let label = seed as usize % c;
        let err = grad_check(
            |g, x| {
                let p = g.softmax_lastdim(x)?;
                g.nll(p, label)
            },
            &logits,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < OP_TOL, "nll seed {seed}: {err:e}");
    }
}

#[test]
fn grad_check_of_square_sum_and_constant() {
    let mut rng = rng_for(3, &[]);
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let err = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6);
    let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.2))), &x, DEFAULT_STEP).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn backward_matches_hand_derivative() {
    // loss = sum(W x) => dL/dW[i][j] = x[j] for every row i.
    let mut g = Graph::new();
    let w = g.param(Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]]));
    let x = g.constant(Tensor::from_rows(&[[0.3], [-1.2], [2.0]]));
    let unused = g.param(Tensor::from_rows(&[[5.0, 6.0]]));
    let y = g.matmul(w, x).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    let gw = g.grad(w).unwrap().data();
    let expect = [0.3, -1.2, 2.0, 0.3, -1.2, 2.0];
    for (a, b) in gw.iter().zip(expect) {
        assert!((a - b).abs() < 1e-6);
    }
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(g.grad(x), None);
    assert_eq!(g.backward(loss), Err(Error::TapeConsumed));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3]));
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(g.add_bias(a, b).is_err());
    let q = g.constant(Tensor::zeros(&[5, 4]));
    assert_eq!(
        g.attention(q, q, q, 2, 2),
        Err(Error::Grouping { rows: 5, groups: 2 })
    );
}

#[test]
fn softmax_and_layer_norm_statistics() {
    let mut rng = rng_for(11, &[]);
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::full(&[1, 8], 0.3));
    let u = g.softmax_lastdim(uniform).unwrap();
    assert!(g.value(u).data().iter().all(|&p| (p - 0.125).abs() < 1e-15));

    let x = g.constant(Tensor::randn(&[20, 32], 1.0, &mut rng));
    let s = g.softmax_lastdim(x).unwrap();
    for r in 0..20 {
        let sum: f64 = g.value(s).row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    let gamma = g.constant(Tensor::full(&[1, 32], 1.0));
    let beta = g.constant(Tensor::zeros(&[1, 32]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    for r in 0..20 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn maxpool_examples_and_permutation_invariance() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[1.0, 5.0], [3.0, 2.0]]));
    let m = g.maxpool_over_rows(x).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);

    let mut rng = rng_for(5, &[]);
    let base = Tensor::randn(&[30, 6], 1.0, &mut rng);
    let x = g.constant(base.clone());
    let reference = g.maxpool_over_rows(x).unwrap();
    let reference = g.value(reference).clone();
    for trial in 0..20 {
        let mut perm: Vec<usize> = (0..30).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng_for(trial, &[1]));
        let shuffled = g.gather_rows(x, &perm).unwrap();
        let pooled = g.maxpool_over_rows(shuffled).unwrap();
        assert_eq!(g.value(pooled), &reference);
    }
}

#[test]
fn single_key_attention_has_unit_weight() {
    let mut rng = rng_for(8, &[]);
    let mut g = Graph::new();
    let q = g.param(Tensor::randn(&[12, 8], 3.0, &mut rng));
    let kv = g.param(Tensor::randn(&[1, 8], 3.0, &mut rng));
    let out = g.attention(q, kv, kv, 4, 1).unwrap();
    assert!(g.attention_weights(out).unwrap().iter().all(|&w| w == 1.0));
    let v_row = g.value(kv).data().to_vec();
    for r in 0..12 {
        assert_eq!(g.value(out).row(r), &v_row[..]);
    }
}
