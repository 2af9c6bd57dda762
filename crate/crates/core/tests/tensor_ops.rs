use proptest::prelude::*;
use turbo_core::gradcheck::{check_inputs, op_suite, randn, rel_err, step_for, MIN_COORDS, TOLERANCE};
use turbo_core::rng::rng_from;
use turbo_core::{Graph, OpKind, Tensor, TurboError};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(t(&[2, 2], &[1.5, -2., 3., 4.]));
    let out = g.matmul(i, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.5, -2., 3., 4.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[3, 4]));
    let b = g.constant(Tensor::zeros(&[5, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, TurboError::Shape(_)));
    assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
}

/// Independent oracle: central differences of sum(A.B) w.r.t. every entry of A.
#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = rng_from(11);
    let a = randn(&[3, 4], 1.0, &mut rng);
    let b = randn(&[4, 2], 1.0, &mut rng);
    let f = |a: &Tensor<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
            }
        }
        s
    };
    let mut g = Graph::<f64>::new();
    let av = g.param(a.clone());
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let loss = g.sum(c);
    g.backward(loss).unwrap();
    let grad = g.grad(av).unwrap();
    for c in 0..a.numel() {
        let h = step_for(a.data()[c]);
        let (mut up, mut dn) = (a.clone(), a.clone());
        up.data_mut()[c] += h;
        dn.data_mut()[c] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        assert!(rel_err(grad.data()[c], fd) < 1e-6, "coord {c}: {} vs {fd}", grad.data()[c]);
    }
}

#[test]
fn elementwise_fixed_points() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(t(&[1], &[0.0]));
    let y = g.gelu(z);
    assert_eq!(g.value(y).item(), 0.0);
    let x = g.constant(t(&[1], &[2.5]));
    let l = g.log(x).unwrap();
    let e = g.exp(l);
    assert!((g.value(e).item() - 2.5).abs() < 1e-6);
    let neg = g.constant(t(&[2], &[1.0, -1.0]));
    assert!(matches!(g.log(neg), Err(TurboError::Domain(_))));
    assert!(matches!(g.sqrt(neg), Err(TurboError::Domain(_))));
}

#[test]
fn gelu_gradient_at_point_seven() {
    let mut rng = rng_from(0);
    let x = t(&[1], &[0.7]);
    let rep = check_inputs("gelu@0.7", &[x], |g, v| Ok(g.gelu(v[0])), 1, None, &mut rng).unwrap();
    assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
}

#[test]
fn softmax_uniform_and_stable() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0., 0., 0.]));
    let s = g.softmax(x, 0).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let big = g.constant(t(&[2], &[1000., 0.]));
    let s = g.softmax(big, -1).unwrap();
    assert!(g.value(s).finite_check());
    assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(s).data()[1] < 1e-300);
}

#[test]
fn softmax_jvp_matches_finite_difference() {
    let mut rng = rng_from(5);
    let x = randn(&[5], 1.0, &mut rng);
    let w = randn(&[5], 1.0, &mut rng);
    let rep = check_inputs(
        "softmax_jvp",
        &[x],
        |g, v| {
            let s = g.softmax(v[0], 0)?;
            let wv = g.constant(w.clone());
            let p = g.mul(s, wv)?;
            Ok(g.sum(p))
        },
        5,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(t(&[3], &[1., 1., 1.]));
    let bias = g.constant(t(&[3], &[0., 0., 0.]));
    let x = g.constant(t(&[1, 3], &[5., 5., 5.]));
    let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0., 0.]);

    let gain = g.constant(t(&[2], &[1., 1.]));
    let bias = g.constant(t(&[2], &[0., 0.]));
    let x = g.constant(t(&[1, 2], &[1., -1.]));
    let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4, "{d:?}");
}

#[test]
fn gather_rows_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3, 1], &[1., 2., 3.]));
    let same = g.gather_rows(x, &[0, 1, 2]).unwrap();
    assert_eq!(g.value(same).data(), &[1., 2., 3.]);
    let y = g.gather_rows(x, &[2, 0]).unwrap();
    assert_eq!(g.value(y).data(), &[3., 1.]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1., 0., 1.]);
    assert!(matches!(g.gather_rows(x, &[3]), Err(TurboError::Index(_))));
}

#[test]
fn backward_basics_and_accumulation() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[2, 3], 0.5));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    // second call without zero_grad accumulates
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    g.zero_grad();
    assert!(g.grad(x).is_none());

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);

    let err = g.backward(x).and_then(|_| {
        let v = g.param(Tensor::zeros(&[2]));
        g.backward(v)
    });
    assert!(matches!(err, Err(TurboError::Contract(_))));
}

#[test]
fn every_op_passes_the_finite_difference_suite() {
    let reports = op_suite(2024, None).unwrap();
    assert!(reports.len() >= 18);
    for r in &reports {
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_err <= TOLERANCE);
        assert!(r.coords >= MIN_COORDS, "{r:?}");
    }
}

#[test]
fn sign_flipped_backward_rule_is_caught() {
    for kind in [OpKind::Gelu, OpKind::LayerNorm, OpKind::Softmax, OpKind::MatMul] {
        let reports = op_suite(2024, Some(kind)).unwrap();
        assert!(reports.iter().any(|r| !r.passed), "fault in {kind:?} went unnoticed");
    }
}

#[test]
fn identical_op_sequences_are_bit_identical() {
    let run = || {
        let mut rng = rng_from(3);
        let mut g = Graph::<f32>::new();
        let a = g.param(randn(&[8, 16], 1.0, &mut rng).cast());
        let b = g.param(randn(&[16, 4], 1.0, &mut rng).cast());
        let c = g.matmul(a, b).unwrap();
        let c = g.gelu(c);
        let s = g.softmax(c, -1).unwrap();
        let l = g.mean(s);
        g.backward(l).unwrap();
        (g.value(s).clone(), g.grad(a).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3, 4], v).unwrap());
        let s = g.softmax(x, -1).unwrap();
        for r in 0..3 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_rows_standardized(v in proptest::collection::vec(-10.0f64..10.0, 16)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 8], v).unwrap());
        let gain = g.constant(Tensor::full(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let y = g.layernorm(x, gain, bias, 1e-12).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-5);
            // rows that are (almost) constant stay near zero instead
            prop_assert!((var - 1.0).abs() < 1e-5 || var < 1e-5);
        }
    }
}
