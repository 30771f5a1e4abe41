use hemulab_tensor::{grad_check, GradCheckOptions, ParamSet, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = hemulab_tensor::rng::substream(seed, "ops-test");
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::<f32>::new();
    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let a_t = Tensor::from_fn(&[3, 3], |i| i as f32 * 0.7 - 2.0);
    let a = tape.constant(a_t.clone());
    let c = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(c), &a_t);

    let two = tape.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let three = tape.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let six = tape.matmul(two, three).unwrap();
    assert_eq!(tape.value(six).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_tensor(&[4, 5], 1);
    let b = rand_tensor(&[5, 3], 2);
    let expect = triple_loop(a.data(), b.data(), 4, 5, 3);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_broadcasts_batches_and_reports_shapes() {
    let a = rand_tensor(&[2, 1, 3, 4], 3);
    let b = rand_tensor(&[3, 4, 2], 4);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 3, 2]);
    for i in 0..2 {
        for j in 0..3 {
            let ab = &a.data()[i * 12..(i + 1) * 12];
            let bb = &b.data()[j * 8..(j + 1) * 8];
            let expect = triple_loop(ab, bb, 3, 4, 2);
            let got = &tape.value(c).data()[(i * 3 + j) * 6..(i * 3 + j + 1) * 6];
            for (x, y) in got.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
    let bad = tape.constant(rand_tensor(&[3, 3], 5));
    match tape.matmul(va, bad) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 1, 3, 4]);
            assert_eq!(rhs, vec![3, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[2, 4], vec![5.0, 5.0, 5.0, 5.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let out = tape.value(y).data();
    assert!(out[..4].iter().all(|v| v.abs() < 1e-12));
    // (x − 2.5) / sqrt(1.25 + 1e-5)
    let denom = (1.25f64 + 1e-5).sqrt();
    for (i, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
        assert!((out[4 + i] - (v - 2.5) / denom).abs() < 1e-12);
    }

    let g0 = tape.constant(Tensor::zeros(&[4]));
    let beta = tape.constant(Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
    let y0 = tape.layer_norm(x, g0, beta, 1e-5).unwrap();
    assert_eq!(&tape.value(y0).data()[4..], &[0.1, -0.2, 0.3, 0.4]);

    let empty = tape.constant(Tensor::zeros(&[2, 0]));
    let ge = tape.constant(Tensor::zeros(&[0]));
    assert!(tape.layer_norm(empty, ge, ge, 1e-5).is_err());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::full(&[4], 0.3));
    let s = tape.softmax(u, 0).unwrap();
    assert!(tape.value(s).data().iter().all(|v| (v - 0.25).abs() < 1e-12));

    let x = tape.constant(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    let d = tape.value(s).data();
    assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

    let big = tape.constant(Tensor::new(&[3], vec![1000.0, 1001.0, 999.0]).unwrap());
    let shifted = tape.constant(Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap());
    let (a, b) = (tape.softmax(big, 0).unwrap(), tape.softmax(shifted, 0).unwrap());
    assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
    assert!(tape.softmax(big, 1).is_err());
}

/// Φ(1) by composite Simpson quadrature of the normal density on [−12, 1].
fn normal_cdf_quadrature(x: f64) -> f64 {
    let (a, n) = (-12.0, 20_000);
    let h = (x - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(&[3], vec![0.0, 10.0, 1.0]).unwrap());
    let y = tape.gelu(x);
    let d = tape.value(y).data();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 10.0).abs() < 1e-6);
    let oracle = normal_cdf_quadrature(1.0);
    assert!((d[2] as f64 - oracle).abs() < 1e-6, "{} vs {oracle}", d[2]);
}

#[test]
fn backward_closed_forms() {
    let mut tape = Tape::<f64>::new();
    let x_t = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let x = tape.param(x_t.clone());
    let sq = tape.square(x);
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    let gx = g.get(x).unwrap();
    for (gv, xv) in gx.data().iter().zip(x_t.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }

    // loss = sum(W·x): dW[i][j] = x[j] for every row i.
    let mut tape = Tape::<f64>::new();
    let w = tape.param(rand_tensor(&[2, 3], 9));
    let xc = tape.constant(Tensor::new(&[3, 1], vec![0.5, -1.0, 2.0]).unwrap());
    let wx = tape.matmul(w, xc).unwrap();
    let loss = tape.sum(wx);
    let g = tape.backward(loss).unwrap().get(w).unwrap();
    assert_eq!(g.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

    let nonscalar = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(nonscalar), Err(TensorError::NonScalarLoss { .. })));
}

#[test]
fn fan_in_accumulates_linearly() {
    // d/dx [sum(x*a) + sum(x*b)] == a + b
    let mut tape = Tape::<f64>::new();
    let x = tape.param(rand_tensor(&[5], 11));
    let a = tape.constant(rand_tensor(&[5], 12));
    let b = tape.constant(rand_tensor(&[5], 13));
    let xa = tape.mul(x, a).unwrap();
    let xb = tape.mul(x, b).unwrap();
    let (sa, sb) = (tape.sum(xa), tape.sum(xb));
    let total = tape.add(sa, sb).unwrap();
    let g = tape.backward(total).unwrap().get(x).unwrap();
    let expect: Vec<f64> = tape.value(a).data().iter().zip(tape.value(b).data()).map(|(p, q)| p + q).collect();
    for (x, y) in g.data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn grad_check_quadratic_is_exact() {
    let mut ps = ParamSet::<f64>::new();
    ps.add("x", rand_tensor(&[6], 21));
    let report = grad_check(
        &ps,
        |tape, p| {
            let sq = tape.square(p.vars()[0]);
            Ok(tape.sum(sq))
        },
        GradCheckOptions {
            eps: 1e-3,
            coords_per_param: None,
            seed: 1,
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    assert_eq!(report.checked, 6);
}

#[test]
fn grad_check_rejects_bad_eps() {
    let ps = ParamSet::<f64>::new();
    let r = grad_check(&ps, |t, _| Ok(t.constant(Tensor::scalar(0.0))), GradCheckOptions { eps: 0.5, ..Default::default() });
    assert!(r.is_err());
}

/// Every differentiable op, composed into a scalar via a random projection.
fn check_all_ops(seed: u64, rows: usize, cols: usize) -> f64 {
    let mut ps = ParamSet::<f64>::new();
    ps.add("x", rand_tensor(&[2, rows, cols], seed));
    ps.add("w", rand_tensor(&[cols, cols], seed + 1));
    ps.add("gamma", rand_tensor(&[cols], seed + 2));
    ps.add("beta", rand_tensor(&[cols], seed + 3));
    ps.add("cls", rand_tensor(&[1, cols], seed + 4));
    ps.add("kern", rand_tensor(&[2, 2, 3, 3], seed + 5));
    ps.add("kb", rand_tensor(&[2], seed + 6));
    let proj = rand_tensor(&[2, rows + 1, cols], seed + 7);
    let report = grad_check(
        &ps,
        |t, p| {
            let v = p.vars();
            let h = t.matmul(v[0], v[1])?;
            let h = t.layer_norm(h, v[2], v[3], 1e-5)?;
            let h = t.gelu(h);
            let h = t.softmax(h, 1)?;
            let c = t.broadcast_leading(v[4], &[2]);
            let h = t.concat(&[c, h], 1)?;
            let h = t.add_broadcast(h, v[3])?;
            let pr = t.constant(proj.clone());
            let h = t.mul(h, pr)?;
            let hp = t.permute(h, &[2, 0, 1])?;
            let hs = t.narrow(hp, 0, 0, cols.min(2))?;
            let hs = t.reshape(hs, &[cols.min(2), 2, rows + 1])?;
            let conv_in = t.reshape(v[0], &[2, 1, rows, cols])?;
            let conv_in = t.concat(&[conv_in, conv_in], 1)?;
            let conv = t.conv2d(conv_in, v[5], Some(v[6]), 1)?;
            let pooled = t.mean_axis(conv, 3)?;
            let pooled = t.square(pooled);
            let a = t.sum(hs);
            let b = t.mean(pooled);
            let b = t.scale(b, 0.7);
            t.sub(a, b)
        },
        GradCheckOptions {
            eps: 1e-4,
            coords_per_param: None,
            seed,
        },
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn every_op_passes_grad_check() {
    let err = check_all_ops(3, 3, 4);
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn mse_gradient_matches_closed_form() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param(rand_tensor(&[4], 31));
    let t = tape.constant(rand_tensor(&[4], 32));
    let loss = tape.mse(p, t).unwrap();
    let g = tape.backward(loss).unwrap().get(p).unwrap();
    for i in 0..4 {
        let expect = 2.0 * (tape.value(p).data()[i] - tape.value(t).data()[i]) / 4.0;
        assert!((g.data()[i] - expect).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reshape_round_trip(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let t = Tensor::<f32>::from_fn(&[a, b, c], |i| i as f32);
        let back = t.clone().reshape(&[a * b, c]).unwrap().reshape(&[a, b, c]).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn softmax_sums_to_one(vals in proptest::collection::vec(-50.0f32..50.0, 12), axis in 0usize..2) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[3, 4], vals).unwrap());
        let s = tape.softmax(x, axis).unwrap();
        let d = tape.value(s).data().to_vec();
        if axis == 1 {
            for r in 0..3 {
                let sum: f32 = d[r * 4..r * 4 + 4].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        } else {
            for c in 0..4 {
                let sum: f32 = (0..3).map(|r| d[r * 4 + c]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(d.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn random_small_shapes_pass_grad_check(seed in 0u64..1000, rows in 1usize..4, cols in 3usize..6) {
        // Curved cases (seed 616) carry ~1e-4 of eps^2 truncation error.
        prop_assert!(check_all_ops(seed, rows, cols) < 1e-3);
    }
}
