mod common;

use common::*;
use gradleak::tensor::gradcheck;
use gradleak::{Error, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_passes_finite_differences() {
    let mut failed = Vec::new();
    for (name, f, inputs) in primitive_cases() {
        let report = run_case(&f, &inputs);
        assert!(report.checked > 0, "{name} checked nothing");
        if !report.passed() {
            failed.push(format!("{name}: {:?}", &report.failures[..report.failures.len().min(3)]));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros([3]));
    let y = x.softmax(0).unwrap().value();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full([2, 5], 3.25));
    let y = x.layer_norm(1, 1e-6).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_rows_and_layer_norm_moments() {
    let x = rand_t(&[6, 9], -2.0, 2.0, 11);
    let tape = Tape::new();
    let xv = tape.constant(x);
    let s = xv.softmax(1).unwrap().value();
    for r in 0..6 {
        let sum: f64 = s.data()[r * 9..(r + 1) * 9].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    let ln = xv.layer_norm(1, 1e-6).unwrap().value();
    let moments = |row: &[f64]| {
        let m = row.iter().sum::<f64>() / row.len() as f64;
        (m, row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / row.len() as f64)
    };
    for r in 0..6 {
        let (m, v) = moments(&ln.data()[r * 9..(r + 1) * 9]);
        let (_, raw) = moments(&xv.value().data()[r * 9..(r + 1) * 9]);
        assert!(m.abs() < 1e-10);
        // unit variance up to the eps guard
        assert!((v - raw / (raw + 1e-6)).abs() < 1e-6, "variance {v}");
        assert!((v - 1.0).abs() < 1e-5);
    }
}

#[test]
fn sum_gives_ones_and_half_square_norm_gives_identity() {
    let x = rand_t(&[2, 3, 4], -2.0, 2.0, 3);
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    tape.backward(xv.sum_all().unwrap()).unwrap();
    assert_eq!(xv.grad().unwrap(), Tensor::ones([2, 3, 4]));

    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = xv.square().unwrap().sum_all().unwrap().scale(0.5).unwrap();
    tape.backward(loss).unwrap();
    let g = xv.grad().unwrap();
    for (a, b) in g.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn reuse_accumulates_path_contributions() {
    let x = rand_t(&[5], -2.0, 2.0, 5);
    // f(x) = sum(x*x + exp(x)) uses x three times
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let f = xv.mul(xv).unwrap().add(xv.exp().unwrap()).unwrap().sum_all().unwrap();
    tape.backward(f).unwrap();
    let shared = xv.grad().unwrap();

    // same function with each use fed by its own copy
    let tape = Tape::new();
    let (a, b, c) = (tape.leaf(x.clone()), tape.leaf(x.clone()), tape.leaf(x.clone()));
    let f = a.mul(b).unwrap().add(c.exp().unwrap()).unwrap().sum_all().unwrap();
    tape.backward(f).unwrap();
    let split: Vec<f64> = (0..5)
        .map(|i| a.grad().unwrap().data()[i] + b.grad().unwrap().data()[i] + c.grad().unwrap().data()[i])
        .collect();
    for (s, t) in shared.data().iter().zip(&split) {
        assert!((s - t).abs() < 1e-14);
    }
}

#[test]
fn matmul_backward_matches_transpose_formula() {
    let a = rand_t(&[3, 4], -2.0, 2.0, 1);
    let b = rand_t(&[4, 2], -2.0, 2.0, 2);
    let tape = Tape::new();
    let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    tape.backward(av.matmul(bv).unwrap().sum_all().unwrap()).unwrap();
    // dL/dC = ones, so dL/dA = ones * Bᵀ: every row equals the row sums of B
    let ga = av.grad().unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect = b.data()[k * 2] + b.data()[k * 2 + 1];
            assert!((ga.data()[i * 4 + k] - expect).abs() < 1e-14);
        }
    }
    let f = gradcheck::scalar_fn(|_, v| v[0].matmul(v[1])?.square()?.sum_all());
    let report = gradcheck::check(&f, &[a, b]).unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn backward_contract_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::ones([3]));
    let y = x.scale(2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    let s = y.sum_all().unwrap();
    tape.backward(s).unwrap();
    assert!(tape.is_frozen());
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    tape.clear_grads();
    tape.backward(s).unwrap();
}

#[test]
fn shape_mismatch_and_non_finite_are_errors() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::ones([2, 3]));
    let b = tape.leaf(Tensor::ones([2]));
    assert!(matches!(a.add(b), Err(Error::Contract(_))));
    assert!(matches!(a.matmul(a), Err(Error::Contract(_))));
    let z = tape.leaf(Tensor::zeros([2]));
    match z.log() {
        Err(Error::Numeric { op, .. }) => assert_eq!(op, "log"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let run = || {
        let x = rand_t(&[2, 4, 4, 2], -2.0, 2.0, 9);
        let w = rand_t(&[3, 3, 2, 3], -1.0, 1.0, 10);
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(x), tape.leaf(w));
        let y = xv.conv2d(wv, 1, 1).unwrap().gelu().unwrap().softmax(3).unwrap();
        let l = y.l2_norm().unwrap();
        tape.backward(l).unwrap();
        (l.item().to_bits(), xv.grad().unwrap(), wv.grad().unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn composite_expression_gradcheck(seed in 0u64..10_000) {
        let x = rand_t(&[3, 4], -2.0, 2.0, seed);
        let w = rand_t(&[4, 4], -2.0, 2.0, seed + 1);
        let f = gradcheck::scalar_fn(|_, v| {
            let h = v[0].matmul(v[1])?.layer_norm(1, 1e-6)?.gelu()?;
            let p = h.softmax(1)?;
            p.mul(h)?.sum(&[1], false)?.l2_norm()
        });
        let report = gradcheck::check(&f, &[x, w]).unwrap();
        prop_assert!(report.passed(), "{:?}", report.failures);
    }
}
