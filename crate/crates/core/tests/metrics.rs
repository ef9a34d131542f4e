mod common;

use common::{naive_dft_magnitude, naive_fft2d_distance, rand_t, rng};
use gradleak::metrics::{
    assign, brute_force_assignment, dft_magnitude, evaluate, feature_distance, fft2d_distance, hungarian, iip, psnr,
    PSNR_CAP,
};
use gradleak::models::{PriorCnn, PriorConfig};
use gradleak::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn prior() -> PriorCnn {
    PriorCnn::init(&PriorConfig::default(), &mut rng(11)).unwrap()
}

#[test]
fn identical_pair_hits_every_sentinel() {
    let p = prior();
    let a = rand_t(&[3, 16, 16, 1], 0.0, 1.0, 1);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert_eq!(fft2d_distance(&a, &a).unwrap(), 0.0);
    assert_eq!(feature_distance(&a, &a, &p).unwrap(), 0.0);
    let gallery = Tensor::stack(&[
        a.index0(0).unwrap(),
        rand_t(&[16, 16, 1], 0.0, 1.0, 2),
        a.index0(1).unwrap(),
        a.index0(2).unwrap(),
        rand_t(&[16, 16, 1], 0.0, 1.0, 3),
    ])
    .unwrap();
    assert_eq!(iip(&a, &gallery, &[0, 2, 3], &p).unwrap(), 1.0);
    let report = evaluate(&a, &a, Some(&p), Some((&gallery, &[0, 2, 3]))).unwrap();
    assert_eq!(report.assignment, vec![0, 1, 2]);
    assert_eq!(report.iip, Some(1.0));
}

#[test]
fn psnr_closed_form_and_oracle() {
    let zero = Tensor::zeros([1, 4, 4, 1]);
    let half = Tensor::full([1, 4, 4, 1], 0.5);
    assert!((psnr(&zero, &half).unwrap() - 6.0206).abs() < 1e-4);
    let a = rand_t(&[2, 8, 8, 3], -0.2, 1.2, 4);
    let b = rand_t(&[2, 8, 8, 3], -0.2, 1.2, 5);
    let mut se = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        se += (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)).powi(2);
    }
    let expect = 10.0 * (a.len() as f64 / se).log10();
    assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let a = rand_t(&[1, 16, 16, 1], 0.2, 0.8, 6);
    let noise = rand_t(&[1, 16, 16, 1], -1.0, 1.0, 7);
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.05, 0.15] {
        let b = a.add(&noise.scale(amp)).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn fft_matches_naive_dft() {
    let a = rand_t(&[2, 6, 5, 2], 0.0, 1.0, 8);
    let b = rand_t(&[2, 6, 5, 2], 0.0, 1.0, 9);
    let plane: Vec<f64> = (0..30).map(|p| a.data()[p * 2]).collect();
    for (x, y) in dft_magnitude(&plane, 6, 5).iter().zip(naive_dft_magnitude(&plane, 6, 5)) {
        assert!((x - y).abs() < 1e-9);
    }
    let got = fft2d_distance(&a, &b).unwrap();
    assert!((got - naive_fft2d_distance(&a, &b)).abs() < 1e-9);
    assert!(got > 0.0);
}

#[test]
fn fft_distance_is_scale_invariant_and_zero_safe() {
    let a = rand_t(&[1, 8, 8, 1], 0.0, 0.5, 10);
    assert!(fft2d_distance(&a, &a.scale(2.0)).unwrap().abs() < 1e-12);
    let z = Tensor::zeros([1, 8, 8, 1]);
    assert_eq!(fft2d_distance(&z, &z).unwrap(), 0.0);
}

#[test]
fn hungarian_equals_brute_force_on_random_instances() {
    let mut r = rng(12);
    for _ in 0..50 {
        let cost: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| r.gen_range(0.0..10.0)).collect()).collect();
        let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
        let h = hungarian(&cost);
        let b = brute_force_assignment(&cost);
        assert!((total(&h) - total(&b)).abs() < 1e-12);
        assert_eq!(h, b);
    }
}

#[test]
fn assignment_recovers_permutations() {
    let x = rand_t(&[10, 4, 4, 1], 0.0, 1.0, 13);
    assert_eq!(assign(&x, &x).unwrap(), (0..10).collect::<Vec<_>>());
    let small = rand_t(&[5, 4, 4, 1], 0.0, 1.0, 14);
    let rev: Vec<Tensor> = (0..5).rev().map(|i| small.index0(i).unwrap()).collect();
    let rev = Tensor::stack(&rev).unwrap();
    assert_eq!(assign(&small, &rev).unwrap(), vec![4, 3, 2, 1, 0]);
    assert!(assign(&rand_t(&[13, 2, 2, 1], 0.0, 1.0, 1), &rand_t(&[13, 2, 2, 1], 0.0, 1.0, 2)).is_err());
    assert!(assign(&small, &x).is_err());
}

#[test]
fn feature_distance_is_symmetric_and_reproducible() {
    let p = prior();
    let a = rand_t(&[2, 16, 16, 1], 0.0, 1.0, 15);
    let b = rand_t(&[2, 16, 16, 1], 0.0, 1.0, 16);
    let d = feature_distance(&a, &b, &p).unwrap();
    assert_eq!(d, feature_distance(&b, &a, &p).unwrap());
    let (fa, fb) = (p.features(&a).unwrap(), p.features(&b).unwrap());
    let k = fa.shape()[1];
    let mut expect = 0.0;
    for i in 0..2 {
        let row = |f: &Tensor| f.data()[i * k..(i + 1) * k].to_vec();
        expect += row(&fa).iter().zip(row(&fb)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    }
    assert!((d - expect / 2.0).abs() < 1e-12);
}

#[test]
fn iip_of_distractors_is_near_chance() {
    let p = prior();
    let gallery = rand_t(&[20, 16, 16, 1], 0.0, 1.0, 17);
    let mut r = rng(18);
    let mut hits = 0.0;
    let trials = 200;
    for _ in 0..trials {
        let own: Vec<usize> = (0..2).map(|_| r.gen_range(0..20)).collect();
        let other: Vec<usize> = (0..2).map(|_| r.gen_range(0..20)).collect();
        let recons = Tensor::stack(&[gallery.index0(other[0]).unwrap(), gallery.index0(other[1]).unwrap()]).unwrap();
        hits += iip(&recons, &gallery, &own, &p).unwrap();
    }
    let rate = hits / trials as f64;
    assert!((rate - 1.0 / 20.0).abs() < 0.04, "rate {rate}");
}

proptest! {
    #[test]
    fn fft_distance_stays_in_range(seed in 0u64..1000) {
        let a = rand_t(&[1, 5, 7, 1], -0.5, 1.5, seed);
        let b = rand_t(&[1, 5, 7, 1], -0.5, 1.5, seed + 1);
        let d = fft2d_distance(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
    }

    #[test]
    fn assignment_ignores_common_offsets(seed in 0u64..1000, offset in -0.2f64..0.2) {
        let a = rand_t(&[4, 3, 3, 1], 0.3, 0.7, seed);
        let b = rand_t(&[4, 3, 3, 1], 0.3, 0.7, seed + 7);
        let shift = |t: &Tensor| t.map(|v| v + offset);
        prop_assert_eq!(assign(&a, &b).unwrap(), assign(&shift(&a), &shift(&b)).unwrap());
    }
}
