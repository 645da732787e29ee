use std::f64::consts::TAU;

use donn_core::field::{add, dft2, hadamard, idft2, intensity, real_inner, ComplexField, GridSpec, Spectrum};
use donn_core::Complex64;
use proptest::prelude::*;

fn grid(n: usize) -> GridSpec {
    GridSpec::new(n, 1e-5).unwrap()
}

fn field_strategy(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| Complex64::new(a, b)), n * n)
}

fn sized_field() -> impl Strategy<Value = (usize, Vec<Complex64>)> {
    prop::sample::select(vec![2usize, 3, 4, 5, 8, 12, 16, 32, 64]).prop_flat_map(|n| (Just(n), field_strategy(n)))
}

fn naive_dft(x: &[Complex64], n: usize, sign: f64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for p in 0..n {
        for q in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..n {
                for k in 0..n {
                    let ang = sign * TAU * ((p * m) % n + (q * k) % n) as f64 / n as f64;
                    acc += x[m * n + k] * Complex64::from_polar(1.0, ang);
                }
            }
            out[p * n + q] = acc;
        }
    }
    out
}

fn max_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_matches_naive_dft(n in prop::sample::select(vec![4usize, 8]), seed in any::<u64>()) {
        let vals: Vec<Complex64> = (0..n * n)
            .map(|i| {
                let u = donn_core::rng::uniform_open(&[seed, i as u64]);
                let v = donn_core::rng::uniform_open(&[seed, i as u64, 1]);
                Complex64::new(2.0 * u - 1.0, 2.0 * v - 1.0)
            })
            .collect();
        let f = ComplexField::new(grid(n), vals.clone()).unwrap();
        prop_assert!(max_err(dft2(&f).values(), &naive_dft(&vals, n, -1.0)) <= 1e-12);
    }

    #[test]
    fn inverse_matches_naive_dft(v in field_strategy(8)) {
        let s = Spectrum::new(grid(8), v.clone()).unwrap();
        let oracle: Vec<Complex64> = naive_dft(&v, 8, 1.0).iter().map(|c| c / 64.0).collect();
        prop_assert!(max_err(idft2(&s).values(), &oracle) <= 1e-12);
    }

    #[test]
    fn round_trip_is_identity((n, v) in sized_field()) {
        let f = ComplexField::new(grid(n), v).unwrap();
        prop_assert!(max_err(idft2(&dft2(&f)).values(), f.values()) <= 1e-12);
    }

    #[test]
    fn parseval((n, v) in sized_field()) {
        let f = ComplexField::new(grid(n), v).unwrap();
        let spatial: f64 = f.values().iter().map(|c| c.norm_sqr()).sum();
        let spectral: f64 = dft2(&f).values().iter().map(|c| c.norm_sqr()).sum();
        let expected = (n * n) as f64 * spatial;
        prop_assert!((spectral - expected).abs() <= 1e-12 * expected.max(1e-300));
    }

    #[test]
    fn linearity(
        (a, b) in field_strategy(8).prop_flat_map(|a| (Just(a), field_strategy(8))),
        alpha in (-2.0f64..2.0, -2.0f64..2.0),
        beta in (-2.0f64..2.0, -2.0f64..2.0),
    ) {
        let (al, be) = (Complex64::new(alpha.0, alpha.1), Complex64::new(beta.0, beta.1));
        let fa = ComplexField::new(grid(8), a).unwrap();
        let fb = ComplexField::new(grid(8), b).unwrap();
        let lhs = dft2(&add(&fa.scale(al), &fb.scale(be)).unwrap());
        let rhs: Vec<Complex64> = dft2(&fa).values().iter().zip(dft2(&fb).values()).map(|(x, y)| al * x + be * y).collect();
        prop_assert!(max_err(lhs.values(), &rhs) <= 1e-12);
    }

    #[test]
    fn adjoint_of_dft_is_scaled_inverse(
        (n, x) in sized_field(),
        seed in any::<u64>(),
    ) {
        let y: Vec<Complex64> = (0..n * n)
            .map(|i| Complex64::new(
                donn_core::rng::uniform_open(&[seed, i as u64]) - 0.5,
                donn_core::rng::uniform_open(&[seed, i as u64, 7]) - 0.5,
            ))
            .collect();
        let fx = ComplexField::new(grid(n), x).unwrap();
        let sy = Spectrum::new(grid(n), y).unwrap();
        let lhs = real_inner(dft2(&fx).values(), sy.values());
        let back: Vec<Complex64> = idft2(&sy).values().iter().map(|c| c * (n * n) as f64).collect();
        let rhs = real_inner(fx.values(), &back);
        prop_assert!((lhs - rhs).abs() <= 1e-10);
    }

    #[test]
    fn hadamard_matches_scalar_products((a, b) in field_strategy(8).prop_flat_map(|a| (Just(a), field_strategy(8)))) {
        let fa = ComplexField::new(grid(8), a.clone()).unwrap();
        let fb = ComplexField::new(grid(8), b.clone()).unwrap();
        let h = hadamard(&fa, &fb).unwrap();
        for ((x, y), z) in a.iter().zip(&b).zip(h.values()) {
            let re = x.re * y.re - x.im * y.im;
            let im = x.re * y.im + x.im * y.re;
            prop_assert_eq!(*z, Complex64::new(re, im));
        }
    }

    #[test]
    fn unit_phasors_have_unit_intensity(theta in -10.0f64..10.0) {
        let f = ComplexField::from_fn(grid(2), |_, _| Complex64::from_polar(1.0, theta));
        for v in intensity(&f).as_slice() {
            prop_assert!((v - 1.0).abs() <= 1e-15);
        }
    }
}
