use std::f64::consts::PI;

use donn_core::field::{dft2, intensity, ComplexField, GridSpec};
use donn_core::optics::{
    build_transfer, build_transfer_padded, fraunhofer_propagate, make_source, propagate, sample_kernel, Approximation,
    LaserProfile, Propagator, SystemConfig, TransferCache, Workspace,
};
use donn_core::Complex64;
use proptest::prelude::*;

const J: Complex64 = Complex64::new(0.0, 1.0);

/// Closed-form kernel sample at offset `(x, y)`, weighted by `d²`.
fn kernel_oracle(approx: Approximation, x: f64, y: f64, z: f64, lam: f64, d: f64) -> Complex64 {
    let k = 2.0 * PI / lam;
    match approx {
        Approximation::Fresnel => {
            (J * k * z).exp() / (J * lam * z) * (J * k * (x * x + y * y) / (2.0 * z)).exp() * d * d
        }
        Approximation::RayleighSommerfeld => {
            let r = (x * x + y * y + z * z).sqrt();
            z / (J * lam) * (J * k * r).exp() / (r * r) * d * d
        }
        Approximation::Fraunhofer => unreachable!(),
    }
}

/// `Σ_{m,n} x[m,n]·h[(p−m) mod N, (q−n) mod N]` with `h` indexed from the
/// zero offset at `[0, 0]`.
fn circular_convolution(x: &[Complex64], n: usize, approx: Approximation, z: f64, lam: f64, d: f64) -> Vec<Complex64> {
    let offset = |i: usize| {
        let s = if i < n / 2 { i as f64 } else { i as f64 - n as f64 };
        s * d
    };
    let mut h = vec![Complex64::new(0.0, 0.0); n * n];
    for a in 0..n {
        for b in 0..n {
            h[a * n + b] = kernel_oracle(approx, offset(b), offset(a), z, lam, d);
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for p in 0..n {
        for q in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..n {
                for k in 0..n {
                    acc += x[m * n + k] * h[((p + n - m) % n) * n + (q + n - k) % n];
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

fn random_field(n: usize, d: f64, seed: u64) -> ComplexField {
    ComplexField::from_fn(GridSpec::new(n, d).unwrap(), |r, c| {
        let i = (r * n + c) as u64;
        Complex64::new(
            donn_core::rng::uniform_open(&[seed, i]) - 0.5,
            donn_core::rng::uniform_open(&[seed, i, 1]) - 0.5,
        )
    })
}

/// Radius along the central row where intensity falls to `e^-2` of the
/// on-axis value, linearly interpolated between samples.
fn threshold_radius(map: &[f64], grid: &GridSpec) -> f64 {
    let n = grid.size();
    let row = &map[(n / 2) * n..(n / 2 + 1) * n];
    let thr = row[n / 2] * (-2.0f64).exp();
    let mut k = n / 2;
    while k + 1 < n && row[k + 1] > thr {
        k += 1;
    }
    grid.coord(k) + (row[k] - thr) / (row[k] - row[k + 1]) * grid.pixel_pitch()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fft_path_matches_circular_convolution(
        seed in any::<u64>(),
        z in 0.01f64..0.5,
        d in 5e-6f64..4e-5,
        sommerfeld in any::<bool>(),
    ) {
        let approx = if sommerfeld { Approximation::RayleighSommerfeld } else { Approximation::Fresnel };
        let lam = 532e-9;
        let x = random_field(16, d, seed);
        let tf = build_transfer(approx, z, lam, &x.grid()).unwrap();
        let fast = propagate(&x, &tf).unwrap();
        let slow = circular_convolution(x.values(), 16, approx, z, lam, d);
        prop_assert!(max_err(fast.values(), &slow) <= 1e-10);
    }

    #[test]
    fn kernel_spectrum_matches_naive_dft(z in 0.01f64..1.0, d in 1e-6f64..1e-4, lam in 4e-7f64..1.6e-6) {
        let g = GridSpec::new(8, d).unwrap();
        let h = sample_kernel(Approximation::Fresnel, z, lam, &g).unwrap();
        // ifftshift, then a textbook DFT
        let rolled: Vec<Complex64> = (0..64).map(|i| h.get((i / 8 + 4) % 8, (i % 8 + 4) % 8)).collect();
        let tf = build_transfer(Approximation::Fresnel, z, lam, &g).unwrap();
        for p in 0..8 {
            for q in 0..8 {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, v) in rolled.iter().enumerate() {
                    acc += v * Complex64::from_polar(1.0, -2.0 * PI * ((p * (i / 8) + q * (i % 8)) % 8) as f64 / 8.0);
                }
                prop_assert!((tf.values()[p * 8 + q] - acc).norm() <= 1e-12 * acc.norm().max(1.0));
            }
        }
    }

    #[test]
    fn kernel_is_point_symmetric(z in 0.01f64..1.0, d in 1e-6f64..1e-4, sommerfeld in any::<bool>()) {
        let approx = if sommerfeld { Approximation::RayleighSommerfeld } else { Approximation::Fresnel };
        let n = 16;
        let h = sample_kernel(approx, z, 532e-9, &GridSpec::new(n, d).unwrap()).unwrap();
        // offsets ±s sit at N/2 ± s; index 0 has no mirror on an even grid
        for r in 1..n {
            for c in 1..n {
                prop_assert_eq!(h.get(r, c), h.get(n - r, n - c));
            }
        }
        let tf = build_transfer(approx, z, 532e-9, &GridSpec::new(n, d).unwrap()).unwrap();
        let v = tf.values();
        for p in 0..n {
            for q in 0..n {
                let a = v[p * n + q];
                let b = v[((n - p) % n) * n + (n - q) % n];
                prop_assert!((a - b).norm() <= 1e-12 * a.norm().max(1e-3));
            }
        }
    }

    #[test]
    fn cached_transfer_is_bit_identical(z in 0.01f64..1.0, seed in any::<u64>()) {
        let grid = GridSpec::new(16, 2e-5).unwrap();
        let mut cache = TransferCache::new();
        let a = cache.get(Approximation::Fresnel, z, 532e-9, &grid, false).unwrap();
        let b = cache.get(Approximation::Fresnel, z, 532e-9, &grid, false).unwrap();
        let fresh = build_transfer(Approximation::Fresnel, z, 532e-9, &grid).unwrap();
        prop_assert_eq!(a.values(), fresh.values());
        for s in 0..4 {
            let x = random_field(16, 2e-5, seed.wrapping_add(s));
            prop_assert_eq!(propagate(&x, &b).unwrap(), propagate(&x, &fresh).unwrap());
        }
    }
}

#[test]
fn gaussian_beam_radius_follows_analytic_law() {
    let lam = 532e-9;
    let grid = GridSpec::new(256, 2e-5).unwrap();
    for (w0, z) in [(2.9e-4, 0.3), (2.0e-4, 0.6)] {
        let zr = PI * w0 * w0 / lam;
        let beam = make_source(&LaserProfile::gaussian(w0), &grid).unwrap();
        let p_in: f64 = intensity(&beam).as_slice().iter().sum();
        let tf = build_transfer(Approximation::Fresnel, z, lam, &grid).unwrap();
        let out = intensity(&propagate(&beam, &tf).unwrap());
        let w = threshold_radius(out.as_slice(), &grid);
        let expected = w0 * (1.0 + (z / zr).powi(2)).sqrt();
        let p_out: f64 = out.as_slice().iter().sum();
        assert!((w / expected - 1.0).abs() < 0.02, "w0 = {w0}, z = {z}: radius {w} vs {expected}");
        assert!((p_out / p_in - 1.0).abs() < 0.02, "w0 = {w0}, z = {z}: power ratio {}", p_out / p_in);
    }
}

#[test]
fn central_gaussian_keeps_its_power() {
    // beam confined to the central quarter of the grid
    let grid = GridSpec::new(256, 2e-5).unwrap();
    let beam = make_source(&LaserProfile::gaussian(4e-4), &grid).unwrap();
    let p_in: f64 = intensity(&beam).as_slice().iter().sum();
    for approx in [Approximation::Fresnel, Approximation::RayleighSommerfeld] {
        for z in [0.3, 0.6] {
            let tf = build_transfer(approx, z, 532e-9, &grid).unwrap();
            let p_out: f64 = intensity(&propagate(&beam, &tf).unwrap()).as_slice().iter().sum();
            assert!((p_out / p_in - 1.0).abs() < 0.02, "{approx:?} z = {z}: ratio {}", p_out / p_in);
        }
    }
}

#[test]
fn padded_propagation_is_reciprocal_for_band_limited_fields() {
    let grid = GridSpec::new(128, 2e-5).unwrap();
    let beam = make_source(&LaserProfile::gaussian(2.5e-4), &grid).unwrap();
    let cfg = SystemConfig { padded: true, ..SystemConfig::uniform(532e-9, grid, 0.1, 1, Approximation::Fresnel).unwrap() };
    let prop = TransferCache::new().propagator(&cfg, 0.1).unwrap();
    let mut u = beam.values().to_vec();
    let mut ws = Workspace::new();
    prop.apply(&mut u, &mut ws);
    // the adjoint multiplies by conj(H), the transfer function of the
    // phase-conjugated kernel
    prop.adjoint(&mut u, &mut ws);
    let err = max_err(&u, beam.values());
    assert!(err <= 1e-6, "round trip error {err}");
}

#[test]
fn dc_gain_is_close_to_one_on_an_adequate_grid() {
    let grid = GridSpec::new(128, 3.6e-5).unwrap();
    for approx in [Approximation::Fresnel, Approximation::RayleighSommerfeld] {
        let tf = build_transfer(approx, 0.3, 532e-9, &grid).unwrap();
        let g = tf.dc_gain().norm();
        assert!((0.98..=1.02).contains(&g), "{approx:?}: |H(DC)| = {g}");
    }
}

#[test]
fn fraunhofer_output_power_follows_prefactor() {
    let (lam, z, d, n) = (532e-9, 2.0, 1e-5, 32);
    let x = random_field(n, d, 11);
    let out = fraunhofer_propagate(&x, z, lam, &x.grid()).unwrap();
    let p_out: f64 = out.values().iter().map(|v| v.norm_sqr()).sum();
    let p_spec: f64 = dft2(&x).values().iter().map(|v| v.norm_sqr()).sum();
    let expected = (d * d / (lam * z)).powi(2) * p_spec;
    assert!((p_out / expected - 1.0).abs() < 1e-12);
}

#[test]
fn fraunhofer_of_a_delta_is_flat() {
    let grid = GridSpec::new(16, 1e-5).unwrap();
    let mut x = ComplexField::zeros(grid);
    x.values_mut()[8 * 16 + 8] = Complex64::new(1.0, 0.0);
    let out = fraunhofer_propagate(&x, 1.0, 532e-9, &grid).unwrap();
    let m0 = out.values()[0].norm();
    assert!(out.values().iter().all(|v| (v.norm() - m0).abs() <= 1e-12 * m0));
}

#[test]
fn padded_transfer_differs_from_circular_near_the_edges() {
    let grid = GridSpec::new(16, 2e-5).unwrap();
    let tf = build_transfer(Approximation::Fresnel, 0.05, 532e-9, &grid).unwrap();
    let tp = build_transfer_padded(Approximation::Fresnel, 0.05, 532e-9, &grid).unwrap();
    let mut x = ComplexField::zeros(grid);
    x.values_mut()[0] = Complex64::new(1.0, 0.0);
    let a = propagate(&x, &tf).unwrap();
    let b = propagate(&x, &tp).unwrap();
    assert!(max_err(a.values(), b.values()) > 1e-6);
    assert_eq!(tp.transform_size(), 32);
    let _ = Propagator::Convolution(std::sync::Arc::new(tf));
}
