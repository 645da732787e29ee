use donn_core::bench::{bench_csv, bench_kernels, BenchConfig, BENCH_HEADER};

fn cfg(sizes: Vec<usize>, depths: Vec<usize>) -> BenchConfig {
    BenchConfig { sizes, depths, batch: 1, repetitions: 9, workers: 1, seed: 0 }
}

#[test]
fn kernels_dominate_the_forward_pass_at_large_size() {
    let rows = bench_kernels(&cfg(vec![500], vec![5])).unwrap();
    let f = rows[0].kernel_fraction;
    println!("N = 500, depth 5: kernel fraction {f:.3}");
    assert!(f >= 0.5, "kernel fraction {f}");
}

#[test]
fn transform_time_grows_superlinearly() {
    let rows = bench_kernels(&cfg(vec![128, 512], vec![1])).unwrap();
    let ratio = |f: fn(&donn_core::bench::BenchRow) -> f64| f(&rows[1]) / f(&rows[0]);
    let (dft, fwd) = (ratio(|r| r.dft2), ratio(|r| r.forward));
    // linear growth in the side length would give 4; N² log N predicts
    // about 20.6
    println!("128 -> 512: dft2 ×{dft:.1}, forward ×{fwd:.1}");
    assert!(dft > 4.0 && fwd > 4.0, "dft2 ×{dft}, forward ×{fwd}");
}

#[test]
fn csv_has_one_row_per_configuration() {
    let rows = bench_kernels(&cfg(vec![8, 12, 16], vec![1, 2])).unwrap();
    let csv = bench_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(BENCH_HEADER));
    assert_eq!(lines.count(), 6);
}
