//! Timing harness for the transform kernels and the forward pass.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::fft::Fft2;
use crate::field::{ComplexField, GridSpec};
use crate::model::{detect, modulate, DetectorSpec, Layer, Model, RunMode, Simulator};
use crate::optics::{build_transfer, propagate, Approximation, SystemConfig, TransferCache, Workspace};
use crate::rng;
use crate::train::{with_workers, CHUNK};

pub const BENCH_HEADER: &str = "size,depth,batch,dft2_s,idft2_s,hadamard_s,forward_s,kernel_fraction,per_sample_s,batched_s,speedup";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub depths: Vec<usize>,
    pub batch: usize,
    pub repetitions: usize,
    pub workers: usize,
    pub seed: u64,
}

/// Median timings for one `(size, depth)` pair. Kernel and forward times are
/// per call; the two batch times cover the whole batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub depth: usize,
    pub batch: usize,
    pub dft2: f64,
    pub idft2: f64,
    pub hadamard: f64,
    /// One sample through a cached simulator.
    pub forward: f64,
    /// Share of `forward` accounted for by its transforms and products,
    /// estimated from the separately timed kernels (median of per-repetition
    /// ratios; can slightly exceed 1 when the forward pass runs hotter).
    pub kernel_fraction: f64,
    /// Batch through a loop that rebuilds every transfer function per sample.
    pub per_sample: f64,
    /// Batch through one cached simulator, evaluated in parallel chunks.
    pub batched: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.per_sample / self.batched
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{:e},{:.4},{:e},{:e},{:.3}",
            self.size,
            self.depth,
            self.batch,
            self.dft2,
            self.idft2,
            self.hadamard,
            self.forward,
            self.kernel_fraction,
            self.per_sample,
            self.batched,
            self.speedup()
        )
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time<T>(reps: usize, mut f: impl FnMut() -> T) -> f64 {
    let samples = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64()
        })
        .collect();
    median(samples)
}

fn bench_model(size: usize, depth: usize, seed: u64) -> Result<Model> {
    let grid = GridSpec::new(size, 3.6e-5)?;
    let config = SystemConfig::uniform(532e-9, grid, 0.3, depth, Approximation::Fresnel)?;
    Model::new(config, DetectorSpec::segmentation(), 1.0, 1, seed)
}

fn random_field(grid: GridSpec, r: &mut impl Rng) -> Result<ComplexField> {
    let values = (0..grid.len()).map(|_| Complex64::new(r.gen::<f64>(), 0.0)).collect();
    ComplexField::new(grid, values)
}

/// Straightforward per-sample loop: every transfer function is rebuilt and
/// every intermediate field freshly allocated.
fn forward_uncached(model: &Model, input: &ComplexField) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let mut u = input.clone();
    for (gap, &z) in cfg.distances.iter().enumerate() {
        let tf = build_transfer(cfg.approx, z, cfg.wavelength, &cfg.grid)?;
        u = propagate(&u, &tf)?;
        if gap < cfg.depth {
            let Layer::Phase(p) = &model.channels[0][gap] else { unreachable!("bench models are phase-only") };
            u = modulate(&u, p, model.gamma)?;
        }
    }
    detect(&u, &model.detector)
}

fn bench_one(size: usize, depth: usize, cfg: &BenchConfig) -> Result<BenchRow> {
    let model = bench_model(size, depth, cfg.seed)?;
    let grid = model.config.grid;
    let mut r = rng::seeded(cfg.seed, 2);
    let a = random_field(grid, &mut r)?;
    let b = random_field(grid, &mut r)?;
    let reps = cfg.repetitions;
    let inputs: Vec<ComplexField> = (0..cfg.batch).map(|_| random_field(grid, &mut r)).collect::<Result<_>>()?;
    let mut cache = TransferCache::new();
    let sim = Simulator::new(&model, &mut cache, RunMode::eval())?;
    let mut ws = Workspace::new();
    // the in-place kernels the forward pass runs; a forward/inverse pair
    // returns the buffer to its starting values
    let fft = Fft2::shared(size);
    let mut scratch = fft.scratch();
    let mut buf = a.values().to_vec();
    let mask: Vec<Complex64> = b.values().iter().map(|v| Complex64::from_polar(1.0, TAU * v.re)).collect();
    // warm-up pass so plans and buffers are hot before timing
    fft.forward_transposed(&mut buf, &mut scratch);
    fft.inverse_from_transposed(&mut buf, &mut scratch);
    sim.forward(std::slice::from_ref(&inputs[0]), 0, None, &mut ws)?;
    // per gap: one forward and one inverse transform plus the spectral
    // product; per layer: the mask product
    let gaps = depth as f64 + 1.0;
    let (mut fwd, mut inv, mut had, mut full, mut frac) = (vec![], vec![], vec![], vec![], vec![]);
    // kernels and forward are timed back to back in every repetition so the
    // fraction is not skewed by drifting machine load
    for _ in 0..reps {
        let t = Instant::now();
        fft.forward_transposed(&mut buf, &mut scratch);
        let t_dft = t.elapsed().as_secs_f64();
        let t = Instant::now();
        fft.inverse_from_transposed(&mut buf, &mut scratch);
        let t_idft = t.elapsed().as_secs_f64();
        let t = Instant::now();
        for (v, m) in buf.iter_mut().zip(&mask) {
            *v *= m;
        }
        let t_had = t.elapsed().as_secs_f64();
        std::hint::black_box(&buf);
        let t = Instant::now();
        std::hint::black_box(sim.forward(std::slice::from_ref(&inputs[0]), 0, None, &mut ws)?);
        let t_fwd = t.elapsed().as_secs_f64();
        frac.push((gaps * (t_dft + t_idft + t_had) + depth as f64 * t_had) / t_fwd);
        fwd.push(t_dft);
        inv.push(t_idft);
        had.push(t_had);
        full.push(t_fwd);
    }

    let t_loop = time(reps, || -> Result<()> {
        for x in &inputs {
            std::hint::black_box(forward_uncached(&model, x)?);
        }
        Ok(())
    });
    let t_batch = time(reps, || -> Result<()> {
        with_workers(cfg.workers, || -> Result<()> {
            let mut cache = TransferCache::new();
            let sim = Simulator::new(&model, &mut cache, RunMode::eval())?;
            inputs
                .par_chunks(CHUNK)
                .try_for_each(|chunk| -> Result<()> {
                    let mut ws = Workspace::new();
                    for x in chunk {
                        std::hint::black_box(sim.forward(std::slice::from_ref(x), 0, None, &mut ws)?);
                    }
                    Ok(())
                })
        })?
    });
    Ok(BenchRow {
        size,
        depth,
        batch: cfg.batch,
        dft2: median(fwd),
        idft2: median(inv),
        hadamard: median(had),
        forward: median(full),
        kernel_fraction: median(frac),
        per_sample: t_loop,
        batched: t_batch,
    })
}

/// One row per `(size, depth)` pair, sizes outermost.
pub fn bench_kernels(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    ensure!(!cfg.sizes.is_empty() && !cfg.depths.is_empty(), Empty, "no sizes or depths to benchmark");
    ensure!(cfg.sizes.iter().all(|&n| n >= 2), InvalidParameter, "sizes must be >= 2");
    ensure!(cfg.batch >= 1 && cfg.repetitions >= 1, InvalidParameter, "batch and repetitions must be >= 1");
    let mut rows = Vec::with_capacity(cfg.sizes.len() * cfg.depths.len());
    for &n in &cfg.sizes {
        for &d in &cfg.depths {
            let row = bench_one(n, d, cfg)?;
            log::info!("bench N={n} depth={d}: forward {:.3e}s, speedup {:.2}", row.forward, row.speedup());
            rows.push(row);
        }
    }
    Ok(rows)
}
