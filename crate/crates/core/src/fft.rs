//! Square 2-D FFT plans built on `rustfft`.
//!
//! Forward transforms are unnormalized, inverse transforms are scaled by
//! `1/N²` by the caller (see [`crate::field::idft2`]). The `*_transposed`
//! variants skip the final transpose, which lets propagation multiply a
//! transposed transfer function and run the inverse without ever
//! materializing the spectrum in natural orientation.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch_len: usize,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Fft2 {
            n,
            forward,
            inverse,
            scratch_len,
        }
    }

    /// Process-wide plan cache keyed by size.
    pub fn shared(n: usize) -> Arc<Fft2> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Fft2>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("fft plan cache poisoned");
        guard
            .entry(n)
            .or_insert_with(|| Arc::new(Fft2::new(n)))
            .clone()
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn scratch(&self) -> Vec<Complex64> {
        vec![Complex64::new(0.0, 0.0); self.scratch_len]
    }

    /// Unnormalized forward transform; leaves `X[p][q]` at `buf[q * n + p]`.
    pub fn forward_transposed(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.pass(buf, scratch, &*self.forward);
    }

    /// Unnormalized inverse of a transposed spectrum, result in natural order.
    pub fn inverse_from_transposed(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.pass(buf, scratch, &*self.inverse);
    }

    pub fn forward(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.forward_transposed(buf, scratch);
        transpose_square(buf, self.n);
    }

    /// Unnormalized inverse transform in natural orientation.
    pub fn inverse(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        transpose_square(buf, self.n);
        self.inverse_from_transposed(buf, scratch);
    }

    fn pass(&self, buf: &mut [Complex64], scratch: &mut [Complex64], plan: &dyn Fft<f64>) {
        debug_assert_eq!(buf.len(), self.n * self.n);
        let scratch = &mut scratch[..self.scratch_len];
        plan.process_with_scratch(buf, scratch);
        transpose_square(buf, self.n);
        plan.process_with_scratch(buf, scratch);
    }
}

/// In-place transpose of a row-major `n × n` matrix.
pub fn transpose_square<T: Copy>(buf: &mut [T], n: usize) {
    const BLOCK: usize = 16;
    for ib in (0..n).step_by(BLOCK) {
        for jb in (ib..n).step_by(BLOCK) {
            for i in ib..(ib + BLOCK).min(n) {
                let j0 = if ib == jb { i + 1 } else { jb };
                for j in j0..(jb + BLOCK).min(n) {
                    buf.swap(i * n + j, j * n + i);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_matches_index_swap() {
        for n in [1, 3, 16, 17, 40] {
            let original: Vec<usize> = (0..n * n).collect();
            let mut t = original.clone();
            transpose_square(&mut t, n);
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(t[i * n + j], original[j * n + i]);
                }
            }
        }
    }

    #[test]
    fn shared_plans_are_reused() {
        let a = Fft2::shared(12);
        let b = Fft2::shared(12);
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(a.size(), 12);
    }
}
