//! Complex fields on square grids and the fixed DFT convention.
//!
//! `dft2` is the unnormalized forward transform
//! `X[p,q] = Σ x[m,n]·exp(−j2π(pm+qn)/N)` and `idft2` carries the `1/N²`
//! factor, so `idft2(dft2(x)) = x` and the adjoint of `dft2` under the real
//! inner product `Σ Re·Re + Im·Im` is `N²·idft2`.

use num_complex::Complex64;

use crate::error::{ensure, Error, Result};
use crate::fft::Fft2;

/// Square sampling grid: `size × size` samples spaced `pixel_pitch` meters apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    size: usize,
    pixel_pitch: f64,
}

impl GridSpec {
    pub fn new(size: usize, pixel_pitch: f64) -> Result<Self> {
        ensure!(size >= 2, InvalidParameter, "grid size must be >= 2, got {size}");
        ensure!(
            pixel_pitch.is_finite() && pixel_pitch > 0.0,
            InvalidParameter,
            "pixel pitch must be positive, got {pixel_pitch}"
        );
        Ok(GridSpec { size, pixel_pitch })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn len(&self) -> usize {
        self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Physical side length of the aperture.
    pub fn extent(&self) -> f64 {
        self.size as f64 * self.pixel_pitch
    }

    /// Spatial coordinate of sample index `i`; the grid center is index `N/2`.
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.size / 2) as f64) * self.pixel_pitch
    }

    /// Physical frequency of DFT bin `k` in standard (unshifted) ordering.
    pub fn frequency(&self, k: usize) -> f64 {
        let n = self.size as f64;
        let k = if k < self.size / 2 { k as f64 } else { k as f64 - n };
        k / (n * self.pixel_pitch)
    }

    pub(crate) fn check_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        ensure!(
            self.size == other.size,
            Shape,
            "{what}: grid size {} vs {}",
            self.size,
            other.size
        );
        Ok(())
    }
}

/// Real `N × N` map, row-major (intensities, phase masks, images).
#[derive(Debug, Clone, PartialEq)]
pub struct RealMap {
    size: usize,
    data: Vec<f64>,
}

impl RealMap {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == size * size,
            Shape,
            "expected {} values for a {size}x{size} map, got {}",
            size * size,
            data.len()
        );
        Ok(RealMap { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        RealMap {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                data.push(f(r, c));
            }
        }
        RealMap { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Shared surface of spatial fields and spectra.
pub trait ComplexGrid: Sized {
    fn grid(&self) -> GridSpec;
    fn values(&self) -> &[Complex64];
    fn from_parts(grid: GridSpec, values: Vec<Complex64>) -> Self;
}

macro_rules! complex_grid_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            grid: GridSpec,
            values: Vec<Complex64>,
        }

        impl $name {
            /// Wraps `values` (row-major); rejects wrong lengths and non-finite entries.
            pub fn new(grid: GridSpec, values: Vec<Complex64>) -> Result<Self> {
                ensure!(
                    values.len() == grid.len(),
                    Shape,
                    "expected {} values, got {}",
                    grid.len(),
                    values.len()
                );
                ensure!(
                    values.iter().all(|v| v.re.is_finite() && v.im.is_finite()),
                    InvalidParameter,
                    "non-finite complex value"
                );
                Ok($name { grid, values })
            }

            pub fn zeros(grid: GridSpec) -> Self {
                $name {
                    grid,
                    values: vec![Complex64::new(0.0, 0.0); grid.len()],
                }
            }

            pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
                let n = grid.size();
                let mut values = Vec::with_capacity(n * n);
                for r in 0..n {
                    for c in 0..n {
                        values.push(f(r, c));
                    }
                }
                $name { grid, values }
            }

            pub fn grid(&self) -> GridSpec {
                self.grid
            }

            #[allow(dead_code)]
            pub(crate) fn from_parts_unchecked(grid: GridSpec, values: Vec<Complex64>) -> Self {
                debug_assert_eq!(values.len(), grid.len());
                $name { grid, values }
            }

            pub fn size(&self) -> usize {
                self.grid.size()
            }

            pub fn get(&self, row: usize, col: usize) -> Complex64 {
                self.values[row * self.grid.size() + col]
            }

            pub fn values(&self) -> &[Complex64] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [Complex64] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<Complex64> {
                self.values
            }

            pub fn scale(&self, s: Complex64) -> Self {
                $name {
                    grid: self.grid,
                    values: self.values.iter().map(|v| v * s).collect(),
                }
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
            }
        }

        impl ComplexGrid for $name {
            fn grid(&self) -> GridSpec {
                self.grid
            }
            fn values(&self) -> &[Complex64] {
                &self.values
            }
            fn from_parts(grid: GridSpec, values: Vec<Complex64>) -> Self {
                $name { grid, values }
            }
        }
    };
}

complex_grid_type!(
    /// Spatial complex amplitude `U(x, y)` sampled on a grid.
    ComplexField
);
complex_grid_type!(
    /// Frequency-domain array in standard DFT ordering (no fftshift).
    Spectrum
);

impl ComplexField {
    pub fn amplitude(&self) -> RealMap {
        self.map_real(|v| v.norm())
    }

    pub fn phase(&self) -> RealMap {
        self.map_real(|v| v.im.atan2(v.re))
    }

    pub fn re(&self) -> RealMap {
        self.map_real(|v| v.re)
    }

    pub fn im(&self) -> RealMap {
        self.map_real(|v| v.im)
    }

    fn map_real(&self, f: impl Fn(&Complex64) -> f64) -> RealMap {
        RealMap {
            size: self.grid.size(),
            data: self.values.iter().map(f).collect(),
        }
    }
}

pub fn dft2(field: &ComplexField) -> Spectrum {
    let fft = Fft2::shared(field.size());
    let mut buf = field.values.clone();
    let mut scratch = fft.scratch();
    fft.forward(&mut buf, &mut scratch);
    Spectrum {
        grid: field.grid,
        values: buf,
    }
}

pub fn idft2(spectrum: &Spectrum) -> ComplexField {
    let n = spectrum.size();
    let fft = Fft2::shared(n);
    let mut buf = spectrum.values.clone();
    let mut scratch = fft.scratch();
    fft.inverse(&mut buf, &mut scratch);
    let norm = 1.0 / (n * n) as f64;
    for v in &mut buf {
        *v *= norm;
    }
    ComplexField {
        grid: spectrum.grid,
        values: buf,
    }
}

/// Elementwise complex product.
pub fn hadamard<T: ComplexGrid>(a: &T, b: &T) -> Result<T> {
    a.grid().check_same(&b.grid(), "hadamard")?;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .collect();
    Ok(T::from_parts(a.grid(), values))
}

/// `I = Re² + Im²` per sample.
pub fn intensity(field: &ComplexField) -> RealMap {
    field.map_real(|v| v.norm_sqr())
}

/// Field superposition.
pub fn add(a: &ComplexField, b: &ComplexField) -> Result<ComplexField> {
    a.grid.check_same(&b.grid, "add")?;
    if a.grid.pixel_pitch() != b.grid.pixel_pitch() {
        return Err(Error::Shape(format!(
            "add: pixel pitch {} vs {}",
            a.grid.pixel_pitch(),
            b.grid.pixel_pitch()
        )));
    }
    Ok(ComplexField {
        grid: a.grid,
        values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
    })
}

/// Real inner product `Σ Re_a·Re_b + Im_a·Im_b`.
pub fn real_inner(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}
