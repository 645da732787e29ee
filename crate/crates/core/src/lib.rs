//! Differentiable Fourier-optics engine for diffractive optical neural
//! networks: scalar-diffraction propagation, trainable phase layers,
//! detector readout, hardware-aware quantization and design-space
//! exploration.

pub mod bench;
pub mod codesign;
pub mod config;
pub mod dse;
pub mod error;
pub mod fft;
pub mod field;
pub mod io;
pub mod model;
pub mod optics;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use field::{ComplexField, GridSpec, RealMap, Spectrum};
pub use num_complex::Complex64;
