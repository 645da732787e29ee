//! Laser sources and free-space propagation.
//!
//! Rayleigh–Sommerfeld and Fresnel propagation sample the spatial impulse
//! response `h` on the grid (weighted by the pixel area), roll its center to
//! index `(0, 0)` and transform it once; propagation is then a circular
//! convolution `idft2(dft2(u) ⊙ H)`. Fraunhofer propagation is a single
//! scaled transform with its own output coordinates and is not expressible as
//! a transfer function.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{ensure, Error, Result};
use crate::fft::Fft2;
use crate::field::{ComplexField, GridSpec, RealMap, Spectrum};

const J: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Approximation {
    RayleighSommerfeld,
    Fresnel,
    Fraunhofer,
}

impl Approximation {
    pub fn name(&self) -> &'static str {
        match self {
            Approximation::RayleighSommerfeld => "sommerfeld",
            Approximation::Fresnel => "fresnel",
            Approximation::Fraunhofer => "fraunhofer",
        }
    }
}

impl fmt::Display for Approximation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Approximation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sommerfeld" | "rayleigh-sommerfeld" | "rayleighsommerfeld" | "rs" => {
                Ok(Approximation::RayleighSommerfeld)
            }
            "fresnel" => Ok(Approximation::Fresnel),
            "fraunhofer" => Ok(Approximation::Fraunhofer),
            other => Err(Error::InvalidParameter(format!(
                "unknown approximation '{other}' (expected sommerfeld, fresnel or fraunhofer)"
            ))),
        }
    }
}

/// Physical layout of a diffractive system: one distance per gap
/// (source→L1, L1→L2, …, L_last→detector).
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub wavelength: f64,
    pub grid: GridSpec,
    pub distances: Vec<f64>,
    pub approx: Approximation,
    pub depth: usize,
    /// Zero-pad to 2N for linear instead of circular convolution.
    pub padded: bool,
}

impl SystemConfig {
    /// Uniform spacing `distance` between every pair of planes.
    pub fn uniform(
        wavelength: f64,
        grid: GridSpec,
        distance: f64,
        depth: usize,
        approx: Approximation,
    ) -> Result<Self> {
        let cfg = SystemConfig {
            wavelength,
            grid,
            distances: vec![distance; depth + 1],
            approx,
            depth,
            padded: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.wavelength.is_finite() && self.wavelength > 0.0,
            InvalidParameter,
            "wavelength must be positive, got {}",
            self.wavelength
        );
        ensure!(self.depth >= 1, InvalidParameter, "depth must be >= 1");
        ensure!(
            self.distances.len() == self.depth + 1,
            InvalidParameter,
            "expected {} distances for depth {}, got {}",
            self.depth + 1,
            self.depth,
            self.distances.len()
        );
        for &z in &self.distances {
            ensure!(
                z.is_finite() && z > 0.0,
                InvalidParameter,
                "propagation distance must be positive, got {z}"
            );
        }
        Ok(())
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Regime checks for every gap; violations are reported, never fatal.
    pub fn validity_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (gap, &z) in self.distances.iter().enumerate() {
            if let Some(w) = validity_warning(self.approx, z, self.wavelength, &self.grid) {
                out.push(format!("gap {gap}: {w}"));
            }
        }
        out
    }
}

/// Returns a message when `z` violates the regime condition of `approx`.
pub fn validity_warning(approx: Approximation, z: f64, wavelength: f64, grid: &GridSpec) -> Option<String> {
    let half = grid.extent() / 2.0;
    // largest transverse separation / aperture radius squared on the grid
    let rho2 = 2.0 * half * half;
    let k = 2.0 * PI / wavelength;
    match approx {
        Approximation::Fresnel => {
            let bound = PI / (4.0 * wavelength) * rho2 * rho2;
            (z.powi(3) <= bound).then(|| {
                format!("Fresnel condition z^3 >> {bound:.3e} m^3 violated (z^3 = {:.3e})", z.powi(3))
            })
        }
        Approximation::Fraunhofer => {
            let bound = k * rho2 / 2.0;
            (z <= bound).then(|| format!("Fraunhofer condition z >> {bound:.3e} m violated (z = {z:.3e})"))
        }
        Approximation::RayleighSommerfeld => {
            (z <= 10.0 * wavelength).then(|| format!("r01 >> lambda not satisfied (z = {z:.3e})"))
        }
    }
}

fn check_physics(z: f64, wavelength: f64) -> Result<()> {
    ensure!(
        z.is_finite() && z > 0.0,
        InvalidParameter,
        "propagation distance must be positive, got {z}"
    );
    ensure!(
        wavelength.is_finite() && wavelength > 0.0,
        InvalidParameter,
        "wavelength must be positive, got {wavelength}"
    );
    Ok(())
}

/// Kernel value at transverse offset `(x, y)`, already weighted by `d²`.
fn kernel_value(approx: Approximation, x: f64, y: f64, z: f64, wavelength: f64, area: f64) -> Complex64 {
    let k = 2.0 * PI / wavelength;
    let rho2 = x * x + y * y;
    let carrier = Complex64::from_polar(1.0, k * z);
    match approx {
        Approximation::RayleighSommerfeld => {
            let r = (z * z + rho2).sqrt();
            // k·r split as k·z + k·(r − z) keeps the small path difference exact
            let extra = rho2 / (r + z);
            carrier * Complex64::from_polar(1.0, k * extra) * (z / (J * wavelength)) / (r * r) * area
        }
        Approximation::Fresnel => {
            carrier / (J * wavelength * z) * Complex64::from_polar(1.0, k * rho2 / (2.0 * z)) * area
        }
        Approximation::Fraunhofer => unreachable!("Fraunhofer has no convolution kernel"),
    }
}

fn reject_fraunhofer(approx: Approximation) -> Result<()> {
    if approx == Approximation::Fraunhofer {
        return Err(Error::Unsupported(
            "Fraunhofer propagation is not a convolution; use fraunhofer_propagate".into(),
        ));
    }
    Ok(())
}

/// Spatial impulse response sampled on the centered grid (center at index `N/2`).
pub fn sample_kernel(approx: Approximation, z: f64, wavelength: f64, grid: &GridSpec) -> Result<ComplexField> {
    reject_fraunhofer(approx)?;
    check_physics(z, wavelength)?;
    let area = grid.pixel_pitch() * grid.pixel_pitch();
    Ok(ComplexField::from_fn(*grid, |r, c| {
        kernel_value(approx, grid.coord(c), grid.coord(r), z, wavelength, area)
    }))
}

/// Frequency-domain propagation kernel for one distance.
#[derive(Debug, Clone)]
pub struct TransferFunction {
    approx: Approximation,
    wavelength: f64,
    distance: f64,
    field_grid: GridSpec,
    padded: bool,
    fft: Arc<Fft2>,
    values: Vec<Complex64>,
    // H transposed and divided by M², consumed by the fused propagation path
    scaled_transposed: Vec<Complex64>,
}

/// `H = dft2(ifftshift(h))` for circular propagation on `grid`.
pub fn build_transfer(approx: Approximation, z: f64, wavelength: f64, grid: &GridSpec) -> Result<TransferFunction> {
    TransferFunction::build(approx, z, wavelength, grid, false)
}

/// Transfer function on a `2N` grid for zero-padded (linear) propagation.
pub fn build_transfer_padded(approx: Approximation, z: f64, wavelength: f64, grid: &GridSpec) -> Result<TransferFunction> {
    TransferFunction::build(approx, z, wavelength, grid, true)
}

impl TransferFunction {
    fn build(approx: Approximation, z: f64, wavelength: f64, grid: &GridSpec, padded: bool) -> Result<Self> {
        reject_fraunhofer(approx)?;
        check_physics(z, wavelength)?;
        let m = if padded { 2 * grid.size() } else { grid.size() };
        let d = grid.pixel_pitch();
        let area = d * d;
        let half = m / 2;
        // rolled kernel: index i holds the sample at offset ((i + M/2) mod M) − M/2
        let offset = |i: usize| (((i + half) % m) as f64 - half as f64) * d;
        let mut values = Vec::with_capacity(m * m);
        for r in 0..m {
            let y = offset(r);
            for c in 0..m {
                values.push(kernel_value(approx, offset(c), y, z, wavelength, area));
            }
        }
        let fft = Fft2::shared(m);
        let mut scratch = fft.scratch();
        fft.forward(&mut values, &mut scratch);
        let norm = 1.0 / (m * m) as f64;
        let mut scaled_transposed = vec![Complex64::new(0.0, 0.0); m * m];
        for r in 0..m {
            for c in 0..m {
                scaled_transposed[c * m + r] = values[r * m + c] * norm;
            }
        }
        Ok(TransferFunction {
            approx,
            wavelength,
            distance: z,
            field_grid: *grid,
            padded,
            fft,
            values,
            scaled_transposed,
        })
    }

    pub fn approx(&self) -> Approximation {
        self.approx
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// Grid of the fields this transfer function propagates.
    pub fn field_grid(&self) -> GridSpec {
        self.field_grid
    }

    pub fn is_padded(&self) -> bool {
        self.padded
    }

    /// Side length of the transform grid (`N`, or `2N` when padded).
    pub fn transform_size(&self) -> usize {
        self.fft.size()
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn spectrum(&self) -> Spectrum {
        let g = GridSpec::new(self.transform_size(), self.field_grid.pixel_pitch())
            .expect("transform grid is valid");
        Spectrum::new(g, self.values.clone()).expect("transfer values are finite")
    }

    /// Mean-field gain `H(0, 0)`.
    pub fn dc_gain(&self) -> Complex64 {
        self.values[0]
    }
}

/// Reusable scratch memory for the propagation engine.
#[derive(Debug, Default)]
pub struct Workspace {
    scratch: Vec<Complex64>,
    buffer: Vec<Complex64>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn scratch_for(&mut self, fft: &Fft2) -> &mut [Complex64] {
        let need = fft.scratch().len();
        if self.scratch.len() < need {
            self.scratch.resize(need, Complex64::new(0.0, 0.0));
        }
        &mut self.scratch[..need]
    }
}

/// One free-space gap as a linear operator on `N × N` buffers, with its adjoint
/// under the real inner product.
#[derive(Debug, Clone)]
pub enum Propagator {
    Convolution(Arc<TransferFunction>),
    FarField(Arc<FarField>),
}

impl Propagator {
    pub fn size(&self) -> usize {
        match self {
            Propagator::Convolution(tf) => tf.field_grid.size(),
            Propagator::FarField(ff) => ff.grid.size(),
        }
    }

    pub fn apply(&self, field: &mut [Complex64], ws: &mut Workspace) {
        match self {
            Propagator::Convolution(tf) => convolve(tf, field, ws, false),
            Propagator::FarField(ff) => ff.apply(field, ws),
        }
    }

    pub fn adjoint(&self, cotangent: &mut [Complex64], ws: &mut Workspace) {
        match self {
            Propagator::Convolution(tf) => convolve(tf, cotangent, ws, true),
            Propagator::FarField(ff) => ff.adjoint(cotangent, ws),
        }
    }
}

fn multiply(buf: &mut [Complex64], h: &[Complex64], conjugate: bool) {
    if conjugate {
        for (v, h) in buf.iter_mut().zip(h) {
            *v *= h.conj();
        }
    } else {
        for (v, h) in buf.iter_mut().zip(h) {
            *v *= h;
        }
    }
}

fn convolve(tf: &TransferFunction, field: &mut [Complex64], ws: &mut Workspace, conjugate: bool) {
    let n = tf.field_grid.size();
    debug_assert_eq!(field.len(), n * n);
    if !tf.padded {
        let scratch = ws.scratch_for(&tf.fft);
        tf.fft.forward_transposed(field, scratch);
        multiply(field, &tf.scaled_transposed, conjugate);
        tf.fft.inverse_from_transposed(field, scratch);
        return;
    }
    let m = 2 * n;
    let off = n / 2;
    let mut buf = std::mem::take(&mut ws.buffer);
    buf.clear();
    buf.resize(m * m, Complex64::new(0.0, 0.0));
    for r in 0..n {
        buf[(r + off) * m + off..(r + off) * m + off + n].copy_from_slice(&field[r * n..(r + 1) * n]);
    }
    let scratch = ws.scratch_for(&tf.fft);
    tf.fft.forward_transposed(&mut buf, scratch);
    multiply(&mut buf, &tf.scaled_transposed, conjugate);
    tf.fft.inverse_from_transposed(&mut buf, scratch);
    for r in 0..n {
        field[r * n..(r + 1) * n].copy_from_slice(&buf[(r + off) * m + off..(r + off) * m + off + n]);
    }
    ws.buffer = buf;
}

/// `idft2(dft2(field) ⊙ H)`; with a padded `H` the field is embedded in a
/// `2N` grid and the center is cropped back out.
pub fn propagate(field: &ComplexField, tf: &TransferFunction) -> Result<ComplexField> {
    field.grid().check_same(&tf.field_grid, "propagate")?;
    let mut values = field.values().to_vec();
    convolve(tf, &mut values, &mut Workspace::new(), false);
    Ok(ComplexField::from_parts_unchecked(field.grid(), values))
}

/// Single-transform far-field operator with output pitch `λz/(N·d)`.
#[derive(Debug, Clone)]
pub struct FarField {
    grid: GridSpec,
    output_grid: GridSpec,
    fft: Arc<Fft2>,
    // output-plane factor e^{jkz}·e^{jk(x²+y²)/2z}/(jλz)·d², times the
    // phase ramp that re-centers the input coordinates
    prefactor: Vec<Complex64>,
}

impl FarField {
    pub fn new(z: f64, wavelength: f64, grid: &GridSpec) -> Result<Self> {
        check_physics(z, wavelength)?;
        if let Some(w) = validity_warning(Approximation::Fraunhofer, z, wavelength, grid) {
            log::warn!("{w}");
        }
        let n = grid.size();
        let c = n / 2;
        let d = grid.pixel_pitch();
        let k = 2.0 * PI / wavelength;
        let out_pitch = wavelength * z / (n as f64 * d);
        let output_grid = GridSpec::new(n, out_pitch)?;
        let scale = Complex64::from_polar(1.0, k * z) / (J * wavelength * z) * (d * d);
        let mut prefactor = Vec::with_capacity(n * n);
        for p in 0..n {
            let y = output_grid.coord(p);
            for q in 0..n {
                let x = output_grid.coord(q);
                let shifted = (p as f64 - c as f64) + (q as f64 - c as f64);
                let ramp = Complex64::from_polar(1.0, 2.0 * PI * shifted * c as f64 / n as f64);
                prefactor.push(scale * Complex64::from_polar(1.0, k * (x * x + y * y) / (2.0 * z)) * ramp);
            }
        }
        Ok(FarField {
            grid: *grid,
            output_grid,
            fft: Fft2::shared(n),
            prefactor,
        })
    }

    pub fn output_grid(&self) -> GridSpec {
        self.output_grid
    }

    fn source_index(&self, p: usize) -> usize {
        let n = self.grid.size();
        (p + n - n / 2) % n
    }

    fn apply(&self, field: &mut [Complex64], ws: &mut Workspace) {
        let n = self.grid.size();
        let scratch = ws.scratch_for(&self.fft);
        self.fft.forward(field, scratch);
        let mut out = std::mem::take(&mut ws.buffer);
        out.clear();
        out.resize(n * n, Complex64::new(0.0, 0.0));
        for p in 0..n {
            let sp = self.source_index(p);
            for q in 0..n {
                out[p * n + q] = self.prefactor[p * n + q] * field[sp * n + self.source_index(q)];
            }
        }
        field.copy_from_slice(&out);
        ws.buffer = out;
    }

    fn adjoint(&self, cot: &mut [Complex64], ws: &mut Workspace) {
        let n = self.grid.size();
        let mut spec = std::mem::take(&mut ws.buffer);
        spec.clear();
        spec.resize(n * n, Complex64::new(0.0, 0.0));
        for p in 0..n {
            let sp = self.source_index(p);
            for q in 0..n {
                spec[sp * n + self.source_index(q)] = self.prefactor[p * n + q].conj() * cot[p * n + q];
            }
        }
        cot.copy_from_slice(&spec);
        ws.buffer = spec;
        // adjoint of the unnormalized forward DFT is the unnormalized inverse
        let scratch = ws.scratch_for(&self.fft);
        self.fft.inverse(cot, scratch);
    }
}

/// Far-field pattern of `field` at distance `z`, sampled on
/// [`FarField::output_grid`].
pub fn fraunhofer_propagate(field: &ComplexField, z: f64, wavelength: f64, grid: &GridSpec) -> Result<ComplexField> {
    field.grid().check_same(grid, "fraunhofer_propagate")?;
    let ff = FarField::new(z, wavelength, grid)?;
    let mut values = field.values().to_vec();
    ff.apply(&mut values, &mut Workspace::new());
    Ok(ComplexField::from_parts_unchecked(ff.output_grid, values))
}

/// Memoizes transfer functions by their full provenance.
#[derive(Debug, Default)]
pub struct TransferCache {
    entries: HashMap<(Approximation, u64, u64, usize, u64, bool), Arc<TransferFunction>>,
}

impl TransferCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &mut self,
        approx: Approximation,
        z: f64,
        wavelength: f64,
        grid: &GridSpec,
        padded: bool,
    ) -> Result<Arc<TransferFunction>> {
        let key = (
            approx,
            z.to_bits(),
            wavelength.to_bits(),
            grid.size(),
            grid.pixel_pitch().to_bits(),
            padded,
        );
        if let Some(tf) = self.entries.get(&key) {
            return Ok(tf.clone());
        }
        let tf = Arc::new(TransferFunction::build(approx, z, wavelength, grid, padded)?);
        let gain = tf.dc_gain().norm();
        if (gain - 1.0).abs() > 0.02 {
            log::debug!("transfer function at z={z} has |H(DC)| = {gain:.4}");
        }
        self.entries.insert(key, tf.clone());
        Ok(tf)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Operator for one gap of `config`.
    pub fn propagator(&mut self, config: &SystemConfig, z: f64) -> Result<Propagator> {
        Ok(match config.approx {
            Approximation::Fraunhofer => Propagator::FarField(Arc::new(FarField::new(z, config.wavelength, &config.grid)?)),
            approx => Propagator::Convolution(self.get(approx, z, config.wavelength, &config.grid, config.padded)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aperture {
    /// Circular opening of the given radius.
    Ring { radius: f64 },
    /// Square opening `|x|, |y| <= half_width`.
    Rect { half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BeamKind {
    Gaussian { waist: f64 },
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserProfile {
    pub kind: BeamKind,
    pub aperture: Option<Aperture>,
}

impl LaserProfile {
    pub fn gaussian(waist: f64) -> Self {
        LaserProfile {
            kind: BeamKind::Gaussian { waist },
            aperture: None,
        }
    }

    pub fn uniform() -> Self {
        LaserProfile {
            kind: BeamKind::Uniform,
            aperture: None,
        }
    }

    pub fn with_aperture(mut self, aperture: Aperture) -> Self {
        self.aperture = Some(aperture);
        self
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if let BeamKind::Gaussian { waist } = self.kind {
            ensure!(waist.is_finite() && waist > 0.0, InvalidParameter, "beam waist must be positive");
        }
        let half = grid.extent() / 2.0;
        match self.aperture {
            Some(Aperture::Ring { radius: r }) | Some(Aperture::Rect { half_width: r }) => {
                ensure!(
                    r > 0.0 && r <= half,
                    InvalidParameter,
                    "aperture size {r} must lie in (0, {half}]"
                );
            }
            None => {}
        }
        Ok(())
    }
}

/// Zero-phase source field for `profile`.
pub fn make_source(profile: &LaserProfile, grid: &GridSpec) -> Result<ComplexField> {
    profile.validate(grid)?;
    Ok(ComplexField::from_fn(*grid, |r, c| {
        let (x, y) = (grid.coord(c), grid.coord(r));
        let mut a = match profile.kind {
            BeamKind::Gaussian { waist } => (-(x * x + y * y) / (waist * waist)).exp(),
            BeamKind::Uniform => 1.0,
        };
        let open = match profile.aperture {
            Some(Aperture::Ring { radius }) => (x * x + y * y).sqrt() <= radius,
            Some(Aperture::Rect { half_width }) => x.abs() <= half_width && y.abs() <= half_width,
            None => true,
        };
        if !open {
            a = 0.0;
        }
        Complex64::new(a, 0.0)
    }))
}

/// Amplitude-encodes an image: `A = pixel`, `θ = 0`.
pub fn encode_input(image: &RealMap, grid: &GridSpec) -> Result<ComplexField> {
    ensure!(
        image.size() == grid.size(),
        Shape,
        "image is {0}x{0}, grid is {1}x{1}",
        image.size(),
        grid.size()
    );
    if let Some(bad) = image.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidParameter(format!(
            "pixel value {bad} outside [0, 1]; normalize the image first"
        )));
    }
    Ok(ComplexField::from_parts_unchecked(
        *grid,
        image.as_slice().iter().map(|&a| Complex64::new(a, 0.0)).collect(),
    ))
}
