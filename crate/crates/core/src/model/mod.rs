//! Diffractive network architecture: phase layers, detector readout, optical
//! skip connections and parallel channel stacks.

mod engine;
mod format;

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;

use crate::codesign::{CodesignLayer, DeviceProfile};
use crate::error::{ensure, Error, Result};
use crate::field::{ComplexField, RealMap};
use crate::optics::SystemConfig;
use crate::rng;

pub use engine::{Gradients, Readout, RunMode, Simulator, Tape};
pub(crate) use format::split_header;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLayer {
    /// Row-major `N × N` phase delays in radians, unconstrained.
    pub phi: Vec<f64>,
    pub trainable: bool,
}

impl PhaseLayer {
    /// Phases drawn independently from `[0, 2π)`.
    pub fn random(pixels: usize, rng: &mut impl Rng) -> Self {
        PhaseLayer {
            phi: (0..pixels).map(|_| rng.gen_range(0.0..TAU)).collect(),
            trainable: true,
        }
    }

    pub fn zeros(pixels: usize) -> Self {
        PhaseLayer {
            phi: vec![0.0; pixels],
            trainable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Phase(PhaseLayer),
    Codesign(CodesignLayer),
    /// Deployed device levels, simulated through the model's device profile.
    Levels(Vec<u16>),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Phase(p) if p.trainable => "phase",
            Layer::Phase(_) => "phase-frozen",
            Layer::Codesign(_) => "codesign",
            Layer::Levels(_) => "levels",
        }
    }

    /// Trainable parameters, if any.
    pub fn params(&self) -> Option<&[f64]> {
        match self {
            Layer::Phase(p) if p.trainable => Some(&p.phi),
            Layer::Codesign(c) => Some(&c.logits),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            Layer::Phase(p) if p.trainable => Some(&mut p.phi),
            Layer::Codesign(c) => Some(&mut c.logits),
            _ => None,
        }
    }

    /// Phase map of the layer as it would be realized (for viewing).
    pub fn phase_map(&self, size: usize, device: Option<&DeviceProfile>) -> RealMap {
        let data = match (self, device) {
            (Layer::Phase(p), _) => p.phi.clone(),
            (Layer::Codesign(c), Some(d)) => crate::codesign::argmax_levels(&c.logits, c.levels)
                .iter()
                .map(|&i| d.levels()[i as usize].phase)
                .collect(),
            (Layer::Levels(idx), Some(d)) => idx.iter().map(|&i| d.levels()[i as usize].phase).collect(),
            _ => vec![0.0; size * size],
        };
        RealMap::new(size, data).expect("layer size validated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorMode {
    Classification,
    Segmentation,
}

/// Square class regions on the detector plane, given by top-left corners
/// (`x` is the column, `y` the row).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSpec {
    pub x_loc: Vec<usize>,
    pub y_loc: Vec<usize>,
    pub det_size: usize,
    pub mode: DetectorMode,
}

impl DetectorSpec {
    /// `classes` regions on a centered grid (2 rows × 5 columns for 10).
    pub fn grid_layout(n: usize, classes: usize, det_size: usize) -> Result<Self> {
        ensure!(classes >= 1, InvalidParameter, "need at least one class");
        ensure!(det_size >= 1, InvalidParameter, "det_size must be >= 1");
        let rows = ((classes as f64 / 2.5).sqrt().round() as usize).clamp(1, classes);
        let cols = classes.div_ceil(rows);
        let pitch = |count: usize| (((0.75 * n as f64) / count as f64) as usize).min(2 * det_size).max(det_size + 1);
        let (px, py) = (pitch(cols), pitch(rows));
        let mut x_loc = Vec::with_capacity(classes);
        let mut y_loc = Vec::with_capacity(classes);
        let span = |count: usize, p: usize| (count - 1) * p + det_size;
        for r in 0..rows {
            let in_row = (classes - r * cols).min(cols);
            let x0 = (n as isize - span(in_row, px) as isize) / 2;
            let y0 = (n as isize - span(rows, py) as isize) / 2;
            ensure!(
                x0 >= 0 && y0 >= 0,
                InvalidParameter,
                "{classes} regions of size {det_size} do not fit a {n}x{n} grid"
            );
            for c in 0..in_row {
                x_loc.push(x0 as usize + c * px);
                y_loc.push(y0 as usize + r * py);
            }
        }
        let spec = DetectorSpec {
            x_loc,
            y_loc,
            det_size,
            mode: DetectorMode::Classification,
        };
        spec.validate(n)?;
        Ok(spec)
    }

    /// Whole-plane readout for image-to-image tasks.
    pub fn segmentation() -> Self {
        DetectorSpec {
            x_loc: Vec::new(),
            y_loc: Vec::new(),
            det_size: 0,
            mode: DetectorMode::Segmentation,
        }
    }

    pub fn classes(&self) -> usize {
        self.x_loc.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mode == DetectorMode::Segmentation {
            return Ok(());
        }
        ensure!(
            self.x_loc.len() == self.y_loc.len(),
            Shape,
            "x_loc has {} entries, y_loc has {}",
            self.x_loc.len(),
            self.y_loc.len()
        );
        ensure!(!self.x_loc.is_empty(), InvalidParameter, "detector needs at least one region");
        ensure!(self.det_size >= 1, InvalidParameter, "det_size must be >= 1");
        let s = self.det_size;
        for (i, (&x, &y)) in self.x_loc.iter().zip(&self.y_loc).enumerate() {
            ensure!(
                x + s <= n && y + s <= n,
                InvalidParameter,
                "detector region {i} at ({x}, {y}) leaves the {n}x{n} grid"
            );
            for (j, (&x2, &y2)) in self.x_loc.iter().zip(&self.y_loc).enumerate().take(i) {
                let apart = x + s <= x2 || x2 + s <= x || y + s <= y2 || y2 + s <= y;
                ensure!(apart, InvalidParameter, "detector regions {j} and {i} overlap");
            }
        }
        Ok(())
    }

    /// Region sums of a row-major intensity map of side `n`.
    pub fn read(&self, map: &[f64], n: usize) -> Vec<f64> {
        let s = self.det_size;
        self.x_loc
            .iter()
            .zip(&self.y_loc)
            .map(|(&x, &y)| (y..y + s).map(|r| map[r * n + x..r * n + x + s].iter().sum::<f64>()).sum())
            .collect()
    }

    /// Adjoint of [`DetectorSpec::read`]: adds `d_scores[c]` to every pixel of region `c`.
    pub fn scatter(&self, d_scores: &[f64], n: usize, out: &mut [f64]) {
        let s = self.det_size;
        for ((&x, &y), &g) in self.x_loc.iter().zip(&self.y_loc).zip(d_scores) {
            for r in y..y + s {
                for v in &mut out[r * n + x..r * n + x + s] {
                    *v += g;
                }
            }
        }
    }
}

/// A complete diffractive network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: SystemConfig,
    pub detector: DetectorSpec,
    /// Amplitude factor applied inside every modulation.
    pub gamma: f64,
    /// One stack of `depth` layers per optical channel.
    pub channels: Vec<Vec<Layer>>,
    /// `(from_gap, to_gap)`: the field entering gap `from` is added to the
    /// field entering gap `to`. Gap 0 is source → first layer, gap `depth`
    /// is last layer → detector.
    pub skips: Vec<(usize, usize)>,
    pub device: Option<DeviceProfile>,
}

impl Model {
    /// Phase-only network with seeded uniform initialization.
    pub fn new(config: SystemConfig, detector: DetectorSpec, gamma: f64, channels: usize, seed: u64) -> Result<Self> {
        let pixels = config.grid.len();
        let mut r = rng::seeded(seed, 0);
        let stacks = (0..channels)
            .map(|_| (0..config.depth).map(|_| Layer::Phase(PhaseLayer::random(pixels, &mut r))).collect())
            .collect();
        let model = Model {
            config,
            detector,
            gamma,
            channels: stacks,
            skips: Vec::new(),
            device: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Hardware-aware network: per-pixel logits over the levels of `device`,
    /// initialized uniformly on `[0, 1)`.
    pub fn new_codesign(
        config: SystemConfig,
        detector: DetectorSpec,
        gamma: f64,
        channels: usize,
        device: DeviceProfile,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        let k = device.len();
        let count = config.grid.len() * k;
        let mut r = rng::seeded(seed, 1);
        let stacks = (0..channels)
            .map(|_| {
                (0..config.depth)
                    .map(|_| {
                        Layer::Codesign(CodesignLayer {
                            logits: (0..count).map(|_| r.gen::<f64>()).collect(),
                            levels: k,
                            tau,
                        })
                    })
                    .collect()
            })
            .collect();
        let model = Model {
            config,
            detector,
            gamma,
            channels: stacks,
            skips: Vec::new(),
            device: Some(device),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_skips(mut self, skips: Vec<(usize, usize)>) -> Result<Self> {
        self.skips = skips;
        self.validate()?;
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.config.grid.size()
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.size();
        self.detector.validate(n)?;
        ensure!(
            self.gamma.is_finite() && self.gamma >= 1.0,
            InvalidParameter,
            "gamma must be >= 1, got {}",
            self.gamma
        );
        ensure!(!self.channels.is_empty(), InvalidParameter, "model needs at least one channel");
        for &(from, to) in &self.skips {
            ensure!(
                from < to && to <= self.depth(),
                InvalidParameter,
                "skip ({from}, {to}) must satisfy from < to <= {}",
                self.depth()
            );
        }
        for (c, stack) in self.channels.iter().enumerate() {
            ensure!(
                stack.len() == self.depth(),
                Shape,
                "channel {c} has {} layers, depth is {}",
                stack.len(),
                self.depth()
            );
            for (l, layer) in stack.iter().enumerate() {
                let ctx = |e: Error| Error::InvalidParameter(format!("channel {c} layer {l}: {e}"));
                match layer {
                    Layer::Phase(p) => {
                        ensure!(p.phi.len() == n * n, Shape, "layer ({c}, {l}) has {} phases", p.phi.len());
                        ensure!(p.phi.iter().all(|v| v.is_finite()), InvalidParameter, "non-finite phase");
                    }
                    Layer::Codesign(cd) => {
                        cd.validate(n * n).map_err(ctx)?;
                        let k = self.device.as_ref().map(|d| d.len());
                        ensure!(k == Some(cd.levels), InvalidParameter, "codesign layer ({c}, {l}) needs a {}-level device", cd.levels);
                    }
                    Layer::Levels(idx) => {
                        ensure!(idx.len() == n * n, Shape, "layer ({c}, {l}) has {} levels", idx.len());
                        let k = self
                            .device
                            .as_ref()
                            .map(|d| d.len())
                            .ok_or_else(|| Error::InvalidParameter("level layers need a device profile".into()))?;
                        ensure!(idx.iter().all(|&i| (i as usize) < k), InvalidParameter, "level index out of range");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        format::save(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        format::load(path.as_ref())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8], origin: &std::path::Path) -> Result<Self> {
        format::from_bytes(bytes, origin)
    }
}

/// `γ·field ⊙ e^{jφ}`.
pub fn modulate(field: &ComplexField, layer: &PhaseLayer, gamma: f64) -> Result<ComplexField> {
    ensure!(
        layer.phi.len() == field.values().len(),
        Shape,
        "layer has {} phases, field has {} pixels",
        layer.phi.len(),
        field.values().len()
    );
    ensure!(gamma.is_finite() && gamma >= 1.0, InvalidParameter, "gamma must be >= 1, got {gamma}");
    let values = field
        .values()
        .iter()
        .zip(&layer.phi)
        .map(|(&u, &p)| u * Complex64::from_polar(gamma, p))
        .collect();
    ComplexField::new(field.grid(), values)
}

/// Summed intensity inside every detector region.
pub fn detect(field: &ComplexField, spec: &DetectorSpec) -> Result<Vec<f64>> {
    spec.validate(field.size())?;
    let map: Vec<f64> = field.values().iter().map(|v| v.norm_sqr()).collect();
    Ok(spec.read(&map, field.size()))
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// `(I − mean) / √(var + ε)` while training; the identity otherwise.
pub fn layernorm_intensity(map: &RealMap, training: bool) -> RealMap {
    if !training {
        return map.clone();
    }
    let mut data = map.as_slice().to_vec();
    normalize_in_place(&mut data);
    RealMap::new(map.size(), data).expect("size preserved")
}

/// Normalizes `data` and returns `σ = √(var + ε)`.
pub(crate) fn normalize_in_place(data: &mut [f64]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = (var + LAYERNORM_EPS).sqrt();
    for v in data.iter_mut() {
        *v = (*v - mean) / sigma;
    }
    sigma
}

/// Index of the largest score, lowest index on ties.
pub fn predict(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("predict needs at least one score".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;
    use std::f64::consts::PI;

    #[test]
    fn modulate_examples() {
        let g = GridSpec::new(2, 1e-5).unwrap();
        let one = ComplexField::from_fn(g, |_, _| Complex64::new(1.0, 0.0));
        let quarter = PhaseLayer { phi: vec![PI / 2.0; 4], trainable: true };
        let out = modulate(&one, &quarter, 1.0).unwrap();
        assert!((out.get(0, 0) - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        let out = modulate(&one, &PhaseLayer::zeros(4), 2.0).unwrap();
        assert_eq!(out.get(1, 1), Complex64::new(2.0, 0.0));
        let tilted = ComplexField::from_fn(g, |_, _| Complex64::from_polar(1.0, PI / 4.0));
        let out = modulate(&tilted, &PhaseLayer { phi: vec![PI / 4.0; 4], trainable: true }, 1.0).unwrap();
        assert!((out.get(0, 1) - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        assert!(modulate(&one, &PhaseLayer::zeros(9), 1.0).is_err());
        assert!(modulate(&one, &PhaseLayer::zeros(4), 0.5).is_err());
    }

    #[test]
    fn detect_examples() {
        let g = GridSpec::new(64, 1e-5).unwrap();
        let spec = DetectorSpec::grid_layout(64, 10, 10).unwrap();
        let unit = ComplexField::from_fn(g, |_, _| Complex64::new(0.6, 0.8));
        for v in detect(&unit, &spec).unwrap() {
            assert!((v - 100.0).abs() < 1e-12);
        }
        assert!(detect(&ComplexField::zeros(g), &spec).unwrap().iter().all(|&v| v == 0.0));
        let (x, y) = (spec.x_loc[3], spec.y_loc[3]);
        let only3 = ComplexField::from_fn(g, |r, c| {
            let inside = (y..y + 10).contains(&r) && (x..x + 10).contains(&c);
            Complex64::new(if inside { 1.0 } else { 0.0 }, 0.0)
        });
        let v = detect(&only3, &spec).unwrap();
        assert!(v.iter().enumerate().all(|(i, &s)| (i == 3) == (s > 0.0)));
    }

    #[test]
    fn default_layout_is_two_by_five() {
        let spec = DetectorSpec::grid_layout(200, 10, 10).unwrap();
        let mut rows = spec.y_loc.clone();
        rows.dedup();
        assert_eq!(rows.len(), 2);
        assert_eq!(spec.x_loc[..5], spec.x_loc[5..]);
        // centered
        let left = spec.x_loc[0];
        let right = 200 - (spec.x_loc[4] + 10);
        assert!(left.abs_diff(right) <= 1);
        for n in [32, 64] {
            assert!(DetectorSpec::grid_layout(n, 10, (n / 6).min(10)).is_ok());
        }
        assert!(DetectorSpec::grid_layout(16, 10, 10).is_err());
        let overlap = DetectorSpec { x_loc: vec![0, 5], y_loc: vec![0, 5], det_size: 10, mode: DetectorMode::Classification };
        assert!(overlap.validate(64).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let flat = RealMap::from_fn(8, |_, _| 3.0);
        assert!(layernorm_intensity(&flat, true).as_slice().iter().all(|&v| v == 0.0));
        let m = RealMap::from_fn(8, |r, c| ((r * 31 + c * 17) % 13) as f64 * 0.7);
        let y = layernorm_intensity(&m, true);
        let n = 64.0;
        let mean = y.sum() / n;
        let var = y.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4);
        assert_eq!(layernorm_intensity(&m, false), m);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(predict(&[0.5; 4]).unwrap(), 0);
        assert_eq!(predict(&[0.0, 0.0, 1.0]).unwrap(), 2);
        assert!(predict(&[]).is_err());
    }

    #[test]
    fn model_validation() {
        let g = GridSpec::new(32, 1e-5).unwrap();
        let cfg = SystemConfig::uniform(532e-9, g, 0.1, 2, crate::optics::Approximation::Fresnel).unwrap();
        let det = DetectorSpec::grid_layout(32, 10, 5).unwrap();
        assert!(Model::new(cfg.clone(), det.clone(), 0.9, 1, 0).is_err());
        let m = Model::new(cfg.clone(), det.clone(), 1.0, 1, 0).unwrap();
        assert!(m.clone().with_skips(vec![(0, 2)]).is_ok());
        assert!(m.clone().with_skips(vec![(2, 1)]).is_err());
        assert!(m.clone().with_skips(vec![(0, 3)]).is_err());
        // seeded initialization on [0, 2π)
        let again = Model::new(cfg, det, 1.0, 1, 0).unwrap();
        assert_eq!(m, again);
        if let Layer::Phase(p) = &m.channels[0][0] {
            assert!(p.phi.iter().all(|&v| (0.0..TAU).contains(&v)));
        }
    }
}
