//! Hardware-aware training and deployment export.
//!
//! A device exposes `K` control levels, each with a measured optical response
//! `a_k·e^{jφ_k}`. Codesign layers hold per-pixel logits over those levels and
//! train through a Gumbel-Softmax relaxation; deployment maps every pixel to a
//! single level index.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{ensure, Error, Result};
use crate::model::{Layer, Model};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceLevel {
    pub phase: f64,
    pub amplitude: f64,
}

/// Measured response of a modulator, listed in control-level order.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    name: String,
    levels: Vec<DeviceLevel>,
    phasors: Vec<Complex64>,
}

impl DeviceProfile {
    pub fn new(name: impl Into<String>, levels: Vec<DeviceLevel>) -> Result<Self> {
        let name = name.into();
        ensure!(
            levels.len() >= 2,
            InvalidParameter,
            "device profile needs at least 2 levels, got {}",
            levels.len()
        );
        ensure!(
            levels.len() <= u16::MAX as usize + 1,
            InvalidParameter,
            "device profile has {} levels, at most 65536 are addressable",
            levels.len()
        );
        for (i, l) in levels.iter().enumerate() {
            ensure!(l.phase.is_finite(), InvalidParameter, "level {i}: phase must be finite");
            ensure!(
                l.amplitude.is_finite() && l.amplitude > 0.0,
                InvalidParameter,
                "level {i}: amplitude must be positive"
            );
        }
        ensure!(
            !name.contains(['\n', '=']),
            InvalidParameter,
            "device name may not contain newlines or '='"
        );
        let phasors = levels
            .iter()
            .map(|l| Complex64::from_polar(l.amplitude, l.phase))
            .collect();
        Ok(DeviceProfile { name, levels, phasors })
    }

    /// `K` lossless levels evenly spaced over `[0, 2π)`.
    pub fn uniform(k: usize) -> Result<Self> {
        let levels = (0..k)
            .map(|i| DeviceLevel {
                phase: TAU * i as f64 / k as f64,
                amplitude: 1.0,
            })
            .collect();
        DeviceProfile::new(format!("uniform{k}"), levels)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[DeviceLevel] {
        &self.levels
    }

    /// `a_k·e^{jφ_k}` for every level.
    pub fn phasors(&self) -> &[Complex64] {
        &self.phasors
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses `index, phase, amplitude` lines; `#` starts a comment and a
    /// `# name: <text>` comment names the device.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut name = origin
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "device".into());
        let mut levels = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(n) = comment.trim().strip_prefix("name:") {
                    name = n.trim().to_string();
                }
                continue;
            }
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            let bad = |msg: String| Error::format(origin, format!("line {}: {msg}", lineno + 1));
            if fields.len() != 3 {
                return Err(bad(format!("expected 'index, phase, amplitude', got '{line}'")));
            }
            let index: usize = fields[0]
                .parse()
                .map_err(|_| bad(format!("bad level index '{}'", fields[0])))?;
            if index != levels.len() {
                return Err(bad(format!("level index {index} out of order, expected {}", levels.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number '{s}'")));
            levels.push(DeviceLevel {
                phase: num(fields[1])?,
                amplitude: num(fields[2])?,
            });
        }
        DeviceProfile::new(name, levels).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# name: {}\n# index, phase (rad), amplitude\n", self.name);
        for (i, l) in self.levels.iter().enumerate() {
            let _ = writeln!(out, "{i}, {}, {}", l.phase, l.amplitude);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Per-pixel logits over the levels of a device.
#[derive(Debug, Clone, PartialEq)]
pub struct CodesignLayer {
    /// Pixel-major: logit of level `k` at pixel `i` is `logits[i * levels + k]`.
    pub logits: Vec<f64>,
    pub levels: usize,
    pub tau: f64,
}

impl CodesignLayer {
    pub fn validate(&self, pixels: usize) -> Result<()> {
        ensure!(self.levels >= 2, InvalidParameter, "codesign layer needs K >= 2");
        ensure!(
            self.tau.is_finite() && self.tau > 0.0,
            InvalidParameter,
            "temperature must be positive, got {}",
            self.tau
        );
        ensure!(
            self.logits.len() == pixels * self.levels,
            Shape,
            "expected {} logits, got {}",
            pixels * self.levels,
            self.logits.len()
        );
        ensure!(
            self.logits.iter().all(|v| v.is_finite()),
            InvalidParameter,
            "logits must be finite"
        );
        Ok(())
    }
}

/// Key prefix of the per-pixel Gumbel draws; the draw for `(pixel, level)` is
/// a pure function of the full key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GumbelNoise {
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
    pub layer: u64,
}

impl GumbelNoise {
    pub fn draw(&self, pixel: usize, level: usize) -> f64 {
        rng::gumbel(&[self.seed, self.step, self.sample, self.layer, pixel as u64, level as u64])
    }

    /// Hash state of the per-pixel key prefix, shared by all its levels.
    fn pixel_state(&self, pixel: usize) -> u64 {
        rng::mix(&[self.seed, self.step, self.sample, self.layer, pixel as u64])
    }
}

/// Relaxed level selection for one layer and one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftModulation {
    /// Soft assignment `s` (pixel-major, rows sum to 1).
    pub weights: Vec<f64>,
    /// `Σ_k s_k·a_k·e^{jφ_k}` per pixel; in hard mode the phasor of the
    /// selected level.
    pub values: Vec<Complex64>,
}

fn softmax_into(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-Softmax modulation `Σ_k softmax((l + g)/τ)_k·a_k·e^{jφ_k}` per pixel.
/// `hard` selects the single argmax level instead (the `τ → 0` limit) while
/// still reporting the soft weights for straight-through gradients.
pub fn gumbel_soft_modulation(
    layer: &CodesignLayer,
    profile: &DeviceProfile,
    noise: &GumbelNoise,
    hard: bool,
) -> Result<SoftModulation> {
    ensure!(
        layer.tau.is_finite() && layer.tau > 0.0,
        InvalidParameter,
        "temperature must be positive, got {}",
        layer.tau
    );
    ensure!(
        layer.levels == profile.len(),
        Shape,
        "layer has {} levels, device '{}' has {}",
        layer.levels,
        profile.name(),
        profile.len()
    );
    ensure!(
        layer.logits.len() % layer.levels == 0,
        Shape,
        "logit count {} is not a multiple of K = {}",
        layer.logits.len(),
        layer.levels
    );
    let k = layer.levels;
    let pixels = layer.logits.len() / k;
    let mut weights = vec![0.0; pixels * k];
    let mut values = Vec::with_capacity(pixels);
    let mut perturbed = vec![0.0; k];
    for i in 0..pixels {
        let logits = &layer.logits[i * k..(i + 1) * k];
        let state = noise.pixel_state(i);
        for (j, p) in perturbed.iter_mut().enumerate() {
            *p = logits[j] + rng::gumbel_from(state, &[j as u64]);
        }
        let pick = argmax(&perturbed);
        for p in perturbed.iter_mut() {
            *p /= layer.tau;
        }
        softmax_into(&mut perturbed);
        weights[i * k..(i + 1) * k].copy_from_slice(&perturbed);
        values.push(if hard {
            profile.phasors[pick]
        } else {
            perturbed.iter().zip(&profile.phasors).map(|(&s, &c)| c * s).sum()
        });
    }
    Ok(SoftModulation { weights, values })
}

/// Gradient with respect to the logits given the cotangent `g` of the
/// modulation values (`g = ∂L/∂Re + j·∂L/∂Im`) and the soft weights of the
/// forward pass.
pub fn soft_modulation_backward(
    weights: &[f64],
    profile: &DeviceProfile,
    tau: f64,
    cotangent: &[Complex64],
) -> Vec<f64> {
    let k = profile.len();
    let mut grad = vec![0.0; weights.len()];
    let mut ds = vec![0.0; k];
    for (i, g) in cotangent.iter().enumerate() {
        let s = &weights[i * k..(i + 1) * k];
        let mut dot = 0.0;
        for j in 0..k {
            ds[j] = (g.conj() * profile.phasors[j]).re;
            dot += s[j] * ds[j];
        }
        for j in 0..k {
            grad[i * k + j] = s[j] * (ds[j] - dot) / tau;
        }
    }
    grad
}

/// Circular distance between two phases, in `[0, π]`.
pub fn phase_distance(a: f64, b: f64) -> f64 {
    let x = a - b;
    (x - TAU * (x / TAU).round()).abs().min(PI)
}

/// Distances closer than this count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Nearest device level for every phase; ties resolve to the lower index.
pub fn nearest_levels(phi: &[f64], profile: &DeviceProfile) -> Vec<u16> {
    phi.iter()
        .map(|&p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, l) in profile.levels.iter().enumerate() {
                let d = phase_distance(p, l.phase);
                if d < best_d - TIE_TOLERANCE {
                    best = k;
                    best_d = d;
                }
            }
            best as u16
        })
        .collect()
}

/// Most probable level for every pixel; ties resolve to the lower index.
pub fn argmax_levels(logits: &[f64], levels: usize) -> Vec<u16> {
    logits.chunks(levels).map(|c| argmax(c) as u16).collect()
}

/// Level indices a trained layer deploys to.
pub fn hard_assign(layer: &Layer, profile: &DeviceProfile) -> Result<Vec<u16>> {
    match layer {
        Layer::Phase(p) => Ok(nearest_levels(&p.phi, profile)),
        Layer::Codesign(c) => {
            ensure!(
                c.levels == profile.len(),
                Shape,
                "layer has {} levels, device has {}",
                c.levels,
                profile.len()
            );
            Ok(argmax_levels(&c.logits, c.levels))
        }
        Layer::Levels(idx) => {
            ensure!(
                idx.iter().all(|&i| (i as usize) < profile.len()),
                InvalidParameter,
                "level index out of range for device '{}'",
                profile.name()
            );
            Ok(idx.clone())
        }
    }
}

/// Copy of `model` with every layer replaced by its deployed level indices.
pub fn quantize(model: &Model, profile: &DeviceProfile) -> Result<Model> {
    let mut out = model.clone();
    for stack in &mut out.channels {
        for layer in stack.iter_mut() {
            *layer = Layer::Levels(hard_assign(layer, profile)?);
        }
    }
    out.device = Some(profile.clone());
    out.validate()?;
    Ok(out)
}

/// Per-layer level arrays ready for a physical modulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub device: String,
    pub levels: usize,
    pub size: usize,
    pub channels: usize,
    /// Channel-major, then layer order.
    pub layers: Vec<Vec<u16>>,
}

const DEPLOY_MAGIC: &str = "donn-deployment";

impl Deployment {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{DEPLOY_MAGIC}\ndevice={}\nlevels={}\nsize={}\nchannels={}\nlayers={}\nend\n",
            self.device,
            self.levels,
            self.size,
            self.channels,
            self.layers.len()
        )
        .into_bytes();
        for layer in &self.layers {
            for &v in layer {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(origin, msg.to_string());
        let (header, mut body) = crate::model::split_header(bytes, origin)?;
        let mut lines = header.lines();
        if lines.next() != Some(DEPLOY_MAGIC) {
            return Err(bad("not a deployment file"));
        }
        let mut kv = std::collections::HashMap::new();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(&format!("missing header key '{k}'")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| bad(&format!("header key '{k}' is not an integer")))
        };
        let (levels, size, channels, count) = (num("levels")?, num("size")?, num("channels")?, num("layers")?);
        let per = size
            .checked_mul(size)
            .and_then(|p| p.checked_mul(2))
            .ok_or_else(|| bad("grid size overflows"))?;
        if body.len() != per.saturating_mul(count) {
            return Err(bad("level data length does not match the header"));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (chunk, rest) = body.split_at(per);
            body = rest;
            let idx: Vec<u16> = chunk.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
            if idx.iter().any(|&i| i as usize >= levels) {
                return Err(bad("level index exceeds the device level count"));
            }
            layers.push(idx);
        }
        Ok(Deployment {
            device: get("device")?.clone(),
            levels,
            size,
            channels,
            layers,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Quantizes `model` for `profile` and writes the deployment file.
pub fn to_system(model: &Model, profile: &DeviceProfile, path: impl AsRef<Path>) -> Result<Deployment> {
    let quantized = quantize(model, profile)?;
    let layers = quantized
        .channels
        .iter()
        .flatten()
        .map(|l| match l {
            Layer::Levels(idx) => idx.clone(),
            _ => unreachable!("quantize yields level layers"),
        })
        .collect();
    let deployment = Deployment {
        device: profile.name().to_string(),
        levels: profile.len(),
        size: model.config.grid.size(),
        channels: model.channels.len(),
        layers,
    };
    deployment.write(path)?;
    Ok(deployment)
}

/// Rebuilds a simulatable model from a deployment file, taking the optical
/// layout from `template`.
pub fn from_system(template: &Model, profile: &DeviceProfile, path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let d = Deployment::read(path)?;
    let bad = |msg: String| Error::format(path, msg);
    if d.levels != profile.len() {
        return Err(bad(format!("file has K = {}, device has {}", d.levels, profile.len())));
    }
    if d.size != template.config.grid.size()
        || d.channels != template.channels.len()
        || d.layers.len() != d.channels * template.config.depth
    {
        return Err(bad("deployment does not match the model layout".into()));
    }
    let mut model = template.clone();
    let mut it = d.layers.into_iter();
    for stack in &mut model.channels {
        for layer in stack.iter_mut() {
            *layer = Layer::Levels(it.next().expect("count checked"));
        }
    }
    model.device = Some(profile.clone());
    model.validate()?;
    Ok(model)
}
