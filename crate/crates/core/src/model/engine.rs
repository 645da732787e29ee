//! Forward simulation with an optional tape, and the reverse sweep over it.
//!
//! Complex intermediates are treated as `(Re, Im)` pairs: a cotangent is
//! stored as `g = ∂L/∂Re + j·∂L/∂Im`, so for a complex-linear map `y = A·x`
//! the incoming cotangent is `Aᴴ·g`.

use num_complex::Complex64;

use super::{normalize_in_place, DetectorMode, Layer, Model};
use crate::codesign::{gumbel_soft_modulation, soft_modulation_backward, GumbelNoise, SoftModulation};
use crate::error::{ensure, Error, Result};
use crate::field::{ComplexField, RealMap};
use crate::optics::{Propagator, TransferCache, Workspace};

/// How a simulator treats training-only behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunMode {
    /// Resample codesign layers and apply layer normalization (if enabled).
    pub training: bool,
    pub layernorm: bool,
    /// Hard Gumbel samples with straight-through gradients.
    pub hard: bool,
    pub seed: u64,
    pub step: u64,
}

impl RunMode {
    pub fn eval() -> Self {
        RunMode::default()
    }

    pub fn train(seed: u64, step: u64, layernorm: bool) -> Self {
        RunMode {
            training: true,
            layernorm,
            hard: false,
            seed,
            step,
        }
    }
}

/// Detector-plane result of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    /// Intensity map summed over channels (layer-normalized when training
    /// with layer normalization).
    pub map: Vec<f64>,
    /// Region sums; empty for segmentation detectors.
    pub scores: Vec<f64>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    sample: Option<u64>,
    // [channel][layer]: field arriving at the layer, before modulation
    incoming: Vec<Vec<Vec<Complex64>>>,
    // [channel]: field at the detector plane
    finals: Vec<Vec<Complex64>>,
    // [channel][layer]: per-sample relaxed modulation of codesign layers
    soft: Vec<Vec<Option<SoftModulation>>>,
    // normalized map and σ
    norm: Option<(Vec<f64>, f64)>,
}

impl Tape {
    pub fn is_complete(&self) -> bool {
        self.sample.is_some()
    }

    /// Field arriving at layer `layer` of channel `channel`.
    pub fn layer_input(&self, channel: usize, layer: usize) -> Option<&[Complex64]> {
        self.incoming.get(channel)?.get(layer).map(|v| v.as_slice())
    }

    pub fn detector_field(&self, channel: usize) -> Option<&[Complex64]> {
        self.finals.get(channel).map(|v| v.as_slice())
    }
}

/// `∂L/∂θ` for every layer, shaped like the layer parameters (empty for
/// layers without trainable parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            layers: model
                .channels
                .iter()
                .map(|stack| stack.iter().map(|l| vec![0.0; l.params().map_or(0, |p| p.len())]).collect())
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().flatten().zip(other.layers.iter().flatten()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.layers.iter_mut().flatten().flatten() {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flatten().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A model bound to its propagation operators and a run mode.
pub struct Simulator<'m> {
    model: &'m Model,
    mode: RunMode,
    gaps: Vec<Propagator>,
    // γ·(per-pixel modulation) of every layer that is fixed for the run
    masks: Vec<Vec<Option<Vec<Complex64>>>>,
}

impl<'m> Simulator<'m> {
    pub fn new(model: &'m Model, cache: &mut TransferCache, mode: RunMode) -> Result<Self> {
        model.validate()?;
        let gaps = model
            .config
            .distances
            .iter()
            .map(|&z| cache.propagator(&model.config, z))
            .collect::<Result<Vec<_>>>()?;
        let gamma = model.gamma;
        let device = model.device.as_ref();
        let masks = model
            .channels
            .iter()
            .map(|stack| {
                stack
                    .iter()
                    .map(|layer| match layer {
                        Layer::Phase(p) => Some(p.phi.iter().map(|&v| Complex64::from_polar(gamma, v)).collect()),
                        Layer::Levels(idx) => {
                            let ph = device.expect("validated").phasors();
                            Some(idx.iter().map(|&i| ph[i as usize] * gamma).collect())
                        }
                        Layer::Codesign(_) if mode.training => None,
                        Layer::Codesign(c) => {
                            let ph = device.expect("validated").phasors();
                            Some(
                                crate::codesign::argmax_levels(&c.logits, c.levels)
                                    .iter()
                                    .map(|&i| ph[i as usize] * gamma)
                                    .collect(),
                            )
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Simulator { model, mode, gaps, masks })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn mode(&self) -> RunMode {
        self.mode
    }

    fn normalizing(&self) -> bool {
        self.mode.training && self.mode.layernorm
    }

    fn noise(&self, sample: u64, channel: usize, layer: usize) -> GumbelNoise {
        GumbelNoise {
            seed: self.mode.seed,
            step: self.mode.step,
            sample,
            layer: (channel * self.model.depth() + layer) as u64,
        }
    }

    /// Intensity at every plane of one channel: the input, the field arriving
    /// at each layer, and the detector plane (`depth + 2` maps).
    pub fn plane_intensities(&self, planes: &[ComplexField], channel: usize, ws: &mut Workspace) -> Result<Vec<RealMap>> {
        let model = self.model;
        ensure!(channel < model.channels.len(), Shape, "model has {} channels", model.channels.len());
        let mut tape = Tape::default();
        self.forward(planes, 0, Some(&mut tape), ws)?;
        let n = model.size();
        let to_map = |v: &[Complex64]| RealMap::new(n, v.iter().map(|c| c.norm_sqr()).collect());
        let input = &planes[channel.min(planes.len() - 1)];
        let mut out = vec![to_map(input.values())?];
        for layer in 0..model.depth() {
            out.push(to_map(tape.layer_input(channel, layer).expect("recorded"))?);
        }
        out.push(to_map(tape.detector_field(channel).expect("recorded"))?);
        Ok(out)
    }

    /// Runs one sample. `planes` holds one encoded input per channel (a
    /// single plane is shared by every channel). `sample` keys the Gumbel
    /// draws of codesign layers.
    pub fn forward(
        &self,
        planes: &[ComplexField],
        sample: u64,
        mut tape: Option<&mut Tape>,
        ws: &mut Workspace,
    ) -> Result<Readout> {
        let model = self.model;
        let n = model.size();
        let depth = model.depth();
        ensure!(!planes.is_empty(), Empty, "forward needs at least one input plane");
        for p in planes {
            p.grid().check_same(&model.config.grid, "forward input")?;
        }
        if let Some(t) = tape.as_deref_mut() {
            *t = Tape {
                sample: None,
                incoming: Vec::with_capacity(model.channels.len()),
                finals: Vec::with_capacity(model.channels.len()),
                soft: Vec::with_capacity(model.channels.len()),
                norm: None,
            };
        }
        let mut map = vec![0.0; n * n];
        let mut saved: Vec<Option<Vec<Complex64>>> = vec![None; model.skips.len()];
        for (ch, stack) in model.channels.iter().enumerate() {
            let mut u = planes[ch.min(planes.len() - 1)].values().to_vec();
            let mut incoming = Vec::new();
            let mut soft = Vec::new();
            for gap in 0..=depth {
                for (s, &(_, to)) in model.skips.iter().enumerate() {
                    if to == gap {
                        let add = saved[s].take().expect("skip source precedes target");
                        for (a, b) in u.iter_mut().zip(&add) {
                            *a += b;
                        }
                    }
                }
                for (s, &(from, _)) in model.skips.iter().enumerate() {
                    if from == gap {
                        saved[s] = Some(u.clone());
                    }
                }
                self.gaps[gap].apply(&mut u, ws);
                if gap == depth {
                    break;
                }
                if tape.is_some() {
                    incoming.push(u.clone());
                }
                match &self.masks[ch][gap] {
                    Some(mask) => {
                        for (a, m) in u.iter_mut().zip(mask) {
                            *a *= m;
                        }
                        soft.push(None);
                    }
                    None => {
                        let Layer::Codesign(c) = &stack[gap] else { unreachable!() };
                        let device = model.device.as_ref().expect("validated");
                        let sm = gumbel_soft_modulation(c, device, &self.noise(sample, ch, gap), self.mode.hard)?;
                        for (a, m) in u.iter_mut().zip(&sm.values) {
                            *a *= m * model.gamma;
                        }
                        soft.push(tape.is_some().then_some(sm));
                    }
                }
            }
            for (m, v) in map.iter_mut().zip(&u) {
                *m += v.norm_sqr();
            }
            if let Some(t) = tape.as_deref_mut() {
                t.incoming.push(incoming);
                t.soft.push(soft);
                t.finals.push(u);
            }
        }
        if self.normalizing() {
            let sigma = normalize_in_place(&mut map);
            if let Some(t) = tape.as_deref_mut() {
                t.norm = Some((map.clone(), sigma));
            }
        }
        if let Some(t) = tape {
            t.sample = Some(sample);
        }
        let scores = match model.detector.mode {
            DetectorMode::Classification => model.detector.read(&map, n),
            DetectorMode::Segmentation => Vec::new(),
        };
        Ok(Readout { map, scores })
    }

    /// Accumulates into `grads` the parameter gradient given the cotangent of
    /// the region scores.
    pub fn backward_scores(&self, tape: &Tape, d_scores: &[f64], grads: &mut Gradients, ws: &mut Workspace) -> Result<()> {
        let n = self.model.size();
        ensure!(
            d_scores.len() == self.model.detector.classes(),
            Shape,
            "expected {} score cotangents, got {}",
            self.model.detector.classes(),
            d_scores.len()
        );
        let mut d_map = vec![0.0; n * n];
        self.model.detector.scatter(d_scores, n, &mut d_map);
        self.backward(tape, &d_map, grads, ws)
    }

    /// Accumulates into `grads` the parameter gradient given the cotangent of
    /// the readout map.
    pub fn backward(&self, tape: &Tape, d_map: &[f64], grads: &mut Gradients, ws: &mut Workspace) -> Result<()> {
        let model = self.model;
        let n = model.size();
        let depth = model.depth();
        if !tape.is_complete() {
            return Err(Error::Tape("forward pass was not recorded".into()));
        }
        ensure!(d_map.len() == n * n, Shape, "map cotangent has {} entries, expected {}", d_map.len(), n * n);
        if tape.finals.len() != model.channels.len() {
            return Err(Error::Tape("tape does not match the model's channel count".into()));
        }
        let d_raw = match (&tape.norm, self.normalizing()) {
            (Some((y, sigma)), true) => {
                let len = y.len() as f64;
                let mean_d = d_map.iter().sum::<f64>() / len;
                let mean_dy = d_map.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / len;
                d_map
                    .iter()
                    .zip(y)
                    .map(|(&d, &yv)| (d - mean_d - yv * mean_dy) / sigma)
                    .collect()
            }
            (None, false) => d_map.to_vec(),
            _ => return Err(Error::Tape("layer normalization statistics missing".into())),
        };
        for (ch, stack) in model.channels.iter().enumerate().rev() {
            let incoming = &tape.incoming[ch];
            if incoming.len() != depth {
                return Err(Error::Tape(format!("channel {ch} recorded {} layers", incoming.len())));
            }
            let mut g: Vec<Complex64> = tape.finals[ch].iter().zip(&d_raw).map(|(u, &d)| u * (2.0 * d)).collect();
            let mut pending: Vec<Option<Vec<Complex64>>> = vec![None; model.skips.len()];
            for gap in (0..=depth).rev() {
                self.gaps[gap].adjoint(&mut g, ws);
                for (s, &(from, _)) in model.skips.iter().enumerate() {
                    if from == gap {
                        let add = pending[s].take().ok_or_else(|| Error::Tape("skip cotangent missing".into()))?;
                        for (a, b) in g.iter_mut().zip(&add) {
                            *a += b;
                        }
                    }
                }
                for (s, &(_, to)) in model.skips.iter().enumerate() {
                    if to == gap {
                        pending[s] = Some(g.clone());
                    }
                }
                if gap == 0 {
                    break;
                }
                let layer = gap - 1;
                let x = &incoming[layer];
                let grad = &mut grads.layers[ch][layer];
                match (&stack[layer], &self.masks[ch][layer]) {
                    (Layer::Phase(p), Some(mask)) => {
                        if p.trainable {
                            // ∂(m·x)/∂φ = j·m·x
                            for i in 0..n * n {
                                let dy = mask[i] * x[i];
                                grad[i] += g[i].re * -dy.im + g[i].im * dy.re;
                            }
                        }
                        for (gv, m) in g.iter_mut().zip(mask) {
                            *gv *= m.conj();
                        }
                    }
                    (Layer::Levels(_), Some(mask)) | (Layer::Codesign(_), Some(mask)) => {
                        for (gv, m) in g.iter_mut().zip(mask) {
                            *gv *= m.conj();
                        }
                    }
                    (Layer::Codesign(c), None) => {
                        let sm = tape.soft[ch][layer]
                            .as_ref()
                            .ok_or_else(|| Error::Tape(format!("soft assignment of layer {layer} missing")))?;
                        let gamma = model.gamma;
                        let g_m: Vec<Complex64> = x.iter().zip(&g).map(|(xv, gv)| xv.conj() * gv * gamma).collect();
                        let device = model.device.as_ref().expect("validated");
                        for (a, b) in grad.iter_mut().zip(soft_modulation_backward(&sm.weights, device, c.tau, &g_m)) {
                            *a += b;
                        }
                        for (gv, m) in g.iter_mut().zip(&sm.values) {
                            *gv *= m.conj() * gamma;
                        }
                    }
                    _ => return Err(Error::Tape(format!("layer {layer} has no modulation record"))),
                }
            }
        }
        Ok(())
    }
}
