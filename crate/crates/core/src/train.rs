//! Losses, Adam and the training / evaluation loops.
//!
//! Batches fan out over a rayon pool in fixed-size chunks; chunk results are
//! summed in chunk order, so gradients do not depend on the worker count.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::io::{Dataset, Target};
use crate::model::{predict, Gradients, Layer, Model, RunMode, Simulator, Tape};
use crate::optics::{TransferCache, Workspace};
use crate::rng;

/// Samples per parallel work item.
pub const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Squared error between `softmax(scores)` and the one-hot label.
    ClassificationMse,
    /// Mean squared error between the detector map and a target map.
    ImageMse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub layernorm: bool,
    pub loss: LossKind,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    /// Hard Gumbel samples (straight-through) for codesign layers.
    pub hard_gumbel: bool,
    /// Per-epoch multiplier of codesign temperatures (1 keeps τ fixed).
    pub tau_decay: f64,
    /// Fill the `wall_seconds` metrics column.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            batch_size: 500,
            epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            layernorm: false,
            loss: LossKind::ClassificationMse,
            workers: 0,
            hard_gumbel: false,
            tau_decay: 1.0,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate >= 0.0,
            InvalidParameter,
            "learning rate must be non-negative, got {}",
            self.learning_rate
        );
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            ensure!((0.0..1.0).contains(&b), InvalidParameter, "{name} must lie in [0, 1), got {b}");
        }
        ensure!(self.adam_eps > 0.0, InvalidParameter, "adam epsilon must be positive");
        ensure!(self.batch_size >= 1, InvalidParameter, "batch size must be >= 1");
        ensure!(
            self.tau_decay > 0.0 && self.tau_decay <= 1.0,
            InvalidParameter,
            "tau decay must lie in (0, 1]"
        );
        Ok(())
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes];
    t[class] = 1.0;
    t
}

/// `Σ_c (softmax(I)_c − t_c)²` and its gradient with respect to `I`.
pub fn classification_loss_grad(scores: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure!(
        scores.len() == target.len(),
        Shape,
        "{} scores vs {} targets",
        scores.len(),
        target.len()
    );
    ensure!(!scores.is_empty(), Empty, "loss of an empty score vector");
    let s = softmax(scores);
    let ds: Vec<f64> = s.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
    let loss = s.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    let dot: f64 = s.iter().zip(&ds).map(|(a, b)| a * b).sum();
    Ok((loss, s.iter().zip(&ds).map(|(a, d)| a * (d - dot)).collect()))
}

pub fn loss_classification(scores: &[f64], target: &[f64]) -> Result<f64> {
    classification_loss_grad(scores, target).map(|(l, _)| l)
}

/// Mean squared error between two maps and its gradient.
pub fn image_loss_grad(map: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure!(map.len() == target.len(), Shape, "map has {} pixels, target {}", map.len(), target.len());
    ensure!(!map.is_empty(), Empty, "loss of an empty map");
    let n = map.len() as f64;
    let loss = map.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok((loss, map.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect()))
}

pub fn loss_image(map: &[f64], target: &[f64]) -> Result<f64> {
    image_loss_grad(map, target).map(|(l, _)| l)
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let shapes: Vec<usize> = model.channels.iter().flatten().filter_map(|l| l.params().map(|p| p.len())).collect();
        AdamState::new(&shapes)
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len(),
        Shape,
        "{} parameter tensors, {} gradients, {} optimizer slots",
        params.len(),
        grads.len(),
        state.m.len()
    );
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        ensure!(
            p.len() == g.len() && p.len() == m.len(),
            Shape,
            "tensor {i}: {} parameters, {} gradients",
            p.len(),
            g.len()
        );
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Applies one Adam step to every trainable layer of `model`.
pub fn apply_adam(model: &mut Model, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let g: Vec<&[f64]> = model
        .channels
        .iter()
        .zip(&grads.layers)
        .flat_map(|(stack, gs)| stack.iter().zip(gs).filter(|(l, _)| l.params().is_some()).map(|(_, g)| g.as_slice()))
        .collect();
    let mut p: Vec<&mut [f64]> = model
        .channels
        .iter_mut()
        .flatten()
        .filter_map(|l| l.params_mut().map(|v| v.as_mut_slice()))
        .collect();
    adam_step(&mut p, &g, state, cfg)
}

/// Summed loss, correct predictions and summed gradient over a set of samples.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: Gradients,
}

fn sample_loss(sim: &Simulator, data: &Dataset, index: usize, kind: LossKind, tape: &mut Tape, ws: &mut Workspace) -> Result<(f64, bool, Vec<f64>)> {
    let model = sim.model();
    let sample = &data.samples[index];
    let planes = sample.encode(&model.config.grid)?;
    let out = sim.forward(&planes, index as u64, Some(tape), ws)?;
    match (kind, &sample.target) {
        (LossKind::ClassificationMse, Target::Class(c)) => {
            let classes = out.scores.len();
            ensure!(*c < classes, InvalidParameter, "label {c} exceeds {classes} detector regions");
            let (loss, d_scores) = classification_loss_grad(&out.scores, &one_hot(*c, classes))?;
            let n = model.size();
            let mut d_map = vec![0.0; n * n];
            model.detector.scatter(&d_scores, n, &mut d_map);
            Ok((loss, predict(&out.scores)? == *c, d_map))
        }
        (LossKind::ImageMse, Target::Map(t)) => {
            let (loss, d_map) = image_loss_grad(&out.map, t.as_slice())?;
            Ok((loss, false, d_map))
        }
        _ => Err(Error::InvalidParameter("loss kind does not match the dataset targets".into())),
    }
}

/// Forward and backward over `indices`, reduced in a fixed order.
pub fn batch_gradients(sim: &Simulator, data: &Dataset, indices: &[usize], kind: LossKind) -> Result<BatchResult> {
    let partial: Vec<Result<BatchResult>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = Workspace::new();
            let mut tape = Tape::default();
            let mut acc = BatchResult {
                loss: 0.0,
                correct: 0,
                grads: Gradients::zeros_like(sim.model()),
            };
            for &i in chunk {
                let (loss, hit, d_map) = sample_loss(sim, data, i, kind, &mut tape, &mut ws)?;
                sim.backward(&tape, &d_map, &mut acc.grads, &mut ws)?;
                acc.loss += loss;
                acc.correct += hit as usize;
            }
            Ok(acc)
        })
        .collect();
    let mut total = BatchResult {
        loss: 0.0,
        correct: 0,
        grads: Gradients::zeros_like(sim.model()),
    };
    for part in partial {
        let part = part?;
        total.loss += part.loss;
        total.correct += part.correct;
        total.grads.add_assign(&part.grads);
    }
    Ok(total)
}

/// Runs `f` on a pool of `workers` threads (0: the global pool).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub wall_seconds: Option<f64>,
}

/// Mini-batch Adam training. The data order is reshuffled every epoch from
/// `cfg.seed`; the last partial batch is kept. `on_epoch` sees each epoch's
/// metrics together with the model as it stands after that epoch.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    model.validate()?;
    ensure!(!train.is_empty(), Empty, "training set is empty");
    let mut cache = TransferCache::new();
    let mut adam = AdamState::for_model(model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::seeded(cfg.seed, 1000 + epoch as u64));
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mode = RunMode {
                training: true,
                layernorm: cfg.layernorm,
                hard: cfg.hard_gumbel,
                seed: cfg.seed,
                step: adam.t,
            };
            let result = {
                let sim = Simulator::new(model, &mut cache, mode)?;
                with_workers(cfg.workers, || batch_gradients(&sim, train, batch, cfg.loss))??
            };
            if !result.grads.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite gradient at epoch {epoch}; lower the learning rate or gamma"
                )));
            }
            loss += result.loss;
            correct += result.correct;
            apply_adam(model, &result.grads, &mut adam, cfg)?;
        }
        if cfg.tau_decay != 1.0 {
            for layer in model.channels.iter_mut().flatten() {
                if let Layer::Codesign(c) = layer {
                    c.tau *= cfg.tau_decay;
                }
            }
        }
        let test_acc = match (test, cfg.loss) {
            (Some(t), LossKind::ClassificationMse) => Some(evaluate_with(model, t, &mut cache, cfg.workers)?),
            _ => None,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
            wall_seconds: cfg.record_time.then(|| start.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {}: loss {:.5} train acc {:.4}{}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.test_acc.map(|a| format!(" test acc {a:.4}")).unwrap_or_default()
        );
        on_epoch(&m, model);
        history.push(m);
    }
    Ok(history)
}

/// Predicted classes of every sample; `noise` adds uniform detector noise
/// `U[0, bound·max(I)]` per pixel, keyed by `(seed, sample, pixel)`.
pub fn predictions(model: &Model, data: &Dataset, noise: Option<(f64, u64)>, cache: &mut TransferCache, workers: usize) -> Result<Vec<usize>> {
    let sim = Simulator::new(model, cache, RunMode::eval())?;
    let n = model.size();
    let indices: Vec<usize> = (0..data.len()).collect();
    let run = || -> Result<Vec<usize>> {
        let parts: Vec<Result<Vec<usize>>> = indices
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut ws = Workspace::new();
                let mut out = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let planes = data.samples[i].encode(&model.config.grid)?;
                    let mut r = sim.forward(&planes, i as u64, None, &mut ws)?;
                    if let Some((bound, seed)) = noise {
                        if bound > 0.0 {
                            let peak = r.map.iter().cloned().fold(0.0, f64::max);
                            for (p, v) in r.map.iter_mut().enumerate() {
                                *v += rng::uniform_open(&[seed, i as u64, p as u64]) * bound * peak;
                            }
                            r.scores = model.detector.read(&r.map, n);
                        }
                    }
                    out.push(predict(&r.scores)?);
                }
                Ok(out)
            })
            .collect();
        let mut all = Vec::with_capacity(indices.len());
        for p in parts {
            all.extend(p?);
        }
        Ok(all)
    };
    with_workers(workers, run)?
}

fn accuracy(pred: &[usize], data: &Dataset) -> Result<f64> {
    let mut hits = 0;
    for (p, s) in pred.iter().zip(&data.samples) {
        match s.target {
            Target::Class(c) => hits += (*p == c) as usize,
            Target::Map(_) => return Err(Error::Unsupported("accuracy of a segmentation dataset".into())),
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

fn evaluate_with(model: &Model, data: &Dataset, cache: &mut TransferCache, workers: usize) -> Result<f64> {
    ensure!(!data.is_empty(), Empty, "cannot evaluate on an empty dataset");
    let pred = predictions(model, data, None, cache, workers)?;
    accuracy(&pred, data)
}

/// Fraction of samples whose prediction matches the label.
pub fn evaluate(model: &Model, data: &Dataset, workers: usize) -> Result<f64> {
    evaluate_with(model, data, &mut TransferCache::new(), workers)
}

/// Accuracy with uniform detector noise of relative bound `noise_bound`.
pub fn noise_eval(model: &Model, data: &Dataset, noise_bound: f64, seed: u64, workers: usize) -> Result<f64> {
    ensure!(
        (0.0..=1.0).contains(&noise_bound),
        InvalidParameter,
        "noise bound must lie in [0, 1], got {noise_bound}"
    );
    ensure!(!data.is_empty(), Empty, "cannot evaluate on an empty dataset");
    let pred = predictions(model, data, Some((noise_bound, seed)), &mut TransferCache::new(), workers)?;
    accuracy(&pred, data)
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,wall_seconds";

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            opt(m.test_acc),
            opt(m.wall_seconds)
        );
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(metrics)).map_err(|e| Error::io(path, e))
}
