//! Reverse-mode gradients against central finite differences.

use donn_core::codesign::{gumbel_soft_modulation, soft_modulation_backward, DeviceProfile, GumbelNoise, CodesignLayer};
use donn_core::io::{Dataset, Sample, Target};
use donn_core::model::{DetectorSpec, Gradients, Layer, Model, RunMode, Simulator, Tape};
use donn_core::optics::{Approximation, SystemConfig, TransferCache, Workspace};
use donn_core::train::{batch_gradients, LossKind};
use donn_core::{Complex64, GridSpec, RealMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
// mean-reduced map losses are ~N² times smaller, so rounding in the loss
// dominates at the default step
const MAP_STEP: f64 = 1e-4;

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-9 || diff / analytic.abs().max(numeric.abs()) <= 1e-5
}

fn config(n: usize, depth: usize, approx: Approximation) -> SystemConfig {
    let grid = GridSpec::new(n, 8e-6).unwrap();
    let z = if approx == Approximation::Fraunhofer { 0.5 } else { 2e-3 };
    SystemConfig::uniform(532e-9, grid, z, depth, approx).unwrap()
}

fn random_image(n: usize, rng: &mut ChaCha8Rng) -> RealMap {
    RealMap::from_fn(n, |_, _| rng.gen::<f64>())
}

fn class_data(n: usize, count: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|i| Sample {
            planes: vec![random_image(n, &mut rng)],
            target: Target::Class(i % classes),
        })
        .collect();
    Dataset::new(samples, "synthetic").unwrap()
}

fn loss(model: &Model, data: &Dataset, mode: RunMode, kind: LossKind) -> f64 {
    let mut cache = TransferCache::new();
    let sim = Simulator::new(model, &mut cache, mode).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    batch_gradients(&sim, data, &idx, kind).unwrap().loss
}

fn analytic(model: &Model, data: &Dataset, mode: RunMode, kind: LossKind) -> Gradients {
    let mut cache = TransferCache::new();
    let sim = Simulator::new(model, &mut cache, mode).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    batch_gradients(&sim, data, &idx, kind).unwrap().grads
}

/// Checks every trainable parameter of `model` and returns how many were checked.
fn check_all(model: &Model, data: &Dataset, mode: RunMode, kind: LossKind) -> usize {
    check_with_step(model, data, mode, kind, STEP)
}

fn check_with_step(model: &Model, data: &Dataset, mode: RunMode, kind: LossKind, step: f64) -> usize {
    let grads = analytic(model, data, mode, kind);
    assert!(grads.is_finite());
    assert!(grads.max_abs() > 1e-8, "gradient vanished; test setup is degenerate");
    let mut checked = 0;
    for (c, stack) in model.channels.iter().enumerate() {
        for (l, layer) in stack.iter().enumerate() {
            let Some(params) = layer.params() else { continue };
            for i in 0..params.len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                plus.channels[c][l].params_mut().unwrap()[i] += step;
                minus.channels[c][l].params_mut().unwrap()[i] -= step;
                let numeric = (loss(&plus, data, mode, kind) - loss(&minus, data, mode, kind)) / (2.0 * step);
                let a = grads.layers[c][l][i];
                assert!(close(a, numeric), "channel {c} layer {l} param {i}: analytic {a:e} vs numeric {numeric:e}");
                checked += 1;
            }
        }
    }
    checked
}

fn classification_model(n: usize, depth: usize, approx: Approximation, seed: u64) -> Model {
    let det = DetectorSpec::grid_layout(n, 4, 3).unwrap();
    Model::new(config(n, depth, approx), det, 1.0, 1, seed).unwrap()
}

#[test]
fn two_layer_phase_gradients_match_finite_differences() {
    let model = classification_model(16, 2, Approximation::Fresnel, 3);
    let data = class_data(16, 1, 4, 11);
    assert_eq!(check_all(&model, &data, RunMode::train(0, 0, false), LossKind::ClassificationMse), 512);
}

#[test]
fn gradients_hold_for_sommerfeld_padding_and_gamma() {
    let mut model = classification_model(16, 2, Approximation::RayleighSommerfeld, 5);
    model.gamma = 1.5;
    model.config.padded = true;
    let data = class_data(16, 2, 4, 12);
    check_all(&model, &data, RunMode::train(0, 0, false), LossKind::ClassificationMse);
}

#[test]
fn gradients_hold_in_the_far_field() {
    // z = N·d²/λ makes the far-field operator power-preserving
    let grid = GridSpec::new(16, 100e-6).unwrap();
    let cfg = SystemConfig::uniform(532e-9, grid, 16.0 * 1e-8 / 532e-9, 1, Approximation::Fraunhofer).unwrap();
    let model = Model::new(cfg, DetectorSpec::grid_layout(16, 4, 3).unwrap(), 1.0, 1, 6).unwrap();
    let data = class_data(16, 1, 4, 13);
    check_all(&model, &data, RunMode::train(0, 0, false), LossKind::ClassificationMse);
}

#[test]
fn gradients_hold_with_skips_layernorm_and_channels() {
    let det = DetectorSpec::grid_layout(16, 4, 3).unwrap();
    let model = Model::new(config(16, 3, Approximation::Fresnel), det, 1.2, 3, 7)
        .unwrap()
        .with_skips(vec![(0, 2), (1, 3)])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let data = Dataset::new(
        vec![Sample {
            planes: (0..3).map(|_| random_image(16, &mut rng)).collect(),
            target: Target::Class(2),
        }],
        "rgb",
    )
    .unwrap();
    check_all(&model, &data, RunMode::train(0, 0, true), LossKind::ClassificationMse);
}

#[test]
fn image_loss_gradients() {
    let model = Model::new(config(16, 2, Approximation::Fresnel), DetectorSpec::segmentation(), 1.0, 1, 8)
        .unwrap()
        .with_skips(vec![(0, 2)])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let data = Dataset::new(
        vec![Sample {
            planes: vec![random_image(16, &mut rng)],
            target: Target::Map(RealMap::from_fn(16, |r, c| ((r / 4 + c / 4) % 2) as f64)),
        }],
        "seg",
    )
    .unwrap();
    check_with_step(&model, &data, RunMode::train(0, 0, true), LossKind::ImageMse, MAP_STEP);
}

#[test]
fn codesign_logit_gradients_with_frozen_draws() {
    let det = DetectorSpec::grid_layout(16, 4, 3).unwrap();
    let model = Model::new_codesign(
        config(16, 2, Approximation::Fresnel),
        det,
        1.0,
        1,
        DeviceProfile::uniform(4).unwrap(),
        0.7,
        9,
    )
    .unwrap();
    let data = class_data(16, 1, 4, 16);
    // the draws are keyed by (seed, step, sample, layer, pixel, level), so a
    // fixed run mode freezes them across the perturbed evaluations
    let checked = check_all(&model, &data, RunMode::train(21, 4, false), LossKind::ClassificationMse);
    assert_eq!(checked, 2 * 256 * 4);
}

#[test]
fn soft_modulation_gradient_of_a_scalar_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let profile = DeviceProfile::uniform(5).unwrap();
    let layer = CodesignLayer {
        logits: (0..6 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        levels: 5,
        tau: 0.5,
    };
    let noise = GumbelNoise { seed: 1, step: 2, sample: 3, layer: 4 };
    let w: Vec<Complex64> = (0..6).map(|_| Complex64::new(rng.gen(), rng.gen())).collect();
    // f = Σ Re(conj(w)·m) has cotangent w with respect to m
    let f = |l: &CodesignLayer| -> f64 {
        let m = gumbel_soft_modulation(l, &profile, &noise, false).unwrap();
        m.values.iter().zip(&w).map(|(a, b)| (b.conj() * a).re).sum()
    };
    let m = gumbel_soft_modulation(&layer, &profile, &noise, false).unwrap();
    let g = soft_modulation_backward(&m.weights, &profile, layer.tau, &w);
    for i in 0..layer.logits.len() {
        let mut p = layer.clone();
        let mut q = layer.clone();
        p.logits[i] += STEP;
        q.logits[i] -= STEP;
        let numeric = (f(&p) - f(&q)) / (2.0 * STEP);
        assert!(close(g[i], numeric), "logit {i}: {} vs {numeric}", g[i]);
    }
}

#[test]
fn symmetric_stationary_point_has_zero_gradient() {
    let n = 16;
    let det = DetectorSpec {
        x_loc: vec![0],
        y_loc: vec![0],
        det_size: n,
        mode: donn_core::model::DetectorMode::Classification,
    };
    let model = Model::new(config(n, 1, Approximation::Fresnel), det, 1.0, 1, 1).unwrap();
    let data = Dataset::new(
        vec![Sample {
            planes: vec![RealMap::from_fn(n, |_, _| 1.0)],
            target: Target::Class(0),
        }],
        "uniform",
    )
    .unwrap();
    let g = analytic(&model, &data, RunMode::train(0, 0, false), LossKind::ClassificationMse);
    assert!(g.max_abs() <= 1e-12);
}

#[test]
fn doubling_the_cotangent_doubles_the_gradient() {
    let model = classification_model(16, 2, Approximation::Fresnel, 4);
    let data = class_data(16, 1, 4, 18);
    let mut cache = TransferCache::new();
    let sim = Simulator::new(&model, &mut cache, RunMode::train(0, 0, false)).unwrap();
    let mut tape = Tape::default();
    let mut ws = Workspace::new();
    let planes = data.samples[0].encode(&model.config.grid).unwrap();
    sim.forward(&planes, 0, Some(&mut tape), &mut ws).unwrap();
    let d = [0.3, -1.1, 0.25, 2.0];
    let mut g1 = Gradients::zeros_like(&model);
    let mut g2 = Gradients::zeros_like(&model);
    sim.backward_scores(&tape, &d, &mut g1, &mut ws).unwrap();
    sim.backward_scores(&tape, &d.map(|v| 2.0 * v), &mut g2, &mut ws).unwrap();
    g1.scale(2.0);
    assert_eq!(g1, g2);
}

#[test]
fn backward_without_a_recorded_forward_fails() {
    let model = classification_model(16, 2, Approximation::Fresnel, 4);
    let mut cache = TransferCache::new();
    let sim = Simulator::new(&model, &mut cache, RunMode::train(0, 0, false)).unwrap();
    let mut g = Gradients::zeros_like(&model);
    let r = sim.backward(&Tape::default(), &vec![0.0; 256], &mut g, &mut Workspace::new());
    assert!(matches!(r, Err(donn_core::Error::Tape(_))));
}

#[test]
fn batch_gradient_equals_sum_of_single_sample_gradients() {
    let model = classification_model(16, 2, Approximation::Fresnel, 2);
    let data = class_data(16, 37, 4, 19);
    let mode = RunMode::train(0, 0, false);
    let batch = analytic(&model, &data, mode, LossKind::ClassificationMse);
    let mut cache = TransferCache::new();
    let sim = Simulator::new(&model, &mut cache, mode).unwrap();
    let mut sum = Gradients::zeros_like(&model);
    for i in 0..data.len() {
        sum.add_assign(&batch_gradients(&sim, &data, &[i], LossKind::ClassificationMse).unwrap().grads);
    }
    for (a, b) in batch.layers.iter().flatten().flatten().zip(sum.layers.iter().flatten().flatten()) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn frozen_layers_receive_no_gradient() {
    let mut model = classification_model(16, 2, Approximation::Fresnel, 2);
    if let Layer::Phase(p) = &mut model.channels[0][0] {
        p.trainable = false;
    }
    let data = class_data(16, 1, 4, 20);
    let g = analytic(&model, &data, RunMode::train(0, 0, false), LossKind::ClassificationMse);
    assert!(g.layers[0][0].is_empty());
    assert_eq!(g.layers[0][1].len(), 256);
    check_all(&model, &data, RunMode::train(0, 0, false), LossKind::ClassificationMse);
}
