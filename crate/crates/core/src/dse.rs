//! Design-space exploration over wavelength, unit size and layer spacing.
//!
//! A sweep trains one small proxy model per grid point and records its test
//! accuracy. A gradient-boosted regression tree ensemble is then fitted to
//! those points and queried for a recommended `(d, D)` at a target
//! wavelength.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::field::GridSpec;
use crate::io::Dataset;
use crate::model::{DetectorSpec, Model};
use crate::optics::{Approximation, SystemConfig};
use crate::train::{evaluate, fit, TrainConfig};

pub const SWEEP_HEADER: &str = "wavelength_m,unit_size_m,distance_m,accuracy";

/// One measured design point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsePoint {
    pub wavelength: f64,
    pub unit_size: f64,
    pub distance: f64,
    pub accuracy: f64,
}

impl DsePoint {
    pub fn new(wavelength: f64, unit_size: f64, distance: f64, accuracy: f64) -> Result<Self> {
        let p = DsePoint { wavelength, unit_size, distance, accuracy };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("wavelength", self.wavelength), ("unit size", self.unit_size), ("distance", self.distance)] {
            ensure!(v.is_finite() && v > 0.0, InvalidParameter, "{name} must be positive, got {v}");
        }
        ensure!(
            (0.0..=1.0).contains(&self.accuracy),
            InvalidParameter,
            "accuracy must lie in [0, 1], got {}",
            self.accuracy
        );
        Ok(())
    }

    pub fn features(&self) -> [f64; 3] {
        [self.wavelength, self.unit_size, self.distance]
    }

    fn key(&self) -> [u64; 3] {
        [self.wavelength.to_bits(), self.unit_size.to_bits(), self.distance.to_bits()]
    }

    fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.wavelength, self.unit_size, self.distance, self.accuracy)
    }
}

/// Cartesian sweep grid, iterated wavelength-major, then unit size, then
/// distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub wavelengths: Vec<f64>,
    pub unit_sizes: Vec<f64>,
    pub distances: Vec<f64>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [
            ("wavelength", &self.wavelengths),
            ("unit size", &self.unit_sizes),
            ("distance", &self.distances),
        ] {
            ensure!(!axis.is_empty(), Empty, "sweep grid has no {name} values");
            ensure!(
                axis.iter().all(|v| v.is_finite() && *v > 0.0),
                InvalidParameter,
                "{name} values must be positive"
            );
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len() * self.unit_sizes.len() * self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(λ, d, D)` triples in sweep order.
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for &l in &self.wavelengths {
            for &d in &self.unit_sizes {
                for &z in &self.distances {
                    out.push((l, d, z));
                }
            }
        }
        out
    }
}

/// Everything about a proxy run except the swept physical parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Proxy {
    pub size: usize,
    pub depth: usize,
    pub approx: Approximation,
    pub padded: bool,
    pub detector: DetectorSpec,
    pub gamma: f64,
    pub channels: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Proxy {
    /// Freshly initialized proxy model at one design point.
    pub fn model(&self, wavelength: f64, unit_size: f64, distance: f64) -> Result<Model> {
        let grid = GridSpec::new(self.size, unit_size)?;
        let mut system = SystemConfig::uniform(wavelength, grid, distance, self.depth, self.approx)?;
        system.padded = self.padded;
        Model::new(system, self.detector.clone(), self.gamma, self.channels, self.seed)
    }

    /// Trains a proxy at one design point and returns its test accuracy.
    pub fn run(&self, wavelength: f64, unit_size: f64, distance: f64, train: &Dataset, test: &Dataset) -> Result<f64> {
        let mut model = self.model(wavelength, unit_size, distance)?;
        fit(&mut model, train, None, &self.train, |_, _| {})?;
        evaluate(&model, test, self.train.workers)
    }
}

/// Reads a sweep CSV written by [`sweep_collect`].
pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<DsePoint>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sweep_csv(&text, path)
}

pub fn parse_sweep_csv(text: &str, origin: &Path) -> Result<Vec<DsePoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SWEEP_HEADER => {}
        _ => return Err(Error::format(origin, format!("expected header '{SWEEP_HEADER}'"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::format(origin, format!("line {}: {m}", i + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let mut v = [0.0; 4];
        for (slot, c) in v.iter_mut().zip(&cols) {
            *slot = c.parse().map_err(|_| bad(&format!("'{c}' is not a number")))?;
        }
        out.push(DsePoint::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(&e.to_string()))?);
    }
    Ok(out)
}

pub fn sweep_csv(points: &[DsePoint]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for p in points {
        out.push_str(&p.csv_row());
        out.push('\n');
    }
    out
}

/// Runs `proxy` at every grid point. With a `csv` path, rows already present
/// are reused and each new point is appended as soon as it finishes, so an
/// interrupted sweep resumes where it stopped. Points whose training fails
/// are logged and left out.
pub fn sweep_collect(
    grid: &SweepGrid,
    proxy: &Proxy,
    train: &Dataset,
    test: &Dataset,
    csv: Option<&Path>,
) -> Result<Vec<DsePoint>> {
    grid.validate()?;
    let mut done: Vec<DsePoint> = Vec::new();
    if let Some(path) = csv {
        if path.exists() {
            done = read_sweep_csv(path)?;
        } else {
            fs::write(path, format!("{SWEEP_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        }
    }
    let seen: HashSet<[u64; 3]> = done.iter().map(DsePoint::key).collect();
    let mut out = Vec::with_capacity(grid.len());
    for (l, d, z) in grid.points() {
        let key = [l.to_bits(), d.to_bits(), z.to_bits()];
        if seen.contains(&key) {
            if let Some(p) = done.iter().find(|p| p.key() == key) {
                out.push(*p);
            }
            continue;
        }
        let acc = match proxy.run(l, d, z, train, test) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("sweep point λ={l} d={d} D={z} failed: {e}");
                continue;
            }
        };
        let point = DsePoint::new(l, d, z, acc)?;
        log::info!("sweep point λ={l} d={d} D={z}: accuracy {acc:.4}");
        if let Some(path) = csv {
            let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", point.csv_row()).map_err(|e| Error::io(path, e))?;
        }
        out.push(point);
    }
    Ok(out)
}

/// Boosting hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbrParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Reserved for subsampling, which is not implemented; fits ignore it.
    pub random_state: u64,
}

impl GbrParams {
    /// Reduced ensemble for sweeps of a few dozen points.
    pub fn desk() -> Self {
        GbrParams { n_estimators: 300, learning_rate: 0.2, max_depth: 3, random_state: 0 }
    }

    /// The published setting (3500 trees, shrinkage 0.2, depth 3).
    pub fn full() -> Self {
        GbrParams { n_estimators: 3500, ..GbrParams::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0 && self.learning_rate <= 1.0,
            InvalidParameter,
            "learning rate must lie in (0, 1], got {}",
            self.learning_rate
        );
        ensure!(self.max_depth >= 1, InvalidParameter, "max_depth must be >= 1");
        Ok(())
    }
}

impl Default for GbrParams {
    fn default() -> Self {
        GbrParams::desk()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tree {
    Leaf(f64),
    /// Samples with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: Box<Tree>, right: Box<Tree> },
}

impl Tree {
    pub fn predict(&self, x: &[f64; 3]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Tree::Leaf(v) => return *v,
                Tree::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn dump(&self, out: &mut String) {
        match self {
            Tree::Leaf(v) => {
                let _ = writeln!(out, "leaf {v:?}");
            }
            Tree::Split { feature, threshold, left, right } => {
                let _ = writeln!(out, "split {feature} {threshold:?}");
                left.dump(out);
                right.dump(out);
            }
        }
    }

    fn parse<'a>(lines: &mut impl Iterator<Item = &'a str>, budget: usize) -> std::result::Result<Tree, String> {
        let line = lines.next().ok_or("unexpected end of tree")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number '{s}'"));
        match parts.as_slice() {
            ["leaf", v] => Ok(Tree::Leaf(num(v)?)),
            ["split", f, t] => {
                if budget == 0 {
                    return Err("tree deeper than max_depth".into());
                }
                let feature: usize = f.parse().map_err(|_| format!("bad feature '{f}'"))?;
                if feature >= 3 {
                    return Err(format!("feature index {feature} out of range"));
                }
                let threshold = num(t)?;
                let left = Box::new(Tree::parse(lines, budget - 1)?);
                let right = Box::new(Tree::parse(lines, budget - 1)?);
                Ok(Tree::Split { feature, threshold, left, right })
            }
            _ => Err(format!("unrecognized tree line '{line}'")),
        }
    }
}

/// Least-squares gradient-boosted regression trees over `(λ, d, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GbrModel {
    pub params: GbrParams,
    pub base: f64,
    pub trees: Vec<Tree>,
    /// Smallest and largest training wavelength.
    pub wavelength_range: (f64, f64),
}

impl GbrModel {
    /// Unclamped ensemble output.
    pub fn predict_raw(&self, x: &[f64; 3]) -> f64 {
        self.base + self.params.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = format!(
            "gbr\nn_estimators={}\nlearning_rate={:?}\nmax_depth={}\nrandom_state={}\nbase={:?}\nwavelength_range={:?},{:?}\ntrees={}\n",
            p.n_estimators,
            p.learning_rate,
            p.max_depth,
            p.random_state,
            self.base,
            self.wavelength_range.0,
            self.wavelength_range.1,
            self.trees.len()
        );
        for t in &self.trees {
            t.dump(&mut out);
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(origin, m);
        let mut lines = text.lines();
        if lines.next() != Some("gbr") {
            return Err(bad("missing 'gbr' header".into()));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing '{name}'")))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected '{name}=', got '{line}'")))
        };
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("bad number '{s}'")));
        let int = |s: &str| s.trim().parse::<u64>().map_err(|_| bad(format!("bad integer '{s}'")));
        let n_estimators = int(&field("n_estimators")?)? as usize;
        let learning_rate = num(&field("learning_rate")?)?;
        let max_depth = int(&field("max_depth")?)? as usize;
        let random_state = int(&field("random_state")?)?;
        let base = num(&field("base")?)?;
        let range = field("wavelength_range")?;
        let (lo, hi) = range.split_once(',').ok_or_else(|| bad("wavelength_range needs two values".into()))?;
        let wavelength_range = (num(lo)?, num(hi)?);
        let count = int(&field("trees")?)? as usize;
        let params = GbrParams { n_estimators, learning_rate, max_depth, random_state };
        params.validate()?;
        let mut trees = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            trees.push(Tree::parse(&mut lines, max_depth).map_err(|m| bad(format!("tree {i}: {m}")))?);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing content after last tree".into()));
        }
        Ok(GbrModel { params, base, trees, wavelength_range })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GbrModel::parse(&text, path)
    }
}

fn mse(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

fn mean_of(r: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| r[i]).sum::<f64>() / idx.len() as f64
}

/// Greedy variance-reduction tree on residuals `r`. Ties between candidate
/// splits keep the first one found (lower feature, then lower threshold).
fn grow(x: &[[f64; 3]], r: &[f64], idx: &mut [usize], depth_left: usize) -> Tree {
    let n = idx.len();
    let leaf = Tree::Leaf(mean_of(r, idx));
    if depth_left == 0 || n < 2 {
        return leaf;
    }
    let total: f64 = idx.iter().map(|&i| r[i]).sum();
    let parent = total * total / n as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..3 {
        idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let mut left = 0.0;
        for k in 0..n - 1 {
            left += r[idx[k]];
            let (lo, hi) = (x[idx[k]][f], x[idx[k + 1]][f]);
            if lo == hi {
                continue;
            }
            let right = total - left;
            let nl = (k + 1) as f64;
            let nr = (n - k - 1) as f64;
            // SSE reduction equals this score minus the parent's
            let gain = left * left / nl + right * right / nr - parent;
            if gain > 0.0 && best.map_or(true, |(g, _, _)| gain > g) {
                best = Some((gain, f, lo + (hi - lo) / 2.0));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return leaf;
    };
    idx.sort_by(|&a, &b| x[a][feature].total_cmp(&x[b][feature]).then(a.cmp(&b)));
    let cut = idx.partition_point(|&i| x[i][feature] <= threshold);
    let (l, rr) = idx.split_at_mut(cut);
    Tree::Split {
        feature,
        threshold,
        left: Box::new(grow(x, r, l, depth_left - 1)),
        right: Box::new(grow(x, r, rr, depth_left - 1)),
    }
}

/// Fits the ensemble; see [`gbr_fit_traced`].
pub fn gbr_fit(points: &[DsePoint], params: &GbrParams) -> Result<GbrModel> {
    Ok(gbr_fit_traced(points, params)?.0)
}

/// Fits the ensemble and returns the training MSE after the base and after
/// every tree. Panics if an added tree ever increases the training MSE,
/// which least-squares boosting with shrinkage ≤ 1 rules out.
pub fn gbr_fit_traced(points: &[DsePoint], params: &GbrParams) -> Result<(GbrModel, Vec<f64>)> {
    params.validate()?;
    ensure!(points.len() >= 2, Empty, "boosting needs at least 2 points, got {}", points.len());
    for p in points {
        p.validate()?;
    }
    let x: Vec<[f64; 3]> = points.iter().map(DsePoint::features).collect();
    let y: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    // offsets from y[0] keep the mean exact for constant targets
    let base = y[0] + y.iter().map(|v| v - y[0]).sum::<f64>() / y.len() as f64;
    let mut pred = vec![base; y.len()];
    let mut history = vec![mse(&y, &pred)];
    let mut trees = Vec::with_capacity(params.n_estimators);
    let mut idx: Vec<usize> = (0..y.len()).collect();
    // squared rounding error of the targets; changes below it are noise
    let floor = (4.0 * f64::EPSILON * y.iter().fold(0.0f64, |a, v| a.max(v.abs()))).powi(2);
    for it in 0..params.n_estimators {
        let resid: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        idx.sort_unstable();
        let tree = grow(&x, &resid, &mut idx, params.max_depth);
        for (p, xi) in pred.iter_mut().zip(&x) {
            *p += params.learning_rate * tree.predict(xi);
        }
        let m = mse(&y, &pred);
        let prev = *history.last().expect("nonempty");
        assert!(
            m <= prev + 1e-12 * prev + floor,
            "boosting iteration {it} raised training MSE from {prev:e} to {m:e}"
        );
        history.push(m);
        trees.push(tree);
    }
    let lo = points.iter().map(|p| p.wavelength).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.wavelength).fold(f64::NEG_INFINITY, f64::max);
    Ok((GbrModel { params: *params, base, trees, wavelength_range: (lo, hi) }, history))
}

/// Predicted accuracy, clamped to `[0, 1]`.
pub fn gbr_predict(model: &GbrModel, wavelength: f64, unit_size: f64, distance: f64) -> f64 {
    model.predict_raw(&[wavelength, unit_size, distance]).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recommendation {
    pub unit_size: f64,
    pub distance: f64,
    pub accuracy: f64,
    /// The target wavelength lies outside the training wavelengths.
    pub extrapolated: bool,
}

/// Best `(d, D)` candidate for `wavelength`. Ties go to the smallest `d`,
/// then the smallest `D`.
pub fn dse_recommend(model: &GbrModel, wavelength: f64, candidates: &[(f64, f64)]) -> Result<Recommendation> {
    ensure!(!candidates.is_empty(), Empty, "no candidate (d, D) pairs");
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (lo, hi) = model.wavelength_range;
    let extrapolated = wavelength < lo || wavelength > hi;
    if extrapolated {
        log::warn!("target wavelength {wavelength} lies outside the training range [{lo}, {hi}]");
    }
    let mut best: Option<Recommendation> = None;
    for (d, z) in sorted {
        let acc = gbr_predict(model, wavelength, d, z);
        if best.map_or(true, |b| acc > b.accuracy) {
            best = Some(Recommendation { unit_size: d, distance: z, accuracy: acc, extrapolated });
        }
    }
    Ok(best.expect("nonempty"))
}

/// Cartesian product of candidate unit sizes and distances.
pub fn candidate_grid(unit_sizes: &[f64], distances: &[f64]) -> Vec<(f64, f64)> {
    unit_sizes.iter().flat_map(|&d| distances.iter().map(move |&z| (d, z))).collect()
}

/// Which design parameter a sensitivity row perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameter {
    Wavelength,
    UnitSize,
    Distance,
}

impl Parameter {
    pub const ALL: [Parameter; 3] = [Parameter::Wavelength, Parameter::UnitSize, Parameter::Distance];

    pub fn name(self) -> &'static str {
        match self {
            Parameter::Wavelength => "wavelength",
            Parameter::UnitSize => "unit_size",
            Parameter::Distance => "distance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityRow {
    pub parameter: Parameter,
    /// Multiplier applied to the parameter, e.g. 0.9 or 1.1.
    pub factor: f64,
    pub accuracy: f64,
    /// Accuracy at the unperturbed point minus `accuracy`.
    pub drop: f64,
}

/// Retrains the proxy with each parameter scaled by `1 ± rel` in turn.
/// Returns the unperturbed accuracy and one row per perturbation.
pub fn sensitivity(
    proxy: &Proxy,
    at: (f64, f64, f64),
    rel: f64,
    train: &Dataset,
    test: &Dataset,
) -> Result<(f64, Vec<SensitivityRow>)> {
    ensure!(rel > 0.0 && rel < 1.0, InvalidParameter, "relative perturbation must lie in (0, 1), got {rel}");
    let base = proxy.run(at.0, at.1, at.2, train, test)?;
    let mut rows = Vec::with_capacity(6);
    for parameter in Parameter::ALL {
        for factor in [1.0 - rel, 1.0 + rel] {
            let (mut l, mut d, mut z) = at;
            match parameter {
                Parameter::Wavelength => l *= factor,
                Parameter::UnitSize => d *= factor,
                Parameter::Distance => z *= factor,
            }
            let accuracy = proxy.run(l, d, z, train, test)?;
            rows.push(SensitivityRow { parameter, factor, accuracy, drop: base - accuracy });
        }
    }
    Ok((base, rows))
}
