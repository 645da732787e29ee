//! Flat `key = value` run configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::codesign::DeviceProfile;
use crate::error::{ensure, Error, Result};
use crate::field::GridSpec;
use crate::io::{load_idx, Dataset, EmbedMode};
use crate::model::{DetectorMode, DetectorSpec, Model};
use crate::optics::{Approximation, SystemConfig};
use crate::train::{LossKind, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub wavelength: f64,
    pub sys_size: usize,
    pub pixel_size: f64,
    pub distances: Vec<f64>,
    pub depth: usize,
    pub approx: Approximation,
    pub padded: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub seed: u64,
    pub layernorm: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub classes: usize,
    pub det_size: usize,
    pub det_x: Vec<usize>,
    pub det_y: Vec<usize>,
    pub channels: usize,
    pub skips: Vec<(usize, usize)>,
    pub device: Option<PathBuf>,
    pub codesign: bool,
    pub tau: f64,
    pub tau_decay: f64,
    pub hard_gumbel: bool,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,
    pub resize: EmbedMode,
    pub binarize: bool,
    pub workers: usize,
    pub record_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            wavelength: 532e-9,
            sys_size: 200,
            pixel_size: 3.6e-5,
            distances: vec![0.3],
            depth: 5,
            approx: Approximation::Fresnel,
            padded: false,
            lr: 0.5,
            batch_size: 500,
            epochs: 100,
            gamma: 1.0,
            seed: 0,
            layernorm: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            classes: 10,
            det_size: 10,
            det_x: Vec::new(),
            det_y: Vec::new(),
            channels: 1,
            skips: Vec::new(),
            device: None,
            codesign: false,
            tau: 1.0,
            tau_decay: 1.0,
            hard_gumbel: false,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: 0,
            test_limit: 0,
            resize: EmbedMode::NearestUpscale,
            binarize: false,
            workers: 0,
            record_time: true,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse().map_err(|_| ())).collect()
}

fn boolean(v: &str) -> std::result::Result<bool, ()> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(()),
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let lineno = i + 1;
            let err = |msg: String| Error::format(origin, format!("line {lineno}: {msg}"));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), lineno) {
                return Err(err(format!("'{key}' already set on line {prev}")));
            }
            let bad = || err(format!("bad value '{value}' for '{key}'"));
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| bad())?
                };
            }
            let path = || Some(base.join(value));
            match key {
                "wavelength" => cfg.wavelength = num!(),
                "sys_size" => cfg.sys_size = num!(),
                "pixel_size" => cfg.pixel_size = num!(),
                "distance" | "distances" => cfg.distances = list(value).map_err(|_| bad())?,
                "depth" | "num_layers" => cfg.depth = num!(),
                "approx" => cfg.approx = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "padded" => cfg.padded = boolean(value).map_err(|_| bad())?,
                "lr" => cfg.lr = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "epochs" => cfg.epochs = num!(),
                "gamma" => cfg.gamma = num!(),
                "seed" => cfg.seed = num!(),
                "layernorm" => cfg.layernorm = boolean(value).map_err(|_| bad())?,
                "beta1" => cfg.beta1 = num!(),
                "beta2" => cfg.beta2 = num!(),
                "adam_eps" => cfg.adam_eps = num!(),
                "classes" => cfg.classes = num!(),
                "det_size" => cfg.det_size = num!(),
                "det_x" => cfg.det_x = list(value).map_err(|_| bad())?,
                "det_y" => cfg.det_y = list(value).map_err(|_| bad())?,
                "channels" => cfg.channels = num!(),
                "skips" => {
                    cfg.skips = list::<String>(value)
                        .map_err(|_| bad())?
                        .iter()
                        .map(|s| {
                            let (a, b) = s.split_once('-').ok_or_else(bad)?;
                            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
                        })
                        .collect::<Result<_>>()?
                }
                "device" => cfg.device = path(),
                "codesign" => cfg.codesign = boolean(value).map_err(|_| bad())?,
                "tau" => cfg.tau = num!(),
                "tau_decay" => cfg.tau_decay = num!(),
                "hard_gumbel" => cfg.hard_gumbel = boolean(value).map_err(|_| bad())?,
                "train_images" => cfg.train_images = path(),
                "train_labels" => cfg.train_labels = path(),
                "test_images" => cfg.test_images = path(),
                "test_labels" => cfg.test_labels = path(),
                "train_limit" => cfg.train_limit = num!(),
                "test_limit" => cfg.test_limit = num!(),
                "resize" => cfg.resize = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "binarize" => cfg.binarize = boolean(value).map_err(|_| bad())?,
                "workers" => cfg.workers = num!(),
                "record_time" => cfg.record_time = boolean(value).map_err(|_| bad())?,
                other => return Err(err(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system_config()?;
        self.train_config().validate()?;
        ensure!(self.channels >= 1, InvalidParameter, "channels must be >= 1");
        ensure!(self.det_x.len() == self.det_y.len(), InvalidParameter, "det_x and det_y differ in length");
        ensure!(
            !self.codesign || self.device.is_some(),
            InvalidParameter,
            "codesign training needs a device profile"
        );
        Ok(())
    }

    /// One distance is shared by every gap; otherwise one per gap.
    pub fn system_config(&self) -> Result<SystemConfig> {
        let grid = GridSpec::new(self.sys_size, self.pixel_size)?;
        let distances = match self.distances.len() {
            1 => vec![self.distances[0]; self.depth + 1],
            _ => self.distances.clone(),
        };
        let cfg = SystemConfig {
            wavelength: self.wavelength,
            grid,
            distances,
            approx: self.approx,
            depth: self.depth,
            padded: self.padded,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn detector(&self) -> Result<DetectorSpec> {
        if self.det_x.is_empty() {
            return DetectorSpec::grid_layout(self.sys_size, self.classes, self.det_size);
        }
        let spec = DetectorSpec {
            x_loc: self.det_x.clone(),
            y_loc: self.det_y.clone(),
            det_size: self.det_size,
            mode: DetectorMode::Classification,
        };
        spec.validate(self.sys_size)?;
        Ok(spec)
    }

    pub fn device_profile(&self) -> Result<Option<DeviceProfile>> {
        self.device.as_ref().map(DeviceProfile::load).transpose()
    }

    /// Freshly initialized model described by this config.
    pub fn build_model(&self) -> Result<Model> {
        let system = self.system_config()?;
        let detector = self.detector()?;
        let model = if self.codesign {
            let device = self
                .device_profile()?
                .ok_or_else(|| Error::InvalidParameter("codesign training needs a device profile".into()))?;
            Model::new_codesign(system, detector, self.gamma, self.channels, device, self.tau, self.seed)?
        } else {
            Model::new(system, detector, self.gamma, self.channels, self.seed)?
        };
        model.with_skips(self.skips.clone())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam_beta1: self.beta1,
            adam_beta2: self.beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            layernorm: self.layernorm,
            loss: LossKind::ClassificationMse,
            workers: self.workers,
            hard_gumbel: self.hard_gumbel,
            tau_decay: self.tau_decay,
            record_time: self.record_time,
        }
    }

    fn load_split(&self, images: &Option<PathBuf>, labels: &Option<PathBuf>, limit: usize, what: &str) -> Result<Option<Dataset>> {
        match (images, labels) {
            (Some(i), Some(l)) => {
                let mut data = load_idx(i, l)?;
                if limit > 0 {
                    data = data.take(limit);
                }
                Ok(Some(data.resized(self.sys_size, self.resize, self.binarize)?))
            }
            (None, None) => Ok(None),
            _ => Err(Error::InvalidParameter(format!("{what} needs both images and labels"))),
        }
    }

    pub fn train_data(&self) -> Result<Dataset> {
        self.load_split(&self.train_images, &self.train_labels, self.train_limit, "training data")?
            .ok_or_else(|| Error::InvalidParameter("config names no training data".into()))
    }

    pub fn test_data(&self) -> Result<Option<Dataset>> {
        self.load_split(&self.test_images, &self.test_labels, self.test_limit, "test data")
    }
}
