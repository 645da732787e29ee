//! Datasets, IDX parsing, image placement and PGM output.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{ensure, Error, Result};
use crate::field::{ComplexField, GridSpec, RealMap};
use crate::optics::encode_input;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Map(RealMap),
}

/// One input (one plane per optical channel, or a single shared plane) and
/// its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub planes: Vec<RealMap>,
    pub target: Target,
}

impl Sample {
    pub fn encode(&self, grid: &GridSpec) -> Result<Vec<ComplexField>> {
        self.planes.iter().map(|p| encode_input(p, grid)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: String,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, split: impl Into<String>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            ensure!(!s.planes.is_empty(), Shape, "sample {i} has no image plane");
            for p in &s.planes {
                ensure!(
                    p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)),
                    InvalidParameter,
                    "sample {i}: pixel values must lie in [0, 1]"
                );
            }
            if let Target::Map(t) = &s.target {
                ensure!(
                    t.as_slice().iter().all(|v| (0.0..=1.0).contains(v)),
                    InvalidParameter,
                    "sample {i}: target values must lie in [0, 1]"
                );
            }
        }
        Ok(Dataset {
            samples,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `count` samples (all of them if fewer exist).
    pub fn take(&self, count: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(count).cloned().collect(),
            split: self.split.clone(),
        }
    }

    /// Places every plane onto an `n × n` grid.
    pub fn resized(&self, n: usize, mode: EmbedMode, binarize: bool) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    planes: s
                        .planes
                        .iter()
                        .map(|p| resize_embed(p, n, mode, binarize))
                        .collect::<Result<_>>()?,
                    target: s.target.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            split: self.split.clone(),
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("corrupt gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header ({} bytes)", bytes.len())))
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::format(
            path,
            format!("wrong magic 0x{found:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `count` square maps scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<RealMap>> {
    check_magic(be_u32(bytes, 0, path)?, IMAGES_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows != cols || rows == 0 {
        return Err(Error::format(path, format!("expected square images, got {rows}x{cols}")));
    }
    let need = count
        .checked_mul(rows * cols)
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::format(path, "image dimensions overflow"))?;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("truncated file: header promises {need} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes[16..need]
        .chunks_exact(rows * cols)
        .map(|px| RealMap::new(rows, px.iter().map(|&b| b as f64 / 255.0).collect()).expect("sized"))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(be_u32(bytes, 0, path)?, LABELS_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::format(
            path,
            format!("truncated file: header promises {} bytes, found {}", 8 + count, bytes.len()),
        ));
    }
    Ok(bytes[8..8 + count].iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image/label pair (plain or gzip-compressed).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read_maybe_gz(ip)?, ip)?;
    let labels = parse_idx_labels(&read_maybe_gz(lp)?, lp)?;
    if images.len() != labels.len() {
        return Err(Error::format(
            lp,
            format!("count mismatch: {} images but {} labels", images.len(), labels.len()),
        ));
    }
    let split = ip
        .file_name()
        .map(|s| s.to_string_lossy().split('-').next().unwrap_or("").to_string())
        .unwrap_or_default();
    Ok(Dataset {
        samples: images
            .into_iter()
            .zip(labels)
            .map(|(img, l)| Sample {
                planes: vec![img],
                target: Target::Class(l),
            })
            .collect(),
        split,
    })
}

/// Serializes images and labels in IDX format.
pub fn idx_bytes(images: &[RealMap], labels: &[usize]) -> (Vec<u8>, Vec<u8>) {
    let side = images.first().map_or(0, |m| m.size()) as u32;
    let mut img = Vec::new();
    for v in [IMAGES_MAGIC, images.len() as u32, side, side] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for m in images {
        img.extend(m.as_slice().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut lab = Vec::new();
    for v in [LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(labels.iter().map(|&l| l as u8));
    (img, lab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    /// Nearest-neighbor scale by the largest integer factor that fits, then
    /// zero-pad to center.
    NearestUpscale,
    /// Zero-pad around the original.
    CenterEmbed,
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nearest" | "upscale" => Ok(EmbedMode::NearestUpscale),
            "center" | "embed" => Ok(EmbedMode::CenterEmbed),
            other => Err(Error::InvalidParameter(format!(
                "unknown resize mode '{other}' (expected nearest or center)"
            ))),
        }
    }
}

/// Places `image` on an `n × n` grid; `binarize` thresholds at 0.5 afterwards.
pub fn resize_embed(image: &RealMap, n: usize, mode: EmbedMode, binarize: bool) -> Result<RealMap> {
    let s = image.size();
    ensure!(n >= s, InvalidParameter, "target size {n} is smaller than the {s}x{s} image");
    let factor = match mode {
        EmbedMode::NearestUpscale => n / s,
        EmbedMode::CenterEmbed => 1,
    };
    let off = (n - s * factor) / 2;
    let end = off + s * factor;
    Ok(RealMap::from_fn(n, |r, c| {
        if r < off || c < off || r >= end || c >= end {
            return 0.0;
        }
        let v = image.get((r - off) / factor, (c - off) / factor);
        if binarize {
            if v >= 0.5 {
                1.0
            } else {
                0.0
            }
        } else {
            v
        }
    }))
}

/// Binary greyscale PGM of `map`, min-max scaled to `0..=255`.
pub fn pgm_bytes(map: &RealMap) -> Result<Vec<u8>> {
    ensure!(
        map.as_slice().iter().all(|v| v.is_finite()),
        InvalidParameter,
        "cannot write a map with non-finite values"
    );
    let n = map.size();
    let (lo, hi) = (map.min(), map.max());
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    let range = hi - lo;
    out.extend(map.as_slice().iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(map: &RealMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pgm_bytes(map)?).map_err(|e| Error::io(path, e))
}
