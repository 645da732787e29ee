//! Model files: a `key=value` text header closed by an `end` line, then one
//! little-endian f64 block per layer (channel-major, row-major pixels).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{DetectorMode, DetectorSpec, Layer, Model, PhaseLayer};
use crate::codesign::{CodesignLayer, DeviceLevel, DeviceProfile};
use crate::error::{Error, Result};
use crate::field::GridSpec;
use crate::optics::{Approximation, SystemConfig};

const MAGIC: &str = "donn-model";
const VERSION: u32 = 1;

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn to_bytes(model: &Model) -> Vec<u8> {
    let cfg = &model.config;
    let det = &model.detector;
    let mut h = vec![
        MAGIC.to_string(),
        format!("version={VERSION}"),
        format!("size={}", cfg.grid.size()),
        format!("pixel_pitch={}", cfg.grid.pixel_pitch()),
        format!("wavelength={}", cfg.wavelength),
        format!("depth={}", cfg.depth),
        format!("distances={}", join(&cfg.distances)),
        format!("approx={}", cfg.approx),
        format!("padded={}", cfg.padded),
        format!("gamma={}", model.gamma),
        format!(
            "detector={}",
            match det.mode {
                DetectorMode::Classification => "classification",
                DetectorMode::Segmentation => "segmentation",
            }
        ),
        format!("det_size={}", det.det_size),
        format!("x_loc={}", join(&det.x_loc)),
        format!("y_loc={}", join(&det.y_loc)),
        format!("channels={}", model.channels.len()),
        format!(
            "skips={}",
            model.skips.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>().join(",")
        ),
    ];
    for (c, stack) in model.channels.iter().enumerate() {
        let kinds: Vec<String> = stack
            .iter()
            .map(|l| match l {
                Layer::Codesign(cd) => format!("codesign@{}", cd.tau),
                other => other.kind().to_string(),
            })
            .collect();
        h.push(format!("layers.{c}={}", kinds.join(",")));
    }
    if let Some(d) = &model.device {
        h.push(format!("device={}", d.name()));
        h.push(format!(
            "device_levels={}",
            d.levels().iter().map(|l| format!("{}:{}", l.phase, l.amplitude)).collect::<Vec<_>>().join(",")
        ));
    }
    h.push("end".into());
    let mut out = (h.join("\n") + "\n").into_bytes();
    for layer in model.channels.iter().flatten() {
        match layer {
            Layer::Phase(p) => p.phi.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Layer::Codesign(c) => c.logits.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Layer::Levels(idx) => idx.iter().for_each(|&v| out.extend_from_slice(&(v as f64).to_le_bytes())),
        }
    }
    out
}

pub(crate) fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub(crate) fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Splits a file into its text header (without the `end` line) and body.
pub(crate) fn split_header<'a>(bytes: &'a [u8], origin: &Path) -> Result<(&'a str, &'a [u8])> {
    let marker = b"\nend\n";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::format(origin, "header is not terminated by an 'end' line"))?;
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| Error::format(origin, "header is not UTF-8"))?;
    Ok((header, &bytes[pos + marker.len()..]))
}

struct Header<'a> {
    origin: &'a Path,
    kv: HashMap<&'a str, &'a str>,
}

impl<'a> Header<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.origin, msg)
    }

    fn get(&self, key: &str) -> Result<&'a str> {
        self.kv
            .get(key)
            .copied()
            .ok_or_else(|| self.err(format!("missing header key '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| self.err(format!("bad value '{v}' for '{key}'")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.parse().map_err(|_| self.err(format!("bad entry '{s}' in '{key}'"))))
            .collect()
    }
}

pub(crate) fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Model> {
    let (text, body) = split_header(bytes, origin)?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::format(origin, "not a model file"));
    }
    let mut kv = HashMap::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(origin, format!("malformed header line '{line}'")))?;
        kv.insert(k, v);
    }
    let h = Header { origin, kv };
    let version: u32 = h.parse("version")?;
    if version != VERSION {
        return Err(h.err(format!("unsupported model version {version}")));
    }
    let n: usize = h.parse("size")?;
    let grid = GridSpec::new(n, h.parse("pixel_pitch")?).map_err(|e| h.err(e.to_string()))?;
    let approx: Approximation = h.get("approx")?.parse().map_err(|e: Error| h.err(e.to_string()))?;
    let config = SystemConfig {
        wavelength: h.parse("wavelength")?,
        grid,
        distances: h.list("distances")?,
        approx,
        depth: h.parse("depth")?,
        padded: h.parse("padded")?,
    };
    let detector = DetectorSpec {
        x_loc: h.list("x_loc")?,
        y_loc: h.list("y_loc")?,
        det_size: h.parse("det_size")?,
        mode: match h.get("detector")? {
            "classification" => DetectorMode::Classification,
            "segmentation" => DetectorMode::Segmentation,
            other => return Err(h.err(format!("unknown detector mode '{other}'"))),
        },
    };
    let skips = h
        .list::<String>("skips")?
        .iter()
        .map(|s| {
            let (a, b) = s.split_once('-').ok_or_else(|| h.err(format!("bad skip '{s}'")))?;
            Ok((
                a.parse().map_err(|_| h.err(format!("bad skip '{s}'")))?,
                b.parse().map_err(|_| h.err(format!("bad skip '{s}'")))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let device = match h.kv.get("device") {
        None => None,
        Some(name) => {
            let levels = h
                .list::<String>("device_levels")?
                .iter()
                .map(|s| {
                    let (p, a) = s.split_once(':').ok_or_else(|| h.err(format!("bad device level '{s}'")))?;
                    Ok(DeviceLevel {
                        phase: p.parse().map_err(|_| h.err(format!("bad device level '{s}'")))?,
                        amplitude: a.parse().map_err(|_| h.err(format!("bad device level '{s}'")))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(DeviceProfile::new(*name, levels).map_err(|e| h.err(e.to_string()))?)
        }
    };
    let channel_count: usize = h.parse("channels")?;
    let pixels = n
        .checked_mul(n)
        .ok_or_else(|| h.err("grid size overflows"))?;
    let mut rest = body;
    let mut take = |count: usize| -> Result<Vec<f64>> {
        let len = count.checked_mul(8).filter(|&l| l <= rest.len());
        let len = len.ok_or_else(|| Error::format(origin, "parameter data is truncated"))?;
        let (chunk, tail) = rest.split_at(len);
        rest = tail;
        Ok(chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect())
    };
    let mut channels = Vec::with_capacity(channel_count);
    for c in 0..channel_count {
        let mut stack = Vec::new();
        for kind in h.list::<String>(&format!("layers.{c}"))? {
            let layer = match kind.as_str() {
                "phase" | "phase-frozen" => Layer::Phase(PhaseLayer {
                    phi: take(pixels)?,
                    trainable: kind == "phase",
                }),
                "levels" => Layer::Levels(
                    take(pixels)?
                        .into_iter()
                        .map(|v| {
                            if v >= 0.0 && v <= u16::MAX as f64 && v.fract() == 0.0 {
                                Ok(v as u16)
                            } else {
                                Err(Error::format(origin, format!("bad level index {v}")))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
                other => {
                    let tau = other
                        .strip_prefix("codesign@")
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| Error::format(origin, format!("unknown layer kind '{other}'")))?;
                    let k = device
                        .as_ref()
                        .map(|d| d.len())
                        .ok_or_else(|| Error::format(origin, "codesign layer without a device"))?;
                    Layer::Codesign(CodesignLayer {
                        logits: take(pixels * k)?,
                        levels: k,
                        tau,
                    })
                }
            };
            stack.push(layer);
        }
        channels.push(stack);
    }
    if !rest.is_empty() {
        return Err(Error::format(origin, "trailing bytes after the last layer"));
    }
    let model = Model {
        config,
        detector,
        gamma: h.parse("gamma")?,
        channels,
        skips,
        device,
    };
    model.validate().map_err(|e| Error::format(origin, e.to_string()))?;
    Ok(model)
}
