//! On-disk formats: PNG frame directories, Middlebury `.flo` fields, JSON
//! project configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionFunction, FusionSpace};
use crate::raster::{FlowField, Frame, Raster};

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// File name of frame `index` inside a frame directory.
pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

fn parse_frame_index(name: &str) -> Option<usize> {
    let stem = name.strip_suffix(".png")?;
    if stem.len() != 6 || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    stem.parse().ok()
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    let raster = Raster::from_vec(h as usize, w as usize, 3, data)?;
    Frame::new(raster).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let bytes: Vec<u8> = frame
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(frame.width() as u32, frame.height() as u32, bytes)
        .ok_or_else(|| Error::Size("frame buffer does not match its dimensions".into()))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `000000.png, 000001.png, ...` from `dir` in index order.
pub fn read_frame_sequence(dir: &Path) -> Result<Vec<Frame>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(parse_frame_index) {
            indices.push(i);
        }
    }
    if indices.is_empty() {
        return Err(Error::Invalid(format!(
            "no frames named %06d.png in {}",
            dir.display()
        )));
    }
    indices.sort_unstable();
    for (expected, &i) in indices.iter().enumerate() {
        if i != expected {
            return Err(Error::MissingFrame(expected));
        }
    }

    let mut frames: Vec<Frame> = Vec::with_capacity(indices.len());
    for i in indices {
        let path = dir.join(frame_file_name(i));
        let frame = read_frame(&path)?;
        if let Some(first) = frames.first() {
            if first.dims() != frame.dims() {
                return Err(Error::Shape(format!(
                    "{}: {}x{} differs from first frame {}x{}",
                    path.display(),
                    frame.width(),
                    frame.height(),
                    first.width(),
                    first.height()
                )));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_frame_sequence(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(frame_file_name(i)), f)?;
    }
    Ok(())
}

/// Encodes a flow field in the Middlebury `.flo` layout. Values are stored as `f32`.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.dims();
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Size(format!(
            ".flo header needs 12 bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != FLO_MAGIC {
        return Err(Error::Format(format!(
            "bad .flo magic {:?}",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = h * w * 2 * 4;
    let payload = &bytes[12..];
    if payload.len() != expected {
        return Err(Error::Size(format!(
            ".flo header says {w}x{h} ({expected} payload bytes), found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    FlowField::new(Raster::from_vec(h, w, 2, data)?)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Size(m) => Error::Size(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

fn default_radius() -> i64 {
    3
}
fn default_tau() -> f64 {
    0.6
}
fn default_lambda_s() -> f64 {
    100.0
}
fn default_sigma_t() -> f64 {
    2.0
}
fn yes() -> bool {
    true
}

/// A stabilization run described by one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub frame_dir: PathBuf,
    #[serde(default)]
    pub flow_dir: Option<PathBuf>,
    pub warp_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_radius")]
    pub neighborhood_radius: i64,
    #[serde(default)]
    pub fusion_space: FusionSpace,
    #[serde(default)]
    pub fusion_function: FusionFunction,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_tau")]
    pub sharpness_threshold: f64,
    #[serde(default = "default_lambda_s")]
    pub lambda_s: f64,
    #[serde(default = "yes")]
    pub detail_transfer: bool,
    #[serde(default = "yes")]
    pub path_adjust: bool,
    #[serde(default = "default_sigma_t")]
    pub sigma_t: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ProjectConfig {
    /// Config with every optional field at its default.
    pub fn with_paths(frame_dir: PathBuf, warp_dir: PathBuf, output_dir: PathBuf) -> Self {
        ProjectConfig {
            frame_dir,
            flow_dir: None,
            warp_dir,
            output_dir,
            neighborhood_radius: default_radius(),
            fusion_space: FusionSpace::default(),
            fusion_function: FusionFunction::default(),
            checkpoint: None,
            sharpness_threshold: default_tau(),
            lambda_s: default_lambda_s(),
            detail_transfer: true,
            path_adjust: true,
            sigma_t: default_sigma_t(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighborhood_radius < 0 {
            return Err(Error::validation(
                "neighborhood_radius",
                format!("must be >= 0, got {}", self.neighborhood_radius),
            ));
        }
        let tau = self.sharpness_threshold;
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::validation(
                "sharpness_threshold",
                format!("must lie in (0, 1], got {tau}"),
            ));
        }
        if !(self.lambda_s >= 0.0) || !self.lambda_s.is_finite() {
            return Err(Error::validation(
                "lambda_s",
                format!("must be finite and >= 0, got {}", self.lambda_s),
            ));
        }
        if !(self.sigma_t > 0.0) {
            return Err(Error::validation(
                "sigma_t",
                format!("must be > 0, got {}", self.sigma_t),
            ));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.neighborhood_radius.max(0) as usize
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ProjectConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.frame_dir);
        fix(&mut self.warp_dir);
        fix(&mut self.output_dir);
        if let Some(p) = self.flow_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.checkpoint.as_mut() {
            fix(p);
        }
    }
}

/// Loads and validates a config; relative paths resolve against the file's directory.
pub fn load_config(path: &Path) -> Result<ProjectConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ProjectConfig::from_json(&text)?;
    if let Some(base) = path.parent() {
        cfg.resolve_paths(base);
    }
    Ok(cfg)
}
