//! IDX ingestion and procedural texture datasets.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::Serialize;
use tlalign::trainer::Examples;
use tlalign::{Image, Rng};

use crate::{file_error, CliError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MAX_SYNTH_CLASSES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn examples(&self) -> Examples<'_> {
        Examples {
            images: &self.images,
            labels: &self.labels,
        }
    }

    /// Keeps the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(CliError::Invalid(format!(
                "{:?} split is empty",
                self.split
            )));
        }
        if self.images.len() != self.labels.len() {
            return Err(CliError::Invalid(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.num_classes)
        {
            return Err(CliError::Invalid(format!(
                "label {l} at index {i} exceeds {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Reads a file, transparently inflating `.gz`.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(file_error(path))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(file_error(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::Idx {
                file: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                message: format!(
                    "truncated {what}: needed {n} bytes from offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let got = self.u32("magic")?;
        if got != expected {
            return Err(CliError::Idx {
                file: self.path.to_path_buf(),
                offset: 0,
                message: format!("wrong magic 0x{got:08x}, expected 0x{expected:08x}"),
            });
        }
        Ok(())
    }
}

/// Parsed IDX image file: raw bytes, row-major per image.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<u8>>,
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = read_bytes(path)?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    c.magic(IMAGE_MAGIC)?;
    let count = c.u32("image count")? as usize;
    let rows = c.u32("row count")? as usize;
    let cols = c.u32("column count")? as usize;
    let mut pixels = Vec::with_capacity(count);
    for i in 0..count {
        pixels.push(c.take(rows * cols, &format!("image {i}"))?.to_vec());
    }
    Ok(IdxImages { rows, cols, pixels })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    c.magic(LABEL_MAGIC)?;
    let count = c.u32("label count")? as usize;
    Ok(c.take(count, "labels")?.to_vec())
}

/// Loads an IDX image/label pair. Pixels are scaled by 1/255 and, when
/// `pad_to` is given, centered on a zero canvas of that size.
pub fn load_idx(
    images: &Path,
    labels: &Path,
    split: Split,
    num_classes: usize,
    pad_to: Option<usize>,
) -> Result<Dataset> {
    let raw = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if raw.pixels.len() != lab.len() {
        return Err(CliError::Idx {
            file: labels.to_path_buf(),
            offset: 4,
            message: format!(
                "count mismatch: {} labels for {} images in {}",
                lab.len(),
                raw.pixels.len(),
                images.display()
            ),
        });
    }
    let mut out = Vec::with_capacity(lab.len());
    for px in &raw.pixels {
        let data = px.iter().map(|&b| b as f32 / 255.0).collect();
        let img = Image::new(raw.rows, raw.cols, 1, data)?;
        out.push(match pad_to {
            Some(s) if s != raw.rows || s != raw.cols => img.pad_to(s)?,
            _ => img,
        });
    }
    let ds = Dataset {
        images: out,
        labels: lab.into_iter().map(usize::from).collect(),
        num_classes,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

/// Parameters of a procedural dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

/// Texture of class `k` at pixel `(y, x)` for a sample phase, in `[-1, 1]`.
/// Even classes are oriented stripes, odd classes checkerboards.
fn texture(k: usize, y: usize, x: usize, phase: f64) -> f64 {
    let (yf, xf) = (y as f64, x as f64);
    if k.is_multiple_of(2) {
        let angle = (k / 2) as f64 * std::f64::consts::PI / 8.0;
        let period = 3.0 + (k / 2 % 3) as f64;
        let t = xf * angle.cos() + yf * angle.sin();
        (std::f64::consts::TAU * t / period + phase).sin()
    } else {
        let cell = 1 + k / 2 % 4;
        let shift = (phase * 4.0) as usize;
        if ((y + shift) / cell + (x + shift) / cell).is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }
}

/// Generates `classes * per_class` images, interleaved by class.
///
/// Each class sits on its own brightness level with a texture amplitude
/// small enough that, without noise, pixel ranges of different classes
/// never overlap.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > MAX_SYNTH_CLASSES {
        return Err(CliError::Invalid(format!(
            "synthetic class count must be in 1..={MAX_SYNTH_CLASSES}, got {}",
            spec.classes
        )));
    }
    if spec.per_class == 0 || spec.size == 0 || spec.channels == 0 {
        return Err(CliError::Invalid("synthetic dataset would be empty".into()));
    }
    let split_id = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = Rng::stream(spec.seed, split_id);
    let step = 0.6 / spec.classes as f64;
    let amplitude = 0.4 * step;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for _ in 0..spec.per_class {
        for k in 0..spec.classes {
            let level = 0.2 + step * (k as f64 + 0.5);
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            let mut img = Image::zeros(spec.size, spec.size, spec.channels);
            for y in 0..spec.size {
                for x in 0..spec.size {
                    let base = level + amplitude * texture(k, y, x, phase);
                    for c in 0..spec.channels {
                        let n = if spec.noise > 0.0 {
                            rng.normal(0.0, spec.noise)
                        } else {
                            0.0
                        };
                        img.set(y, x, c, (base + n).clamp(0.0, 1.0) as f32);
                    }
                }
            }
            images.push(img);
            labels.push(k);
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: spec.classes,
        split,
    })
}
