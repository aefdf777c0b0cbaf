//! Mixed-sample generation and per-token label initialization.
//!
//! Every strategy produces a pixel mask `M` (1 = pixel from the first image)
//! and the exact fraction `lambda` of first-image content. For binary masks
//! lambda is recomputed from pixel counts after clipping, never taken from
//! the sampled proposal.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Matrix, Rng};
use crate::vit::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixStrategy {
    CutMix,
    MixUp,
    RandomPatch,
    BlockWise,
}

impl MixStrategy {
    /// Short name used on the command line and in config files.
    pub fn as_str(self) -> &'static str {
        match self {
            MixStrategy::CutMix => "cutmix",
            MixStrategy::MixUp => "mixup",
            MixStrategy::RandomPatch => "random",
            MixStrategy::BlockWise => "block",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cutmix" => Some(MixStrategy::CutMix),
            "mixup" => Some(MixStrategy::MixUp),
            "random" | "random_patch" => Some(MixStrategy::RandomPatch),
            "block" | "block_wise" => Some(MixStrategy::BlockWise),
            _ => None,
        }
    }
}

/// Pasted rectangle in pixel coordinates: columns `x..x+w`, rows `y..y+h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropRect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Record of one mixing event.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec {
    pub strategy: MixStrategy,
    pub height: usize,
    pub width: usize,
    /// `height x width`, row-major, values in `[0, 1]`.
    pub mask: Vec<f64>,
    pub lambda: f64,
    pub class_a: usize,
    pub class_b: usize,
    /// CutMix only.
    pub crop: Option<CropRect>,
}

impl MixSpec {
    fn is_binary(&self) -> bool {
        self.strategy != MixStrategy::MixUp
    }

    /// Original mixed target `lambda * e_a + (1 - lambda) * e_b`.
    pub fn mixed_target(&self, num_classes: usize) -> Result<Vec<f64>> {
        check_class(self.class_a, num_classes)?;
        check_class(self.class_b, num_classes)?;
        Ok(two_class_row(
            num_classes,
            self.class_a,
            self.class_b,
            self.lambda,
        ))
    }

    /// The "no mixing" spec for a single image: lambda = 1, all-ones mask.
    pub fn unmixed(strategy: MixStrategy, height: usize, width: usize, class: usize) -> Self {
        Self {
            strategy,
            height,
            width,
            mask: vec![1.0; height * width],
            lambda: 1.0,
            class_a: class,
            class_b: class,
            crop: None,
        }
    }
}

fn check_class(class: usize, num_classes: usize) -> Result<()> {
    if class >= num_classes {
        return Err(Error::ClassOutOfRange { class, num_classes });
    }
    Ok(())
}

/// `frac * e_a + (1 - frac) * e_b`. The second entry is computed as `1 - frac`,
/// which makes the two entries sum to exactly 1 in floating point.
fn two_class_row(num_classes: usize, a: usize, b: usize, frac: f64) -> Vec<f64> {
    let mut row = vec![0.0; num_classes];
    if a == b {
        row[a] = 1.0;
    } else {
        row[a] = frac;
        row[b] = 1.0 - frac;
    }
    row
}

fn check_pair(x1: &Image, x2: &Image) -> Result<()> {
    if !x1.same_shape(x2) {
        return Err(Error::ShapeMismatch {
            op: "mix",
            left: (x1.height(), x1.width() * x1.channels()),
            right: (x2.height(), x2.width() * x2.channels()),
        });
    }
    Ok(())
}

/// Pixel-exact composition `M ⊙ x1 + (1 - M) ⊙ x2` for a binary mask.
fn compose_binary(x1: &Image, x2: &Image, mask: &[f64]) -> Image {
    let mut out = x1.clone();
    let c = x1.channels();
    for (p, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            out.pixels_mut()[p * c..(p + 1) * c].copy_from_slice(&x2.pixels()[p * c..(p + 1) * c]);
        }
    }
    out
}

fn lambda_from_mask(mask: &[f64]) -> f64 {
    let ones = mask.iter().filter(|&&m| m == 1.0).count();
    ones as f64 / mask.len() as f64
}

/// Samples a CutMix rectangle: area fraction `1 - u` for `u ~ U(0, 1)`,
/// side lengths scaled by `sqrt(1 - u)`, uniform center, clipped to bounds.
pub fn sample_cutmix_rect(height: usize, width: usize, rng: &mut Rng) -> CropRect {
    let u = rng.uniform();
    let ratio = (1.0 - u).sqrt();
    let cut_w = (width as f64 * ratio).round() as i64;
    let cut_h = (height as f64 * ratio).round() as i64;
    let cx = rng.below(width) as i64;
    let cy = rng.below(height) as i64;
    let x0 = (cx - cut_w / 2).clamp(0, width as i64);
    let x1 = (cx - cut_w / 2 + cut_w).clamp(0, width as i64);
    let y0 = (cy - cut_h / 2).clamp(0, height as i64);
    let y1 = (cy - cut_h / 2 + cut_h).clamp(0, height as i64);
    CropRect {
        x: x0 as usize,
        y: y0 as usize,
        w: (x1 - x0) as usize,
        h: (y1 - y0) as usize,
    }
}

/// Pastes `rect` of `x2` into `x1`.
pub fn cutmix_with_rect(
    x1: &Image,
    x2: &Image,
    class_a: usize,
    class_b: usize,
    rect: CropRect,
) -> Result<(Image, MixSpec)> {
    check_pair(x1, x2)?;
    let (h, w) = (x1.height(), x1.width());
    if rect.x + rect.w > w || rect.y + rect.h > h {
        return Err(Error::InvalidConfig(format!(
            "crop {rect:?} exceeds {h}x{w} image"
        )));
    }
    let mut mask = vec![1.0; h * w];
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            mask[y * w + x] = 0.0;
        }
    }
    let image = compose_binary(x1, x2, &mask);
    let lambda = lambda_from_mask(&mask);
    Ok((
        image,
        MixSpec {
            strategy: MixStrategy::CutMix,
            height: h,
            width: w,
            mask,
            lambda,
            class_a,
            class_b,
            crop: Some(rect),
        },
    ))
}

pub fn cutmix(
    x1: &Image,
    x2: &Image,
    class_a: usize,
    class_b: usize,
    rng: &mut Rng,
) -> Result<(Image, MixSpec)> {
    check_pair(x1, x2)?;
    let rect = sample_cutmix_rect(x1.height(), x1.width(), rng);
    cutmix_with_rect(x1, x2, class_a, class_b, rect)
}

pub fn mixup_with_lambda(
    x1: &Image,
    x2: &Image,
    class_a: usize,
    class_b: usize,
    lambda: f64,
) -> Result<(Image, MixSpec)> {
    check_pair(x1, x2)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "mixup lambda {lambda} outside [0, 1]"
        )));
    }
    let mut image = x1.clone();
    for (o, (&a, &b)) in image
        .pixels_mut()
        .iter_mut()
        .zip(x1.pixels().iter().zip(x2.pixels()))
    {
        *o = (lambda * a as f64 + (1.0 - lambda) * b as f64) as f32;
    }
    let (h, w) = (x1.height(), x1.width());
    Ok((
        image,
        MixSpec {
            strategy: MixStrategy::MixUp,
            height: h,
            width: w,
            mask: vec![lambda; h * w],
            lambda,
            class_a,
            class_b,
            crop: None,
        },
    ))
}

/// Pixel blend with `lambda ~ Beta(alpha, alpha)`.
pub fn mixup(
    x1: &Image,
    x2: &Image,
    class_a: usize,
    class_b: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<(Image, MixSpec)> {
    let lambda = rng.beta(alpha);
    mixup_with_lambda(x1, x2, class_a, class_b, lambda)
}

fn check_grid(image: &Image, unit: usize) -> Result<(usize, usize)> {
    if unit == 0 || !image.height().is_multiple_of(unit) || !image.width().is_multiple_of(unit) {
        return Err(Error::IndivisibleGrid {
            height: image.height(),
            width: image.width(),
            unit,
        });
    }
    Ok((image.height() / unit, image.width() / unit))
}

/// Replaces every grid cell flagged in `from_second` (row-major over the
/// `unit`-pixel grid) with the matching cell of `x2`.
pub fn patch_mix_with_cells(
    x1: &Image,
    x2: &Image,
    class_a: usize,
    class_b: usize,
    unit: usize,
    from_second: &[bool],
    strategy: MixStrategy,
) -> Result<(Image, MixSpec)> {
    check_pair(x1, x2)?;
    let (gh, gw) = check_grid(x1, unit)?;
    if from_second.len() != gh * gw {
        return Err(Error::ShapeMismatch {
            op: "patch_mix",
            left: (gh, gw),
            right: (from_second.len(), 1),
        });
    }
    let (h, w) = (x1.height(), x1.width());
    let mut mask = vec![1.0; h * w];
    for (cell, _) in from_second.iter().enumerate().filter(|(_, &s)| s) {
        let (cy, cx) = (cell / gw, cell % gw);
        for y in cy * unit..(cy + 1) * unit {
            for x in cx * unit..(cx + 1) * unit {
                mask[y * w + x] = 0.0;
            }
        }
    }
    let image = compose_binary(x1, x2, &mask);
    let lambda = lambda_from_mask(&mask);
    Ok((
        image,
        MixSpec {
            strategy,
            height: h,
            width: w,
            mask,
            lambda,
            class_a,
            class_b,
            crop: None,
        },
    ))
}

/// Each grid cell independently comes from `x2` with probability `mix_prob`.
pub fn random_patch_mix(
    x1: &Image,
    x2: &Image,
    class_a: usize,
    class_b: usize,
    mix_prob: f64,
    unit: usize,
    rng: &mut Rng,
) -> Result<(Image, MixSpec)> {
    let (gh, gw) = check_grid(x1, unit)?;
    let cells: Vec<bool> = (0..gh * gw).map(|_| rng.bernoulli(mix_prob)).collect();
    patch_mix_with_cells(
        x1,
        x2,
        class_a,
        class_b,
        unit,
        &cells,
        MixStrategy::RandomPatch,
    )
}

const BLOCK_MIN_ASPECT: f64 = 0.3;
const BLOCK_AREA_LO: f64 = 0.16;
const BLOCK_AREA_HI: f64 = 0.25;
const BLOCK_ATTEMPTS: usize = 10;

/// BEiT-style block sampler over a `rows x cols` grid. Rectangles with aspect
/// ratio in `[0.3, 1/0.3]` and area between 16% and 25% of the remaining
/// budget (at least one cell) are placed until `round(budget * cells)` cells
/// are flagged. A block is accepted only if it adds new cells without
/// overshooting the budget.
pub fn sample_block_cells(rows: usize, cols: usize, budget: f64, rng: &mut Rng) -> Vec<bool> {
    let total = rows * cols;
    let target = ((budget.clamp(0.0, 1.0)) * total as f64).round() as usize;
    let mut flagged = vec![false; total];
    let mut count = 0;
    let log_lo = BLOCK_MIN_ASPECT.ln();
    let log_hi = (1.0 / BLOCK_MIN_ASPECT).ln();
    while count < target {
        let remaining = target - count;
        let mut added = 0;
        for _ in 0..BLOCK_ATTEMPTS {
            let lo = (BLOCK_AREA_LO * remaining as f64).max(1.0);
            let hi = (BLOCK_AREA_HI * remaining as f64).max(1.0);
            let area = rng.uniform_in(lo, hi);
            let aspect = rng.uniform_in(log_lo, log_hi).exp();
            let h = ((area * aspect).sqrt().round() as usize).max(1);
            let w = ((area / aspect).sqrt().round() as usize).max(1);
            if h > rows || w > cols {
                continue;
            }
            let top = rng.below(rows - h + 1);
            let left = rng.below(cols - w + 1);
            let fresh = (top..top + h)
                .flat_map(|y| (left..left + w).map(move |x| y * cols + x))
                .filter(|&i| !flagged[i])
                .count();
            if fresh > 0 && fresh <= remaining {
                for y in top..top + h {
                    for x in left..left + w {
                        flagged[y * cols + x] = true;
                    }
                }
                added = fresh;
                break;
            }
        }
        if added == 0 {
            break;
        }
        count += added;
    }
    flagged
}

/// Swaps contiguous blocks of grid cells until `budget` of the cells come
/// from `x2`.
pub fn block_wise_mix(
    x1: &Image,
    x2: &Image,
    class_a: usize,
    class_b: usize,
    budget: f64,
    unit: usize,
    rng: &mut Rng,
) -> Result<(Image, MixSpec)> {
    let (gh, gw) = check_grid(x1, unit)?;
    let cells = sample_block_cells(gh, gw, budget, rng);
    patch_mix_with_cells(
        x1,
        x2,
        class_a,
        class_b,
        unit,
        &cells,
        MixStrategy::BlockWise,
    )
}

/// Initial label map `Y^0`, `(N+1) x C`.
///
/// Row 0 (class token) is `lambda e_a + (1 - lambda) e_b`. Patch row `i` uses
/// the fraction of that patch's pixels taken from the first image; for MixUp
/// every row equals the class-token row.
pub fn init_label_map(spec: &MixSpec, config: &ModelConfig) -> Result<Matrix<f64>> {
    let c = config.num_classes;
    check_class(spec.class_a, c)?;
    check_class(spec.class_b, c)?;
    if spec.height != config.image_size || spec.width != config.image_size {
        return Err(Error::ShapeMismatch {
            op: "init_label_map",
            left: (spec.height, spec.width),
            right: (config.image_size, config.image_size),
        });
    }
    let n = config.num_patches();
    let mut y = Matrix::zeros(n + 1, c);
    let cls_row = two_class_row(c, spec.class_a, spec.class_b, spec.lambda);
    y.row_mut(0).copy_from_slice(&cls_row);
    let p = config.patch_size;
    let grid = config.grid();
    let per_patch = (p * p) as f64;
    for gy in 0..grid {
        for gx in 0..grid {
            let frac = if spec.is_binary() {
                let mut ones = 0usize;
                for yy in gy * p..(gy + 1) * p {
                    for xx in gx * p..(gx + 1) * p {
                        if spec.mask[yy * spec.width + xx] == 1.0 {
                            ones += 1;
                        }
                    }
                }
                ones as f64 / per_patch
            } else {
                spec.lambda
            };
            let row = two_class_row(c, spec.class_a, spec.class_b, frac);
            y.row_mut(1 + gy * grid + gx).copy_from_slice(&row);
        }
    }
    Ok(y)
}

/// Writes `<stem>.pgm` (8-bit grayscale, channel mean) and `<stem>.txt`
/// listing strategy, lambda, classes and the crop rectangle.
pub fn dump_mixed_sample(dir: &Path, stem: &str, image: &Image, spec: &MixSpec) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut pgm = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    pgm.extend(
        image
            .luminance()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(dir.join(format!("{stem}.pgm")), pgm)?;

    let mut text = String::new();
    let _ = writeln!(text, "strategy {}", spec.strategy.as_str());
    let _ = writeln!(text, "lambda {}", spec.lambda);
    let _ = writeln!(text, "class_a {}", spec.class_a);
    let _ = writeln!(text, "class_b {}", spec.class_b);
    match spec.crop {
        Some(r) => {
            let _ = writeln!(text, "crop {} {} {} {}", r.x, r.y, r.w, r.h);
        }
        None => {
            let _ = writeln!(text, "crop none");
        }
    }
    std::fs::write(dir.join(format!("{stem}.txt")), text)?;
    Ok(())
}
