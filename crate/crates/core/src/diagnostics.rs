//! Token presence, target error and mixing-ratio estimates.

use std::io::Write;

use serde::Serialize;

use crate::align::{align_forward, AlignPlan};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mixing::{init_label_map, MixSpec};
use crate::numerics::{Matrix, Real};
use crate::vit::{model_forward, ModelParams};

/// Per-token presence after one spatial mixing step.
#[derive(Clone, Debug, PartialEq)]
pub struct PresenceReport {
    pub presence: Vec<f64>,
    /// Token grid `(rows, cols)` when known.
    pub grid: Option<(usize, usize)>,
    /// Tokens far enough from the border that padding never reaches them.
    /// Empty when `grid` is `None`.
    pub interior: Vec<bool>,
}

impl PresenceReport {
    pub fn spread(&self) -> f64 {
        let max = self
            .presence
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self.presence.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Presence of every source column of `w` (`outputs x sources`):
/// `p_i = Σ_j |w_ji| / Σ_k |w_jk|`.
pub fn source_presence(w: &Matrix<f64>) -> Result<Vec<f64>> {
    let mut p = vec![0.0; w.cols()];
    for j in 0..w.rows() {
        let row = w.row(j);
        let total: f64 = row.iter().map(|v| v.abs()).sum();
        if total == 0.0 || !total.is_finite() {
            return Err(Error::ZeroRow { row: j });
        }
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi += v.abs() / total;
        }
    }
    Ok(p)
}

/// Presence under the mixing `ẑ_j = Σ_k W_jk z_k` for square `W`.
pub fn token_presence(w: &Matrix<f64>) -> Result<PresenceReport> {
    if w.rows() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "token_presence",
            left: w.shape(),
            right: (w.cols(), w.cols()),
        });
    }
    Ok(PresenceReport {
        presence: source_presence(w)?,
        grid: None,
        interior: Vec::new(),
    })
}

/// Non-strided depthwise convolution over a token grid with zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDescriptor {
    /// `M x M`, `M` odd.
    pub kernel: Matrix<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl ConvDescriptor {
    pub fn new(kernel: Matrix<f64>, rows: usize, cols: usize) -> Result<Self> {
        let m = kernel.rows();
        if m != kernel.cols() || m.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel must be square with odd size, got {:?}",
                kernel.shape()
            )));
        }
        if rows < m || cols < m {
            return Err(Error::InvalidConfig(format!(
                "grid {rows}x{cols} smaller than kernel {m}x{m}"
            )));
        }
        Ok(Self { kernel, rows, cols })
    }

    pub fn radius(&self) -> usize {
        self.kernel.rows() / 2
    }

    pub fn interior_mask(&self) -> Vec<bool> {
        let r = self.radius();
        (0..self.rows * self.cols)
            .map(|t| {
                let (y, x) = (t / self.cols, t % self.cols);
                y >= r && x >= r && y + r < self.rows && x + r < self.cols
            })
            .collect()
    }

    /// Matrix over the zero-padded grid: `N x (rows + 2r)(cols + 2r)`, padding
    /// positions included as explicit (always zero) sources.
    fn padded_matrix(&self) -> (Matrix<f64>, usize) {
        let r = self.radius();
        let m = self.kernel.rows();
        let pc = self.cols + 2 * r;
        let n = self.rows * self.cols;
        let mut t = Matrix::zeros(n, (self.rows + 2 * r) * pc);
        for j in 0..n {
            let (jy, jx) = (j / self.cols, j % self.cols);
            for ky in 0..m {
                for kx in 0..m {
                    // source at (jy + ky - r, jx + kx - r) in grid coordinates
                    t[(j, (jy + ky) * pc + jx + kx)] = self.kernel[(ky, kx)];
                }
            }
        }
        (t, pc)
    }
}

/// `N x N` matrix `T(K)` with `ẑ = T(K) z` equal to the zero-padded
/// convolution of the token grid.
pub fn conv_mixing_matrix(desc: &ConvDescriptor) -> Matrix<f64> {
    let (padded, pc) = desc.padded_matrix();
    let r = desc.radius();
    let n = desc.rows * desc.cols;
    let mut t = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let (iy, ix) = (i / desc.cols, i % desc.cols);
            t[(j, i)] = padded[(j, (iy + r) * pc + ix + r)];
        }
    }
    t
}

/// Presence of real tokens under a convolution, counting padding positions
/// as sources so each output distributes unit mass over the full kernel.
pub fn conv_presence(desc: &ConvDescriptor) -> Result<PresenceReport> {
    let (padded, pc) = desc.padded_matrix();
    let all = source_presence(&padded)?;
    let r = desc.radius();
    let presence = (0..desc.rows * desc.cols)
        .map(|i| {
            let (iy, ix) = (i / desc.cols, i % desc.cols);
            all[(iy + r) * pc + ix + r]
        })
        .collect();
    Ok(PresenceReport {
        presence,
        grid: Some((desc.rows, desc.cols)),
        interior: desc.interior_mask(),
    })
}

/// Root mean square difference over all classes.
pub fn target_rmse(original: &[f64], aligned: &[f64]) -> f64 {
    assert_eq!(original.len(), aligned.len(), "target lengths differ");
    let sum: f64 = original
        .iter()
        .zip(aligned)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (sum / original.len() as f64).sqrt()
}

/// Root mean square difference over the two mixed classes only.
pub fn target_rmse_active(original: &[f64], aligned: &[f64], a: usize, b: usize) -> f64 {
    let classes: &[usize] = if a == b { &[a] } else { &[a, b] };
    let sum: f64 = classes
        .iter()
        .map(|&k| (original[k] - aligned[k]).powi(2))
        .sum();
    (sum / classes.len() as f64).sqrt()
}

pub fn mean_target_rmse<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (o, a) in pairs {
        sum += target_rmse(o, a);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn check_norms<T: Real>(m: &Matrix<T>) -> Result<Matrix<f64>> {
    let m = m.cast::<f64>();
    for i in 0..m.rows() {
        if m.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm { token: i });
        }
    }
    Ok(m)
}

/// Similarity-based mixing ratio of token `token` of the mixed sample:
/// softmax of its maximum cosine similarity to the tokens of each source.
pub fn similarity_ratio<T: Real>(
    mixed: &Matrix<T>,
    first: &Matrix<T>,
    second: &Matrix<T>,
    token: usize,
) -> Result<f64> {
    if token >= mixed.rows() {
        return Err(Error::InvalidConfig(format!(
            "token {token} out of range for {} tokens",
            mixed.rows()
        )));
    }
    if first.cols() != mixed.cols() || second.cols() != mixed.cols() {
        return Err(Error::ShapeMismatch {
            op: "similarity_ratio",
            left: first.shape(),
            right: second.shape(),
        });
    }
    let z: Vec<f64> = mixed.row(token).iter().map(|v| v.as_f64()).collect();
    if z.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroNorm { token });
    }
    let best = |m: &Matrix<f64>| {
        (0..m.rows())
            .map(|j| cosine(&z, m.row(j)))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let s1 = best(&check_norms(first)?);
    let s2 = best(&check_norms(second)?);
    // two-way softmax, written to stay finite for any s1 - s2
    Ok(1.0 / (1.0 + (s2 - s1).exp()))
}

/// Per-layer mixing-ratio estimates for the class token, `L + 1` entries each.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioTrajectory {
    pub tl_align: Vec<f64>,
    pub similarity: Vec<f64>,
    pub fixed: Vec<f64>,
}

impl RatioTrajectory {
    pub fn len(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }
}

/// Runs the model on the mixed image and both sources, aligns labels, and
/// reports the class-token ratio per layer.
pub fn ratio_trajectory<T: Real>(
    params: &ModelParams<T>,
    mixed: &Image,
    first: &Image,
    second: &Image,
    spec: &MixSpec,
) -> Result<RatioTrajectory> {
    let out = model_forward(mixed, params)?;
    let out1 = model_forward(first, params)?;
    let out2 = model_forward(second, params)?;
    let y0 = init_label_map(spec, &params.config)?;
    let aligned = align_forward(&y0, &out.attention, &AlignPlan::for_model(&params.config))?;
    let tl_align = aligned.class_token_mass(spec.class_a);
    let snaps = out.trace.token_snapshots();
    let snaps1 = out1.trace.token_snapshots();
    let snaps2 = out2.trace.token_snapshots();
    let similarity = (0..snaps.len())
        .map(|l| similarity_ratio(snaps[l], snaps1[l], snaps2[l], 0))
        .collect::<Result<Vec<_>>>()?;
    Ok(RatioTrajectory {
        fixed: vec![spec.lambda; tl_align.len()],
        tl_align,
        similarity,
    })
}

/// One diagnostics line per (sample, layer).
#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryRecord {
    pub kind: &'static str,
    pub sample: usize,
    pub layer: usize,
    pub lambda_tl_align: f64,
    pub lambda_similarity: f64,
    pub lambda_fixed: f64,
}

impl TrajectoryRecord {
    pub fn from_trajectory(sample: usize, t: &RatioTrajectory) -> Vec<Self> {
        (0..t.len())
            .map(|layer| Self {
                kind: "trajectory",
                sample,
                layer,
                lambda_tl_align: t.tl_align[layer],
                lambda_similarity: t.similarity[layer],
                lambda_fixed: t.fixed[layer],
            })
            .collect()
    }
}

/// One diagnostics line per model.
#[derive(Clone, Debug, Serialize)]
pub struct RmseRecord {
    pub kind: &'static str,
    pub model: String,
    pub samples: usize,
    pub mean_rmse: f64,
    pub mean_rmse_active: f64,
}

/// Serializes `value` as one JSON object followed by a newline.
pub fn write_json_line<S: Serialize>(out: &mut impl Write, value: &S) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::{cutmix_with_rect, CropRect};
    use crate::numerics::Rng;
    use crate::vit::{AttentionMode, ModelConfig, Pooling};
    use proptest::prelude::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn presence_examples() {
        let p = token_presence(&Matrix::identity(5)).unwrap();
        assert_eq!(p.presence, vec![1.0; 5]);
        let w = Matrix::from_rows(&[[0.9, 0.1], [0.9, 0.1]]);
        assert_close(&token_presence(&w).unwrap().presence, &[1.8, 0.2], 1e-15);
        let perm = Matrix::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(token_presence(&perm).unwrap().presence, vec![1.0; 3]);
        let zero = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(
            token_presence(&zero),
            Err(Error::ZeroRow { row: 1 })
        ));
        // signed weights count by magnitude
        let signed = Matrix::from_rows(&[[-1.0, 1.0], [0.0, 2.0]]);
        assert_close(&token_presence(&signed).unwrap().presence, &[0.5, 1.5], 0.0);
    }

    #[test]
    fn conv_matrix_examples() {
        let d = ConvDescriptor::new(Matrix::from_rows(&[[3.0]]), 4, 4).unwrap();
        assert_eq!(conv_mixing_matrix(&d), Matrix::identity(16).scale(3.0));

        // brute-force convolution against T(K) z
        let mut rng = Rng::new(1);
        let k = Matrix::from_vec(3, 3, (0..9).map(|_| rng.uniform()).collect()).unwrap();
        let d = ConvDescriptor::new(k.clone(), 5, 4).unwrap();
        let z: Vec<f64> = (0..20).map(|_| rng.normal(0.0, 1.0)).collect();
        let t = conv_mixing_matrix(&d);
        for j in 0..20 {
            let (jy, jx) = ((j / 4) as i64, (j % 4) as i64);
            let mut direct = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (y, x) = (jy + dy, jx + dx);
                    if (0..5).contains(&y) && (0..4).contains(&x) {
                        direct +=
                            k[((dy + 1) as usize, (dx + 1) as usize)] * z[(y * 4 + x) as usize];
                    }
                }
            }
            let via_t: f64 = (0..20).map(|i| t[(j, i)] * z[i]).sum();
            assert!((direct - via_t).abs() < 1e-12);
        }
        assert!(ConvDescriptor::new(Matrix::filled(2, 2, 1.0), 5, 5).is_err());
        assert!(ConvDescriptor::new(Matrix::filled(5, 5, 1.0), 4, 8).is_err());
    }

    #[test]
    fn conv_presence_interior_and_edges() {
        let d = ConvDescriptor::new(Matrix::filled(3, 3, 1.0), 5, 5).unwrap();
        let r = conv_presence(&d).unwrap();
        assert_eq!(r.interior.iter().filter(|&&i| i).count(), 9);
        for (p, &inside) in r.presence.iter().zip(&r.interior) {
            if inside {
                assert!((p - 1.0).abs() < 1e-12);
            } else {
                assert!(*p < 1.0);
            }
        }
        // corner: reached by 4 outputs, each giving 1/9
        assert!((r.presence[0] - 4.0 / 9.0).abs() < 1e-15);

        // the plain N x N matrix renormalizes truncated rows instead
        let plain = token_presence(&conv_mixing_matrix(&d)).unwrap();
        assert!((plain.presence.iter().sum::<f64>() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(target_rmse(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(target_rmse(&[1.0, 0.0], &[0.5, 0.5]), 0.5);
        let o = [0.0, 0.6, 0.0, 0.4];
        let a = [0.0, 0.5, 0.0, 0.5];
        let full = target_rmse(&o, &a);
        let active = target_rmse_active(&o, &a, 1, 3);
        assert!((active / full - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            mean_target_rmse([(&o[..], &a[..]), (&o[..], &o[..])]),
            full / 2.0
        );
    }

    #[test]
    fn similarity_examples() {
        let mixed = Matrix::from_rows(&[[1.0, 0.0, 0.0]]);
        let first = Matrix::from_rows(&[[0.0, 2.0, 0.0], [3.0, 0.0, 0.0]]);
        let second = Matrix::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let e = std::f64::consts::E;
        let got = similarity_ratio(&mixed, &first, &second, 0).unwrap();
        assert!((got - e / (e + 1.0)).abs() < 1e-15);
        assert!((got - 0.7311).abs() < 1e-4);
        let same = similarity_ratio(&mixed, &first, &first, 0).unwrap();
        assert_eq!(same, 0.5);
        let zero = Matrix::from_rows(&[[0.0, 0.0, 0.0]]);
        assert!(matches!(
            similarity_ratio(&zero, &first, &second, 0),
            Err(Error::ZeroNorm { token: 0 })
        ));
    }

    fn tiny_model(mode: AttentionMode) -> ModelParams<f64> {
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 2,
            channels: 1,
            depth: 3,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            pooling: Pooling::ClassToken,
        };
        ModelParams::init(&cfg, &mut Rng::new(3))
            .unwrap()
            .with_attention(mode)
    }

    fn sample(rng: &mut Rng) -> (Image, Image) {
        let mut img =
            || Image::new(8, 8, 1, (0..64).map(|_| rng.uniform() as f32).collect()).unwrap();
        (img(), img())
    }

    #[test]
    fn trajectory_shapes_and_identity_model() {
        let mut rng = Rng::new(9);
        let (x1, x2) = sample(&mut rng);
        let rect = CropRect {
            x: 1,
            y: 2,
            w: 5,
            h: 3,
        };
        let (mixed, spec) = cutmix_with_rect(&x1, &x2, 0, 2, rect).unwrap();

        let id = tiny_model(AttentionMode::Identity);
        let t = ratio_trajectory(&id, &mixed, &x1, &x2, &spec).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.tl_align, vec![spec.lambda; 4]);
        assert_eq!(t.fixed, vec![spec.lambda; 4]);

        let soft = tiny_model(AttentionMode::Softmax);
        let t = ratio_trajectory(&soft, &mixed, &x1, &x2, &spec).unwrap();
        assert_eq!(t.tl_align[0], spec.lambda);
        for v in t.tl_align.iter().chain(&t.similarity) {
            assert!((0.0..=1.0).contains(v));
        }
        let records = TrajectoryRecord::from_trajectory(5, &t);
        let mut buf = Vec::new();
        for r in &records {
            write_json_line(&mut buf, r).unwrap();
        }
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn softmax_attention_fluctuates() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let data = (0..256).map(|_| rng.normal(0.0, 1.0)).collect();
            let a = Matrix::from_vec(16, 16, data).unwrap().softmax_rows();
            assert!(token_presence(&a).unwrap().spread() > 0.0);
        }
    }

    proptest! {
        #[test]
        fn presence_sums_to_token_count(data in proptest::collection::vec(-5.0f64..5.0, 36)) {
            let mut w = Matrix::from_vec(6, 6, data).unwrap();
            w[(0, 0)] = 1.0; // keeps every row nonzero in practice
            if let Ok(r) = token_presence(&w) {
                prop_assert!((r.presence.iter().sum::<f64>() - 6.0).abs() < 1e-9);
                prop_assert!(r.presence.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn conv_interior_presence_is_one(seed in any::<u64>(), big in any::<bool>(),
                                         rows in 5usize..9, cols in 5usize..9) {
            let m = if big { 5 } else { 3 };
            let mut rng = Rng::new(seed);
            let k = Matrix::from_vec(m, m, (0..m * m).map(|_| rng.uniform() + 1e-3).collect())
                .unwrap();
            let d = ConvDescriptor::new(k, rows, cols).unwrap();
            let r = conv_presence(&d).unwrap();
            for (p, &inside) in r.presence.iter().zip(&r.interior) {
                if inside {
                    prop_assert!((p - 1.0).abs() < 1e-9);
                } else {
                    prop_assert!(*p < 1.0);
                }
            }
        }

        #[test]
        fn rmse_is_a_metric(seed in any::<u64>(), c in 2usize..8) {
            let mut rng = Rng::new(seed);
            let mut v = || {
                let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 1e-6).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (a, b, x) = (v(), v(), v());
            prop_assert_eq!(target_rmse(&a, &b), target_rmse(&b, &a));
            prop_assert_eq!(target_rmse(&a, &a), 0.0);
            prop_assert!(target_rmse(&a, &b) > 0.0 || a == b);
            prop_assert!(target_rmse(&a, &b) <= target_rmse(&a, &x) + target_rmse(&x, &b) + 1e-12);
        }
    }
}
