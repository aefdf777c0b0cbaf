//! Token-label alignment.
//!
//! A label map `Y` holds one probability row per token. Every operation of
//! the network has a label counterpart: spatial mixing multiplies `Y` by the
//! row-normalized mixing matrix, channel mixing and pointwise maps leave it
//! unchanged, residual branches average, and token merging sums then
//! renormalizes. Labels always propagate in `f64`.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::vit::{AttentionTrace, ModelConfig, Pooling};

fn check_heads(y: &Matrix<f64>, heads: &[Matrix<f64>]) -> Result<()> {
    if heads.is_empty() {
        return Err(Error::InvalidConfig("no attention heads".into()));
    }
    for a in heads {
        if a.rows() != a.cols() || a.cols() != y.rows() {
            return Err(Error::ShapeMismatch {
                op: "align_spatial",
                left: a.shape(),
                right: y.shape(),
            });
        }
    }
    Ok(())
}

/// `(1/H) Σ_h A_h · Y`.
pub fn align_spatial(y: &Matrix<f64>, heads: &[Matrix<f64>]) -> Result<Matrix<f64>> {
    check_heads(y, heads)?;
    let mut mean = heads[0].clone();
    for a in &heads[1..] {
        mean.add_assign(a)?;
    }
    let h = heads.len() as f64;
    let mean = mean.map(|v| v / h);
    mean.matmul(y)
}

/// The four label states of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSteps {
    /// After the attention mixing.
    pub spatial: Matrix<f64>,
    /// After the attention residual and renormalization.
    pub attn_residual: Matrix<f64>,
    /// After the MLP, which leaves labels unchanged.
    pub channel: Matrix<f64>,
    /// After the MLP residual.
    pub mlp_residual: Matrix<f64>,
}

pub fn align_block_steps(y: &Matrix<f64>, heads: &[Matrix<f64>]) -> Result<BlockSteps> {
    let spatial = align_spatial(y, heads)?;
    let attn_residual = spatial.add(y)?.row_normalize()?;
    let channel = attn_residual.clone();
    let mlp_residual = channel.add(&attn_residual)?.row_normalize()?;
    Ok(BlockSteps {
        spatial,
        attn_residual,
        channel,
        mlp_residual,
    })
}

/// `Y^l` from `Y^{l-1}` and the attention heads of layer `l`.
pub fn align_block(y: &Matrix<f64>, heads: &[Matrix<f64>]) -> Result<Matrix<f64>> {
    Ok(align_block_steps(y, heads)?.mlp_residual)
}

fn check_partition(groups: &[Vec<usize>], lo: usize, hi: usize) -> Result<()> {
    let mut seen = vec![false; hi - lo];
    for g in groups {
        if g.is_empty() {
            return Err(Error::NonPartition("empty group".into()));
        }
        for &i in g {
            if i < lo || i >= hi {
                return Err(Error::NonPartition(format!("index {i} outside {lo}..{hi}")));
            }
            if std::mem::replace(&mut seen[i - lo], true) {
                return Err(Error::NonPartition(format!("index {i} appears twice")));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::NonPartition(format!(
            "index {} not covered",
            missing + lo
        )));
    }
    Ok(())
}

fn merge_rows(y: &Matrix<f64>, groups: &[Vec<usize>], out: &mut Matrix<f64>, offset: usize) {
    for (g, members) in groups.iter().enumerate() {
        let row = out.row_mut(offset + g);
        for &i in members {
            for (o, &v) in row.iter_mut().zip(y.row(i)) {
                *o += v;
            }
        }
    }
}

/// Merges spatial label rows. `groups` index token rows `1..rows` and must
/// partition them; row 0 (class token) passes through unchanged.
pub fn align_aggregate(y: &Matrix<f64>, groups: &[Vec<usize>]) -> Result<Matrix<f64>> {
    check_partition(groups, 1, y.rows())?;
    let mut out = Matrix::zeros(groups.len() + 1, y.cols());
    out.row_mut(0).copy_from_slice(y.row(0));
    merge_rows(y, groups, &mut out, 1);
    let cls = out.row(0).to_vec();
    let mut out = out.row_normalize()?;
    out.row_mut(0).copy_from_slice(&cls);
    Ok(out)
}

/// Label-side description of one network operation.
#[derive(Clone, Debug, PartialEq)]
pub enum OpDescriptor {
    /// Token mixing `Z ← W Z`; `matrix` is `tokens x tokens`.
    SpatialMixing {
        matrix: Matrix<f64>,
    },
    ChannelMixing,
    Pointwise,
    /// `Z ← Z + g(Z)` with `g` the composition of `inner`.
    Residual {
        inner: Vec<OpDescriptor>,
    },
    /// Merges token rows; `groups` partition `0..tokens`.
    SpatialAggregation {
        groups: Vec<Vec<usize>>,
    },
}

pub fn align_generic(y: &Matrix<f64>, op: &OpDescriptor) -> Result<Matrix<f64>> {
    match op {
        OpDescriptor::SpatialMixing { matrix } => {
            if matrix.rows() != matrix.cols() || matrix.cols() != y.rows() {
                return Err(Error::ShapeMismatch {
                    op: "align_generic",
                    left: matrix.shape(),
                    right: y.shape(),
                });
            }
            matrix.row_normalize()?.matmul(y)
        }
        OpDescriptor::ChannelMixing | OpDescriptor::Pointwise => Ok(y.clone()),
        OpDescriptor::Residual { inner } => {
            let mut g = y.clone();
            for op in inner {
                g = align_generic(&g, op)?;
            }
            if g.shape() != y.shape() {
                return Err(Error::ShapeMismatch {
                    op: "residual",
                    left: g.shape(),
                    right: y.shape(),
                });
            }
            y.add(&g)?.row_normalize()
        }
        OpDescriptor::SpatialAggregation { groups } => {
            check_partition(groups, 0, y.rows())?;
            let mut out = Matrix::zeros(groups.len(), y.cols());
            merge_rows(y, groups, &mut out, 0);
            out.row_normalize()
        }
    }
}

/// Token merge inserted after a given layer (1-based; 0 merges the input).
#[derive(Clone, Debug, PartialEq)]
pub struct Merge {
    pub after_layer: usize,
    pub groups: Vec<Vec<usize>>,
}

/// What `align_forward` needs to know about the network.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignPlan {
    pub depth: usize,
    pub pooling: Pooling,
    pub merges: Vec<Merge>,
}

impl AlignPlan {
    pub fn for_model(config: &ModelConfig) -> Self {
        Self {
            depth: config.depth,
            pooling: config.pooling,
            merges: Vec::new(),
        }
    }
}

/// Result of propagating a label map through the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTarget {
    pub y_align: Vec<f64>,
    /// `Y^0 .. Y^L`.
    pub snapshots: Vec<Matrix<f64>>,
}

impl AlignedTarget {
    /// Mass of class `class` in the class-token row at each layer.
    pub fn class_token_mass(&self, class: usize) -> Vec<f64> {
        self.snapshots.iter().map(|y| y[(0, class)]).collect()
    }
}

pub fn align_forward(
    y0: &Matrix<f64>,
    trace: &AttentionTrace,
    plan: &AlignPlan,
) -> Result<AlignedTarget> {
    if trace.num_layers() != plan.depth {
        return Err(Error::LayerCountMismatch {
            expected: plan.depth,
            got: trace.num_layers(),
        });
    }
    if let Some(m) = plan.merges.iter().find(|m| m.after_layer > plan.depth) {
        return Err(Error::InvalidConfig(format!(
            "merge after layer {} in a {}-layer network",
            m.after_layer, plan.depth
        )));
    }
    let apply_merges = |y: Matrix<f64>, layer: usize| -> Result<Matrix<f64>> {
        plan.merges
            .iter()
            .filter(|m| m.after_layer == layer)
            .try_fold(y, |y, m| align_aggregate(&y, &m.groups))
    };
    let mut snapshots = Vec::with_capacity(plan.depth + 1);
    let mut y = apply_merges(y0.clone(), 0)?;
    snapshots.push(y.clone());
    for l in 0..plan.depth {
        y = align_block(&y, trace.heads(l))?;
        y = apply_merges(y, l + 1)?;
        snapshots.push(y.clone());
    }
    let y_align = match plan.pooling {
        Pooling::ClassToken => y.row(0).to_vec(),
        Pooling::GlobalPool => {
            let n = (y.rows() - 1) as f64;
            let mut mean = vec![0.0; y.cols()];
            for i in 1..y.rows() {
                for (m, &v) in mean.iter_mut().zip(y.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            mean
        }
    };
    Ok(AlignedTarget { y_align, snapshots })
}

/// Training target that carries no gradient: the loss reads it as a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTarget(Vec<f64>);

impl FrozenTarget {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn final_target(target: &AlignedTarget) -> FrozenTarget {
    FrozenTarget(target.y_align.clone())
}

/// One line of the per-sample alignment dump.
#[derive(Clone, Debug, Serialize)]
pub struct AlignmentRecord {
    pub sample: usize,
    pub lambda: f64,
    pub class_a: usize,
    pub class_b: usize,
    pub class_a_mass: Vec<f64>,
    pub y_align: Vec<f64>,
}

impl AlignmentRecord {
    pub fn new(
        sample: usize,
        lambda: f64,
        class_a: usize,
        class_b: usize,
        t: &AlignedTarget,
    ) -> Self {
        Self {
            sample,
            lambda,
            class_a,
            class_b,
            class_a_mass: t.class_token_mass(class_a),
            y_align: t.y_align.clone(),
        }
    }

    pub fn write_json_line(&self, out: &mut impl Write) -> Result<()> {
        crate::diagnostics::write_json_line(out, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random_stochastic(rng: &mut Rng, n: usize) -> Matrix<f64> {
        let data = (0..n * n).map(|_| rng.normal(0.0, 2.0)).collect();
        Matrix::from_vec(n, n, data).unwrap().softmax_rows()
    }

    fn random_labels(rng: &mut Rng, n: usize, c: usize) -> Matrix<f64> {
        let data = (0..n * c).map(|_| rng.uniform() + 1e-3).collect();
        Matrix::from_vec(n, c, data)
            .unwrap()
            .row_normalize()
            .unwrap()
    }

    fn swap() -> Matrix<f64> {
        Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])
    }

    #[test]
    fn spatial_examples() {
        let y = Matrix::<f64>::identity(2);
        let a = Matrix::from_rows(&[[0.75, 0.25], [0.5, 0.5]]);
        assert_eq!(align_spatial(&y, std::slice::from_ref(&a)).unwrap(), a);
        let out = align_spatial(&y, &[Matrix::identity(2), swap()]).unwrap();
        assert_eq!(out, Matrix::filled(2, 2, 0.5));
        let mut rng = Rng::new(1);
        let y = random_labels(&mut rng, 3, 4);
        let eye = Matrix::identity(3);
        assert_eq!(
            align_spatial(&y, &[eye.clone(), eye.clone(), eye]).unwrap(),
            y
        );
        assert!(align_spatial(&y, &[Matrix::identity(2)]).is_err());
    }

    #[test]
    fn block_examples() {
        // Y = [[1,0]] and a single token whose attention is trivially 1:
        // use two tokens so the spatial step yields [0.5, 0.5] on row 0.
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let a = Matrix::filled(2, 2, 0.5);
        let steps = align_block_steps(&y, &[a]).unwrap();
        assert_eq!(steps.spatial.row(0), &[0.5, 0.5]);
        assert_eq!(steps.attn_residual.row(0), &[0.75, 0.25]);
        assert_eq!(steps.channel, steps.attn_residual);
        assert_eq!(steps.mlp_residual, steps.attn_residual);

        let mut rng = Rng::new(3);
        let y = random_labels(&mut rng, 5, 3);
        let out = align_block(&y, &[Matrix::identity(5)]).unwrap();
        assert!(out.max_abs_diff(&y).unwrap() < 1e-15);

        let row = [0.3, 0.7];
        let y = Matrix::from_rows(&[row, row, row, row]);
        let heads = [
            random_stochastic(&mut rng, 4),
            random_stochastic(&mut rng, 4),
        ];
        let out = align_block(&y, &heads).unwrap();
        assert!(out.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let y = Matrix::from_rows(&[[0.2, 0.8], [1.0, 0.0], [0.0, 1.0], [0.4, 0.6]]);
        let same = align_aggregate(&y, &[vec![1], vec![2], vec![3]]).unwrap();
        assert_eq!(same, y);
        let merged = align_aggregate(&y, &[vec![1, 2], vec![3]]).unwrap();
        assert_eq!(merged.row(0), &[0.2, 0.8]);
        assert_eq!(merged.row(1), &[0.5, 0.5]);
        let r = [0.1, 0.9];
        let y4 = Matrix::from_rows(&[r, r, r, r, r]);
        let m = align_aggregate(&y4, &[vec![1, 2, 3, 4]]).unwrap();
        assert_eq!(m.row(1), &r);

        assert!(matches!(
            align_aggregate(&y, &[vec![1, 2]]),
            Err(Error::NonPartition(_))
        ));
        assert!(matches!(
            align_aggregate(&y, &[vec![1, 2], vec![2, 3]]),
            Err(Error::NonPartition(_))
        ));
        assert!(align_aggregate(&y, &[vec![0, 1], vec![2, 3]]).is_err());
    }

    #[test]
    fn generic_examples() {
        let mut rng = Rng::new(5);
        let y = random_labels(&mut rng, 4, 3);
        assert_eq!(align_generic(&y, &OpDescriptor::Pointwise).unwrap(), y);
        assert_eq!(align_generic(&y, &OpDescriptor::ChannelMixing).unwrap(), y);
        let two_i = OpDescriptor::SpatialMixing {
            matrix: Matrix::identity(4).scale(2.0),
        };
        assert_eq!(align_generic(&y, &two_i).unwrap(), y);

        // a residual around attention reproduces align_block's first half
        let a = random_stochastic(&mut rng, 4);
        let res = OpDescriptor::Residual {
            inner: vec![OpDescriptor::SpatialMixing { matrix: a.clone() }],
        };
        let via_generic = align_generic(&y, &res).unwrap();
        let via_block = align_block_steps(&y, &[a]).unwrap().attn_residual;
        assert!(via_generic.max_abs_diff(&via_block).unwrap() < 1e-15);

        let zero_row = OpDescriptor::SpatialMixing {
            matrix: Matrix::zeros(4, 4),
        };
        assert!(matches!(
            align_generic(&y, &zero_row),
            Err(Error::ZeroRow { row: 0 })
        ));

        let agg = OpDescriptor::SpatialAggregation {
            groups: vec![vec![0, 3], vec![1, 2]],
        };
        let out = align_generic(&y, &agg).unwrap();
        assert_eq!(out.rows(), 2);
        for s in out.row_sums() {
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    fn random_trace(rng: &mut Rng, layers: usize, heads: usize, n: usize) -> AttentionTrace {
        AttentionTrace::new(
            (0..layers)
                .map(|_| (0..heads).map(|_| random_stochastic(rng, n)).collect())
                .collect(),
        )
        .unwrap()
    }

    fn plan(depth: usize) -> AlignPlan {
        AlignPlan {
            depth,
            pooling: Pooling::ClassToken,
            merges: Vec::new(),
        }
    }

    #[test]
    fn forward_matches_composed_effective_matrices() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let (n, c, l, h) = (5, 3, 3, 2);
            let trace = random_trace(&mut rng, l, h, n);
            let y0 = random_labels(&mut rng, n, c);
            let got = align_forward(&y0, &trace, &plan(l)).unwrap();
            let mut y = y0.clone();
            for layer in trace.layers() {
                let mut m = Matrix::<f64>::identity(n);
                for a in layer {
                    m.axpy(1.0 / h as f64, a).unwrap();
                }
                // (mean A + I) / 2
                let sum = m.sub(&Matrix::identity(n)).unwrap();
                let eff = sum.add(&Matrix::identity(n)).unwrap().scale(0.5);
                y = eff.matmul(&y).unwrap();
            }
            for (a, b) in got.y_align.iter().zip(y.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(got.snapshots.len(), l + 1);
        }
    }

    #[test]
    fn forward_errors_and_pooling() {
        let mut rng = Rng::new(2);
        let trace = random_trace(&mut rng, 2, 1, 3);
        let y0 = random_labels(&mut rng, 3, 2);
        assert!(matches!(
            align_forward(&y0, &trace, &plan(3)),
            Err(Error::LayerCountMismatch {
                expected: 3,
                got: 2
            })
        ));
        let p = AlignPlan {
            pooling: Pooling::GlobalPool,
            ..plan(2)
        };
        let t = align_forward(&y0, &trace, &p).unwrap();
        let last = t.snapshots.last().unwrap();
        let expect = (last[(1, 0)] + last[(2, 0)]) / 2.0;
        assert!((t.y_align[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn forward_with_final_merge() {
        let mut rng = Rng::new(8);
        let trace = random_trace(&mut rng, 2, 2, 5);
        let y0 = random_labels(&mut rng, 5, 3);
        let p = AlignPlan {
            merges: vec![Merge {
                after_layer: 2,
                groups: vec![vec![1, 2], vec![3, 4]],
            }],
            ..plan(2)
        };
        let t = align_forward(&y0, &trace, &p).unwrap();
        assert_eq!(t.snapshots[2].rows(), 3);
        // merge before attention changes the token count and breaks shapes
        let early = AlignPlan {
            merges: vec![Merge {
                after_layer: 1,
                groups: vec![vec![1, 2], vec![3, 4]],
            }],
            ..plan(2)
        };
        assert!(align_forward(&y0, &trace, &early).is_err());
    }

    #[test]
    fn dump_record_is_one_json_line() {
        let t = AlignedTarget {
            y_align: vec![0.6, 0.4],
            snapshots: vec![
                Matrix::from_rows(&[[0.5, 0.5]]),
                Matrix::from_rows(&[[0.6, 0.4]]),
            ],
        };
        let mut buf = Vec::new();
        AlignmentRecord::new(3, 0.5, 0, 1, &t)
            .write_json_line(&mut buf)
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.ends_with("}\n"));
        assert!(text.contains("\"class_a_mass\":[0.5,0.6]"));
        assert_eq!(final_target(&t).as_slice(), &[0.6, 0.4]);
    }

    fn permutation_matrix(perm: &[usize]) -> Matrix<f64> {
        let n = perm.len();
        let mut p = Matrix::zeros(n, n);
        for (i, &j) in perm.iter().enumerate() {
            p[(i, j)] = 1.0;
        }
        p
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rows_stay_stochastic(seed in any::<u64>(), n in 2usize..12, c in 2usize..8,
                                h in 1usize..4, l in 1usize..5) {
            let mut rng = Rng::new(seed);
            let trace = random_trace(&mut rng, l, h, n);
            let y0 = random_labels(&mut rng, n, c);
            let t = align_forward(&y0, &trace, &plan(l)).unwrap();
            for y in &t.snapshots {
                for s in y.row_sums() {
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
                prop_assert!(y.as_slice().iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn spatial_permutation_equivariance(seed in any::<u64>(), n in 2usize..8) {
            let mut rng = Rng::new(seed);
            let tokens = n + 1;
            let trace = random_trace(&mut rng, 2, 2, tokens);
            let y0 = random_labels(&mut rng, tokens, 3);
            let mut spatial: Vec<usize> = (1..tokens).collect();
            rng.shuffle(&mut spatial);
            let perm: Vec<usize> = std::iter::once(0).chain(spatial).collect();
            let p = permutation_matrix(&perm);
            let pt = p.transpose();
            let permuted = AttentionTrace::new(
                trace.layers().iter().map(|hs| {
                    hs.iter().map(|a| p.matmul(a).unwrap().matmul(&pt).unwrap()).collect()
                }).collect()
            ).unwrap();
            let base = align_forward(&y0, &trace, &plan(2)).unwrap();
            let moved = align_forward(&p.matmul(&y0).unwrap(), &permuted, &plan(2)).unwrap();
            for (a, b) in base.y_align.iter().zip(&moved.y_align) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let expect = p.matmul(base.snapshots.last().unwrap()).unwrap();
            prop_assert!(expect.max_abs_diff(moved.snapshots.last().unwrap()).unwrap() < 1e-12);
        }

        #[test]
        fn aligned_target_stays_on_the_two_classes(seed in any::<u64>(), n in 2usize..10,
                                                   c in 3usize..10) {
            let mut rng = Rng::new(seed);
            let a = rng.below(c);
            let b = (a + 1 + rng.below(c - 1)) % c;
            let mut y0 = Matrix::zeros(n, c);
            for i in 0..n {
                let f = rng.uniform();
                y0[(i, a)] = f;
                y0[(i, b)] = 1.0 - f;
            }
            let trace = random_trace(&mut rng, 3, 2, n);
            let t = align_forward(&y0, &trace, &plan(3)).unwrap();
            for (k, &v) in t.y_align.iter().enumerate() {
                if k != a && k != b {
                    prop_assert!(v.abs() <= 1e-7);
                }
            }
        }
    }
}
