//! Invariant suites behind `tlalign selftest`.

use std::time::Instant;

use serde::Serialize;
use tlalign::align::{align_forward, AlignPlan};
use tlalign::diagnostics::{conv_presence, token_presence, ConvDescriptor};
use tlalign::mixing::{cutmix, init_label_map, mixup};
use tlalign::vit::{model_forward, AttentionTrace, ModelConfig, ModelParams, Pooling};
use tlalign::{Image, Matrix, Rng};

use crate::config::RunConfig;
use crate::experiment::gradcheck;
use crate::Result;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub instances: usize,
    /// Largest observed deviation from the expected value.
    pub worst: f64,
    pub detail: String,
    pub seconds: f64,
}

fn random_stochastic(rng: &mut Rng, rows: usize, cols: usize, sharpness: f64) -> Matrix<f64> {
    let logits: Vec<f64> = (0..rows * cols)
        .map(|_| rng.normal(0.0, sharpness))
        .collect();
    Matrix::from_vec(rows, cols, logits)
        .expect("sized")
        .softmax_rows()
}

fn random_trace(rng: &mut Rng, n: usize, heads: usize, layers: usize) -> AttentionTrace {
    let sharpness = rng.uniform_in(0.1, 4.0);
    let layers = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| random_stochastic(rng, n, n, sharpness))
                .collect()
        })
        .collect();
    AttentionTrace::new(layers).expect("square")
}

fn random_image(rng: &mut Rng, size: usize) -> Image {
    let data = (0..size * size).map(|_| rng.uniform() as f32).collect();
    Image::new(size, size, 1, data).expect("sized")
}

fn plan(depth: usize) -> AlignPlan {
    AlignPlan {
        depth,
        pooling: Pooling::ClassToken,
        merges: Vec::new(),
    }
}

fn timed(
    name: &'static str,
    f: impl FnOnce() -> Result<(usize, f64, bool, String)>,
) -> SuiteResult {
    let start = Instant::now();
    let (instances, worst, passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (0, f64::NAN, false, format!("error: {e}")),
    };
    SuiteResult {
        name,
        passed,
        instances,
        worst,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Aligned label rows stay on the simplex through every layer.
pub fn row_stochastic(seed: u64, instances: usize) -> SuiteResult {
    timed("row_stochastic", || {
        let mut rng = Rng::new(seed);
        let mut worst_ratio = 0.0f64;
        for _ in 0..instances {
            let n = 2 + rng.below(15);
            let c = 2 + rng.below(9);
            let h = 1 + rng.below(4);
            let l = 1 + rng.below(6);
            let y0 = random_stochastic(&mut rng, n, c, 2.0);
            let t = align_forward(&y0, &random_trace(&mut rng, n, h, l), &plan(l))?;
            let tol = l as f64 * 1e-6;
            for y in &t.snapshots {
                for s in y.row_sums() {
                    worst_ratio = worst_ratio.max((s - 1.0).abs() / tol);
                }
            }
        }
        Ok((
            instances,
            worst_ratio,
            worst_ratio <= 1.0,
            "worst |row sum - 1| as a fraction of L * 1e-6".into(),
        ))
    })
}

/// With identity attention the aligned target is the area-weighted target.
pub fn identity_oracle(seed: u64, instances: usize) -> SuiteResult {
    timed("identity_oracle", || {
        let mut rng = Rng::new(seed);
        let mut mismatches = 0;
        for _ in 0..instances {
            let cfg = ModelConfig {
                image_size: 16,
                patch_size: 4,
                depth: 1 + rng.below(4),
                num_classes: 2 + rng.below(9),
                ..ModelConfig::default()
            };
            let a = rng.below(cfg.num_classes);
            let b = (a + 1 + rng.below(cfg.num_classes - 1)) % cfg.num_classes;
            let (x1, x2) = (random_image(&mut rng, 16), random_image(&mut rng, 16));
            let (_, spec) = cutmix(&x1, &x2, a, b, &mut rng)?;
            let n = cfg.num_tokens();
            let layers = (0..cfg.depth)
                .map(|_| vec![Matrix::identity(n); cfg.heads])
                .collect();
            let y0 = init_label_map(&spec, &cfg)?;
            let t = align_forward(&y0, &AttentionTrace::new(layers)?, &plan(cfg.depth))?;
            let mut expected = vec![0.0; cfg.num_classes];
            expected[a] = spec.lambda;
            expected[b] = 1.0 - spec.lambda;
            if t.y_align != expected {
                mismatches += 1;
            }
        }
        Ok((
            instances,
            mismatches as f64,
            mismatches == 0,
            "mixes whose aligned target differs from lambda e_a + (1 - lambda) e_b".into(),
        ))
    })
}

/// MixUp label maps are identical rows, so every layer leaves them unchanged.
pub fn mixup_fixed_point(seed: u64, instances: usize) -> SuiteResult {
    timed("mixup_fixed_point", || {
        let mut rng = Rng::new(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let heads = 1 + rng.below(2);
            let cfg = ModelConfig {
                image_size: 8,
                patch_size: 4,
                channels: 1,
                depth: 1 + rng.below(3),
                dim: 8,
                heads,
                mlp_ratio: 2,
                num_classes: 2 + rng.below(5),
                pooling: Pooling::ClassToken,
            };
            let params = ModelParams::<f64>::init(&cfg, &mut rng)?;
            let (x1, x2) = (random_image(&mut rng, 8), random_image(&mut rng, 8));
            let (mixed, spec) = mixup(&x1, &x2, 0, 1, 1.0, &mut rng)?;
            let out = model_forward(&mixed, &params)?;
            let y0 = init_label_map(&spec, &cfg)?;
            let t = align_forward(&y0, &out.attention, &plan(cfg.depth))?;
            for y in &t.snapshots {
                worst = worst.max(y.max_abs_diff(&y0)?);
            }
        }
        Ok((instances, worst, worst <= 1e-6, "max |Y^l - Y^0|".into()))
    })
}

/// Layer-by-layer alignment equals one product of `(A + I) / 2` matrices.
pub fn composition(seed: u64, instances: usize) -> SuiteResult {
    timed("composition", || {
        let mut rng = Rng::new(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let n = 2 + rng.below(7);
            let c = 2 + rng.below(3);
            let h = 1 + rng.below(3);
            let l = 1 + rng.below(3);
            let y0 = random_stochastic(&mut rng, n, c, 2.0);
            let trace = random_trace(&mut rng, n, h, l);
            let mut product = Matrix::<f64>::identity(n);
            for layer in 0..l {
                let mut m = Matrix::<f64>::identity(n);
                for a in trace.heads(layer) {
                    m.axpy(1.0 / h as f64, a)?;
                }
                product = m.scale(0.5).matmul(&product)?;
            }
            let brute = product.matmul(&y0)?;
            let t = align_forward(&y0, &trace, &plan(l))?;
            worst = worst.max(t.snapshots[l].max_abs_diff(&brute)?);
        }
        Ok((
            instances,
            worst,
            worst <= 1e-5,
            "max |aligned - brute force|".into(),
        ))
    })
}

/// Convolution presence is flat in the interior and dips at the border;
/// softmax attention presence is not flat.
pub fn presence(seed: u64, instances: usize) -> SuiteResult {
    timed("presence", || {
        let mut rng = Rng::new(seed);
        let mut worst = 0.0f64;
        let mut ok = true;
        let mut cases = 0;
        for k in [3, 5] {
            for g in [6, 8] {
                let data = (0..k * k).map(|_| rng.uniform_in(0.01, 1.0)).collect();
                let desc = ConvDescriptor::new(Matrix::from_vec(k, k, data)?, g, g)?;
                let r = conv_presence(&desc)?;
                for (p, &inside) in r.presence.iter().zip(&r.interior) {
                    if inside {
                        worst = worst.max((p - 1.0).abs());
                    }
                }
                ok &= r
                    .presence
                    .iter()
                    .zip(&r.interior)
                    .any(|(&p, &i)| !i && p < 1.0);
                cases += 1;
            }
        }
        for _ in 0..instances {
            let a = random_stochastic(&mut rng, 16, 16, 1.0);
            ok &= token_presence(&a)?.spread() > 0.0;
            cases += 1;
        }
        Ok((
            cases,
            worst,
            ok && worst <= 1e-9,
            "max interior |presence - 1|".into(),
        ))
    })
}

/// Analytic gradients of the small model against central differences.
pub fn gradients(seed: u64) -> SuiteResult {
    timed("gradient_check", || {
        let dir = std::env::temp_dir().join(format!("tlalign-selftest-{}", std::process::id()));
        let mut cfg = RunConfig::default();
        cfg.train.seed = seed;
        cfg.output = dir.clone();
        let results = gradcheck(&cfg);
        let _ = std::fs::remove_dir_all(&dir);
        let results = results?;
        let worst = results
            .iter()
            .map(|(s, _)| s.max_relative_error)
            .fold(0.0, f64::max);
        let sensitive = results
            .iter()
            .find(|(s, _)| s.tl_align)
            .is_some_and(|(s, _)| s.target_sensitivity > 0.0);
        let covered = results.iter().all(|(s, _)| s.checked >= 50);
        Ok((
            results.iter().map(|(s, _)| s.checked).sum(),
            worst,
            worst < 1e-4 && sensitive && covered,
            "max relative error, frozen target".into(),
        ))
    })
}

/// All suites at full size.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        row_stochastic(seed, 1000),
        identity_oracle(seed, 100),
        mixup_fixed_point(seed, 100),
        composition(seed, 200),
        presence(seed, 100),
        gradients(seed),
    ]
}
