//! Orchestration of training, diagnostics and gradient checks, and the
//! report files they write.
//!
//! Every JSON-lines file starts with a header line carrying the config hash.
//! Wall-clock timings go to `timing.jsonl` only, so the other reports of two
//! runs with the same config are byte-identical.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tlalign::diagnostics::{
    mean_target_rmse, ratio_trajectory, target_rmse_active, token_presence, write_json_line,
    RatioTrajectory, RmseRecord, TrajectoryRecord,
};
use tlalign::mixing::{cutmix_with_rect, sample_cutmix_rect, MixSpec};
use tlalign::trainer::{
    gradient_check, mix_pair, sample_targets, EpochMetrics, GradCheckOptions, GradCheckReport,
    MixConfig, TrainConfig, Trainer,
};
use tlalign::vit::{
    load_checkpoint, model_forward, save_checkpoint, ModelConfig, ModelParams, Pooling,
};
use tlalign::{Image, Real, Rng};

use crate::config::{DataSource, MnistFiles, Precision, RunConfig};
use crate::dataset::{load_idx, synth_dataset, Dataset, Split, SynthSpec};
use crate::{file_error, CliError, Result};

const INIT_STREAM: u64 = 3 << 62;
const DIAG_STREAM: u64 = (3 << 62) | 1;
const GRADCHECK_STREAM: u64 = (3 << 62) | 2;

/// Held-out mixed pairs used for the RMSE line of the diagnostics report.
pub const RMSE_PAIRS: usize = 256;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const MIXLOG_FILE: &str = "mixlog.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.tla";
pub const GRADCHECK_FILE: &str = "gradcheck.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Serialize)]
struct Header<'a> {
    kind: &'static str,
    file: &'a str,
    config_hash: &'a str,
}

struct Report {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Report {
    fn create(dir: &Path, name: &str, hash: &str) -> Result<Self> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(file_error(&path))?;
        let mut r = Self {
            path,
            out: BufWriter::new(file),
        };
        r.line(&Header {
            kind: "header",
            file: name,
            config_hash: hash,
        })?;
        Ok(r)
    }

    fn line<S: Serialize>(&mut self, value: &S) -> Result<()> {
        write_json_line(&mut self.out, value)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(file_error(&self.path))
    }
}

/// Loads the train and test splits described by the config.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.data {
        DataSource::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            let files = MnistFiles::locate(dir)?;
            let pad = Some(cfg.model.image_size);
            let mut train = load_idx(
                &files.train_images,
                &files.train_labels,
                Split::Train,
                cfg.data.num_classes(),
                pad,
            )?;
            let mut test = load_idx(
                &files.test_images,
                &files.test_labels,
                Split::Test,
                cfg.data.num_classes(),
                pad,
            )?;
            if let Some(n) = train_limit {
                train.truncate(*n);
            }
            if let Some(n) = test_limit {
                test.truncate(*n);
            }
            (train, test)
        }
        DataSource::Synthetic {
            classes,
            train_per_class,
            test_per_class,
            noise,
            seed,
        } => {
            let spec = |per_class| SynthSpec {
                classes: *classes,
                per_class,
                size: cfg.model.image_size,
                channels: cfg.model.channels,
                noise: *noise,
                seed: *seed,
            };
            (
                synth_dataset(&spec(*train_per_class), Split::Train)?,
                synth_dataset(&spec(*test_per_class), Split::Test)?,
            )
        }
    };
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

pub fn init_params<T: Real>(cfg: &RunConfig) -> Result<ModelParams<T>> {
    Ok(ModelParams::init(
        &cfg.model,
        &mut Rng::stream(cfg.train.seed, INIT_STREAM),
    )?)
}

fn run_label(train: &TrainConfig) -> String {
    let s = train.mix.strategy.as_str();
    if train.tl_align {
        format!("{s}+tl_align")
    } else {
        s.to_string()
    }
}

/// A CutMix sample of two held-out images with different classes and a
/// mixing ratio strictly inside `(0, 1)`.
#[derive(Clone, Debug)]
pub struct HeldOutPair {
    pub first: usize,
    pub second: usize,
    pub mixed: Image,
    pub spec: MixSpec,
}

/// Draws `count` held-out pairs from `data`, deterministically in `seed`.
/// The first `classes` pairs use distinct primary classes where possible.
pub fn held_out_pairs(data: &Dataset, count: usize, seed: u64) -> Result<Vec<HeldOutPair>> {
    if data.num_classes < 2 || !data.labels.iter().any(|&l| l != data.labels[0]) {
        return Err(CliError::Invalid(
            "held-out pairs need at least two distinct classes".into(),
        ));
    }
    let mut rng = Rng::stream(seed, DIAG_STREAM);
    let mut out: Vec<HeldOutPair> = Vec::with_capacity(count);
    let mut used = vec![false; data.num_classes];
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        let i = rng.below(data.len());
        let j = rng.below(data.len());
        let (a, b) = (data.labels[i], data.labels[j]);
        if a == b {
            continue;
        }
        let fresh_needed = out.len() < data.num_classes && attempts < 100 * count.max(1);
        if fresh_needed && used[a] {
            continue;
        }
        used[a] = true;
        let (x1, x2) = (&data.images[i], &data.images[j]);
        let (mixed, spec) = loop {
            let rect = sample_cutmix_rect(x1.height(), x1.width(), &mut rng);
            let (m, s) = cutmix_with_rect(x1, x2, a, b, rect)?;
            if s.lambda > 0.0 && s.lambda < 1.0 {
                break (m, s);
            }
        };
        out.push(HeldOutPair {
            first: i,
            second: j,
            mixed,
            spec,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PresenceRecord {
    pub kind: &'static str,
    pub layer: usize,
    pub samples: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Mean over samples of `max p - min p` within one sample.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeldOutRecord {
    pub kind: &'static str,
    pub sample: usize,
    pub first: usize,
    pub second: usize,
    pub class_a: usize,
    pub class_b: usize,
    pub lambda: f64,
}

/// What a diagnostics pass found, as written to `diagnostics.jsonl`.
#[derive(Clone, Debug)]
pub struct DiagnosticsSummary {
    pub mean_rmse: f64,
    pub mean_rmse_active: f64,
    pub rmse_samples: usize,
    pub presence: Vec<PresenceRecord>,
    pub samples: Vec<HeldOutRecord>,
    pub trajectories: Vec<RatioTrajectory>,
}

fn diagnostics_typed<T: Real>(
    params: &ModelParams<T>,
    cfg: &RunConfig,
    test: &Dataset,
) -> Result<DiagnosticsSummary> {
    let count = RMSE_PAIRS.max(cfg.diagnostic_samples);
    let pairs = held_out_pairs(test, count, cfg.train.seed)?;
    let depth = params.config.depth;
    let mut rmse = Vec::with_capacity(pairs.len());
    let mut active = 0.0;
    let mut presence: Vec<Vec<Vec<f64>>> = vec![Vec::new(); depth];
    for p in &pairs {
        let out = model_forward(&p.mixed, params)?;
        let t = sample_targets(params, &out.attention, &p.spec)?;
        active += target_rmse_active(&t.original, &t.aligned, p.spec.class_a, p.spec.class_b);
        rmse.push((t.original, t.aligned));
        for (l, slot) in presence.iter_mut().enumerate() {
            slot.push(token_presence(&out.attention.mean_attention(l))?.presence);
        }
    }
    let mean_rmse = mean_target_rmse(rmse.iter().map(|(o, a)| (o.as_slice(), a.as_slice())));
    let presence = presence
        .into_iter()
        .enumerate()
        .map(|(layer, per_sample)| {
            let all = per_sample.iter().flatten();
            let n = per_sample.iter().map(Vec::len).sum::<usize>() as f64;
            let spread = per_sample
                .iter()
                .map(|p| {
                    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
                    max - min
                })
                .sum::<f64>()
                / per_sample.len() as f64;
            PresenceRecord {
                kind: "presence",
                layer,
                samples: per_sample.len(),
                min: all.clone().copied().fold(f64::INFINITY, f64::min),
                max: all.clone().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: all.sum::<f64>() / n,
                spread,
            }
        })
        .collect();
    let mut samples = Vec::new();
    let mut trajectories = Vec::new();
    for (k, p) in pairs.iter().take(cfg.diagnostic_samples).enumerate() {
        trajectories.push(ratio_trajectory(
            params,
            &p.mixed,
            &test.images[p.first],
            &test.images[p.second],
            &p.spec,
        )?);
        samples.push(HeldOutRecord {
            kind: "sample",
            sample: k,
            first: p.first,
            second: p.second,
            class_a: p.spec.class_a,
            class_b: p.spec.class_b,
            lambda: p.spec.lambda,
        });
    }
    Ok(DiagnosticsSummary {
        mean_rmse,
        mean_rmse_active: active / pairs.len() as f64,
        rmse_samples: pairs.len(),
        presence,
        samples,
        trajectories,
    })
}

fn write_diagnostics(dir: &Path, hash: &str, label: &str, d: &DiagnosticsSummary) -> Result<()> {
    let mut r = Report::create(dir, DIAGNOSTICS_FILE, hash)?;
    r.line(&RmseRecord {
        kind: "rmse",
        model: label.to_string(),
        samples: d.rmse_samples,
        mean_rmse: d.mean_rmse,
        mean_rmse_active: d.mean_rmse_active,
    })?;
    for p in &d.presence {
        r.line(p)?;
    }
    for (s, t) in d.samples.iter().zip(&d.trajectories) {
        r.line(s)?;
        for rec in TrajectoryRecord::from_trajectory(s.sample, t) {
            r.line(&rec)?;
        }
    }
    r.flush()
}

#[derive(Serialize)]
struct TimingRecord {
    kind: &'static str,
    epoch: usize,
    seconds: f64,
}

#[derive(Serialize)]
struct MixRecord<'a> {
    kind: &'static str,
    epoch: usize,
    #[serde(flatten)]
    decision: &'a tlalign::trainer::MixDecision,
}

/// Everything a training run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub metrics: Vec<EpochMetrics>,
    pub diagnostics: DiagnosticsSummary,
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunOutcome> {
    let dir = &cfg.output;
    fs::create_dir_all(dir).map_err(file_error(dir))?;
    let hash = cfg.hash();
    fs::write(dir.join(CONFIG_FILE), cfg.serialize()).map_err(file_error(dir.join(CONFIG_FILE)))?;

    let mut trainer = Trainer::new(init_params::<T>(cfg)?, cfg.train.clone())?;
    let mut metrics_out = Report::create(dir, METRICS_FILE, &hash)?;
    let mut timing_out = Report::create(dir, TIMING_FILE, &hash)?;
    let mut mixlog = if cfg.log_mixes {
        Some(Report::create(dir, MIXLOG_FILE, &hash)?)
    } else {
        None
    };
    let mut metrics = Vec::with_capacity(cfg.train.epochs);
    while trainer.epoch < cfg.train.epochs {
        let epoch = trainer.epoch + 1;
        let mut log_err = None;
        let m = trainer.run_epoch(train.examples(), test.examples(), |s| {
            if let Some(log) = mixlog.as_mut() {
                if let Err(e) = log.line(&MixRecord {
                    kind: "mix",
                    epoch,
                    decision: &s.decision,
                }) {
                    log_err.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = log_err {
            return Err(e);
        }
        metrics_out.line(&m)?;
        metrics_out.flush()?;
        timing_out.line(&TimingRecord {
            kind: "timing",
            epoch: m.epoch,
            seconds: m.seconds,
        })?;
        timing_out.flush()?;
        if let Some(log) = mixlog.as_mut() {
            log.flush()?;
        }
        on_epoch(&m);
        metrics.push(m);
    }
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &trainer.params)?;
    let diagnostics = diagnostics_typed(&trainer.params, cfg, test)?;
    write_diagnostics(dir, &hash, &run_label(&cfg.train), &diagnostics)?;
    Ok(RunOutcome {
        out_dir: dir.clone(),
        config_hash: hash,
        metrics,
        diagnostics,
    })
}

/// Trains, then writes metrics, timing, checkpoint and diagnostics into
/// `cfg.output`. `on_epoch` sees each epoch's metrics as they are written.
pub fn train(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &train, &test, &mut on_epoch),
        Precision::F64 => train_typed::<f64>(cfg, &train, &test, &mut on_epoch),
    }
}

/// Presence and trajectory diagnostics for an existing checkpoint, written to
/// `cfg.output`.
pub fn diagnose(cfg: &RunConfig, checkpoint: &Path) -> Result<DiagnosticsSummary> {
    cfg.validate()?;
    let (_, test) = load_datasets(cfg)?;
    let dir = &cfg.output;
    fs::create_dir_all(dir).map_err(file_error(dir))?;
    let d = match cfg.precision {
        Precision::F32 => {
            let p = checked_checkpoint::<f32>(checkpoint, &cfg.model)?;
            diagnostics_typed(&p, cfg, &test)?
        }
        Precision::F64 => {
            let p = checked_checkpoint::<f64>(checkpoint, &cfg.model)?;
            diagnostics_typed(&p, cfg, &test)?
        }
    };
    write_diagnostics(dir, &cfg.hash(), &run_label(&cfg.train), &d)?;
    Ok(d)
}

fn checked_checkpoint<T: Real>(path: &Path, model: &ModelConfig) -> Result<ModelParams<T>> {
    let p = load_checkpoint::<T>(path)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if &p.config != model {
        return Err(CliError::Invalid(format!(
            "{}: checkpoint model {:?} does not match the configured model",
            path.display(),
            p.config
        )));
    }
    Ok(p)
}

/// The small model used by the gradient check: 8x8 input, 4x4 patches.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        pooling: Pooling::ClassToken,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub kind: &'static str,
    pub tl_align: bool,
    pub strategy: &'static str,
    pub checked: usize,
    pub tensors_covered: usize,
    pub max_relative_error: f64,
    pub max_relative_error_recomputed: f64,
    pub target_sensitivity: f64,
}

/// Gradient check in double precision on the small model, once per target
/// choice, with the configured mixing strategy. Results go to
/// `gradcheck.jsonl` in `cfg.output`.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<(GradCheckSummary, GradCheckReport)>> {
    let model = gradcheck_model();
    let seed = cfg.train.seed;
    let params = ModelParams::<f64>::init(&model, &mut Rng::stream(seed, INIT_STREAM))?;
    let mut rng = Rng::stream(seed, GRADCHECK_STREAM);
    let mut image = || {
        let data = (0..64).map(|_| rng.uniform() as f32).collect();
        Image::new(8, 8, 1, data)
    };
    let (x1, x2) = (image()?, image()?);
    let mix = MixConfig {
        apply_prob: 1.0,
        ..cfg.train.mix.clone()
    };
    let (mixed, spec) = mix_pair(&x1, &x2, 0, 2, &mix, model.patch_size, &mut rng)?;
    let dir = &cfg.output;
    fs::create_dir_all(dir).map_err(file_error(dir))?;
    let mut r = Report::create(dir, GRADCHECK_FILE, &cfg.hash())?;
    let mut out = Vec::new();
    for tl_align in [false, true] {
        let tc = TrainConfig {
            tl_align,
            ..cfg.train.clone()
        };
        let options = GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        };
        let report = gradient_check(&params, &mixed, &spec, &tc, &options)?;
        let summary = GradCheckSummary {
            kind: "gradcheck",
            tl_align,
            strategy: spec.strategy.as_str(),
            checked: report.entries.len(),
            tensors_covered: report.tensors_covered,
            max_relative_error: report.max_relative_error,
            max_relative_error_recomputed: report.max_relative_error_recomputed,
            target_sensitivity: report.target_sensitivity,
        };
        r.line(&summary)?;
        for e in &report.entries {
            r.line(e)?;
        }
        out.push((summary, report));
    }
    r.flush()?;
    Ok(out)
}
