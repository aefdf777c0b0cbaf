//! Soft-target training loop, optimizers and gradient verification.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_forward, final_target, AlignPlan, FrozenTarget};
use crate::diagnostics::{target_rmse, target_rmse_active};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mixing::{
    block_wise_mix, cutmix, init_label_map, mixup, random_patch_mix, CropRect, MixSpec, MixStrategy,
};
use crate::numerics::{Real, Rng};
use crate::vit::{
    is_decayed, model_backward, model_forward, model_logits, ModelParams, ParamGrads,
};

const SAMPLE_STREAM: u64 = 1 << 62;
const SHUFFLE_STREAM: u64 = 2 << 62;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdamwLite,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::AdamwLite => "adamw_lite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd_momentum" | "sgd" => Some(OptimizerKind::SgdMomentum),
            "adamw_lite" | "adamw" => Some(OptimizerKind::AdamwLite),
            _ => None,
        }
    }
}

/// Mixing strategy and its parameters. Grid-based strategies operate on
/// cells of one model patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub strategy: MixStrategy,
    /// Probability that a sample is mixed at all; otherwise it is used as is.
    pub apply_prob: f64,
    /// Beta(alpha, alpha) parameter for MixUp.
    pub mixup_alpha: f64,
    /// Per-cell swap probability for random patch mixing.
    pub patch_prob: f64,
    /// Fraction of cells swapped by block-wise mixing.
    pub block_budget: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            strategy: MixStrategy::CutMix,
            apply_prob: 1.0,
            mixup_alpha: 1.0,
            patch_prob: 0.5,
            block_budget: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// SGD momentum.
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub mix: MixConfig,
    pub tl_align: bool,
    pub seed: u64,
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            optimizer: OptimizerKind::AdamwLite,
            momentum: 0.9,
            warmup_epochs: 0,
            mix: MixConfig::default(),
            tl_align: true,
            seed: 0,
            label_smoothing: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return fail("weight_decay must be >= 0 and momentum in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must be in [0, 1)");
        }
        let m = &self.mix;
        if !(0.0..=1.0).contains(&m.apply_prob)
            || !(0.0..=1.0).contains(&m.patch_prob)
            || !(0.0..=1.0).contains(&m.block_budget)
        {
            return fail("mix probabilities must be in [0, 1]");
        }
        if !(m.mixup_alpha > 0.0) {
            return fail("mixup_alpha must be positive");
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based): linear warmup, then cosine decay.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.learning_rate * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = (self.epochs - self.warmup_epochs).max(1) as f64;
        let t = (epoch - self.warmup_epochs) as f64 / span;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Cross-entropy against a constant soft target. Returns the loss and its
/// gradient with respect to the logits, `softmax(logits) - target`.
pub fn soft_cross_entropy<T: Real>(logits: &[T], target: &FrozenTarget) -> (f64, Vec<T>) {
    let t = target.as_slice();
    assert_eq!(logits.len(), t.len(), "logit and target lengths differ");
    let z: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = -t
        .iter()
        .zip(&z)
        .filter(|(&tj, _)| tj != 0.0)
        .map(|(tj, zj)| tj * (zj - lse))
        .sum::<f64>();
    let grad = z
        .iter()
        .zip(t)
        .map(|(zj, tj)| T::from_f64((zj - lse).exp() - tj))
        .collect();
    (loss, grad)
}

fn smooth(target: Vec<f64>, eps: f64) -> Vec<f64> {
    if eps == 0.0 {
        return target;
    }
    let u = eps / target.len() as f64;
    target.into_iter().map(|v| (1.0 - eps) * v + u).collect()
}

/// Mixes `x1` with `x2` as configured.
pub fn mix_pair(
    x1: &Image,
    x2: &Image,
    class_a: usize,
    class_b: usize,
    mix: &MixConfig,
    patch_size: usize,
    rng: &mut Rng,
) -> Result<(Image, MixSpec)> {
    if mix.apply_prob < 1.0 && !rng.bernoulli(mix.apply_prob) {
        let spec = MixSpec::unmixed(mix.strategy, x1.height(), x1.width(), class_a);
        return Ok((x1.clone(), spec));
    }
    match mix.strategy {
        MixStrategy::CutMix => cutmix(x1, x2, class_a, class_b, rng),
        MixStrategy::MixUp => mixup(x1, x2, class_a, class_b, mix.mixup_alpha, rng),
        MixStrategy::RandomPatch => {
            random_patch_mix(x1, x2, class_a, class_b, mix.patch_prob, patch_size, rng)
        }
        MixStrategy::BlockWise => {
            block_wise_mix(x1, x2, class_a, class_b, mix.block_budget, patch_size, rng)
        }
    }
}

/// Targets of one mixed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTargets {
    /// Area-weighted target `lambda e_a + (1 - lambda) e_b`.
    pub original: Vec<f64>,
    /// Class-token (or pooled) label after alignment through the network.
    pub aligned: Vec<f64>,
}

/// One mixing decision, in the order samples were drawn.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixDecision {
    pub index: usize,
    pub partner: usize,
    pub class_a: usize,
    pub class_b: usize,
    pub lambda: f64,
    pub crop: Option<CropRect>,
}

/// Per-sample result of a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub decision: MixDecision,
    pub loss: f64,
    pub targets: SampleTargets,
    /// Target the loss was computed against (after smoothing).
    pub used_target: Vec<f64>,
    pub correct: bool,
}

/// A training pair: dataset index of the primary image and its partner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub index: usize,
    pub partner: usize,
    /// Random stream that drives this sample's mixing.
    pub stream: u64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub mean_loss: f64,
    pub samples: Vec<SampleRecord>,
}

/// Training examples borrowed from a dataset.
#[derive(Clone, Copy, Debug)]
pub struct Examples<'a> {
    pub images: &'a [Image],
    pub labels: &'a [usize],
}

impl<'a> Examples<'a> {
    pub fn new(images: &'a [Image], labels: &'a [usize]) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Aligned and original targets for a mixed sample given its attention.
pub fn sample_targets<T: Real>(
    params: &ModelParams<T>,
    attention: &crate::vit::AttentionTrace,
    spec: &MixSpec,
) -> Result<SampleTargets> {
    let c = params.config.num_classes;
    let y0 = init_label_map(spec, &params.config)?;
    let aligned = align_forward(&y0, attention, &AlignPlan::for_model(&params.config))?;
    Ok(SampleTargets {
        original: spec.mixed_target(c)?,
        aligned: final_target(&aligned).into_vec(),
    })
}

fn run_sample<T: Real>(
    params: &ModelParams<T>,
    data: Examples<'_>,
    pair: Pair,
    config: &TrainConfig,
) -> Result<(SampleRecord, ParamGrads<T>)> {
    let (a, b) = (data.labels[pair.index], data.labels[pair.partner]);
    let mut rng = Rng::stream(config.seed, pair.stream);
    let (mixed, spec) = mix_pair(
        &data.images[pair.index],
        &data.images[pair.partner],
        a,
        b,
        &config.mix,
        params.config.patch_size,
        &mut rng,
    )?;
    let out = model_forward(&mixed, params)?;
    if out.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { sample: pair.index });
    }
    let targets = sample_targets(params, &out.attention, &spec)?;
    let chosen = if config.tl_align {
        targets.aligned.clone()
    } else {
        targets.original.clone()
    };
    let target = FrozenTarget::new(smooth(chosen, config.label_smoothing));
    let (loss, dlogits) = soft_cross_entropy(&out.logits, &target);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { sample: pair.index });
    }
    let grads = model_backward(params, &out.trace, &dlogits)?;
    let dominant = if spec.lambda >= 0.5 { a } else { b };
    Ok((
        SampleRecord {
            decision: MixDecision {
                index: pair.index,
                partner: pair.partner,
                class_a: a,
                class_b: b,
                lambda: spec.lambda,
                crop: spec.crop,
            },
            loss,
            targets,
            used_target: target.into_vec(),
            correct: argmax(&out.logits) == dominant,
        },
        grads,
    ))
}

/// First and second moment buffers plus the update rule.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    first: ParamGrads<T>,
    second: ParamGrads<T>,
    decayed: Vec<bool>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(params: &ModelParams<T>, config: &TrainConfig) -> Self {
        Self {
            kind: config.optimizer,
            weight_decay: config.weight_decay,
            momentum: config.momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
            decayed: params
                .tensors()
                .iter()
                .map(|(n, _)| is_decayed(n))
                .collect(),
        }
    }

    /// Applies one update and bumps the parameter generation.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &ParamGrads<T>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let grads = grads.tensors();
        let firsts = self.first.tensors_mut();
        let seconds = self.second.tensors_mut();
        for ((((p, (_, g)), m), v), &decay) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(firsts)
            .zip(seconds)
            .zip(&self.decayed)
        {
            let wd = if decay { self.weight_decay } else { 0.0 };
            let (p, g, m, v) = (
                p.as_mut_slice(),
                g.as_slice(),
                m.as_mut_slice(),
                v.as_mut_slice(),
            );
            for i in 0..p.len() {
                let pi = p[i].as_f64();
                let gi = g[i].as_f64();
                let next = match self.kind {
                    OptimizerKind::SgdMomentum => {
                        let buf = self.momentum * m[i].as_f64() + gi + wd * pi;
                        m[i] = T::from_f64(buf);
                        pi - lr * buf
                    }
                    OptimizerKind::AdamwLite => {
                        let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * gi;
                        let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * gi * gi;
                        m[i] = T::from_f64(mi);
                        v[i] = T::from_f64(vi);
                        let step = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                        pi - lr * (step + wd * pi)
                    }
                };
                p[i] = T::from_f64(next);
            }
        }
        params.generation += 1;
        self.first.generation = params.generation;
        self.second.generation = params.generation;
    }
}

/// Forward, align, loss and backward for every pair (in parallel), then one
/// optimizer update with the batch-mean gradient.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    optimizer: &mut Optimizer<T>,
    data: Examples<'_>,
    batch: &[Pair],
    config: &TrainConfig,
    lr: f64,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("batch"));
    }
    let results: Vec<Result<(SampleRecord, ParamGrads<T>)>> = batch
        .par_iter()
        .map(|&pair| run_sample(params, data, pair, config))
        .collect();
    let mut total = params.zeros_like();
    let mut samples = Vec::with_capacity(batch.len());
    for r in results {
        let (record, grads) = r?;
        total.accumulate(&grads)?;
        samples.push(record);
    }
    total.scale_in_place(T::from_f64(1.0 / batch.len() as f64));
    optimizer.update(params, &total, lr);
    let mean_loss = samples.iter().map(|s| s.loss).sum::<f64>() / samples.len() as f64;
    Ok(StepOutput { mean_loss, samples })
}

/// Top-1 accuracy; ties resolve to the lowest class index.
pub fn evaluate<T: Real>(params: &ModelParams<T>, data: Examples<'_>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let hits: Vec<Result<bool>> = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(argmax(&model_logits(&data.images[i], params)?) == data.labels[i]))
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// Fraction of mixed samples whose prediction matches the class holding
    /// the larger share of the image.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean RMSE between aligned and area-weighted targets, over all classes.
    pub target_rmse: f64,
    /// Same, over the two mixed classes only.
    pub target_rmse_active: f64,
    /// Wall-clock time; kept out of the serialized record so that metrics
    /// files are reproducible byte for byte.
    #[serde(skip)]
    pub seconds: f64,
}

/// Pairs for one epoch: a seeded shuffle, cut into batches; inside a batch
/// position `i` is paired with position `len - 1 - i`.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<Pair>> {
    let mut order: Vec<usize> = (0..len).collect();
    Rng::stream(seed, SHUFFLE_STREAM | epoch as u64).shuffle(&mut order);
    let mut position = 0u64;
    order
        .chunks(batch_size)
        .map(|chunk| {
            let n = chunk.len();
            chunk
                .iter()
                .enumerate()
                .map(|(i, &index)| {
                    let stream = SAMPLE_STREAM | ((epoch as u64) << 32) | position;
                    position += 1;
                    Pair {
                        index,
                        partner: chunk[n - 1 - i],
                        stream,
                    }
                })
                .collect()
        })
        .collect()
}

/// Owns the parameters and optimizer state of one run.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub optimizer: Optimizer<T>,
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(params: ModelParams<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(&params, &config);
        Ok(Self {
            config,
            params,
            optimizer,
            epoch: 0,
        })
    }

    /// Runs the next epoch. `on_sample` sees every sample record in draw order.
    pub fn run_epoch(
        &mut self,
        train: Examples<'_>,
        test: Examples<'_>,
        mut on_sample: impl FnMut(&SampleRecord),
    ) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training set"));
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = self.config.learning_rate_at(epoch);
        let (mut loss, mut correct, mut rmse, mut rmse_active, mut n) = (0.0, 0, 0.0, 0.0, 0);
        for batch in epoch_batches(train.len(), self.config.batch_size, self.config.seed, epoch) {
            let out = train_step(
                &mut self.params,
                &mut self.optimizer,
                train,
                &batch,
                &self.config,
                lr,
            )?;
            for s in &out.samples {
                loss += s.loss;
                correct += usize::from(s.correct);
                rmse += target_rmse(&s.targets.original, &s.targets.aligned);
                rmse_active += target_rmse_active(
                    &s.targets.original,
                    &s.targets.aligned,
                    s.decision.class_a,
                    s.decision.class_b,
                );
                n += 1;
                on_sample(s);
            }
        }
        let test_accuracy = evaluate(&self.params, test)?;
        self.epoch += 1;
        let n = n as f64;
        Ok(EpochMetrics {
            epoch: epoch + 1,
            learning_rate: lr,
            train_loss: loss / n,
            train_accuracy: correct as f64 / n,
            test_accuracy,
            target_rmse: rmse / n,
            target_rmse_active: rmse_active / n,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs all remaining epochs.
    pub fn run(
        &mut self,
        train: Examples<'_>,
        test: Examples<'_>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(train, test, |_| {})?;
            on_epoch(&m);
            all.push(m);
        }
        Ok(all)
    }
}

/// Options for [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub min_params: usize,
    pub eps: f64,
    pub seed: u64,
    /// Restrict the check to tensors with these names.
    pub tensors: Option<Vec<String>>,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            min_params: 50,
            eps: 1e-5,
            seed: 0,
            tensors: None,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Against finite differences with the target held fixed.
    pub max_relative_error: f64,
    /// Against finite differences that re-derive the aligned target at each
    /// perturbed point.
    pub max_relative_error_recomputed: f64,
    /// Largest change in the perturbed loss caused by re-deriving the target.
    pub target_sensitivity: f64,
    pub tensors_covered: usize,
}

/// Compares analytic gradients with central finite differences on sampled
/// scalar parameters, in double precision. The sample is mixed once; its
/// target comes from `config.tl_align` at the unperturbed parameters.
pub fn gradient_check(
    params: &ModelParams<f64>,
    mixed: &Image,
    spec: &MixSpec,
    config: &TrainConfig,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let pick = |targets: SampleTargets| {
        let t = if config.tl_align {
            targets.aligned
        } else {
            targets.original
        };
        FrozenTarget::new(smooth(t, config.label_smoothing))
    };
    let out = model_forward(mixed, params)?;
    let frozen = pick(sample_targets(params, &out.attention, spec)?);
    let (_, dlogits) = soft_cross_entropy(&out.logits, &frozen);
    let grads = model_backward(params, &out.trace, &dlogits)?;

    let loss_frozen = |p: &ModelParams<f64>| -> Result<f64> {
        Ok(soft_cross_entropy(&model_logits(mixed, p)?, &frozen).0)
    };
    let loss_recomputed = |p: &ModelParams<f64>| -> Result<f64> {
        let o = model_forward(mixed, p)?;
        let t = pick(sample_targets(p, &o.attention, spec)?);
        Ok(soft_cross_entropy(&o.logits, &t).0)
    };

    let names: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.as_slice().len()))
        .collect();
    let selected: Vec<usize> = (0..names.len())
        .filter(|&i| {
            options
                .tensors
                .as_ref()
                .is_none_or(|keep| keep.contains(&names[i].0))
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidConfig(
            "no tensors selected for gradient check".into(),
        ));
    }
    let per_tensor = options.min_params.div_ceil(selected.len()).max(1);
    let mut rng = Rng::new(options.seed);
    let mut entries = Vec::new();
    let (mut max_rel, mut max_rel_re, mut sensitivity) = (0.0f64, 0.0f64, 0.0f64);
    for &t in &selected {
        let len = names[t].1;
        let mut picks: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut picks);
        picks.truncate(per_tensor.min(len));
        for idx in picks {
            let perturbed = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[t].as_mut_slice()[idx] += delta;
                p
            };
            let plus = perturbed(options.eps);
            let minus = perturbed(-options.eps);
            let (fp, fm) = (loss_frozen(&plus)?, loss_frozen(&minus)?);
            let (rp, rm) = (loss_recomputed(&plus)?, loss_recomputed(&minus)?);
            let numeric = (fp - fm) / (2.0 * options.eps);
            let numeric_re = (rp - rm) / (2.0 * options.eps);
            let analytic = grads.tensors()[t].1.as_slice()[idx];
            let rel =
                |n: f64| (analytic - n).abs() / analytic.abs().max(n.abs()).max(options.floor);
            let relative_error = rel(numeric);
            max_rel = max_rel.max(relative_error);
            max_rel_re = max_rel_re.max(rel(numeric_re));
            sensitivity = sensitivity.max((rp - fp).abs()).max((rm - fm).abs());
            entries.push(GradCheckEntry {
                tensor: names[t].0.clone(),
                index: idx,
                analytic,
                numeric,
                relative_error,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        max_relative_error: max_rel,
        max_relative_error_recomputed: max_rel_re,
        target_sensitivity: sensitivity,
        tensors_covered: selected.len(),
    })
}
