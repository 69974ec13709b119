//! Training with augmentation, weighted loss and early stopping on
//! validation AUC; cross-validation and external evaluation.

use std::collections::HashMap;

use adbench_tensor::nn::{Ctx, Mode, NamedTensors, BN_MOMENTUM};
use adbench_tensor::optim::Adam;
use adbench_tensor::{Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{class_weights, LabeledScan, Selection, SplitPlan};
use crate::data::{batch_inputs, fit_global_stats, make_samples, normalization_spec, AxialStack, Prepared, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::models::{softmax_rows, Model, ModelConfig, ModelKind};
use crate::volume::{GlobalStats, NormMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Maximum in-plane rotation in degrees, drawn uniformly in ±.
    pub rotation_deg: f64,
    pub flip_p: f64,
    /// Multiplicative jitter half-width.
    pub intensity_jitter: f64,
    /// Noise standard deviation as a fraction of the sample's value range.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotation_deg: 10.0, flip_p: 0.5, intensity_jitter: 0.1, noise_sigma: 0.05 }
    }
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig { rotation_deg: 0.0, flip_p: 0.0, intensity_jitter: 0.0, noise_sigma: 0.0 };
}

/// Mirrors every slice left to right.
pub fn hflip(s: &AxialStack) -> AxialStack {
    let n = s.side;
    let mut data = s.data.clone();
    for row in data.chunks_mut(n) {
        row.reverse();
    }
    AxialStack { k: s.k, side: n, data }
}

/// Rotates every slice by `deg` about its centre with bilinear sampling and
/// edge replication.
pub fn rotate(s: &AxialStack, deg: f64) -> AxialStack {
    let n = s.side;
    let (sin, cos) = deg.to_radians().sin_cos();
    let c = (n as f64 - 1.0) / 2.0;
    let mut data = vec![0f32; s.data.len()];
    for k in 0..s.k {
        let src = s.slice(k);
        let dst = &mut data[k * n * n..(k + 1) * n * n];
        let at = |x: isize, y: isize| {
            let x = x.clamp(0, n as isize - 1) as usize;
            let y = y.clamp(0, n as isize - 1) as usize;
            src[y * n + x] as f64
        };
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let sx = cos * dx + sin * dy + c;
                let sy = -sin * dx + cos * dy + c;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
                    + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
                dst[y * n + x] = v as f32;
            }
        }
    }
    AxialStack { k: s.k, side: n, data }
}

/// Random rotation, flip, intensity jitter and Gaussian noise; zero
/// magnitudes leave the sample untouched.
pub fn augment(s: &AxialStack, cfg: &AugmentConfig, rng: &mut impl Rng) -> AxialStack {
    let mut out = s.clone();
    if cfg.rotation_deg > 0.0 {
        out = rotate(&out, rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg));
    }
    if cfg.flip_p > 0.0 && rng.gen_bool(cfg.flip_p.min(1.0)) {
        out = hflip(&out);
    }
    if cfg.intensity_jitter > 0.0 {
        let f = 1.0 + rng.gen_range(-cfg.intensity_jitter..=cfg.intensity_jitter);
        out.data.iter_mut().for_each(|v| *v = (*v as f64 * f) as f32);
    }
    if cfg.noise_sigma > 0.0 {
        let (lo, hi) = out.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let sigma = cfg.noise_sigma * (hi - lo) as f64;
        if sigma > 0.0 {
            let d = Normal::new(0.0, sigma).expect("positive sigma");
            out.data.iter_mut().for_each(|v| *v = (*v as f64 + d.sample(rng)) as f32);
        }
    }
    out
}

fn default_min_delta() -> f64 {
    1e-4
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Validation AUC must beat the best so far by more than this.
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    /// Inverse-frequency class weights in the loss.
    #[serde(default = "default_true")]
    pub weighted_loss: bool,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Stop as soon as validation AUC reaches this value.
    #[serde(default)]
    pub stop_at_auc: Option<f64>,
}

impl TrainConfig {
    pub fn for_model(kind: ModelKind) -> Self {
        let (lr, batch_size) = match kind {
            ModelKind::InceptionGrid => (1e-4, 32),
            _ => (5e-4, 8),
        };
        TrainConfig {
            lr,
            batch_size,
            max_epochs: 100,
            patience: 30,
            seed: 0,
            min_delta: default_min_delta(),
            weighted_loss: true,
            augment: AugmentConfig::default(),
            stop_at_auc: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be at least 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs)));
        }
        Ok(())
    }
}

/// Patience counter on a score that should increase.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping { patience, min_delta, best: f64::NEG_INFINITY, best_epoch: 0, stale: 0 }
    }

    /// Records the score of `epoch` (1-based); returns whether it is a new
    /// best.
    pub fn update(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best + self.min_delta || self.best_epoch == 0 {
            self.best = score;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Epoch count and best epoch when training sees `trace` as validation
/// scores, one per epoch.
pub fn replay_early_stopping(trace: &[f64], patience: usize, min_delta: f64, max_epochs: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(patience, min_delta);
    let mut ran = 0;
    for (i, &s) in trace.iter().take(max_epochs).enumerate() {
        ran = i + 1;
        es.update(ran, s);
        if es.should_stop() {
            break;
        }
    }
    (ran, es.best_epoch())
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base, 0x5EED), |s, p| mix(s, *p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_auc: f64,
    pub val_auc_history: Vec<f64>,
    pub train_loss_history: Vec<f64>,
}

#[derive(Debug)]
pub struct Trained {
    pub model: Model,
    pub result: FoldResult,
}

/// Class probabilities in eval mode, `chunk` samples per forward pass.
pub fn predict_samples(model: &Model, samples: &[Sample], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let stacks: Vec<&AxialStack> = part.iter().map(|s| &s.stack).collect();
        out.extend(model.predict(&batch_inputs(model.config(), &stacks)?)?);
    }
    Ok(out)
}

pub fn evaluate_samples(model: &Model, samples: &[Sample]) -> Result<Metrics> {
    let c = model.config().num_classes;
    if let Some(s) = samples.iter().find(|s| s.label >= c) {
        return Err(Error::LabelSpace(format!("{} has label {} but the model has {c} classes", s.scan_id, s.label)));
    }
    let probs = predict_samples(model, samples, 16)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    evaluate(&probs, &labels, c)
}

fn validation_auc(model: &Model, val: &[Sample]) -> Result<f64> {
    Ok(evaluate_samples(model, val)?.auc)
}

/// One training step; returns the batch loss.
fn train_step(
    model: &mut Model,
    adam: &mut Adam<f32>,
    batch: &[AxialStack],
    labels: &[usize],
    weights: &[f64],
    seed: u64,
    at: (usize, usize),
) -> Result<f64> {
    let refs: Vec<&AxialStack> = batch.iter().collect();
    let inputs = batch_inputs(model.config(), &refs)?;
    let tape = Tape::<f32>::new();
    let params = model.params.to_vars(&tape);
    let (loss, updates, grads) = {
        let mut cx = Ctx::new(&tape, &params, &model.buffers, Mode::Train, seed);
        let xs: Vec<Var<f32>> = inputs.into_iter().map(|t| tape.constant(t)).collect();
        let out = model.forward(&mut cx, &xs).map_err(|e| match e {
            Error::Tensor(adbench_tensor::TensorError::NonFinite { .. }) => Error::NonFiniteLoss { epoch: at.0, step: at.1 },
            other => other,
        })?;
        let loss = tape.weighted_cross_entropy(&out.logits, labels, weights)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: at.0, step: at.1 });
        }
        let updates = cx.finish();
        let mut g = tape.backward(&loss)?;
        let grads: Vec<Vec<f32>> = params.iter().map(|p| g.take(p).unwrap_or_else(|| vec![0.0; p.value().numel()])).collect();
        (value, updates, grads)
    };
    adam.step(&mut model.params, &grads).map_err(|e| match e {
        adbench_tensor::TensorError::NonFinite { .. } => Error::NonFiniteLoss { epoch: at.0, step: at.1 },
        other => other.into(),
    })?;
    updates.apply(&mut model.buffers, BN_MOMENTUM);
    Ok(loss)
}

/// Trains a fresh model and returns it at its best validation epoch.
pub fn train_fold(model_cfg: &ModelConfig, fold: usize, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!("fold {fold}: empty training or validation split")));
    }
    let c = model_cfg.num_classes;
    let mut counts = vec![0usize; c];
    for s in train.iter().chain(val) {
        if s.label >= c {
            return Err(Error::LabelSpace(format!("{} has label {} for a {c}-class model", s.scan_id, s.label)));
        }
    }
    train.iter().for_each(|s| counts[s.label] += 1);
    let weights = if cfg.weighted_loss { class_weights(&counts)? } else { vec![1.0; c] };
    let fold_seed = derive_seed(cfg.seed, &[fold as u64]);
    let mut model = Model::build(model_cfg, derive_seed(fold_seed, &[0]))?;
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut es = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best: Option<(NamedTensors<f32>, NamedTensors<f32>)> = None;
    let mut val_hist = Vec::new();
    let mut loss_hist = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fold_seed, &[1, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<AxialStack> = idx.iter().map(|&i| augment(&train[i].stack, &cfg.augment, &mut rng)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let seed = derive_seed(fold_seed, &[2, epoch as u64, step as u64]);
            total += train_step(&mut model, &mut adam, &batch, &labels, &weights, seed, (epoch, step))? * idx.len() as f64;
        }
        loss_hist.push(total / train.len() as f64);
        let auc = validation_auc(&model, val)?;
        val_hist.push(auc);
        epochs_run = epoch;
        if es.update(epoch, auc) {
            best = Some((model.params.clone(), model.buffers.clone()));
        }
        log::debug!("fold {fold} epoch {epoch}: loss {:.4} val auc {auc:.4}", loss_hist[epoch - 1]);
        if es.should_stop() || cfg.stop_at_auc.is_some_and(|t| auc >= t) {
            break;
        }
    }
    let (params, buffers) = best.expect("at least one epoch ran");
    model.params = params;
    model.buffers = buffers;
    Ok(Trained {
        model,
        result: FoldResult {
            fold,
            best_epoch: es.best_epoch(),
            epochs_run,
            best_val_auc: es.best(),
            val_auc_history: val_hist,
            train_loss_history: loss_hist,
        },
    })
}

/// Scans of one cohort with their prepared volumes, index-aligned.
pub struct CohortData<'a> {
    pub name: String,
    pub scans: &'a [LabeledScan],
    pub prepared: &'a [Prepared],
}

impl CohortData<'_> {
    fn pick(&self, wanted: &[LabeledScan]) -> Result<Vec<Prepared>> {
        let index: HashMap<&str, usize> = self.scans.iter().enumerate().map(|(i, s)| (s.scan_id.as_str(), i)).collect();
        wanted
            .iter()
            .map(|s| {
                index
                    .get(s.scan_id.as_str())
                    .map(|&i| self.prepared[i].clone())
                    .ok_or_else(|| Error::Invalid(format!("scan {} has no prepared volume", s.scan_id)))
            })
            .collect()
    }
}

pub struct FoldOutcome {
    pub trained: Trained,
    pub test: Metrics,
    pub external: Vec<(String, Metrics)>,
    pub global_stats: Option<GlobalStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<FoldResult>,
    pub test: Vec<Metrics>,
    pub external: Vec<(String, Vec<Metrics>)>,
}

#[derive(Clone, Debug)]
pub struct CvSpec<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub selection: Selection,
    pub normalization: NormMode,
}

/// Runs one fold: global statistics (if any) come from its training split
/// only, and external cohorts are normalised with them.
pub fn run_fold(spec: &CvSpec<'_>, cohort: &CohortData<'_>, plan: &SplitPlan, fold: usize, externals: &[CohortData<'_>]) -> Result<FoldOutcome> {
    let split = plan.split(cohort.scans, fold, spec.selection)?;
    let train_prep = cohort.pick(&split.train)?;
    let global = match spec.normalization {
        NormMode::ZscoreGlobal => Some(fit_global_stats(&train_prep, &format!("{} fold {fold} train", cohort.name))?),
        _ => None,
    };
    let norm = normalization_spec(spec.normalization, global.as_ref())?;
    let train = make_samples(&split.train, &train_prep, &norm, spec.model)?;
    let val = make_samples(&split.val, &cohort.pick(&split.val)?, &norm, spec.model)?;
    let test = make_samples(&split.test, &cohort.pick(&split.test)?, &norm, spec.model)?;
    let trained = train_fold(spec.model, fold, &train, &val, spec.train)?;
    let test_metrics = evaluate_samples(&trained.model, &test)?;
    let mut external = Vec::with_capacity(externals.len());
    for ext in externals {
        let samples = make_samples(ext.scans, ext.prepared, &norm, spec.model)?;
        external.push((ext.name.clone(), evaluate_samples(&trained.model, &samples)?));
    }
    Ok(FoldOutcome { trained, test: test_metrics, external, global_stats: global })
}

/// Every fold in order; `on_fold` sees each outcome (model included) before
/// it is dropped.
pub fn cross_validate(
    spec: &CvSpec<'_>,
    cohort: &CohortData<'_>,
    plan: &SplitPlan,
    externals: &[CohortData<'_>],
    mut on_fold: impl FnMut(&FoldOutcome) -> Result<()>,
) -> Result<CvSummary> {
    let mut summary = CvSummary {
        folds: Vec::new(),
        test: Vec::new(),
        external: externals.iter().map(|e| (e.name.clone(), Vec::new())).collect(),
    };
    for fold in 0..plan.k() {
        let out = run_fold(spec, cohort, plan, fold, externals)?;
        on_fold(&out)?;
        summary.folds.push(out.trained.result.clone());
        summary.test.push(out.test);
        for (slot, (_, m)) in summary.external.iter_mut().zip(&out.external) {
            slot.1.push(*m);
        }
    }
    Ok(summary)
}

/// FNV-1a over every parameter and buffer byte.
pub fn model_checksum(model: &Model) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in model.params.tensors().iter().chain(model.buffers.tensors()) {
        for v in t.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Softmax probabilities for raw logits rows; re-exported for callers that
/// hold logits rather than a model.
pub fn probabilities(logits: &adbench_tensor::Tensor<f32>) -> Vec<Vec<f64>> {
    softmax_rows(logits)
}
