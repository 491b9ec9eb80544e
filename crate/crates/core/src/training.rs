//! Sequential phase training with early stopping on validation AUC.
//!
//! [`fit_phase`] holds the epoch loop and is generic over an [`EpochRunner`],
//! so stopping and restore behaviour can be exercised with a stub.
//! [`ModelRunner`] is the real runner around a [`Classifier`].

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fundus_nn::{AdamW, AdamWConfig, Module, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetId, DatasetManifest, FundusRecord, Split};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{bce_loss_and_grad, sigmoid, Classifier, Pass};
use crate::preprocess::{finish, prepare, ImageBuffer, PipelineConfig, RunMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub dataset: DatasetId,
    pub base_lr: f64,
    /// Learning-rate multiplier for the backbone; 0 freezes it.
    pub backbone_lr_scale: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<PhaseConfig>,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            phases: vec![
                PhaseConfig { dataset: DatasetId::Acrima, base_lr: 1e-3, backbone_lr_scale: 1.0, max_epochs: 25, batch_size: 32 },
                PhaseConfig { dataset: DatasetId::Origa, base_lr: 1e-4, backbone_lr_scale: 0.1, max_epochs: 25, batch_size: 32 },
            ],
        }
    }
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("training.phases must contain at least one phase".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.base_lr > 0.0 && p.base_lr.is_finite()) {
                return Err(Error::Config(format!("training.phases[{i}].base_lr must be positive")));
            }
            if !(p.backbone_lr_scale >= 0.0 && p.backbone_lr_scale.is_finite()) {
                return Err(Error::Config(format!("training.phases[{i}].backbone_lr_scale must be non-negative")));
            }
            if p.batch_size == 0 || p.max_epochs == 0 {
                return Err(Error::Config(format!(
                    "training.phases[{i}]: batch_size and max_epochs must be at least 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopPolicy {
    pub patience: usize,
    pub min_delta: f64,
    pub restore_best: bool,
}

impl Default for EarlyStopPolicy {
    fn default() -> Self {
        Self { patience: 5, min_delta: 0.001, restore_best: true }
    }
}

/// Optional learning-rate halving when the monitored value stalls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauPolicy {
    pub enabled: bool,
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauPolicy {
    fn default() -> Self {
        Self { enabled: false, factor: 0.5, patience: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub phases: Vec<PhaseConfig>,
    pub early_stopping: EarlyStopPolicy,
    pub plateau: PlateauPolicy,
    pub weight_decay: f64,
    /// Datasets that must never be trained on.
    pub held_out: Vec<DatasetId>,
    /// Reject plans that name a held-out dataset.
    pub strict_held_out: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            phases: PhasePlan::default().phases,
            early_stopping: EarlyStopPolicy::default(),
            plateau: PlateauPolicy::default(),
            weight_decay: 1e-4,
            held_out: vec![DatasetId::RimOne],
            strict_held_out: true,
            eval_batch_size: 16,
        }
    }
}

impl TrainingConfig {
    pub fn plan(&self) -> PhasePlan {
        PhasePlan { phases: self.phases.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().validate()?;
        if self.early_stopping.patience == 0 {
            return Err(Error::Config("training.early_stopping.patience must be at least 1".into()));
        }
        if !(self.early_stopping.min_delta >= 0.0) {
            return Err(Error::Config("training.early_stopping.min_delta must be non-negative".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("training.weight_decay must be non-negative".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("training.eval_batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValAuc,
    /// Used when the validation split holds a single class.
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    NonFiniteLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseHistory {
    pub phase: usize,
    pub dataset: DatasetId,
    pub monitor: Monitor,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
    pub restored_best: bool,
}

impl PhaseHistory {
    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub phases: Vec<PhaseHistory>,
}

pub const HISTORY_HEADER: &str = "epoch,phase,train_loss,val_loss,val_auc,lr";

impl TrainingHistory {
    pub fn records(&self) -> impl Iterator<Item = &EpochRecord> {
        self.phases.iter().flat_map(|p| p.epochs.iter())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in self.records() {
            let auc = r.val_auc.map(|a| format!("{a}")).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.phase, r.train_loss, r.val_loss, auc, r.lr));
        }
        s
    }

    /// Writes `history.csv` and `history.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("history.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("history.json");
        let text = serde_json::to_string_pretty(self).expect("history serializes");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Tracks the monitored value. An epoch improves when it beats the best so
/// far by at least `min_delta`; the first epoch always improves.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    policy: EarlyStopPolicy,
    maximize: bool,
    best: Option<f64>,
    best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(policy: EarlyStopPolicy, monitor: Monitor) -> Self {
        Self { policy, maximize: monitor == Monitor::ValAuc, best: None, best_epoch: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        // Small slack so that a gain of exactly min_delta counts despite rounding.
        let slack = 1e-12;
        let improved = match self.best {
            None => true,
            Some(b) if self.maximize => value - b >= self.policy.min_delta - slack,
            Some(b) => b - value >= self.policy.min_delta - slack,
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision { improved, stop: self.stale >= self.policy.patience }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    /// Index of the first batch whose loss was not finite.
    pub non_finite_batch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub loss: f64,
    pub auc: Option<f64>,
    pub record_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

/// What the epoch loop needs from a model and its data.
pub trait EpochRunner {
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<EpochStats>;
    fn evaluate(&mut self) -> Result<EvalOutcome>;
    /// Remembers the current weights as the best so far.
    fn snapshot(&mut self);
    /// Returns to the remembered weights.
    fn restore(&mut self);
}

/// Runs one phase to completion: at most `max_epochs`, stopping early per
/// `policy`, restoring the best weights when asked. On a non-finite loss
/// the phase aborts and the error carries `history` with this phase
/// appended.
pub fn fit_phase<R: EpochRunner>(
    runner: &mut R,
    phase_index: usize,
    phase: &PhaseConfig,
    policy: &EarlyStopPolicy,
    plateau: &PlateauPolicy,
    monitor: Monitor,
    history: &TrainingHistory,
) -> Result<PhaseHistory> {
    let mut stopper = EarlyStopper::new(policy.clone(), monitor);
    let mut plateau_stopper = EarlyStopper::new(
        EarlyStopPolicy { patience: plateau.patience.max(1), ..policy.clone() },
        monitor,
    );
    let mut out = PhaseHistory {
        phase: phase_index,
        dataset: phase.dataset,
        monitor,
        epochs: Vec::new(),
        best_epoch: None,
        stop_reason: StopReason::MaxEpochs,
        restored_best: false,
    };
    let mut lr = phase.base_lr;
    for epoch in 1..=phase.max_epochs {
        let stats = runner.train_epoch(epoch, lr)?;
        if let Some(batch) = stats.non_finite_batch {
            out.stop_reason = StopReason::NonFiniteLoss;
            let mut h = history.clone();
            h.phases.push(out);
            return Err(Error::NonFiniteLoss { phase: phase_index, epoch, batch, history: Box::new(h) });
        }
        let eval = runner.evaluate()?;
        out.epochs.push(EpochRecord {
            phase: phase_index,
            epoch,
            train_loss: stats.train_loss,
            val_loss: eval.loss,
            val_auc: eval.auc,
            lr,
        });
        let value = match monitor {
            Monitor::ValAuc => eval.auc.ok_or_else(|| {
                Error::Data(format!("phase {phase_index}: validation AUC became undefined at epoch {epoch}"))
            })?,
            Monitor::ValLoss => eval.loss,
        };
        log::info!(
            "phase {phase_index} epoch {epoch}: train_loss {:.4} val_loss {:.4} val_auc {} lr {lr:.2e}",
            stats.train_loss,
            eval.loss,
            eval.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
        );
        let decision = stopper.observe(epoch, value);
        if decision.improved {
            runner.snapshot();
        }
        if decision.stop {
            out.stop_reason = StopReason::EarlyStopped;
            break;
        }
        if plateau.enabled && plateau_stopper.observe(epoch, value).stop {
            lr *= plateau.factor;
            plateau_stopper = EarlyStopper::new(
                EarlyStopPolicy { patience: plateau.patience.max(1), ..policy.clone() },
                monitor,
            );
            plateau_stopper.observe(epoch, value);
            log::info!("phase {phase_index}: plateau, learning rate now {lr:.2e}");
        }
    }
    out.best_epoch = stopper.best_epoch();
    if policy.restore_best && out.best_epoch.is_some() {
        runner.restore();
        out.restored_best = true;
    }
    Ok(out)
}

/// splitmix64 over a sequence of words: independent, reproducible streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Record ids of every training batch, one line per batch.
#[derive(Debug, Default)]
pub struct AuditLog {
    lines: Vec<String>,
    sink: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { lines: Vec::new(), sink: Some(BufWriter::new(f)), path: Some(path.to_path_buf()) })
    }

    /// Like [`AuditLog::to_file`], but keeps existing lines (resumed runs).
    pub fn appending(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { lines: Vec::new(), sink: Some(BufWriter::new(f)), path: Some(path.to_path_buf()) })
    }

    pub fn record(&mut self, line: String) -> Result<()> {
        if let Some(w) = &mut self.sink {
            let path = self.path.clone().unwrap_or_default();
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// Training-batch lines that mention a record of `dataset`.
    pub fn count_dataset(&self, dataset: DatasetId) -> usize {
        let prefix = format!("{dataset}/");
        self.lines
            .iter()
            .filter(|l| l.starts_with("train ") && l.split(' ').any(|tok| tok.starts_with(&prefix)))
            .count()
    }
}

/// An image after the deterministic pipeline head, ready for batching.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub record_id: String,
    pub dataset: DatasetId,
    pub label: u8,
    pub image: ImageBuffer,
}

/// Decodes and prepares `records` in parallel, preserving order.
pub fn prepare_records(records: &[&FundusRecord], pipeline: &PipelineConfig) -> Result<Vec<PreparedSample>> {
    records
        .par_iter()
        .map(|r| {
            let img = ImageBuffer::open(&r.image_path)?;
            Ok(PreparedSample {
                record_id: r.record_id.clone(),
                dataset: r.dataset_id,
                label: r.label.as_u8(),
                image: prepare(&img, pipeline)?,
            })
        })
        .collect()
}

fn batch_tensor(samples: &[&PreparedSample], pipeline: &PipelineConfig, mode: RunMode, seeds: &[u64]) -> Result<Tensor> {
    let chw: Vec<Vec<f32>> = samples
        .par_iter()
        .zip(seeds)
        .map(|(s, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(finish(&s.image, pipeline, mode, &mut rng)?.to_chw())
        })
        .collect::<Result<_>>()?;
    let (h, w, _) = samples[0].image.shape();
    let refs: Vec<&[f32]> = chw.iter().map(Vec::as_slice).collect();
    Ok(Tensor::stack(&refs, [3, h, w]))
}

/// Eval-mode scores for prepared samples: mean BCE, AUC when defined, and
/// per-record probabilities.
pub fn evaluate_prepared(
    model: &mut Classifier,
    samples: &[PreparedSample],
    pipeline: &PipelineConfig,
    batch_size: usize,
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    let mut loss = 0.0f64;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let x = batch_tensor(&refs, pipeline, RunMode::Eval, &vec![0; refs.len()])?;
        let logits = model.forward_logits(x, Pass::Eval);
        for (z, s) in logits.iter().zip(chunk) {
            loss += crate::model::bce_with_logits(*z as f64, s.label as f64);
            scores.push(sigmoid(*z as f64));
        }
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let auc = match metrics::roc_auc(&scores, &labels) {
        Ok(r) => Some(r.auc),
        Err(Error::UndefinedAuc(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalOutcome {
        loss: loss / samples.len() as f64,
        auc,
        record_ids: samples.iter().map(|s| s.record_id.clone()).collect(),
        labels,
        scores,
    })
}

/// Eval-mode pass over one split of a manifest.
pub fn evaluate_epoch(
    model: &mut Classifier,
    manifest: &DatasetManifest,
    split: Split,
    pipeline: &PipelineConfig,
    batch_size: usize,
) -> Result<EvalOutcome> {
    let records = manifest.split_records(split);
    if records.is_empty() {
        return Err(Error::Data(format!("{}: {split} split is empty", manifest.dataset_id)));
    }
    let prepared = prepare_records(&records, pipeline)?;
    evaluate_prepared(model, &prepared, pipeline, batch_size)
}

/// The real epoch runner: AdamW over a [`Classifier`] on prepared samples.
pub struct ModelRunner<'a> {
    pub model: &'a mut Classifier,
    optimizer: AdamW,
    train: Vec<PreparedSample>,
    val: Vec<PreparedSample>,
    pipeline: PipelineConfig,
    phase_index: usize,
    phase: PhaseConfig,
    seed: u64,
    eval_batch_size: usize,
    forbidden: HashSet<DatasetId>,
    audit: &'a mut AuditLog,
    best: Option<Vec<Vec<f32>>>,
}

impl<'a> ModelRunner<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a mut Classifier,
        train: Vec<PreparedSample>,
        val: Vec<PreparedSample>,
        pipeline: PipelineConfig,
        phase_index: usize,
        phase: PhaseConfig,
        config: &TrainingConfig,
        seed: u64,
        audit: &'a mut AuditLog,
    ) -> Self {
        let optimizer = AdamW::new(AdamWConfig { weight_decay: config.weight_decay as f32, ..AdamWConfig::default() });
        Self {
            model,
            optimizer,
            train,
            val,
            pipeline,
            phase_index,
            phase,
            seed,
            eval_batch_size: config.eval_batch_size,
            forbidden: config.held_out.iter().copied().collect(),
            audit,
            best: None,
        }
    }

    fn backbone_trainable(&self) -> bool {
        self.phase.backbone_lr_scale > 0.0
    }

    /// One optimisation step on the given training samples; returns the
    /// mean batch loss.
    pub fn step(&mut self, idx: &[usize], seeds: &[u64], model_seed: u64, lr: f64) -> Result<f64> {
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &self.train[i]).collect();
        let x = batch_tensor(&batch, &self.pipeline, RunMode::Train, seeds)?;
        let labels: Vec<f32> = batch.iter().map(|s| s.label as f32).collect();
        let trainable = self.backbone_trainable();
        self.model.zero_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
        let logits = self.model.forward_logits(x, Pass::Train { rng: &mut rng, backbone_trainable: trainable });
        let (loss, grad) = bce_loss_and_grad(&logits, &labels);
        if !loss.is_finite() {
            self.model.clear_cache();
            return Ok(f64::NAN);
        }
        self.model.backward(&grad, trainable);
        let head_lr = lr as f32;
        let backbone_lr = (lr * self.phase.backbone_lr_scale) as f32;
        let head_names: HashSet<String> = self.model.head.params().iter().map(|p| p.name.clone()).collect();
        let mut params: Vec<(&mut fundus_nn::Param, f32)> = self
            .model
            .params_mut()
            .into_iter()
            .filter(|p| p.trainable)
            .map(|p| {
                let lr = if head_names.contains(&p.name) { head_lr } else { backbone_lr };
                (p, lr)
            })
            .collect();
        self.optimizer.step(&mut params);
        Ok(loss as f64)
    }
}

impl EpochRunner for ModelRunner<'_> {
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<EpochStats> {
        let (phase, seed) = (self.phase_index as u64, self.seed);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, phase, epoch as u64, 1])));
        let mut total = 0.0;
        let mut seen = 0usize;
        for (b, idx) in order.chunks(self.phase.batch_size).enumerate() {
            for &i in idx {
                if self.forbidden.contains(&self.train[i].dataset) {
                    return Err(Error::HeldOut {
                        dataset: self.train[i].dataset.to_string(),
                        context: format!("record {} in phase {phase} epoch {epoch} batch {b}", self.train[i].record_id),
                    });
                }
            }
            let ids: Vec<&str> = idx.iter().map(|&i| self.train[i].record_id.as_str()).collect();
            self.audit.record(format!("train phase={phase} epoch={epoch} batch={b} {}", ids.join(" ")))?;
            let seeds: Vec<u64> = idx.iter().map(|&i| derive_seed(&[seed, phase, epoch as u64, 2, i as u64])).collect();
            let model_seed = derive_seed(&[seed, phase, epoch as u64, 3, b as u64]);
            let loss = self.step(idx, &seeds, model_seed, lr)?;
            if !loss.is_finite() {
                return Ok(EpochStats { train_loss: f64::NAN, non_finite_batch: Some(b) });
            }
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        Ok(EpochStats { train_loss: total / seen.max(1) as f64, non_finite_batch: None })
    }

    fn evaluate(&mut self) -> Result<EvalOutcome> {
        evaluate_prepared(self.model, &self.val, &self.pipeline, self.eval_batch_size)
    }

    fn snapshot(&mut self) {
        self.best = Some(self.model.params().iter().map(|p| p.value.clone()).collect());
    }

    fn restore(&mut self) {
        if let Some(best) = &self.best {
            for (p, v) in self.model.params_mut().into_iter().zip(best) {
                p.value.copy_from_slice(v);
            }
        }
    }
}

/// Checks a plan against the held-out list.
pub fn check_held_out(config: &TrainingConfig) -> Result<()> {
    for (i, p) in config.phases.iter().enumerate() {
        if config.held_out.contains(&p.dataset) {
            let context = format!("training.phases[{i}] trains on a held-out dataset");
            if config.strict_held_out {
                return Err(Error::HeldOut { dataset: p.dataset.to_string(), context });
            }
            log::warn!("{context} ({}); strict_held_out is off", p.dataset);
        }
    }
    Ok(())
}

fn split_checked<'m>(manifest: &'m DatasetManifest, split: Split) -> Result<Vec<&'m FundusRecord>> {
    let records = manifest.split_records(split);
    if records.is_empty() {
        return Err(Error::Data(format!("{}: {split} split is empty", manifest.dataset_id)));
    }
    Ok(records)
}

/// Trains one phase on a manifest's train split, validating on its val split.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    model: &mut Classifier,
    manifest: &DatasetManifest,
    phase_index: usize,
    phase: &PhaseConfig,
    pipeline: &PipelineConfig,
    config: &TrainingConfig,
    seed: u64,
    audit: &mut AuditLog,
    history: &TrainingHistory,
) -> Result<PhaseHistory> {
    let train = prepare_records(&split_checked(manifest, Split::Train)?, pipeline)?;
    let val = prepare_records(&split_checked(manifest, Split::Val)?, pipeline)?;
    let classes: HashSet<u8> = val.iter().map(|s| s.label).collect();
    let monitor = if classes.len() == 2 {
        Monitor::ValAuc
    } else {
        log::warn!("{}: validation split has one class; early stopping follows val_loss", manifest.dataset_id);
        Monitor::ValLoss
    };
    let mut runner =
        ModelRunner::new(model, train, val, pipeline.clone(), phase_index, phase.clone(), config, seed, audit);
    fit_phase(&mut runner, phase_index, phase, &config.early_stopping, &config.plateau, monitor, history)
}

pub fn checkpoint_path(run_dir: &Path, phase_index: usize) -> PathBuf {
    run_dir.join(format!("phase{phase_index}_best.ckpt"))
}

/// Runs every phase in order on the same model. With a `run_dir`, each
/// finished phase leaves `phase<k>_best.ckpt` and an updated history there,
/// and phases whose checkpoint already exists are skipped when `resume` is
/// set.
#[allow(clippy::too_many_arguments)]
pub fn run_sequential(
    model: &mut Classifier,
    manifests: &BTreeMap<DatasetId, DatasetManifest>,
    config: &TrainingConfig,
    pipeline: &PipelineConfig,
    seed: u64,
    run_dir: Option<&Path>,
    resume: bool,
    audit: &mut AuditLog,
) -> Result<TrainingHistory> {
    config.validate()?;
    pipeline.validate()?;
    check_held_out(config)?;
    for p in &config.phases {
        if !manifests.contains_key(&p.dataset) {
            return Err(Error::Config(format!("no manifest for phase dataset {}", p.dataset)));
        }
    }
    let mut history = TrainingHistory::default();
    let mut start = 0;
    if let (true, Some(dir)) = (resume, run_dir) {
        let json = dir.join("history.json");
        if json.is_file() {
            let saved = TrainingHistory::read_json(&json)?;
            let done = saved.phases.len().min(config.phases.len());
            if done > 0 && checkpoint_path(dir, done).is_file() {
                *model = Classifier::load_checkpoint(&checkpoint_path(dir, done), Some(&model.config))?;
                history.phases = saved.phases[..done].to_vec();
                start = done;
                log::info!("resuming after phase {done}");
            }
        }
    }
    for (i, phase) in config.phases.iter().enumerate().skip(start) {
        let k = i + 1;
        let manifest = &manifests[&phase.dataset];
        let ph = train_phase(model, manifest, k, phase, pipeline, config, seed, audit, &history)?;
        history.phases.push(ph);
        if let Some(dir) = run_dir {
            let best = history.phases[i].best_record().cloned();
            let mut meta = vec![("phase", k.to_string()), ("dataset", phase.dataset.to_string())];
            if let Some(b) = best {
                meta.push(("best_epoch", b.epoch.to_string()));
            }
            model.save_checkpoint(&checkpoint_path(dir, k), &meta)?;
            history.write(dir)?;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scripted validation values; the "weights" are the epoch number.
    struct Scripted {
        values: Vec<f64>,
        current: usize,
        saved: usize,
    }

    impl EpochRunner for Scripted {
        fn train_epoch(&mut self, epoch: usize, _lr: f64) -> Result<EpochStats> {
            self.current = epoch;
            Ok(EpochStats { train_loss: 1.0 / epoch as f64, non_finite_batch: None })
        }
        fn evaluate(&mut self) -> Result<EvalOutcome> {
            let v = self.values[self.current - 1];
            Ok(EvalOutcome { loss: 1.0 - v, auc: Some(v), record_ids: vec![], labels: vec![], scores: vec![] })
        }
        fn snapshot(&mut self) {
            self.saved = self.current;
        }
        fn restore(&mut self) {
            self.current = self.saved;
        }
    }

    fn phase(max_epochs: usize) -> PhaseConfig {
        PhaseConfig { dataset: DatasetId::Synthetic, base_lr: 1e-3, backbone_lr_scale: 1.0, max_epochs, batch_size: 4 }
    }

    #[test]
    fn stops_after_patience_stale_epochs() {
        let mut r = Scripted { values: vec![0.6, 0.7, 0.7004, 0.7006, 0.9, 0.95], current: 0, saved: 0 };
        let policy = EarlyStopPolicy { patience: 2, min_delta: 0.001, restore_best: true };
        let h = fit_phase(&mut r, 1, &phase(10), &policy, &PlateauPolicy::default(), Monitor::ValAuc, &TrainingHistory::default())
            .unwrap();
        assert_eq!(h.epochs.len(), 4);
        assert_eq!(h.stop_reason, StopReason::EarlyStopped);
        assert_eq!(h.best_epoch, Some(2));
        assert_eq!(r.current, 2);
    }

    #[test]
    fn exact_min_delta_counts_as_improvement() {
        let mut s = EarlyStopper::new(EarlyStopPolicy { patience: 1, min_delta: 0.01, restore_best: true }, Monitor::ValAuc);
        assert!(s.observe(1, 0.5).improved);
        assert!(s.observe(2, 0.51).improved);
        assert!(!s.observe(3, 0.5199).improved);
    }

    #[test]
    fn loss_monitor_minimises() {
        let mut s = EarlyStopper::new(EarlyStopPolicy::default(), Monitor::ValLoss);
        s.observe(1, 0.7);
        assert!(s.observe(2, 0.6).improved);
        assert!(!s.observe(3, 0.65).improved);
    }

    #[test]
    fn plateau_halves_learning_rate() {
        let mut r = Scripted { values: vec![0.5; 8], current: 0, saved: 0 };
        let policy = EarlyStopPolicy { patience: 10, ..Default::default() };
        let plateau = PlateauPolicy { enabled: true, factor: 0.5, patience: 3 };
        let h = fit_phase(&mut r, 1, &phase(8), &policy, &plateau, Monitor::ValAuc, &TrainingHistory::default()).unwrap();
        let lrs: Vec<f64> = h.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs[..4], [1e-3; 4]);
        assert_eq!(lrs[4], 5e-4);
        assert!(lrs[7] < 5e-4);
    }

    #[test]
    fn held_out_phase_is_rejected_in_strict_mode() {
        let mut cfg = TrainingConfig::default();
        cfg.phases[1].dataset = DatasetId::RimOne;
        assert!(matches!(check_held_out(&cfg), Err(Error::HeldOut { .. })));
        cfg.strict_held_out = false;
        assert!(check_held_out(&cfg).is_ok());
    }

    #[test]
    fn history_csv_header_and_rows() {
        let h = TrainingHistory {
            phases: vec![PhaseHistory {
                phase: 1,
                dataset: DatasetId::Acrima,
                monitor: Monitor::ValAuc,
                epochs: vec![EpochRecord { phase: 1, epoch: 1, train_loss: 0.5, val_loss: 0.4, val_auc: None, lr: 0.001 }],
                best_epoch: Some(1),
                stop_reason: StopReason::MaxEpochs,
                restored_best: true,
            }],
        };
        assert_eq!(h.to_csv(), "epoch,phase,train_loss,val_loss,val_auc,lr\n1,1,0.5,0.4,,0.001\n");
    }

    #[test]
    fn derived_seeds_differ_per_component() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
        assert_eq!(derive_seed(&[7, 8, 9]), derive_seed(&[7, 8, 9]));
    }
}
