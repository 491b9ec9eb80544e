//! The two experiments: preprocessing comparison (exp1) and sequential
//! training with a held-out dataset (exp2).
//!
//! A run writes everything under `<output_dir>/<experiment_id>/<timestamp>/`:
//! `report.json`, `tables.csv`, `scores/*.csv`, `figures/*.{svg,png}`,
//! `manifests/*.csv`, `config_resolved.toml` and `audit.log`. Figures are a
//! pure function of `report.json`; see [`emit_figures`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentId, RunConfig};
use crate::datasets::split::stratified_split;
use crate::datasets::synthetic::{generate_synthetic, SyntheticSpec};
use crate::datasets::{ingest, DatasetId, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, DatasetEval};
use crate::model::build_model;
use crate::plot::charts::{loss_chart, roc_chart};
use crate::plot::{bar_chart, line_chart, BarGroup};
use crate::preprocess::{PipelineConfig, Variant};
use crate::training::{derive_seed, evaluate_epoch, run_sequential, AuditLog, TrainingHistory};

/// The three datasets of the sequential study, in plan order.
pub const STUDY_DATASETS: [DatasetId; 3] = [DatasetId::Acrima, DatasetId::Origa, DatasetId::RimOne];

/// Published values, shown beside ours and never used as thresholds.
pub struct ReferenceTable;

impl ReferenceTable {
    pub const PREPROCESSING_METRICS: [&'static str; 4] = ["accuracy", "sensitivity", "specificity", "auc"];
    pub const PREPROCESSING: [(&'static str, [f64; 4]); 2] =
        [("minimal", [0.646, 0.676, 0.635, 0.789]), ("enhanced", [0.623, 0.735, 0.583, 0.728])];
    pub const GENERALIZATION_METRICS: [&'static str; 5] = ["accuracy", "sensitivity", "specificity", "f1", "auc"];
    pub const GENERALIZATION: [(&'static str, [f64; 5]); 3] = [
        ("ACRIMA", [0.993, 0.987, 1.000, 0.994, 0.999]),
        ("ORIGA", [0.677, 0.647, 0.688, 0.512, 0.731]),
        ("RIMONE", [0.799, 0.482, 0.949, 0.607, 0.878]),
    ];

    /// The published value for `(experiment, row, metric)`, if there is one.
    pub fn get(experiment: ExperimentId, row: &str, metric: &str) -> Option<f64> {
        fn find<const N: usize>(rows: &[(&str, [f64; N])], names: &[&str; N], row: &str, metric: &str) -> Option<f64> {
            let col = names.iter().position(|m| *m == metric)?;
            rows.iter().find(|(r, _)| *r == row).map(|(_, v)| v[col])
        }
        match experiment {
            ExperimentId::Exp1Preprocessing => find(&Self::PREPROCESSING, &Self::PREPROCESSING_METRICS, row, metric),
            ExperimentId::Exp2Generalization => find(&Self::GENERALIZATION, &Self::GENERALIZATION_METRICS, row, metric),
        }
    }
}

/// Split manifests for every study dataset, and which were generated.
pub struct LoadedData {
    pub manifests: BTreeMap<DatasetId, DatasetManifest>,
    pub synthetic: Vec<DatasetId>,
    pub skipped_images: usize,
}

impl LoadedData {
    pub fn banner(&self) -> Option<String> {
        if self.synthetic.is_empty() {
            return None;
        }
        let names: Vec<&str> = self.synthetic.iter().map(|d| d.as_str()).collect();
        Some(format!(
            "SYNTHETIC FALLBACK: {} replaced by generated stand-ins; metrics say nothing about clinical performance",
            names.join(", ")
        ))
    }
}

/// Loads or generates the three study datasets and splits each one.
/// Generated images are cached under `<output_dir>/.synthetic/`.
pub fn load_datasets(cfg: &RunConfig) -> Result<LoadedData> {
    let mut manifests = BTreeMap::new();
    let mut synthetic = Vec::new();
    let mut skipped_images = 0;
    for (i, id) in STUDY_DATASETS.into_iter().enumerate() {
        let manifest = match cfg.data.source(id) {
            Some(src) => match &src.manifest {
                Some(path) => DatasetManifest::read_csv(path)?,
                None => {
                    let ingested = ingest(&src.root, id, &src.adapter)?;
                    skipped_images += ingested.warnings.skipped.len();
                    ingested.manifest
                }
            },
            None if cfg.data.synthetic.enabled => {
                let s = &cfg.data.synthetic;
                let seed = derive_seed(&[cfg.seed, i as u64]);
                let dir = cfg
                    .output_dir
                    .join(".synthetic")
                    .join(format!("{id}_n{}_px{}_seed{seed}", s.n_per_class, s.image_size));
                synthetic.push(id);
                cached_synthetic(&dir, &SyntheticSpec::stand_in(id, s.n_per_class, s.image_size, seed))?
            }
            None => {
                return Err(Error::Config(format!(
                    "no source configured for {id} and data.synthetic.enabled is false"
                )))
            }
        };
        manifests.insert(id, stratified_split(&manifest, &cfg.split)?);
    }
    let data = LoadedData { manifests, synthetic, skipped_images };
    if let Some(b) = data.banner() {
        log::warn!("{}\n{b}\n{}", "=".repeat(72), "=".repeat(72));
    }
    Ok(data)
}

/// Generation is deterministic, so a complete earlier output is reused.
fn cached_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    let stamp = dir.join("manifest.csv");
    if stamp.is_file() {
        if let Ok(m) = DatasetManifest::read_csv(&stamp) {
            if m.len() == 2 * spec.n_per_class && m.records.iter().all(|r| r.image_path.is_file()) {
                return Ok(m);
            }
        }
    }
    let m = generate_synthetic(dir, spec)?;
    m.write_csv(&stamp)?;
    Ok(m)
}

/// Digest of `(record_id, split)` pairs; equal digests mean equal splits.
pub fn split_fingerprint(manifest: &DatasetManifest) -> String {
    let mut h = Sha256::new();
    for r in &manifest.records {
        let split = r.split.map(|s| s.as_str()).unwrap_or("-");
        h.update(format!("{}\t{split}\n", r.record_id).as_bytes());
    }
    hex::encode(h.finalize())
}

fn fingerprints(manifests: &BTreeMap<DatasetId, DatasetManifest>) -> BTreeMap<String, String> {
    manifests.iter().map(|(id, m)| (id.to_string(), split_fingerprint(m))).collect()
}

/// Per-record scores behind one evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub name: String,
    pub record_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("record_id,label,score\n");
        for ((id, l), p) in self.record_ids.iter().zip(&self.labels).zip(&self.scores) {
            let _ = writeln!(s, "{id},{l},{p}");
        }
        s
    }

    fn concat(name: &str, parts: &[ScoreSet]) -> ScoreSet {
        let mut out = ScoreSet { name: name.to_string(), record_ids: vec![], labels: vec![], scores: vec![] };
        for p in parts {
            out.record_ids.extend(p.record_ids.iter().cloned());
            out.labels.extend(&p.labels);
            out.scores.extend(&p.scores);
        }
        out
    }
}

/// One trained model: its training history and evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    /// `minimal` / `enhanced` for exp1, `sequential` for exp2.
    pub arm: String,
    pub variant: Variant,
    /// Split digests of the manifests this arm trained and tested on.
    pub split_fingerprints: BTreeMap<String, String>,
    pub history: TrainingHistory,
    pub evals: Vec<DatasetEval>,
    #[serde(skip)]
    pub scores: Vec<ScoreSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    /// exp2 only.
    pub ordering: Option<OrderingCheck>,
}

/// Whether test AUCs follow the published decline ACRIMA > RIMONE > ORIGA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub expected: Vec<DatasetId>,
    pub aucs: BTreeMap<String, Option<f64>>,
    pub pass: bool,
}

pub fn ordering_check(evals: &[DatasetEval]) -> OrderingCheck {
    let expected = vec![DatasetId::Acrima, DatasetId::RimOne, DatasetId::Origa];
    let aucs: BTreeMap<String, Option<f64>> = expected
        .iter()
        .map(|d| (d.to_string(), evals.iter().find(|e| e.dataset == d.as_str()).and_then(|e| e.auc)))
        .collect();
    let seq: Option<Vec<f64>> = expected.iter().map(|d| aucs[d.as_str()]).collect();
    let pass = seq.is_some_and(|v| v.windows(2).all(|w| w[0] > w[1]));
    OrderingCheck { expected, aucs, pass }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub train_batches: usize,
    /// Training batches containing a record of each dataset.
    pub batches_by_dataset: BTreeMap<String, usize>,
    pub held_out: Vec<DatasetId>,
    /// Training batches containing a held-out record. Must be zero.
    pub held_out_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub row: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentId,
    pub created: String,
    pub synthetic: Vec<DatasetId>,
    pub banner: Option<String>,
    /// What the metric rows were measured on.
    pub eval_corpus: String,
    pub split_fingerprints: BTreeMap<String, String>,
    pub split_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub runs: Vec<SeedRun>,
    pub reference: Vec<ReferenceRow>,
    pub audit: AuditSummary,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// `tables.csv`: one row per (seed, arm, dataset), with reference values
    /// where they exist. The `data` column reads `synthetic` when any dataset
    /// behind the row is a synthetic stand-in. Contains nothing time-dependent.
    pub fn tables_csv(&self) -> String {
        const METRICS: [&str; 6] = ["accuracy", "sensitivity", "specificity", "precision", "f1", "auc"];
        let mut s = String::from("experiment,seed,arm,dataset,data,n,tp,fp,tn,fn");
        for m in METRICS {
            let _ = write!(s, ",{m}");
        }
        for m in ["accuracy", "sensitivity", "specificity", "f1", "auc"] {
            let _ = write!(s, ",ref_{m}");
        }
        s.push('\n');
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for run in &self.runs {
            for arm in &run.arms {
                for e in &arm.evals {
                    let c = &e.confusion;
                    let synthetic = e.dataset.split('+').any(|d| self.synthetic.iter().any(|s| s.as_str() == d));
                    let data = if synthetic { "synthetic" } else { "real" };
                    let _ = write!(
                        s,
                        "{},{},{},{},{data},{},{},{},{},{}",
                        self.experiment, run.seed, arm.arm, e.dataset, e.n, c.tp, c.fp, c.tn, c.fn_
                    );
                    for v in [e.accuracy, e.sensitivity, e.specificity, e.precision, e.f1, e.auc] {
                        let _ = write!(s, ",{}", fmt(v));
                    }
                    let row = match self.experiment {
                        ExperimentId::Exp1Preprocessing => arm.arm.as_str(),
                        ExperimentId::Exp2Generalization => e.dataset.as_str(),
                    };
                    for m in ["accuracy", "sensitivity", "specificity", "f1", "auc"] {
                        let _ = write!(s, ",{}", fmt(ReferenceTable::get(self.experiment, row, m)));
                    }
                    s.push('\n');
                }
            }
        }
        s
    }
}

fn reference_rows(experiment: ExperimentId) -> Vec<ReferenceRow> {
    fn rows<const N: usize>(t: &[(&str, [f64; N])], names: &[&str; N]) -> Vec<ReferenceRow> {
        t.iter()
            .map(|(r, v)| ReferenceRow {
                row: r.to_string(),
                values: names.iter().zip(v).map(|(n, v)| (n.to_string(), *v)).collect(),
            })
            .collect()
    }
    match experiment {
        ExperimentId::Exp1Preprocessing => rows(&ReferenceTable::PREPROCESSING, &ReferenceTable::PREPROCESSING_METRICS),
        ExperimentId::Exp2Generalization => rows(&ReferenceTable::GENERALIZATION, &ReferenceTable::GENERALIZATION_METRICS),
    }
}

/// Locations of one experiment run's artifacts.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    /// A fresh `<output_dir>/<experiment>/<timestamp>` directory.
    pub fn create(output_dir: &Path, experiment: &str) -> Result<Self> {
        let base = output_dir.join(experiment);
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
        let mut root = base.join(&stamp);
        let mut k = 1;
        while root.exists() {
            root = base.join(format!("{stamp}-{k}"));
            k += 1;
        }
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn audit(&self) -> PathBuf {
        self.root.join("audit.log")
    }
}

/// Trains one model on the configured plan and scores the test splits of
/// `eval_sets`. Each entry of `eval_sets` is a row name and the datasets
/// whose test splits are pooled into it.
#[allow(clippy::too_many_arguments)]
fn run_arm(
    cfg: &RunConfig,
    arm: &str,
    pipeline: &PipelineConfig,
    data: &LoadedData,
    eval_sets: &[(String, Vec<DatasetId>)],
    seed: u64,
    checkpoint_dir: Option<&Path>,
    audit: &mut AuditLog,
) -> Result<ArmResult> {
    log::info!("seed {seed}, arm {arm}: training {} phase(s)", cfg.training.phases.len());
    audit.record(format!("arm {arm} seed={seed}"))?;
    let mut model = build_model(&cfg.model, seed)?;
    let history =
        run_sequential(&mut model, &data.manifests, &cfg.training, pipeline, seed, checkpoint_dir, false, audit)?;
    let mut per_dataset: BTreeMap<DatasetId, ScoreSet> = BTreeMap::new();
    let mut evals = Vec::new();
    let mut scores = Vec::new();
    for (name, members) in eval_sets {
        let mut parts = Vec::new();
        for ds in members {
            if !per_dataset.contains_key(ds) {
                let manifest = data
                    .manifests
                    .get(ds)
                    .ok_or_else(|| Error::Config(format!("no data for evaluation dataset {ds}")))?;
                let out = evaluate_epoch(&mut model, manifest, Split::Test, pipeline, cfg.training.eval_batch_size)?;
                per_dataset.insert(
                    *ds,
                    ScoreSet { name: ds.to_string(), record_ids: out.record_ids, labels: out.labels, scores: out.scores },
                );
            }
            parts.push(per_dataset[ds].clone());
        }
        let set = ScoreSet::concat(name, &parts);
        evals.push(evaluate_scores(name, &set.scores, &set.labels, cfg.metrics.threshold)?);
        scores.push(set);
    }
    Ok(ArmResult {
        arm: arm.to_string(),
        variant: pipeline.variant,
        split_fingerprints: fingerprints(&data.manifests),
        history,
        evals,
        scores,
    })
}

fn summarize_audit(audit: &AuditLog, held_out: &[DatasetId]) -> AuditSummary {
    let train_batches = audit.lines().iter().filter(|l| l.starts_with("train ")).count();
    let batches_by_dataset = STUDY_DATASETS
        .iter()
        .chain([DatasetId::Synthetic].iter())
        .map(|d| (d.to_string(), audit.count_dataset(*d)))
        .filter(|(_, n)| *n > 0)
        .collect();
    let held_out_batches = held_out.iter().map(|d| audit.count_dataset(*d)).sum();
    AuditSummary { train_batches, batches_by_dataset, held_out: held_out.to_vec(), held_out_batches }
}

/// Where a finished experiment put its artifacts.
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub report: ExperimentReport,
}

/// Runs `cfg.experiment.id` end to end and writes all artifacts.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    match cfg.experiment.id {
        ExperimentId::Exp1Preprocessing => run_experiment1(cfg),
        ExperimentId::Exp2Generalization => run_experiment2(cfg),
    }
}

/// Exp1: two models identical except for the preprocessing variant, scored
/// on the pooled test splits of `experiment.exp1_eval_datasets`.
pub fn run_experiment1(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let mut cfg = cfg.clone();
    cfg.experiment.id = ExperimentId::Exp1Preprocessing;
    cfg.validate()?;
    crate::training::check_held_out(&cfg.training)?;
    let data = load_datasets(&cfg)?;
    let paths = RunPaths::create(&cfg.output_dir, ExperimentId::Exp1Preprocessing.as_str())?;
    let pooled: Vec<DatasetId> = cfg.experiment.exp1_eval_datasets.clone();
    let corpus = pooled.iter().map(|d| d.as_str()).collect::<Vec<_>>().join("+");
    let eval_sets = vec![(corpus.clone(), pooled)];
    let mut audit = AuditLog::to_file(&paths.audit())?;
    let mut runs = Vec::new();
    for seed in cfg.run_seeds() {
        let mut arms = Vec::new();
        for (i, variant) in cfg.experiment.variants.iter().enumerate() {
            let pipeline = PipelineConfig { variant: *variant, ..cfg.preprocess.clone() };
            let name = if cfg.experiment.variants[0] == cfg.experiment.variants[1] {
                format!("{}_{}", variant_name(*variant), i + 1)
            } else {
                variant_name(*variant).to_string()
            };
            let ckpt = paths.root.join("checkpoints").join(format!("seed{seed}_{name}"));
            arms.push(run_arm(&cfg, &name, &pipeline, &data, &eval_sets, seed, Some(&ckpt), &mut audit)?);
        }
        runs.push(SeedRun { seed, arms, ordering: None });
    }
    let shared = runs.iter().all(|r| r.arms.windows(2).all(|w| w[0].split_fingerprints == w[1].split_fingerprints));
    let notes = vec![
        format!("Metric rows are measured on the pooled {corpus} test splits; the corpus behind the published preprocessing comparison is not stated."),
        format!("Both arms share split assignments: {shared}."),
    ];
    finish(cfg, paths, data, ExperimentId::Exp1Preprocessing, corpus, runs, &audit, notes)
}

/// Exp2: the sequential plan, then every dataset in
/// `experiment.eval_datasets` scored on its own test split.
pub fn run_experiment2(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let mut cfg = cfg.clone();
    cfg.experiment.id = ExperimentId::Exp2Generalization;
    cfg.validate()?;
    if !cfg.training.held_out.contains(&DatasetId::RimOne) {
        return Err(Error::Config("exp2 requires RIMONE in training.held_out".into()));
    }
    if !cfg.training.strict_held_out {
        return Err(Error::Config("exp2 requires training.strict_held_out = true".into()));
    }
    crate::training::check_held_out(&cfg.training)?;
    let data = load_datasets(&cfg)?;
    let paths = RunPaths::create(&cfg.output_dir, ExperimentId::Exp2Generalization.as_str())?;
    let eval_sets: Vec<(String, Vec<DatasetId>)> =
        cfg.experiment.eval_datasets.iter().map(|d| (d.to_string(), vec![*d])).collect();
    let mut audit = AuditLog::to_file(&paths.audit())?;
    let mut runs = Vec::new();
    for seed in cfg.run_seeds() {
        let ckpt = paths.root.join("checkpoints").join(format!("seed{seed}"));
        let pipeline = cfg.preprocess.clone();
        let arm = run_arm(&cfg, "sequential", &pipeline, &data, &eval_sets, seed, Some(&ckpt), &mut audit)?;
        let ordering = Some(ordering_check(&arm.evals));
        runs.push(SeedRun { seed, arms: vec![arm], ordering });
    }
    let held_out: Vec<&str> = cfg.training.held_out.iter().map(|d| d.as_str()).collect();
    let notes = vec![
        format!("Every dataset is scored on its own held-out test split; held out from training: {}.", held_out.join(", ")),
        "Published reference values are shown for comparison only.".into(),
    ];
    let corpus = "per-dataset test splits".to_string();
    finish(cfg, paths, data, ExperimentId::Exp2Generalization, corpus, runs, &audit, notes)
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Minimal => "minimal",
        Variant::Enhanced => "enhanced",
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: RunConfig,
    paths: RunPaths,
    data: LoadedData,
    experiment: ExperimentId,
    eval_corpus: String,
    runs: Vec<SeedRun>,
    audit: &AuditLog,
    mut notes: Vec<String>,
) -> Result<ExperimentOutput> {
    let summary = summarize_audit(audit, &cfg.training.held_out);
    if summary.held_out_batches > 0 {
        return Err(Error::HeldOut {
            dataset: cfg.training.held_out.iter().map(|d| d.as_str()).collect::<Vec<_>>().join(","),
            context: format!("audit log lists {} training batches with held-out records", summary.held_out_batches),
        });
    }
    if data.skipped_images > 0 {
        notes.push(format!("{} undecodable images were skipped during ingest.", data.skipped_images));
    }
    cfg.write_resolved(&paths.root)?;
    let manifests_dir = paths.root.join("manifests");
    for (id, m) in &data.manifests {
        m.write_csv(&manifests_dir.join(format!("{id}.csv")))?;
    }
    let scores_dir = paths.scores();
    std::fs::create_dir_all(&scores_dir).map_err(|e| Error::io(&scores_dir, e))?;
    for run in &runs {
        for arm in &run.arms {
            for set in &arm.scores {
                let p = scores_dir.join(format!("seed{}_{}_{}.csv", run.seed, arm.arm, set.name.replace('+', "_")));
                std::fs::write(&p, set.to_csv()).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let report = ExperimentReport {
        experiment,
        created: chrono::Local::now().to_rfc3339(),
        synthetic: data.synthetic.clone(),
        banner: data.banner(),
        eval_corpus,
        split_fingerprints: fingerprints(&data.manifests),
        split_counts: data
            .manifests
            .iter()
            .map(|(id, m)| {
                let counts = [Split::Train, Split::Val, Split::Test]
                    .into_iter()
                    .map(|s| (s.to_string(), m.split_records(s).len()))
                    .collect();
                (id.to_string(), counts)
            })
            .collect(),
        runs,
        reference: reference_rows(experiment),
        audit: summary,
        notes,
    };
    let tables = paths.root.join("tables.csv");
    std::fs::write(&tables, report.tables_csv()).map_err(|e| Error::io(&tables, e))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(paths.report(), json).map_err(|e| Error::io(paths.report(), e))?;
    // Figures come from the persisted report so a later `plot --from`
    // reproduces them exactly.
    emit_figures(&ExperimentReport::read(&paths.report())?, &paths.figures())?;
    Ok(ExperimentOutput { dir: paths.root, report })
}

/// Writes every figure for `report` into `dir` and returns the files.
/// Phases without epochs and evaluations without a ROC are skipped with a
/// warning.
pub fn emit_figures(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.runs.is_empty() {
        return Err(Error::Data("report has no runs to plot".into()));
    }
    let mut files = Vec::new();
    for run in &report.runs {
        let s = run.seed;
        let mut curves = Vec::new();
        for arm in &run.arms {
            for e in &arm.evals {
                let label = match report.experiment {
                    ExperimentId::Exp1Preprocessing => arm.arm.clone(),
                    ExperimentId::Exp2Generalization => e.dataset.clone(),
                };
                match &e.roc {
                    Some(roc) => curves.push((label, roc)),
                    None => log::warn!("seed {s} {}: no ROC for {}, skipped", arm.arm, e.dataset),
                }
            }
            for ph in &arm.history.phases {
                if ph.epochs.is_empty() {
                    log::warn!("seed {s} {} phase {}: empty history, loss figure skipped", arm.arm, ph.phase);
                    continue;
                }
                let title = format!("{} phase {} ({}) loss, seed {s}", arm.arm, ph.phase, ph.dataset);
                let canvas = line_chart(&loss_chart(&title, ph));
                files.extend(canvas.write(dir, &format!("loss_seed{s}_{}_phase{}", arm.arm, ph.phase))?);
            }
        }
        if !curves.is_empty() {
            let title = match report.experiment {
                ExperimentId::Exp1Preprocessing => format!("ROC on {}, seed {s}", report.eval_corpus),
                ExperimentId::Exp2Generalization => format!("ROC per test split, seed {s}"),
            };
            let refs: Vec<(String, &crate::metrics::RocCurve)> = curves.iter().map(|(n, r)| (n.clone(), *r)).collect();
            files.extend(line_chart(&roc_chart(&title, &refs)).write(dir, &format!("roc_seed{s}"))?);
        }
        let metrics: Vec<String> = match report.experiment {
            ExperimentId::Exp1Preprocessing => ReferenceTable::PREPROCESSING_METRICS.iter().map(|m| m.to_string()).collect(),
            ExperimentId::Exp2Generalization => ReferenceTable::GENERALIZATION_METRICS.iter().map(|m| m.to_string()).collect(),
        };
        let groups: Vec<BarGroup> = run
            .arms
            .iter()
            .flat_map(|arm| {
                let metrics = &metrics;
                arm.evals.iter().map(move |e| BarGroup {
                    label: match report.experiment {
                        ExperimentId::Exp1Preprocessing => arm.arm.clone(),
                        ExperimentId::Exp2Generalization => e.dataset.clone(),
                    },
                    values: metrics.iter().map(|m| metric_value(e, m)).collect(),
                })
            })
            .collect();
        if !groups.is_empty() {
            let title = format!("{} metrics, seed {s}", report.experiment);
            files.extend(bar_chart(&title, &metrics, &groups).write(dir, &format!("metrics_seed{s}"))?);
        }
    }
    Ok(files)
}

fn metric_value(e: &DatasetEval, metric: &str) -> Option<f64> {
    match metric {
        "accuracy" => e.accuracy,
        "sensitivity" => e.sensitivity,
        "specificity" => e.specificity,
        "precision" => e.precision,
        "f1" => e.f1,
        "auc" => e.auc,
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_scores;

    #[test]
    fn reference_lookup_uses_published_columns() {
        assert_eq!(ReferenceTable::get(ExperimentId::Exp1Preprocessing, "minimal", "auc"), Some(0.789));
        assert_eq!(ReferenceTable::get(ExperimentId::Exp1Preprocessing, "enhanced", "sensitivity"), Some(0.735));
        assert_eq!(ReferenceTable::get(ExperimentId::Exp1Preprocessing, "minimal", "f1"), None);
        assert_eq!(ReferenceTable::get(ExperimentId::Exp2Generalization, "RIMONE", "f1"), Some(0.607));
        assert_eq!(ReferenceTable::get(ExperimentId::Exp2Generalization, "ORIGA", "auc"), Some(0.731));
        assert_eq!(ReferenceTable::get(ExperimentId::Exp2Generalization, "ACRIMA", "specificity"), Some(1.0));
    }

    fn eval(name: &str, scores: &[f64], labels: &[u8]) -> DatasetEval {
        evaluate_scores(name, scores, labels, 0.5).unwrap()
    }

    #[test]
    fn ordering_check_requires_strict_decline() {
        let perfect = eval("ACRIMA", &[0.9, 0.1], &[1, 0]);
        let good = eval("RIMONE", &[0.9, 0.5, 0.6, 0.1], &[1, 1, 0, 0]);
        let weak = eval("ORIGA", &[0.5, 0.6, 0.1], &[1, 0, 0]);
        let check = ordering_check(&[weak.clone(), perfect.clone(), good]);
        assert!(check.pass, "{check:?}");
        let swapped_good = eval("ORIGA", &[0.9, 0.5, 0.6, 0.1], &[1, 1, 0, 0]);
        let swapped_weak = DatasetEval { dataset: "RIMONE".into(), ..weak };
        assert!(!ordering_check(&[perfect.clone(), swapped_good, swapped_weak]).pass);
        assert!(!ordering_check(&[perfect]).pass);
    }
}
