//! Command-line front end. Exit codes: 0 success, 1 runtime error,
//! 2 configuration or usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::datasets::synthetic::{generate_synthetic, SyntheticSpec};
use crate::datasets::{ingest, DatasetId, DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::experiments::{self, emit_figures, load_datasets, ExperimentReport, RunPaths, ScoreSet};
use crate::metrics::evaluate_scores;
use crate::model::{build_model, Classifier};
use crate::preprocess::{write_preview, Variant};
use crate::training::{evaluate_epoch, run_sequential, AuditLog, TrainingHistory};

#[derive(Debug, Parser)]
#[command(name = "fundusbench", version, about = "Sequential glaucoma classifier training and evaluation")]
pub struct Cli {
    /// Worker threads for decoding and augmentation (0: config value, else all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a manifest from a dataset directory, or generate a synthetic one.
    Ingest(IngestArgs),
    /// Run the configured phase plan and save checkpoints and history.
    Train(TrainArgs),
    /// Score a checkpoint on the test splits of the configured datasets.
    Evaluate(EvaluateArgs),
    /// Run the configured experiment end to end.
    Experiment(ExperimentArgs),
    /// Regenerate figures from a saved report.
    Plot(PlotArgs),
    /// Preprocessing utilities.
    Preprocess {
        #[command(subcommand)]
        command: PreprocessCommand,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `training.phases[0].max_epochs=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Dataset directory.
    #[arg(long, required_unless_present = "synthetic", requires_all = ["dataset", "adapter"])]
    pub root: Option<PathBuf>,
    /// ACRIMA, ORIGA or RIMONE (SYNTHETIC with `--synthetic`).
    #[arg(long)]
    pub dataset: Option<DatasetId>,
    /// Label adapter: acrima_filename, sidecar_csv or class_dirs.
    #[arg(long)]
    pub adapter: Option<String>,
    /// Generate N images per class instead of reading `--root`.
    #[arg(long, value_name = "N", conflicts_with_all = ["root", "adapter"])]
    pub synthetic: Option<usize>,
    /// Manifest CSV path, or the output directory with `--synthetic`.
    #[arg(long)]
    pub out: PathBuf,
    /// Side length of generated images, with `--synthetic`.
    #[arg(long, default_value_t = 224)]
    pub image_size: u32,
    /// Seed for generated images, with `--synthetic`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory; defaults to `<output_dir>/train/<timestamp>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Skip phases already completed in `--run-dir`.
    #[arg(long, requires = "run_dir")]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// A checkpoint written by `train` or `experiment`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory; defaults to `<output_dir>/evaluate/<timestamp>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run a single seed, overriding `seed` and `experiment.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// A `report.json` written by `experiment`.
    #[arg(long)]
    pub from: PathBuf,
    /// Output directory; defaults to `figures/` beside the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PreprocessCommand {
    /// Write before/after PNG pairs for the configured pipeline.
    Preview(PreviewArgs),
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Override `preprocess.variant`.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Directory for the before/after image pairs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "minimal" => Ok(Variant::Minimal),
        "enhanced" => Ok(Variant::Enhanced),
        _ => Err(format!("unknown variant `{s}` (minimal or enhanced)")),
    }
}

/// Parses `args` and runs the command. Usage errors print clap's message
/// and exit with its code; everything else returns here.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Ingest(a) => {
            set_workers(workers);
            cmd_ingest(&a)
        }
        Command::Train(a) => {
            let cfg = a.config.load()?;
            set_workers(pick_workers(workers, &cfg));
            cmd_train(&cfg, a.run_dir.as_deref(), a.resume).map(drop)
        }
        Command::Evaluate(a) => {
            let cfg = a.config.load()?;
            set_workers(pick_workers(workers, &cfg));
            cmd_evaluate(&cfg, &a.checkpoint, a.out.as_deref()).map(drop)
        }
        Command::Experiment(a) => {
            let mut cfg = a.config.load()?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
                cfg.experiment.seeds = vec![seed];
            }
            set_workers(pick_workers(workers, &cfg));
            let out = experiments::run_experiment(&cfg)?;
            print!("{}", out.report.tables_csv());
            println!("artifacts: {}", out.dir.display());
            Ok(())
        }
        Command::Plot(a) => {
            let report = ExperimentReport::read(&a.from)?;
            let out = a.out.unwrap_or_else(|| a.from.parent().unwrap_or(Path::new(".")).join("figures"));
            let files = emit_figures(&report, &out)?;
            println!("wrote {} figure files to {}", files.len(), out.display());
            Ok(())
        }
        Command::Preprocess { command: PreprocessCommand::Preview(a) } => {
            let mut cfg = a.config.load()?;
            if let Some(v) = a.variant {
                cfg.preprocess.variant = v;
            }
            let files = write_preview(&a.images, &cfg.preprocess, &a.out)?;
            println!("wrote {} preview images to {}", files.len(), a.out.display());
            Ok(())
        }
    }
}

fn pick_workers(flag: usize, cfg: &RunConfig) -> usize {
    if flag > 0 {
        flag
    } else {
        cfg.workers
    }
}

fn set_workers(n: usize) {
    if n > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
}

fn class_summary(m: &DatasetManifest) -> String {
    format!(
        "{}: {} records ({} normal, {} glaucoma), fingerprint {}",
        m.dataset_id,
        m.len(),
        m.count(Label::Normal),
        m.count(Label::Glaucoma),
        &m.source_fingerprint[..12]
    )
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    if let Some(n) = a.synthetic {
        let id = a.dataset.unwrap_or(DatasetId::Synthetic);
        let spec = SyntheticSpec::stand_in(id, n, a.image_size, a.seed);
        let m = generate_synthetic(&a.out, &spec)?;
        let path = a.out.join("manifest.csv");
        m.write_csv(&path)?;
        println!("{}", class_summary(&m));
        println!("manifest: {}", path.display());
        return Ok(());
    }
    let (root, id, adapter) = match (&a.root, a.dataset, &a.adapter) {
        (Some(r), Some(d), Some(ad)) => (r, d, ad),
        _ => return Err(Error::Config("--root, --dataset and --adapter are required together".into())),
    };
    let ingested = ingest(root, id, adapter)?;
    ingested.manifest.write_csv(&a.out)?;
    println!("{}", class_summary(&ingested.manifest));
    if !ingested.warnings.skipped.is_empty() {
        println!("skipped {} unreadable images", ingested.warnings.skipped.len());
    }
    println!("manifest: {}", a.out.display());
    Ok(())
}

/// Trains the configured plan into `run_dir` (or a fresh timestamped one).
pub fn cmd_train(cfg: &RunConfig, run_dir: Option<&Path>, resume: bool) -> Result<PathBuf> {
    let dir = match run_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            d.to_path_buf()
        }
        None => RunPaths::create(&cfg.output_dir, "train")?.root,
    };
    let data = load_datasets(cfg)?;
    cfg.write_resolved(&dir)?;
    for (id, m) in &data.manifests {
        m.write_csv(&dir.join("manifests").join(format!("{id}.csv")))?;
    }
    let mut audit = AuditLog::appending(&dir.join("audit.log"))?;
    let mut model = build_model(&cfg.model, cfg.seed)?;
    let history =
        run_sequential(&mut model, &data.manifests, &cfg.training, &cfg.preprocess, cfg.seed, Some(&dir), resume, &mut audit)?;
    model.save_checkpoint(&dir.join("final.ckpt"), &[("seed", cfg.seed.to_string())])?;
    history.write(&dir)?;
    print_history(&history);
    println!("artifacts: {}", dir.display());
    Ok(dir)
}

fn print_history(h: &TrainingHistory) {
    for p in &h.phases {
        let best = p.best_record();
        println!(
            "phase {} ({}): {} epochs, stop {:?}, best epoch {:?}, best val_auc {}",
            p.phase,
            p.dataset,
            p.epochs.len(),
            p.stop_reason,
            p.best_epoch,
            best.and_then(|r| r.val_auc).map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
        );
    }
}

/// Scores `checkpoint` on the test split of each `experiment.eval_datasets`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let mut model = Classifier::load_checkpoint(checkpoint, Some(&cfg.model))?;
    let data = load_datasets(cfg)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => RunPaths::create(&cfg.output_dir, "evaluate")?.root,
    };
    std::fs::create_dir_all(dir.join("scores")).map_err(|e| Error::io(&dir, e))?;
    cfg.write_resolved(&dir)?;
    let mut evals = Vec::new();
    for ds in &cfg.experiment.eval_datasets {
        let manifest =
            data.manifests.get(ds).ok_or_else(|| Error::Config(format!("no data for evaluation dataset {ds}")))?;
        let o = evaluate_epoch(&mut model, manifest, Split::Test, &cfg.preprocess, cfg.training.eval_batch_size)?;
        let set = ScoreSet { name: ds.to_string(), record_ids: o.record_ids, labels: o.labels, scores: o.scores };
        let p = dir.join("scores").join(format!("{ds}.csv"));
        std::fs::write(&p, set.to_csv()).map_err(|e| Error::io(&p, e))?;
        let e = evaluate_scores(ds.as_str(), &set.scores, &set.labels, cfg.metrics.threshold)?;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
        println!(
            "{ds}: n={} acc {} sens {} spec {} f1 {} auc {}",
            e.n,
            fmt(e.accuracy),
            fmt(e.sensitivity),
            fmt(e.specificity),
            fmt(e.f1),
            fmt(e.auc)
        );
        evals.push(e);
    }
    let p = dir.join("evaluation.json");
    let json = serde_json::json!({ "checkpoint": checkpoint, "synthetic": data.synthetic, "evals": evals });
    std::fs::write(&p, serde_json::to_string_pretty(&json).expect("json")).map_err(|e| Error::io(&p, e))?;
    println!("artifacts: {}", dir.display());
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_root_is_a_usage_error() {
        assert_eq!(main_with_args(["fundusbench", "ingest", "--dataset", "ACRIMA", "--out", "x.csv"]), 2);
    }

    #[test]
    fn set_parses_repeatedly() {
        let cli = Cli::try_parse_from([
            "fundusbench",
            "train",
            "--set",
            "training.phases[0].max_epochs=1",
            "--set",
            "seed=3",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!("expected train") };
        let cfg = a.config.load().unwrap();
        assert_eq!((cfg.training.phases[0].max_epochs, cfg.seed), (1, 3));
    }

    #[test]
    fn unknown_key_exits_2() {
        let code = main_with_args(["fundusbench", "experiment", "--set", "training.nope=1"]);
        assert_eq!(code, 2);
    }
}
