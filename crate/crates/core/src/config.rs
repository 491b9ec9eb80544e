//! Run configuration: one TOML file, resolved against defaults, with
//! dotted-path overrides such as `training.phases[0].max_epochs=1`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datasets::split::SplitSpec;
use crate::datasets::DatasetId;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::preprocess::{PipelineConfig, Variant};
use crate::training::TrainingConfig;

pub const RESOLVED_FILE: &str = "config_resolved.toml";

/// Where one real dataset lives and how its labels are read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub root: PathBuf,
    #[serde(default = "default_adapter")]
    pub adapter: String,
    /// A manifest CSV from `ingest`; used instead of scanning `root`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

fn default_adapter() -> String {
    "sidecar_csv".into()
}

/// Generated stand-ins used for any dataset without a configured source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticFallback {
    pub enabled: bool,
    pub n_per_class: usize,
    pub image_size: u32,
}

impl Default for SyntheticFallback {
    fn default() -> Self {
        Self { enabled: true, n_per_class: 100, image_size: 224 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acrima: Option<DatasetSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub origa: Option<DatasetSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rimone: Option<DatasetSource>,
    pub synthetic: SyntheticFallback,
}

impl DataConfig {
    pub fn source(&self, id: DatasetId) -> Option<&DatasetSource> {
        match id {
            DatasetId::Acrima => self.acrima.as_ref(),
            DatasetId::Origa => self.origa.as_ref(),
            DatasetId::RimOne => self.rimone.as_ref(),
            DatasetId::Synthetic => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Exp1Preprocessing,
    Exp2Generalization,
}

impl ExperimentId {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Exp1Preprocessing => "exp1_preprocessing",
            ExperimentId::Exp2Generalization => "exp2_generalization",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp1_preprocessing" | "exp1" => Ok(ExperimentId::Exp1Preprocessing),
            "exp2_generalization" | "exp2" => Ok(ExperimentId::Exp2Generalization),
            _ => Err(Error::Config(format!("unknown experiment `{s}`; expected exp1_preprocessing or exp2_generalization"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub id: ExperimentId,
    /// The two preprocessing arms compared by exp1. Every other pipeline
    /// knob comes from `preprocess`.
    pub variants: Vec<Variant>,
    /// Test splits pooled into exp1's evaluation corpus.
    pub exp1_eval_datasets: Vec<DatasetId>,
    /// Test splits scored after exp2's sequential run.
    pub eval_datasets: Vec<DatasetId>,
    /// One full run per seed; empty means the global `seed`.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: ExperimentId::Exp2Generalization,
            variants: vec![Variant::Minimal, Variant::Enhanced],
            exp1_eval_datasets: vec![DatasetId::Origa, DatasetId::RimOne],
            eval_datasets: vec![DatasetId::Acrima, DatasetId::Origa, DatasetId::RimOne],
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Scores at or above this value are predicted glaucoma.
    pub threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for decoding and augmentation; 0 uses every core.
    pub workers: usize,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub preprocess: PipelineConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub experiment: ExperimentConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs"),
            workers: 0,
            data: DataConfig::default(),
            split: SplitSpec::default(),
            preprocess: PipelineConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            experiment: ExperimentConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any) over the defaults, then applies `key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = Value::Table(defaults_table());
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut value, Value::Table(file));
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut value, key.trim(), parse_value(raw.trim()))?;
        }
        Self::from_value(value)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut value = Value::Table(defaults_table());
        merge(&mut value, Value::Table(file));
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            if msg.contains("unknown field") {
                Error::Config(format!("{msg}\nvalid keys:\n  {}", valid_keys().join("\n  ")))
            } else {
                Error::Config(msg)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.preprocess.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(Error::Config(format!("metrics.threshold must be in [0, 1], got {}", self.metrics.threshold)));
        }
        if self.experiment.variants.len() != 2 {
            return Err(Error::Config(format!(
                "experiment.variants must name exactly two pipeline variants, got {}",
                self.experiment.variants.len()
            )));
        }
        if self.experiment.exp1_eval_datasets.is_empty() || self.experiment.eval_datasets.is_empty() {
            return Err(Error::Config("experiment evaluation dataset lists must not be empty".into()));
        }
        for (name, src) in [("acrima", &self.data.acrima), ("origa", &self.data.origa), ("rimone", &self.data.rimone)] {
            if let Some(src) = src {
                let id: DatasetId = name.parse()?;
                crate::datasets::adapters::adapter_for(&src.adapter, id)
                    .map_err(|e| Error::Config(format!("data.{name}.adapter: {e}")))?;
            }
        }
        Ok(())
    }

    /// Seeds of the runs an experiment performs.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.experiment.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.experiment.seeds.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Writes `config_resolved.toml` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn defaults_table() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize")
}

/// Every settable dotted key. Array elements appear as `[0]`.
pub fn valid_keys() -> Vec<String> {
    let mut sample = RunConfig::default();
    let src = DatasetSource { root: PathBuf::new(), adapter: default_adapter(), manifest: Some(PathBuf::new()) };
    sample.data.acrima = Some(src.clone());
    sample.data.origa = Some(src.clone());
    sample.data.rimone = Some(src);
    let mut out = Vec::new();
    flatten(&Value::Table(Table::try_from(sample).expect("defaults serialize")), "", &mut out);
    out
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(v, &key, out);
            }
        }
        Value::Array(a) if a.first().is_some_and(Value::is_table) => flatten(&a[0], &format!("{prefix}[0]"), out),
        _ => out.push(prefix.to_string()),
    }
}

/// Tables merge key by key; any other value, arrays included, replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

enum Segment {
    Key(String),
    Index(usize),
}

fn parse_path(path: &str) -> Result<Vec<Segment>> {
    let bad = || Error::Config(format!("malformed key `{path}`"));
    let mut out = Vec::new();
    for part in path.split('.') {
        let (name, mut rest) = part.split_at(part.find('[').unwrap_or(part.len()));
        if name.is_empty() {
            return Err(bad());
        }
        out.push(Segment::Key(name.to_string()));
        while !rest.is_empty() {
            let close = rest.find(']').ok_or_else(bad)?;
            let idx = rest[1..close].parse().map_err(|_| bad())?;
            out.push(Segment::Index(idx));
            rest = &rest[close + 1..];
            if !rest.is_empty() && !rest.starts_with('[') {
                return Err(bad());
            }
        }
    }
    Ok(out)
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let segments = parse_path(path)?;
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match seg {
            Segment::Key(k) => {
                let t = cur
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{path}`: `{k}` is not inside a table")))?;
                if last {
                    t.insert(k.clone(), value);
                    return Ok(());
                }
                t.entry(k.clone()).or_insert_with(|| Value::Table(Table::new()))
            }
            Segment::Index(idx) => {
                let a = cur
                    .as_array_mut()
                    .ok_or_else(|| Error::Config(format!("`{path}`: index [{idx}] applied to a non-array")))?;
                let len = a.len();
                let slot = a
                    .get_mut(*idx)
                    .ok_or_else(|| Error::Config(format!("`{path}`: index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
        };
    }
    Ok(())
}
