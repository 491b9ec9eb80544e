//! Unified binary-labelled manifests over heterogeneous fundus datasets.
//!
//! Each source layout is read by a label adapter (see [`adapters`]) into a
//! [`DatasetManifest`]: an ordered, fingerprinted list of [`FundusRecord`]s
//! with labels mapped to 0 (normal) / 1 (glaucomatous). [`split`] assigns
//! stratified train/val/test splits and [`synthetic`] renders a separable
//! stand-in dataset for desk-scale runs.

pub mod adapters;
pub mod split;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use adapters::{adapter_ids, LabelAdapter};
pub use split::{stratified_split, SplitSpec};
pub use synthetic::{generate_synthetic, SyntheticSpec, SyntheticStyle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "ACRIMA")]
    Acrima,
    #[serde(rename = "ORIGA")]
    Origa,
    #[serde(rename = "RIMONE", alias = "RIM-ONE")]
    RimOne,
    #[serde(rename = "SYNTHETIC")]
    Synthetic,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [DatasetId::Acrima, DatasetId::Origa, DatasetId::RimOne, DatasetId::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Acrima => "ACRIMA",
            DatasetId::Origa => "ORIGA",
            DatasetId::RimOne => "RIMONE",
            DatasetId::Synthetic => "SYNTHETIC",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "ACRIMA" => Ok(DatasetId::Acrima),
            "ORIGA" => Ok(DatasetId::Origa),
            "RIMONE" => Ok(DatasetId::RimOne),
            "SYNTHETIC" => Ok(DatasetId::Synthetic),
            _ => Err(Error::Config(format!(
                "unknown dataset `{s}` (expected one of ACRIMA, ORIGA, RIMONE, SYNTHETIC)"
            ))),
        }
    }
}

/// Binary diagnosis label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal = 0,
    Glaucoma = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Glaucoma),
            _ => Err(Error::Data(format!("label must be 0 or 1, got {v}"))),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labelled fundus image. Field order matches the manifest CSV columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FundusRecord {
    pub record_id: String,
    pub dataset_id: DatasetId,
    pub image_path: PathBuf,
    pub label: Label,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: DatasetId,
    pub records: Vec<FundusRecord>,
    pub class_counts: BTreeMap<u8, usize>,
    pub source_fingerprint: String,
}

pub const MANIFEST_HEADER: [&str; 5] = ["record_id", "dataset_id", "image_path", "label", "split"];

impl DatasetManifest {
    /// Validates ids and labels and derives class counts and fingerprint.
    pub fn new(dataset_id: DatasetId, records: Vec<FundusRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data(format!("{dataset_id}: zero records")));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.record_id.as_str()) {
                return Err(Error::Data(format!("duplicate record_id `{}`", r.record_id)));
            }
            if r.dataset_id != dataset_id {
                return Err(Error::Data(format!(
                    "record `{}` belongs to {} but manifest is {dataset_id}",
                    r.record_id, r.dataset_id
                )));
            }
        }
        let mut class_counts = BTreeMap::new();
        for r in &records {
            *class_counts.entry(r.label.as_u8()).or_insert(0) += 1;
        }
        let source_fingerprint = fingerprint(&records);
        Ok(Self { dataset_id, records, class_counts, source_fingerprint })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.class_counts.get(&label.as_u8()).copied().unwrap_or(0)
    }

    pub fn split_records(&self, split: Split) -> Vec<&FundusRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }

    /// Per-class counts inside one split.
    pub fn split_counts(&self, split: Split) -> BTreeMap<u8, usize> {
        let mut out = BTreeMap::new();
        for r in self.split_records(split) {
            *out.entry(r.label.as_u8()).or_insert(0) += 1;
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Data(format!(
                "{}: manifest header must be {}, found {}",
                path.display(),
                MANIFEST_HEADER.join(","),
                header.join(",")
            )));
        }
        let records: Vec<FundusRecord> = rd
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(path, e))?;
        let id = records
            .first()
            .map(|r| r.dataset_id)
            .ok_or_else(|| Error::Data(format!("{}: zero records", path.display())))?;
        Self::new(id, records)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Content hash over `(record_id, dataset, path, label)` in record order.
/// Split assignments are excluded so annotation does not change identity.
pub fn fingerprint(records: &[FundusRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.record_id.as_bytes());
        h.update([0]);
        h.update(r.dataset_id.as_str().as_bytes());
        h.update([0]);
        h.update(r.image_path.to_string_lossy().as_bytes());
        h.update([0, r.label.as_u8(), b'\n']);
    }
    hex::encode(h.finalize())
}

/// Files skipped during ingestion.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct IngestWarnings {
    pub skipped: Vec<(PathBuf, String)>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub warnings: IngestWarnings,
}

pub const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff", "gif"];

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Reads a dataset directory through the named label adapter.
///
/// Every discovered image is decoded once; undecodable files are skipped and
/// reported. Records are ordered by path, and record ids are
/// `<DATASET>/<path relative to root>`.
pub fn ingest(root: &Path, dataset_id: DatasetId, adapter_id: &str) -> Result<Ingested> {
    let adapter = adapters::adapter_for(adapter_id, dataset_id)?;
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let mut found = adapter.discover(root)?;
    found.sort_by(|a, b| a.0.cmp(&b.0));
    found.dedup_by(|a, b| a.0 == b.0);

    let checked: Vec<(PathBuf, Label, Option<String>)> = found
        .into_par_iter()
        .map(|(path, label)| {
            let problem = image::open(&path).err().map(|e| e.to_string());
            (path, label, problem)
        })
        .collect();

    let mut warnings = IngestWarnings::default();
    let mut records = Vec::with_capacity(checked.len());
    for (path, label, problem) in checked {
        if let Some(msg) = problem {
            log::warn!("skipping unreadable image {}: {msg}", path.display());
            warnings.skipped.push((path, msg));
            continue;
        }
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        records.push(FundusRecord {
            record_id: format!("{dataset_id}/{rel}"),
            dataset_id,
            image_path: path,
            label,
            split: None,
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{dataset_id}: zero records under {} ({} unreadable skipped)",
            root.display(),
            warnings.skipped.len()
        )));
    }
    if !warnings.skipped.is_empty() {
        log::warn!("{dataset_id}: skipped {} unreadable image(s)", warnings.skipped.len());
    }
    Ok(Ingested { manifest: DatasetManifest::new(dataset_id, records)?, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: Label) -> FundusRecord {
        FundusRecord {
            record_id: id.into(),
            dataset_id: DatasetId::Origa,
            image_path: PathBuf::from(format!("/data/{id}.png")),
            label,
            split: None,
        }
    }

    #[test]
    fn class_counts_sum_to_record_count() {
        let m = DatasetManifest::new(
            DatasetId::Origa,
            vec![record("a", Label::Normal), record("b", Label::Glaucoma), record("c", Label::Normal)],
        )
        .unwrap();
        assert_eq!(m.class_counts[&0], 2);
        assert_eq!(m.class_counts[&1], 1);
        assert_eq!(m.class_counts.values().sum::<usize>(), m.len());
    }

    #[test]
    fn rejects_duplicate_ids_and_empty_manifests() {
        assert!(DatasetManifest::new(DatasetId::Origa, vec![]).is_err());
        let dup = vec![record("a", Label::Normal), record("a", Label::Glaucoma)];
        assert!(matches!(DatasetManifest::new(DatasetId::Origa, dup), Err(Error::Data(_))));
    }

    #[test]
    fn fingerprint_ignores_split_annotation() {
        let a = vec![record("a", Label::Normal), record("b", Label::Glaucoma)];
        let mut b = a.clone();
        b[0].split = Some(Split::Test);
        assert_eq!(fingerprint(&a), fingerprint(&b));
        b[1].label = Label::Normal;
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn dataset_id_parsing_accepts_hyphenated_names() {
        assert_eq!("RIM-ONE".parse::<DatasetId>().unwrap(), DatasetId::RimOne);
        assert_eq!("acrima".parse::<DatasetId>().unwrap(), DatasetId::Acrima);
        assert!("DRISHTI".parse::<DatasetId>().is_err());
    }

    #[test]
    fn csv_round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = vec![record("a", Label::Normal), record("b", Label::Glaucoma)];
        recs[1].split = Some(Split::Val);
        let m = DatasetManifest::new(DatasetId::Origa, recs).unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("record_id,dataset_id,image_path,label,split\n"));
        assert!(text.contains("a,ORIGA,/data/a.png,0,\n"));
        assert_eq!(DatasetManifest::read_csv(&path).unwrap(), m);
    }
}
