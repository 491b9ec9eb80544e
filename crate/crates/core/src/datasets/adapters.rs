//! Label adapters: one per on-disk label convention.
//!
//! | id               | convention                                                   |
//! |------------------|--------------------------------------------------------------|
//! | `acrima_filename`| filename contains `_g_` ⇒ glaucoma, otherwise normal         |
//! | `sidecar_csv`    | `labels.csv` (or the single `*.csv`) in the root maps files   |
//! | `class_dirs`     | nearest ancestor directory named e.g. `glaucoma` / `normal`   |

use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{is_image_file, DatasetId, Label};
use crate::error::{Error, Result};

pub trait LabelAdapter: Send + Sync {
    fn id(&self) -> &'static str;

    /// Lists `(image path, label)` pairs under `root`. Paths are absolute or
    /// root-joined; decodability is checked later by the caller.
    fn discover(&self, root: &Path) -> Result<Vec<(PathBuf, Label)>>;
}

/// Adapter ids accepted for a dataset.
pub fn adapter_ids(dataset: DatasetId) -> &'static [&'static str] {
    match dataset {
        DatasetId::Acrima => &["acrima_filename", "sidecar_csv", "class_dirs"],
        DatasetId::Origa | DatasetId::RimOne | DatasetId::Synthetic => &["sidecar_csv", "class_dirs"],
    }
}

pub fn adapter_for(id: &str, dataset: DatasetId) -> Result<Box<dyn LabelAdapter>> {
    let valid = adapter_ids(dataset);
    if !valid.contains(&id) {
        return Err(Error::Config(format!(
            "adapter `{id}` is not registered for {dataset} (valid: {})",
            valid.join(", ")
        )));
    }
    Ok(match id {
        "acrima_filename" => Box::new(AcrimaFilename),
        "sidecar_csv" => Box::new(SidecarCsv::default()),
        _ => Box::new(ClassDirs),
    })
}

fn image_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| Error::Data(format!("walking {}: {e}", root.display())))?;
        if entry.file_type().is_file() && is_image_file(entry.path()) {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

pub struct AcrimaFilename;

impl LabelAdapter for AcrimaFilename {
    fn id(&self) -> &'static str {
        "acrima_filename"
    }

    fn discover(&self, root: &Path) -> Result<Vec<(PathBuf, Label)>> {
        Ok(image_files(root)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
                let label = if name.contains("_g_") { Label::Glaucoma } else { Label::Normal };
                (p, label)
            })
            .collect())
    }
}

const PATH_COLUMNS: [&str; 6] = ["filename", "file", "image", "image_path", "path", "name"];
const LABEL_COLUMNS: [&str; 5] = ["label", "glaucoma", "class", "diagnosis", "target"];

/// Parses the label spellings found in public fundus label sheets.
pub fn parse_label(raw: &str) -> Option<Label> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "0" | "0.0" | "n" | "normal" | "healthy" | "negative" | "false" => Some(Label::Normal),
        "1" | "1.0" | "g" | "glaucoma" | "glaucomatous" | "suspect" | "positive" | "true" => Some(Label::Glaucoma),
        _ => None,
    }
}

#[derive(Default)]
pub struct SidecarCsv {
    /// Explicit sheet name; defaults to `labels.csv`, then the single CSV in the root.
    pub file: Option<String>,
}

impl SidecarCsv {
    fn locate(&self, root: &Path) -> Result<PathBuf> {
        if let Some(f) = &self.file {
            return Ok(root.join(f));
        }
        let default = root.join("labels.csv");
        if default.is_file() {
            return Ok(default);
        }
        let csvs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect();
        match csvs.as_slice() {
            [one] => Ok(one.clone()),
            [] => Err(Error::Data(format!("no label sheet (labels.csv) in {}", root.display()))),
            _ => Err(Error::Data(format!(
                "several CSV files in {}; name the label sheet labels.csv",
                root.display()
            ))),
        }
    }
}

impl LabelAdapter for SidecarCsv {
    fn id(&self) -> &'static str {
        "sidecar_csv"
    }

    fn discover(&self, root: &Path) -> Result<Vec<(PathBuf, Label)>> {
        let sheet = self.locate(root)?;
        let mut rd = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&sheet)
            .map_err(|e| Error::Data(format!("{}: {e}", sheet.display())))?;
        let headers: Vec<String> = rd
            .headers()
            .map_err(|e| Error::Data(format!("{}: {e}", sheet.display())))?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        let find = |names: &[&str]| names.iter().find_map(|n| headers.iter().position(|h| h == n));
        let (Some(pc), Some(lc)) = (find(&PATH_COLUMNS), find(&LABEL_COLUMNS)) else {
            return Err(Error::Data(format!(
                "{}: need a file column ({}) and a label column ({}), found {}",
                sheet.display(),
                PATH_COLUMNS.join("/"),
                LABEL_COLUMNS.join("/"),
                headers.join(",")
            )));
        };
        let mut out = Vec::new();
        for (line, row) in rd.records().enumerate() {
            let row = row.map_err(|e| Error::Data(format!("{}: {e}", sheet.display())))?;
            let (Some(file), Some(raw)) = (row.get(pc), row.get(lc)) else { continue };
            let label = parse_label(raw).ok_or_else(|| {
                Error::Data(format!("{} row {}: unrecognised label `{raw}`", sheet.display(), line + 2))
            })?;
            let mut path = root.join(file);
            if path.extension().is_none() {
                // Some sheets list stems only.
                if let Some(found) = super::IMAGE_EXTENSIONS.iter().map(|x| path.with_extension(x)).find(|p| p.is_file()) {
                    path = found;
                }
            }
            out.push((path, label));
        }
        Ok(out)
    }
}

const POSITIVE_DIRS: [&str; 5] = ["glaucoma", "glaucomatous", "positive", "abnormal", "1"];
const NEGATIVE_DIRS: [&str; 5] = ["normal", "healthy", "negative", "non_glaucoma", "0"];

pub struct ClassDirs;

impl LabelAdapter for ClassDirs {
    fn id(&self) -> &'static str {
        "class_dirs"
    }

    fn discover(&self, root: &Path) -> Result<Vec<(PathBuf, Label)>> {
        let mut out = Vec::new();
        let mut unlabelled = 0usize;
        for p in image_files(root)? {
            let rel = p.strip_prefix(root).unwrap_or(&p);
            let label = rel.parent().and_then(|dir| {
                dir.components().rev().find_map(|c| {
                    let name = c.as_os_str().to_string_lossy().to_ascii_lowercase();
                    if POSITIVE_DIRS.contains(&name.as_str()) {
                        Some(Label::Glaucoma)
                    } else if NEGATIVE_DIRS.contains(&name.as_str()) {
                        Some(Label::Normal)
                    } else {
                        None
                    }
                })
            });
            match label {
                Some(l) => out.push((p, l)),
                None => unlabelled += 1,
            }
        }
        if unlabelled > 0 {
            log::warn!("class_dirs: {unlabelled} image(s) outside any class directory were ignored");
        }
        Ok(out)
    }
}
