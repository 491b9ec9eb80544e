//! safetensors persistence for named parameters.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::param::Param;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid safetensors file {path}: {message}")]
    Format { path: String, message: String },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` has dtype {dtype}, expected F32")]
    Dtype { name: String, dtype: String },
    #[error("missing tensors: {0:?}")]
    Missing(Vec<String>),
}

/// Tensor names present in the file that no parameter claimed.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    pub unexpected: Vec<String>,
}

pub fn save(params: &[&Param], metadata: HashMap<String, String>, path: &Path) -> Result<(), IoError> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = params
        .iter()
        .map(|p| {
            let raw = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            (p.name.clone(), raw, p.shape.clone())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| IoError::Format { path: path.display().to_string(), message: e.to_string() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    safetensors::serialize_to_file(views, Some(metadata), path)
        .map_err(|e| IoError::Format { path: path.display().to_string(), message: e.to_string() })
}

/// Header metadata block of a safetensors file.
pub fn read_metadata(path: &Path) -> Result<HashMap<String, String>, IoError> {
    let bytes = read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| IoError::Format { path: path.display().to_string(), message: e.to_string() })?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

/// Copies every tensor named like a parameter into it. Parameters without a
/// matching tensor are an error; extra tensors are reported.
pub fn load_into(params: &mut [&mut Param], path: &Path) -> Result<LoadReport, IoError> {
    let bytes = read(path)?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| IoError::Format { path: path.display().to_string(), message: e.to_string() })?;
    let mut missing = Vec::new();
    let mut report = LoadReport::default();
    let mut claimed = std::collections::HashSet::new();
    for p in params.iter_mut() {
        let Ok(view) = st.tensor(&p.name) else {
            missing.push(p.name.clone());
            continue;
        };
        if view.dtype() != Dtype::F32 {
            return Err(IoError::Dtype { name: p.name.clone(), dtype: format!("{:?}", view.dtype()) });
        }
        let shape = view.shape().to_vec();
        let same = shape.iter().product::<usize>() == p.value.len()
            && shape.iter().filter(|&&d| d != 1).eq(p.shape.iter().filter(|&&d| d != 1));
        if !same {
            return Err(IoError::Shape { name: p.name.clone(), expected: p.shape.clone(), found: shape });
        }
        for (dst, chunk) in p.value.iter_mut().zip(view.data().chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        claimed.insert(p.name.clone());
        report.loaded += 1;
    }
    if !missing.is_empty() {
        return Err(IoError::Missing(missing));
    }
    let mut unexpected: Vec<String> = st.names().into_iter().filter(|n| !claimed.contains(*n)).map(str::to_string).collect();
    unexpected.sort();
    report.unexpected = unexpected;
    Ok(report)
}
