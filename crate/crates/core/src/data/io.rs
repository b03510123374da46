use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LabelEncoding {
    /// Integer class label `0..num_classes`, expanded to one-hot targets.
    OneHot { num_classes: usize },
    /// Real-valued scalar target.
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub label: String,
    pub encoding: LabelEncoding,
}

/// Reads a headered, comma-separated file according to `schema`.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(&name, None, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(&name, None, e.to_string()))?
        .clone();
    let column = |col: &str| {
        headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| Error::format(&name, None, format!("missing column {col:?}")))
    };
    let feature_cols = schema.features.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    if feature_cols.is_empty() {
        return Err(Error::input("CSV schema lists no feature columns"));
    }
    let label_col = column(&schema.label)?;

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(&name, Some(row + 1), e.to_string()))?;
        if record.len() != headers.len() {
            return Err(Error::format(
                &name,
                Some(row + 1),
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        let parse = |col: usize| -> Result<f64> {
            let raw = record[col].trim();
            raw.parse::<f64>()
                .map_err(|_| Error::format(&name, Some(row + 1), format!("not a number: {raw:?}")))
        };
        for &c in &feature_cols {
            inputs.push(parse(c)?);
        }
        let label = parse(label_col)?;
        match schema.encoding {
            LabelEncoding::Real => targets.push(label),
            LabelEncoding::OneHot { num_classes } => {
                if label.fract() != 0.0 || label < 0.0 || label >= num_classes as f64 {
                    return Err(Error::format(
                        &name,
                        Some(row + 1),
                        format!("label {label} is not a class in 0..{num_classes}"),
                    ));
                }
                let mut onehot = vec![0.0; num_classes];
                onehot[label as usize] = 1.0;
                targets.extend(onehot);
            }
        }
    }
    let target_dim = match schema.encoding {
        LabelEncoding::Real => 1,
        LabelEncoding::OneHot { num_classes } => num_classes,
    };
    Dataset::new(inputs, targets, feature_cols.len(), target_dim, DatasetKind::External, 0)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxFile {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx(path: &Path, magic: u32) -> Result<IdxFile> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let word = |k: usize| -> Result<u32> {
        bytes
            .get(4 * k..4 * k + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::format(&name, None, "truncated header"))
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::format(
            &name,
            None,
            format!("bad magic number {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (1..=ndim).map(|k| word(k).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let header = 4 * (ndim + 1);
    let expected: usize = dims.iter().product();
    let payload = bytes[header..].to_vec();
    if payload.len() != expected {
        return Err(Error::format(
            &name,
            None,
            format!("payload has {} bytes, header promises {expected}", payload.len()),
        ));
    }
    Ok(IdxFile { dims, payload })
}

/// Reads an IDX image/label pair; pixels are scaled to `[0, 1]` and labels
/// one-hot encoded over `max label + 1` classes.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images, IDX_IMAGES_MAGIC)?;
    let lab = read_idx(labels, IDX_LABELS_MAGIC)?;
    let count = img.dims[0];
    if lab.dims[0] != count {
        return Err(Error::format(
            labels.display().to_string(),
            None,
            format!("{} labels for {count} images", lab.dims[0]),
        ));
    }
    let pixels = img.dims[1] * img.dims[2];
    let num_classes = (lab.payload.iter().copied().max().unwrap_or(0) as usize + 1).max(2);
    let inputs = img.payload.iter().map(|&p| p as f64 / 255.0).collect();
    let mut targets = vec![0.0; count * num_classes];
    for (i, &l) in lab.payload.iter().enumerate() {
        targets[i * num_classes + l as usize] = 1.0;
    }
    Dataset::new(inputs, targets, pixels, num_classes, DatasetKind::External, 0)
}
