//! Readers and writers for volumes and label images.

mod nifti;
mod rawjson;

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::volume::{Parcellation, Volume4D, VolumeError};

pub use nifti::{parse_nifti1, NiftiDatatype};
pub use rawjson::{read_f32_payload, read_raw_json, save_volume_raw, write_f32_payload, RawJsonHeader};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label image contains non-integer or negative value {value} at voxel {voxel}")]
    NonIntegerLabels { value: f64, voxel: usize },
    #[error("bad label-name sidecar line {line}: {text}")]
    NamesFile { line: usize, text: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        IoError::Json {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti1,
    RawJson,
}

impl VolumeFormat {
    /// `.nii` means NIfTI-1, anything else is treated as a raw-json header.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("nii") => VolumeFormat::Nifti1,
            _ => VolumeFormat::RawJson,
        }
    }
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume4D, IoError> {
    match format {
        VolumeFormat::Nifti1 => {
            let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
            parse_nifti1(&bytes)
        }
        VolumeFormat::RawJson => read_raw_json(path),
    }
}

pub fn load_volume_auto(path: &Path) -> Result<Volume4D, IoError> {
    load_volume(path, VolumeFormat::from_path(path))
}

/// Converts a single-frame volume into a label image.
pub fn volume_to_parcellation(vol: &Volume4D, names: BTreeMap<u32, String>) -> Result<Parcellation, IoError> {
    if vol.nt() != 1 {
        return Err(IoError::DimensionMismatch(format!("label image must be 3D, found nt={}", vol.nt())));
    }
    let labels = vol
        .frame(0)
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v as f64;
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                Err(IoError::NonIntegerLabels { value: v, voxel: i })
            } else {
                Ok(v as u32)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Parcellation::new(*vol.grid(), labels, names)?)
}

pub fn load_parcellation(path: &Path, names_path: Option<&Path>) -> Result<Parcellation, IoError> {
    let vol = load_volume_auto(path)?;
    let names = match names_path {
        Some(p) => load_label_names(p)?,
        None => BTreeMap::new(),
    };
    volume_to_parcellation(&vol, names)
}

/// Parses `label,name` lines. Blank lines, `#` comments and a leading
/// non-numeric header row are skipped.
pub fn parse_label_names(text: &str) -> Result<BTreeMap<u32, String>, IoError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || IoError::NamesFile {
            line: i + 1,
            text: line.to_string(),
        };
        let (label, name) = line.split_once(',').ok_or_else(bad)?;
        match label.trim().parse::<u32>() {
            Ok(l) => {
                out.insert(l, name.trim().to_string());
            }
            Err(_) if out.is_empty() && i == 0 => continue,
            Err(_) => return Err(bad()),
        }
    }
    Ok(out)
}

pub fn load_label_names(path: &Path) -> Result<BTreeMap<u32, String>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_label_names(&text)
}

pub fn save_label_names(names: &BTreeMap<u32, String>, path: &Path) -> Result<(), IoError> {
    let mut text = String::from("label,name\n");
    for (l, n) in names {
        text.push_str(&format!("{l},{n}\n"));
    }
    std::fs::write(path, text).map_err(|e| IoError::io(path, e))
}

/// Writes a parcellation as a single-frame raw-json volume.
pub fn save_parcellation_raw(parc: &Parcellation, path: &Path) -> Result<(), IoError> {
    let data = parc.labels().iter().map(|&l| l as f32).collect();
    let vol = Volume4D::new(*parc.grid(), 1, 1.0, data)?;
    save_volume_raw(&vol, path)
}
