//! Block features: Min-Max normalised window means at region, voxel or
//! atlas-unit granularity, assembled into labelled sample x feature matrices.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::blocks::{Block, Phase};
use crate::io::{read_f32_payload, write_f32_payload, IoError};
use crate::volume::{Parcellation, Volume4D, VolumeError};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("no volume loaded for subject {0:?}")]
    UnknownSubject(String),
    #[error("volume index {index} outside run of {nt} volumes (subject {subject})")]
    IndexOutOfRange { subject: String, index: usize, nt: usize },
    #[error("feature {0} cannot be resolved by this source")]
    UnsupportedUnit(FeatureId),
    #[error("invalid feature matrix: {0}")]
    InvalidMatrix(String),
}

/// Column identifier. Orders as regions < voxels < atlas units; voxels by
/// storage order (z, then y, then x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureId {
    Region(u32),
    Voxel([usize; 3]),
    Unit(usize),
}

impl FeatureId {
    fn sort_key(&self) -> (u8, usize, usize, usize) {
        match *self {
            FeatureId::Region(l) => (0, l as usize, 0, 0),
            FeatureId::Voxel([x, y, z]) => (1, z, y, x),
            FeatureId::Unit(u) => (2, u, 0, 0),
        }
    }
}

impl Ord for FeatureId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for FeatureId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureId::Region(l) => write!(f, "region_{l}"),
            FeatureId::Voxel([x, y, z]) => write!(f, "voxel_{x}_{y}_{z}"),
            FeatureId::Unit(u) => write!(f, "unit_{u}"),
        }
    }
}

impl FromStr for FeatureId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad feature id {s:?}");
        if let Some(rest) = s.strip_prefix("region_") {
            return rest.parse().map(FeatureId::Region).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("unit_") {
            return rest.parse().map(FeatureId::Unit).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("voxel_") {
            let parts: Vec<usize> = rest.split('_').map(|p| p.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
            if let [x, y, z] = parts[..] {
                return Ok(FeatureId::Voxel([x, y, z]));
            }
        }
        Err(bad())
    }
}

impl Serialize for FeatureId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleId {
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.subject)?;
        if let Some(b) = self.block {
            write!(f, "/b{b}")?;
        }
        match self.phase {
            Some(Phase::Stim) => write!(f, "/stim"),
            Some(Phase::Rest) => write!(f, "/rest"),
            None => Ok(()),
        }
    }
}

/// Dense row-major samples x features matrix with +1/-1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
    labels: Vec<i8>,
    feature_ids: Vec<FeatureId>,
    sample_ids: Vec<SampleId>,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, labels: Vec<i8>, feature_ids: Vec<FeatureId>, sample_ids: Vec<SampleId>) -> Result<Self, FeatureError> {
        let n_rows = labels.len();
        let n_cols = feature_ids.len();
        if values.len() != n_rows * n_cols {
            return Err(FeatureError::InvalidMatrix(format!(
                "{} values for {n_rows}x{n_cols}",
                values.len()
            )));
        }
        if sample_ids.len() != n_rows {
            return Err(FeatureError::InvalidMatrix("sample id count differs from row count".into()));
        }
        if labels.iter().any(|&l| l != 1 && l != -1) {
            return Err(FeatureError::InvalidMatrix("labels must be +1 or -1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidMatrix("non-finite value".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = feature_ids.iter().find(|f| !seen.insert(**f)) {
            return Err(FeatureError::InvalidMatrix(format!("duplicate feature id {dup}")));
        }
        Ok(Self {
            n_rows,
            n_cols,
            values,
            labels,
            feature_ids,
            sample_ids,
        })
    }

    /// Matrix from rows with generated ids (`unit_<j>` columns, `s<i>` samples).
    pub fn from_rows(rows: &[Vec<f64>], labels: &[i8]) -> Result<Self, FeatureError> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(FeatureError::InvalidMatrix("ragged rows".into()));
        }
        let sample_ids = (0..rows.len())
            .map(|i| SampleId {
                subject: format!("s{i}"),
                block: None,
                phase: None,
            })
            .collect();
        Self::new(
            rows.concat(),
            labels.to_vec(),
            (0..n_cols).map(FeatureId::Unit).collect(),
            sample_ids,
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn feature_ids(&self) -> &[FeatureId] {
        &self.feature_ids
    }

    pub fn sample_ids(&self) -> &[SampleId] {
        &self.sample_ids
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l > 0).count();
        (pos, self.n_rows - pos)
    }

    pub fn select_columns(&self, cols: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(self.n_rows * cols.len());
        for i in 0..self.n_rows {
            let row = self.row(i);
            values.extend(cols.iter().map(|&j| row[j]));
        }
        FeatureMatrix {
            n_rows: self.n_rows,
            n_cols: cols.len(),
            values,
            labels: self.labels.clone(),
            feature_ids: cols.iter().map(|&j| self.feature_ids[j]).collect(),
            sample_ids: self.sample_ids.clone(),
        }
    }

    pub fn with_labels(&self, labels: Vec<i8>) -> Result<FeatureMatrix, FeatureError> {
        FeatureMatrix::new(self.values.clone(), labels, self.feature_ids.clone(), self.sample_ids.clone())
    }

    /// Column-wise Min-Max scaling across samples; constant columns become 0.
    pub fn minmax_columns(&self) -> FeatureMatrix {
        let mut out = self.clone();
        for j in 0..self.n_cols {
            let col = minmax_normalize(&self.column(j));
            for (i, v) in col.into_iter().enumerate() {
                out.values[i * self.n_cols + j] = v;
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["sample".to_string(), "label".to_string()];
        header.extend(self.feature_ids.iter().map(ToString::to_string));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..self.n_rows {
            let mut rec = vec![self.sample_ids[i].to_string(), self.labels[i].to_string()];
            rec.extend(self.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| FeatureError::Io(IoError::io(path, e)))
    }

    /// JSON header at `path` plus a little-endian f32 payload beside it.
    pub fn save_cache(&self, path: &Path) -> Result<(), FeatureError> {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("matrix");
        let header = MatrixHeader {
            rows: self.n_rows,
            cols: self.n_cols,
            labels: self.labels.clone(),
            feature_ids: self.feature_ids.clone(),
            sample_ids: self.sample_ids.clone(),
            data_file: format!("{stem}.bin"),
        };
        let json = serde_json::to_string_pretty(&header).map_err(|e| IoError::json(path, e))?;
        std::fs::write(path, json).map_err(|e| IoError::io(path, e))?;
        let payload: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        write_f32_payload(&sibling(path, &header.data_file), &payload)?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<FeatureMatrix, FeatureError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        let header: MatrixHeader = serde_json::from_str(&text).map_err(|e| IoError::json(path, e))?;
        if header.labels.len() != header.rows || header.feature_ids.len() != header.cols {
            return Err(FeatureError::InvalidMatrix("header counts disagree".into()));
        }
        let payload = read_f32_payload(&sibling(path, &header.data_file), header.rows * header.cols)?;
        FeatureMatrix::new(
            payload.into_iter().map(f64::from).collect(),
            header.labels,
            header.feature_ids,
            header.sample_ids,
        )
    }
}

fn csv_err(path: &Path, e: csv::Error) -> FeatureError {
    FeatureError::Io(IoError::io(path, std::io::Error::other(e.to_string())))
}

fn sibling(path: &Path, name: &str) -> std::path::PathBuf {
    path.parent().map(|d| d.join(name)).unwrap_or_else(|| name.into())
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    labels: Vec<i8>,
    feature_ids: Vec<FeatureId>,
    sample_ids: Vec<SampleId>,
    data_file: String,
}

/// `(v - min) / (max - min)`; a constant input maps to all zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / range).collect()
}

/// Which samples share one Min-Max range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Stimulus and recovery windows of a block share one range.
    #[default]
    Block,
    /// Each window is normalised on its own samples.
    Window,
}

fn gather(series: &[f64], idx: &[usize], subject: &str) -> Result<Vec<f64>, FeatureError> {
    idx.iter()
        .map(|&k| {
            series.get(k).copied().ok_or_else(|| FeatureError::IndexOutOfRange {
                subject: subject.to_string(),
                index: k,
                nt: series.len(),
            })
        })
        .collect()
}

/// Normalised samples of one window of `block` taken from a full-run series.
pub fn normalized_window(series: &[f64], block: &Block, phase: Phase, scope: NormScope) -> Result<Vec<f64>, FeatureError> {
    let window = gather(series, block.volumes(phase), &block.subject_id)?;
    match scope {
        NormScope::Window => Ok(minmax_normalize(&window)),
        NormScope::Block => {
            let stim = gather(series, &block.stim_volumes, &block.subject_id)?;
            let rest = gather(series, &block.rest_volumes, &block.subject_id)?;
            let (lo, hi) = stim
                .iter()
                .chain(&rest)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let range = hi - lo;
            if !(range > 0.0) {
                return Ok(vec![0.0; window.len()]);
            }
            Ok(window.iter().map(|&v| (v - lo) / range).collect())
        }
    }
}

/// Mean of the normalised window.
pub fn block_feature(series: &[f64], block: &Block, phase: Phase, scope: NormScope) -> Result<f64, FeatureError> {
    let w = normalized_window(series, block, phase, scope)?;
    Ok(w.iter().sum::<f64>() / w.len() as f64)
}

/// Anything that can produce a full-run series for `(subject, unit)`.
pub trait SeriesSource: Sync {
    fn unit_series(&self, subject_id: &str, unit: &FeatureId) -> Result<Vec<f64>, FeatureError>;
}

/// Subject volumes on a shared grid, resolved through a parcellation and
/// optionally an atlas (for [`FeatureId::Unit`] columns).
pub struct VolumeSet {
    volumes: BTreeMap<String, Volume4D>,
    parcellation: Parcellation,
    regions: BTreeMap<u32, Vec<usize>>,
    units: Vec<Vec<usize>>,
}

impl VolumeSet {
    pub fn new(volumes: BTreeMap<String, Volume4D>, parcellation: Parcellation) -> Result<Self, FeatureError> {
        for (id, v) in &volumes {
            if !v.grid().same_dims(parcellation.grid()) {
                return Err(VolumeError::DimensionMismatch(format!(
                    "subject {id}: volume {:?} vs parcellation {:?}",
                    v.grid().dims,
                    parcellation.grid().dims
                ))
                .into());
            }
        }
        let regions = parcellation.region_voxels();
        Ok(Self {
            volumes,
            parcellation,
            regions,
            units: Vec::new(),
        })
    }

    /// Registers atlas units (lists of spatial indices) for `Unit(i)` lookups.
    pub fn with_units(mut self, units: Vec<Vec<usize>>) -> Self {
        self.units = units;
        self
    }

    pub fn parcellation(&self) -> &Parcellation {
        &self.parcellation
    }

    pub fn volume(&self, subject_id: &str) -> Result<&Volume4D, FeatureError> {
        self.volumes
            .get(subject_id)
            .ok_or_else(|| FeatureError::UnknownSubject(subject_id.to_string()))
    }

    pub fn subjects(&self) -> impl Iterator<Item = (&String, &Volume4D)> {
        self.volumes.iter()
    }

    pub fn region_voxels(&self, label: u32) -> Result<&[usize], FeatureError> {
        self.regions
            .get(&label)
            .map(Vec::as_slice)
            .ok_or(FeatureError::Volume(VolumeError::UnknownLabel(label)))
    }
}

impl SeriesSource for VolumeSet {
    fn unit_series(&self, subject_id: &str, unit: &FeatureId) -> Result<Vec<f64>, FeatureError> {
        let vol = self.volume(subject_id)?;
        match *unit {
            FeatureId::Region(label) => Ok(vol.mean_series_over(self.region_voxels(label)?)),
            FeatureId::Voxel(c) => Ok(vol.voxel_series(c)?.values),
            FeatureId::Unit(u) => match self.units.get(u) {
                Some(v) if !v.is_empty() => Ok(vol.mean_series_over(v)),
                _ => Err(FeatureError::UnsupportedUnit(*unit)),
            },
        }
    }
}

pub fn roi_units(parc: &Parcellation) -> Vec<FeatureId> {
    parc.region_labels().into_iter().map(FeatureId::Region).collect()
}

pub fn voxel_units(parc: &Parcellation, label: u32) -> Result<Vec<FeatureId>, FeatureError> {
    Ok(parc
        .voxels_of(label)?
        .into_iter()
        .map(|v| FeatureId::Voxel(parc.grid().coord(v)))
        .collect())
}

/// Rows are every block's stimulus window (+1) in block order, followed by
/// every block's recovery window (-1); one column per unit.
pub fn assemble_matrix(
    blocks: &[Block],
    units: &[FeatureId],
    source: &dyn SeriesSource,
    scope: NormScope,
) -> Result<FeatureMatrix, FeatureError> {
    if blocks.is_empty() || units.is_empty() {
        return Err(FeatureError::InvalidMatrix("need at least one block and one unit".into()));
    }
    let nb = blocks.len();
    let columns: Vec<Vec<f64>> = units
        .par_iter()
        .map(|unit| {
            let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
            let mut col = vec![0.0; 2 * nb];
            for (b, block) in blocks.iter().enumerate() {
                if !cache.contains_key(block.subject_id.as_str()) {
                    cache.insert(&block.subject_id, source.unit_series(&block.subject_id, unit)?);
                }
                let series = &cache[block.subject_id.as_str()];
                col[b] = block_feature(series, block, Phase::Stim, scope)?;
                col[nb + b] = block_feature(series, block, Phase::Rest, scope)?;
            }
            Ok(col)
        })
        .collect::<Result<_, FeatureError>>()?;

    let n_cols = units.len();
    let mut values = vec![0.0; 2 * nb * n_cols];
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            values[i * n_cols + j] = v;
        }
    }
    let mut labels = vec![1i8; nb];
    labels.extend(std::iter::repeat_n(-1i8, nb));
    let sample_ids = [Phase::Stim, Phase::Rest]
        .iter()
        .flat_map(|&phase| {
            blocks.iter().map(move |b| SampleId {
                subject: b.subject_id.clone(),
                block: Some(b.block_index),
                phase: Some(phase),
            })
        })
        .collect();
    FeatureMatrix::new(values, labels, units.to_vec(), sample_ids)
}
