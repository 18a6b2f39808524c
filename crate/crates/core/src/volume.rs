//! In-memory data model for 4D volumes, label images and extracted series.
//!
//! Voxel storage order is x fastest, then y, then z, then t. The spatial
//! index of `(x, y, z)` is `x + nx * (y + ny * z)` and all "row-major"
//! iteration in this crate means increasing spatial index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("label {0} not present in parcellation")]
    UnknownLabel(u32),
    #[error("label {0} has no voxels")]
    EmptyRegion(u32),
    #[error("grid index {0:?} outside dims {1:?}")]
    OutOfBounds([usize; 3], [usize; 3]),
    #[error("affine is singular")]
    SingularAffine,
}

/// Grid-index to world (mm) transform, stored as a row-major 4x4 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 4]; 4]);

impl Default for Affine {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine {
    pub fn identity() -> Self {
        Self::from_scale_translation([1.0; 3], [0.0; 3])
    }

    pub fn from_scale_translation(scale: [f64; 3], translation: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][i] = scale[i];
            m[i][3] = translation[i];
        }
        m[3][3] = 1.0;
        Affine(m)
    }

    pub fn from_row_major(v: &[f64]) -> Option<Self> {
        if v.len() != 16 {
            return None;
        }
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[4 * i..4 * i + 4]);
        }
        Some(Affine(m))
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    fn linear_det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.linear_det();
        d.is_finite() && d.abs() > 1e-12 && self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Homogeneous transform of a (possibly fractional) grid position.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    pub fn inverse(&self) -> Result<Affine, VolumeError> {
        if !self.is_invertible() {
            return Err(VolumeError::SingularAffine);
        }
        let m = &self.0;
        let det = self.linear_det();
        // adjugate of the upper-left 3x3
        let inv3 = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        let mut out = [[0.0; 4]; 4];
        for i in 0..3 {
            out[i][..3].copy_from_slice(&inv3[i]);
            out[i][3] = -(inv3[i][0] * m[0][3] + inv3[i][1] * m[1][3] + inv3[i][2] * m[2][3]);
        }
        out[3][3] = 1.0;
        Ok(Affine(out))
    }
}

/// World-space millimetre coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldCoord {
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

impl WorldCoord {
    pub fn as_array(&self) -> [f64; 3] {
        [self.x_mm, self.y_mm, self.z_mm]
    }
}

pub fn grid_to_world(coord: [usize; 3], affine: &Affine) -> WorldCoord {
    let [x, y, z] = affine.apply([coord[0] as f64, coord[1] as f64, coord[2] as f64]);
    WorldCoord { x_mm: x, y_mm: y, z_mm: z }
}

/// Fractional grid position of a world coordinate.
pub fn world_to_grid(world: WorldCoord, affine: &Affine) -> Result<[f64; 3], VolumeError> {
    Ok(affine.inverse()?.apply(world.as_array()))
}

/// Spatial sampling shared by volumes, label images and statistic maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub affine: Affine,
}

impl Grid3 {
    pub fn new(dims: [usize; 3], voxel_size_mm: [f64; 3], affine: Affine) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::InvalidGeometry(format!("zero dimension in {dims:?}")));
        }
        if voxel_size_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidGeometry(format!(
                "voxel size must be positive, got {voxel_size_mm:?}"
            )));
        }
        if !affine.is_invertible() {
            return Err(VolumeError::SingularAffine);
        }
        Ok(Self {
            dims,
            voxel_size_mm,
            affine,
        })
    }

    /// Isotropic grid whose affine scales by the voxel size and translates by `origin_mm`.
    pub fn isotropic(dims: [usize; 3], voxel_mm: f64, origin_mm: [f64; 3]) -> Self {
        Self {
            dims,
            voxel_size_mm: [voxel_mm; 3],
            affine: Affine::from_scale_translation([voxel_mm; 3], origin_mm),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.voxel_size_mm.iter().product()
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    #[inline]
    pub fn coord(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        c.iter().zip(self.dims.iter()).all(|(a, d)| a < d)
    }

    pub fn check_contains(&self, c: [usize; 3]) -> Result<usize, VolumeError> {
        if self.contains(c) {
            Ok(self.index(c))
        } else {
            Err(VolumeError::OutOfBounds(c, self.dims))
        }
    }

    pub fn same_dims(&self, other: &Grid3) -> bool {
        self.dims == other.dims
    }
}

/// Ordered samples at a fixed interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub values: Vec<f64>,
    pub sampling_interval_s: f64,
}

impl Series {
    pub fn new(values: Vec<f64>, sampling_interval_s: f64) -> Result<Self, VolumeError> {
        if values.is_empty() {
            return Err(VolumeError::InvalidGeometry("empty series".into()));
        }
        if !(sampling_interval_s.is_finite() && sampling_interval_s > 0.0) {
            return Err(VolumeError::InvalidGeometry(format!(
                "sampling interval must be positive, got {sampling_interval_s}"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            values,
            sampling_interval_s,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Scalar X x Y x Z x T grid. Samples are stored as `f32` (the on-disk
/// precision) and promoted to `f64` for all arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    grid: Grid3,
    nt: usize,
    tr_seconds: f64,
    data: Vec<f32>,
}

impl Volume4D {
    pub fn new(grid: Grid3, nt: usize, tr_seconds: f64, data: Vec<f32>) -> Result<Self, VolumeError> {
        let grid = Grid3::new(grid.dims, grid.voxel_size_mm, grid.affine)?;
        if nt == 0 {
            return Err(VolumeError::InvalidGeometry("nt must be >= 1".into()));
        }
        if !(tr_seconds.is_finite() && tr_seconds > 0.0) {
            return Err(VolumeError::InvalidGeometry(format!("TR must be positive, got {tr_seconds}")));
        }
        let expected = grid.n_voxels() * nt;
        if data.len() != expected {
            return Err(VolumeError::DimensionMismatch(format!(
                "data has {} values, dims imply {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            grid,
            nt,
            tr_seconds,
            data,
        })
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn dims4(&self) -> [usize; 4] {
        let [x, y, z] = self.grid.dims;
        [x, y, z, self.nt]
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn tr_seconds(&self) -> f64 {
        self.tr_seconds
    }

    pub fn affine(&self) -> &Affine {
        &self.grid.affine
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, voxel: usize, t: usize) -> f64 {
        self.data[voxel + self.grid.n_voxels() * t] as f64
    }

    /// Frame `t` as a contiguous spatial slice.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.grid.n_voxels();
        &self.data[n * t..n * (t + 1)]
    }

    pub fn series_at(&self, voxel: usize) -> Vec<f64> {
        (0..self.nt).map(|t| self.get(voxel, t)).collect()
    }

    pub fn voxel_series(&self, coord: [usize; 3]) -> Result<Series, VolumeError> {
        let v = self.grid.check_contains(coord)?;
        Ok(Series {
            values: self.series_at(v),
            sampling_interval_s: self.tr_seconds,
        })
    }

    /// Per-timepoint mean over an explicit voxel list (in the given order).
    pub fn mean_series_over(&self, voxels: &[usize]) -> Vec<f64> {
        let n = voxels.len() as f64;
        (0..self.nt)
            .map(|t| {
                let mut acc = 0.0f64;
                for &v in voxels {
                    acc += self.get(v, t);
                }
                acc / n
            })
            .collect()
    }

    pub fn region_mean_series(&self, parc: &Parcellation, label: u32) -> Result<Series, VolumeError> {
        if !self.grid.same_dims(&parc.grid) {
            return Err(VolumeError::DimensionMismatch(format!(
                "volume {:?} vs parcellation {:?}",
                self.grid.dims, parc.grid.dims
            )));
        }
        let voxels = parc.voxels_of(label)?;
        Ok(Series {
            values: self.mean_series_over(&voxels),
            sampling_interval_s: self.tr_seconds,
        })
    }
}

/// Integer label image; label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Parcellation {
    grid: Grid3,
    labels: Vec<u32>,
    label_names: BTreeMap<u32, String>,
}

impl Parcellation {
    /// Builds a parcellation; labels without a supplied name get `region_<k>`.
    pub fn new(grid: Grid3, labels: Vec<u32>, mut label_names: BTreeMap<u32, String>) -> Result<Self, VolumeError> {
        if labels.len() != grid.n_voxels() {
            return Err(VolumeError::DimensionMismatch(format!(
                "{} labels for {} voxels",
                labels.len(),
                grid.n_voxels()
            )));
        }
        label_names.remove(&0);
        for &l in &labels {
            if l != 0 {
                label_names.entry(l).or_insert_with(|| format!("region_{l}"));
            }
        }
        // names for labels that never occur are kept: UnknownLabel is about the name table
        Ok(Self { grid, labels, label_names })
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_at(&self, voxel: usize) -> u32 {
        self.labels[voxel]
    }

    pub fn label_names(&self) -> &BTreeMap<u32, String> {
        &self.label_names
    }

    pub fn name_of(&self, label: u32) -> Option<&str> {
        self.label_names.get(&label).map(String::as_str)
    }

    /// Nonzero labels in ascending order.
    pub fn region_labels(&self) -> Vec<u32> {
        self.label_names.keys().copied().collect()
    }

    /// Voxels carrying `label`, in storage order.
    pub fn voxels_of(&self, label: u32) -> Result<Vec<usize>, VolumeError> {
        if label == 0 || !self.label_names.contains_key(&label) {
            return Err(VolumeError::UnknownLabel(label));
        }
        let v: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect();
        if v.is_empty() {
            return Err(VolumeError::EmptyRegion(label));
        }
        Ok(v)
    }

    /// Voxel lists for every nonzero label, built in one pass.
    pub fn region_voxels(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                map.entry(l).or_default().push(i);
            }
        }
        map
    }

    /// SHA-256 over dims and labels; names do not participate.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in self.grid.dims {
            h.update((d as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update(l.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
