//! Voxelwise maps and group statistics.

mod cluster;
mod smooth;
pub mod special;
mod spectral;
mod ttest;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Grid3, Volume4D, VolumeError};

pub use cluster::{extract_clusters, Cluster, ClusterReport, Connectivity};
pub use smooth::{gaussian_smooth, FWHM_TO_SIGMA};
pub use spectral::{alff, alff_map, bandpass, bandpass_volume, detrend, periodogram, Band, ALFF_BAND, PREPROCESS_BAND};
pub use ttest::{fdr_bh, two_sample_t, welch, FdrResult, WelchResult};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("band [{lo}, {hi}] Hz invalid for Nyquist {nyquist} Hz")]
    BandOutOfRange { lo: f64, hi: f64, nyquist: f64 },
    #[error("no frequency bins inside [{lo}, {hi}] Hz for {n} samples at {dt} s")]
    BandEmpty { lo: f64, hi: f64, n: usize, dt: f64 },
    #[error("series of length {got} is too short (need {need})")]
    TooShort { got: usize, need: usize },
    #[error("group has {0} maps; at least 2 are required")]
    GroupTooSmall(usize),
    #[error("maps disagree on grid or mask")]
    MaskMismatch,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Alff,
    T,
    P,
}

/// Per-voxel values on a grid; voxels outside `mask` hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StatMap {
    pub grid: Grid3,
    pub kind: MapKind,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl StatMap {
    pub fn new(grid: Grid3, kind: MapKind, values: Vec<f64>, mask: Vec<bool>) -> Result<Self, StatsError> {
        let n = grid.n_voxels();
        if values.len() != n || mask.len() != n {
            return Err(VolumeError::DimensionMismatch(format!(
                "map of {} values / {} mask entries on {n} voxels",
                values.len(),
                mask.len()
            ))
            .into());
        }
        if let Some(v) = values.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(v).into());
        }
        Ok(Self { grid, kind, values, mask })
    }

    pub fn n_in_mask(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Masked values in storage order.
    pub fn masked_values(&self) -> Vec<f64> {
        self.values.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
    }

    /// Single-frame volume holding the map, for saving alongside inputs.
    pub fn to_volume(&self) -> Volume4D {
        let data = self.values.iter().map(|&v| v as f32).collect();
        Volume4D::new(self.grid, 1, 1.0, data).expect("map geometry already validated")
    }

    /// Map from a single-frame volume; nonzero voxels form the mask unless
    /// one is given.
    pub fn from_volume(vol: &Volume4D, kind: MapKind, mask: Option<Vec<bool>>) -> Result<Self, StatsError> {
        let values: Vec<f64> = vol.frame(0).iter().map(|&v| v as f64).collect();
        let mask = mask.unwrap_or_else(|| values.iter().map(|&v| v != 0.0).collect());
        Self::new(*vol.grid(), kind, values, mask)
    }
}

/// Mask selecting every voxel.
pub fn full_mask(grid: &Grid3) -> Vec<bool> {
    vec![true; grid.n_voxels()]
}
