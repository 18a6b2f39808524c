//! The single JSON config file. Every section is optional; command-line
//! flags override individual fields.

use std::path::Path;

use eak_core::atlas::ReferenceSpec;
use eak_core::classify::{FeatureMode, GridSearchConfig};
use eak_core::features::NormScope;
use eak_core::rfe::{EliminationSchedule, SubsetRule};
use eak_core::stats::{Band, Connectivity, ALFF_BAND, PREPROCESS_BAND};
use eak_core::svm::TrainConfig;
use eak_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub features: FeaturesSection,
    pub rfe: RfeSection,
    pub atlas: AtlasSection,
    pub alff: AlffSection,
    pub stats: StatsSection,
    pub classify: ClassifySection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub scope: NormScope,
    /// Band-pass every run before feature extraction.
    pub bandpass: Option<Band>,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self {
            scope: NormScope::Block,
            bandpass: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfeSection {
    pub folds: usize,
    pub svm: TrainConfig,
    pub roi_schedule: EliminationSchedule,
    pub voxel_schedule: EliminationSchedule,
    pub subset_rule: SubsetRule,
}

impl Default for RfeSection {
    fn default() -> Self {
        Self {
            folds: 10,
            svm: TrainConfig::default(),
            roi_schedule: EliminationSchedule::One,
            voxel_schedule: EliminationSchedule::One,
            subset_rule: SubsetRule::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasSection {
    pub fc_threshold: f64,
    pub reference: ReferenceSpec,
}

impl Default for AtlasSection {
    fn default() -> Self {
        Self {
            fc_threshold: 0.95,
            reference: ReferenceSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlffSection {
    pub band: Band,
    /// Optional Gaussian smoothing before ALFF, FWHM in mm per axis.
    pub smooth_fwhm_mm: Option<[f64; 3]>,
    pub preprocess_band: Option<Band>,
}

impl Default for AlffSection {
    fn default() -> Self {
        Self {
            band: ALFF_BAND,
            smooth_fwhm_mm: None,
            preprocess_band: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub fdr_q: f64,
    pub connectivity: Connectivity,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            fdr_q: 0.01,
            connectivity: Connectivity::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    pub mode: FeatureMode,
    pub grid: GridSearchConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}

/// The default preprocessing band, for flags that switch band-passing on.
pub fn default_preprocess_band() -> Band {
    PREPROCESS_BAND
}

pub fn parse_schedule(s: &str) -> Result<EliminationSchedule, String> {
    if s == "one" {
        return Ok(EliminationSchedule::One);
    }
    if let Some(f) = s.strip_prefix("fraction:") {
        let f: f64 = f.parse().map_err(|_| format!("bad fraction in {s:?}"))?;
        return Ok(EliminationSchedule::Fraction(f));
    }
    Err(format!("schedule must be \"one\" or \"fraction:<f>\", got {s:?}"))
}

pub fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?}")))
        .collect()
}

pub fn parse_band(s: &str) -> Result<Band, String> {
    let v = parse_list(s)?;
    match v[..] {
        [lo, hi] => Ok(Band { lo_hz: lo, hi_hz: hi }),
        _ => Err(format!("band must be \"lo,hi\", got {s:?}")),
    }
}
