//! Synthetic block-design and resting-state datasets with planted effects.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{BlockDesign, Condition};
use crate::io::{save_label_names, save_parcellation_raw, save_volume_raw, IoError};
use crate::rng::{derive_seed, CounterRng};
use crate::stats::ALFF_BAND;
use crate::volume::{Grid3, Parcellation, Volume4D, VolumeError};

const TAG_TASK: u64 = 0x7461_736b;
const TAG_REST: u64 = 0x7265_7374;
const TAG_PHASE: u64 = 0x7068_6173;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedActivation {
    pub label: u32,
    pub condition: Condition,
    /// Added to the signal during the condition's stimulus periods.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedAlff {
    pub label: u32,
    /// Sinusoid amplitude in units of the noise sd, added to group B.
    pub effect: f64,
    pub freq_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub voxel_mm: f64,
    pub tr_s: f64,
    pub n_regions: usize,
    pub noise_sd: f64,
    pub baseline: f64,
    pub n_subjects: usize,
    pub blocks_per_condition: usize,
    /// Seconds of stimulus at the start of every block.
    pub stim_duration_s: f64,
    pub planted_active_regions: Vec<PlantedActivation>,
    pub n_group_a: usize,
    pub n_group_b: usize,
    pub rest_nt: usize,
    pub planted_alff_regions: Vec<PlantedAlff>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let active = [(10, Condition::Positive), (50, Condition::Positive), (90, Condition::Positive)]
            .into_iter()
            .chain([(130, Condition::Negative), (170, Condition::Negative), (210, Condition::Negative)])
            .map(|(label, condition)| PlantedActivation {
                label,
                condition,
                amplitude: 2.0,
            })
            .collect();
        Self {
            dims: [20, 20, 12],
            voxel_mm: 3.0,
            tr_s: 2.0,
            n_regions: 246,
            noise_sd: 1.0,
            baseline: 100.0,
            n_subjects: 21,
            blocks_per_condition: 3,
            stim_duration_s: 20.0,
            planted_active_regions: active,
            n_group_a: 46,
            n_group_b: 20,
            rest_nt: 240,
            planted_alff_regions: vec![PlantedAlff {
                label: 100,
                effect: 1.0,
                freq_hz: 0.05,
            }],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let n_vox: usize = self.dims.iter().product();
        if n_vox == 0 {
            return bad(format!("grid {:?} is empty", self.dims));
        }
        if !(self.voxel_mm > 0.0 && self.tr_s > 0.0) {
            return bad("voxel size and TR must be positive".into());
        }
        if self.n_regions == 0 || self.n_regions > n_vox {
            return bad(format!("{} regions do not fit {n_vox} voxels", self.n_regions));
        }
        if !(self.noise_sd >= 0.0 && self.baseline.is_finite()) {
            return bad("noise sd must be non-negative".into());
        }
        for p in &self.planted_active_regions {
            if p.label == 0 || p.label as usize > self.n_regions {
                return bad(format!("planted label {} outside 1..={}", p.label, self.n_regions));
            }
            if !(p.amplitude >= 0.0) {
                return bad(format!("amplitude {} is negative", p.amplitude));
            }
        }
        let nyquist = 0.5 / self.tr_s;
        for p in &self.planted_alff_regions {
            if p.label == 0 || p.label as usize > self.n_regions {
                return bad(format!("planted label {} outside 1..={}", p.label, self.n_regions));
            }
            if !(p.effect >= 0.0) {
                return bad(format!("effect {} is negative", p.effect));
            }
            if !(p.freq_hz > 0.0 && p.freq_hz < nyquist) {
                return bad(format!("frequency {} Hz outside (0, {nyquist})", p.freq_hz));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid3 {
        let origin = self.dims.map(|d| -((d as f64 - 1.0) / 2.0).floor() * self.voxel_mm);
        Grid3::isotropic(self.dims, self.voxel_mm, origin)
    }

    /// Regions are consecutive runs of voxels in storage order.
    pub fn parcellation(&self) -> Result<Parcellation, SynthError> {
        let grid = self.grid();
        let n = grid.n_voxels();
        let labels = (0..n).map(|v| (v * self.n_regions / n) as u32 + 1).collect();
        let names = (1..=self.n_regions as u32).map(|l| (l, format!("region_{l:03}"))).collect();
        Ok(Parcellation::new(grid, labels, names)?)
    }

    pub fn design(&self) -> BlockDesign {
        BlockDesign::alternating(self.tr_s, self.blocks_per_condition)
    }

    pub fn task_nt(&self) -> usize {
        (self.design().duration_s() / self.tr_s).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRegion {
    pub label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    /// Sign of the planted group difference A - B (rest datasets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<i8>,
    pub magnitude: f64,
    pub voxels: Vec<[usize; 3]>,
}

/// Ground truth written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub subjects: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_a: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_b: Vec<String>,
    pub regions: Vec<ManifestRegion>,
}

pub struct TaskDataset {
    pub subjects: Vec<(String, Volume4D)>,
    pub parcellation: Parcellation,
    pub design: BlockDesign,
    pub manifest: Manifest,
}

pub struct RestDataset {
    pub group_a: Vec<(String, Volume4D)>,
    pub group_b: Vec<(String, Volume4D)>,
    pub parcellation: Parcellation,
    pub manifest: Manifest,
}

fn region_coords(parc: &Parcellation, label: u32) -> Result<Vec<[usize; 3]>, SynthError> {
    Ok(parc.voxels_of(label)?.into_iter().map(|v| parc.grid().coord(v)).collect())
}

/// Per-volume response of one condition: 1 while a stimulus of that
/// condition was shown one TR earlier.
fn boxcar(design: &BlockDesign, condition: Condition, stim_s: f64, tr: f64, nt: usize) -> Vec<f64> {
    (0..nt)
        .map(|k| {
            let t = k as f64 * tr - tr;
            let on = design
                .blocks
                .iter()
                .any(|b| b.condition == condition && t >= b.onset_s && t < b.onset_s + stim_s);
            if on {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn noise_volume(cfg: &SynthConfig, grid: Grid3, nt: usize, seed: u64) -> Vec<f64> {
    let rng = CounterRng::new(seed, 0);
    (0..grid.n_voxels() * nt)
        .map(|i| {
            // data index is voxel + n_vox * t; draw counter is voxel * nt + t.
            let (v, t) = (i % grid.n_voxels(), i / grid.n_voxels());
            cfg.baseline + cfg.noise_sd * rng.gaussian((v * nt + t) as u64)
        })
        .collect()
}

fn to_volume(grid: Grid3, nt: usize, tr: f64, data: Vec<f64>) -> Result<Volume4D, SynthError> {
    Ok(Volume4D::new(grid, nt, tr, data.into_iter().map(|v| v as f32).collect())?)
}

/// Block-design runs for `n_subjects` subjects. Voxels of a planted region
/// carry `amplitude` during stimulus periods of its condition, lagged one TR.
pub fn synth_task_dataset(cfg: &SynthConfig, seed: u64) -> Result<TaskDataset, SynthError> {
    cfg.validate()?;
    let parc = cfg.parcellation()?;
    let grid = *parc.grid();
    let design = cfg.design();
    let nt = cfg.task_nt();
    let n_vox = grid.n_voxels();
    let mut regions = Vec::new();
    let mut responses: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    for p in &cfg.planted_active_regions {
        let vox = parc.voxels_of(p.label)?;
        let shape = boxcar(&design, p.condition, cfg.stim_duration_s, cfg.tr_s, nt);
        responses.push((vox, shape.iter().map(|s| s * p.amplitude).collect()));
        regions.push(ManifestRegion {
            label: p.label,
            condition: Some(p.condition),
            direction: None,
            magnitude: p.amplitude,
            voxels: region_coords(&parc, p.label)?,
        });
    }
    let names: Vec<String> = (1..=cfg.n_subjects).map(|i| format!("sub-{i:02}")).collect();
    let subjects = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|s| {
            let mut data = noise_volume(cfg, grid, nt, derive_seed(seed, TAG_TASK, s as u64));
            for (vox, resp) in &responses {
                for &v in vox {
                    for (t, r) in resp.iter().enumerate() {
                        data[v + n_vox * t] += r;
                    }
                }
            }
            Ok((names[s].clone(), to_volume(grid, nt, cfg.tr_s, data)?))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(TaskDataset {
        subjects,
        parcellation: parc,
        design,
        manifest: Manifest {
            kind: "task".into(),
            seed,
            config: cfg.clone(),
            subjects: names,
            group_a: Vec::new(),
            group_b: Vec::new(),
            regions,
        },
    })
}

/// Two groups of resting runs. Group B voxels in planted regions carry an
/// extra sinusoid of `effect * noise_sd` amplitude with a per-subject phase.
pub fn synth_rest_dataset(cfg: &SynthConfig, seed: u64) -> Result<RestDataset, SynthError> {
    cfg.validate()?;
    if cfg.n_group_a < 2 || cfg.n_group_b < 2 {
        return Err(SynthError::Config("each group needs at least 2 subjects".into()));
    }
    if cfg.rest_nt < 16 {
        return Err(SynthError::Config(format!("rest run of {} volumes is too short", cfg.rest_nt)));
    }
    for p in &cfg.planted_alff_regions {
        if p.freq_hz < ALFF_BAND.lo_hz || p.freq_hz > ALFF_BAND.hi_hz {
            log::warn!("planted frequency {} Hz lies outside the ALFF band", p.freq_hz);
        }
    }
    let parc = cfg.parcellation()?;
    let grid = *parc.grid();
    let nt = cfg.rest_nt;
    let n_vox = grid.n_voxels();
    let mut regions = Vec::new();
    let mut planted = Vec::new();
    for p in &cfg.planted_alff_regions {
        planted.push((parc.voxels_of(p.label)?, p.effect * cfg.noise_sd, p.freq_hz));
        regions.push(ManifestRegion {
            label: p.label,
            condition: None,
            direction: Some(if p.effect > 0.0 { -1 } else { 0 }),
            magnitude: p.effect,
            voxels: region_coords(&parc, p.label)?,
        });
    }
    let n_total = cfg.n_group_a + cfg.n_group_b;
    let names: Vec<String> = (0..n_total)
        .map(|i| {
            if i < cfg.n_group_a {
                format!("a-{:02}", i + 1)
            } else {
                format!("b-{:02}", i + 1 - cfg.n_group_a)
            }
        })
        .collect();
    let vols = (0..n_total)
        .into_par_iter()
        .map(|s| {
            let mut data = noise_volume(cfg, grid, nt, derive_seed(seed, TAG_REST, s as u64));
            if s >= cfg.n_group_a {
                let phases = CounterRng::new(derive_seed(seed, TAG_PHASE, s as u64), 0);
                for (r, (vox, amp, f)) in planted.iter().enumerate() {
                    let phase = std::f64::consts::TAU * phases.uniform(r as u64);
                    for t in 0..nt {
                        let w = amp * (std::f64::consts::TAU * f * t as f64 * cfg.tr_s + phase).sin();
                        for &v in vox {
                            data[v + n_vox * t] += w;
                        }
                    }
                }
            }
            Ok((names[s].clone(), to_volume(grid, nt, cfg.tr_s, data)?))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let mut group_a = vols;
    let group_b = group_a.split_off(cfg.n_group_a);
    Ok(RestDataset {
        group_a,
        group_b,
        parcellation: parc,
        manifest: Manifest {
            kind: "rest".into(),
            seed,
            config: cfg.clone(),
            subjects: names.clone(),
            group_a: names[..cfg.n_group_a].to_vec(),
            group_b: names[cfg.n_group_a..].to_vec(),
            regions,
        },
    })
}

fn save_common(dir: &Path, parc: &Parcellation, manifest: &Manifest) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    save_parcellation_raw(parc, &dir.join("parcellation.json"))?;
    save_label_names(parc.label_names(), &dir.join("labels.csv"))?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    std::fs::write(&path, text).map_err(|e| IoError::io(&path, e))?;
    Ok(())
}

fn save_subjects(dir: &Path, subjects: &[(String, Volume4D)]) -> Result<BTreeMap<String, String>, SynthError> {
    let mut index = BTreeMap::new();
    for (name, vol) in subjects {
        let file = format!("{name}.json");
        save_volume_raw(vol, &dir.join(&file))?;
        index.insert(name.clone(), file);
    }
    Ok(index)
}

impl TaskDataset {
    /// Volumes as `<subject>.json`/`.bin`, plus `parcellation.json`,
    /// `labels.csv`, `design.json` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        save_common(dir, &self.parcellation, &self.manifest)?;
        save_subjects(dir, &self.subjects)?;
        let path = dir.join("design.json");
        let text = serde_json::to_string_pretty(&self.design).expect("design serialises");
        std::fs::write(&path, text).map_err(|e| IoError::io(&path, e))?;
        Ok(())
    }
}

impl RestDataset {
    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        save_common(dir, &self.parcellation, &self.manifest)?;
        save_subjects(dir, &self.group_a)?;
        save_subjects(dir, &self.group_b)?;
        Ok(())
    }
}
