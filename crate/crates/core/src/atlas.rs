//! Emotion atlases: characteristic sub-ROIs plus voxels recruited by
//! correlation with them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{Block, Phase};
use crate::features::{normalized_window, FeatureError, NormScope};
use crate::io::IoError;
use crate::rfe::EliminationSchedule;
use crate::volume::{Grid3, Parcellation, Series, Volume4D, VolumeError};

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("voxel {0:?} belongs to more than one unit")]
    Overlap([usize; 3]),
    #[error("atlas was built on parcellation {expected}, got {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("atlas schema error: {0}")]
    Schema(String),
    #[error("threshold {0} outside [-1, 1]")]
    InvalidThreshold(f64),
    #[error("no usable sub-ROI reference series")]
    NoReference,
    #[error("atlas grid {atlas:?} does not match volume grid {volume:?}")]
    DimensionMismatch { atlas: [usize; 3], volume: [usize; 3] },
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson on series of different length");
    if a.is_empty() || series_is_flat(a) || series_is_flat(b) {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Which windows make up a reference series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub scope: NormScope,
    /// Append each block's recovery window after its stimulus window.
    pub include_rest: bool,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            scope: NormScope::Block,
            include_rest: false,
        }
    }
}

/// Concatenation over `blocks` of the normalised stimulus window (and
/// optionally recovery window) of a full-run series per subject.
pub fn reference_series<F>(blocks: &[Block], spec: ReferenceSpec, mut series_of: F) -> Result<Vec<f64>, FeatureError>
where
    F: FnMut(&str) -> Result<Vec<f64>, FeatureError>,
{
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut out = Vec::new();
    for b in blocks {
        if !cache.contains_key(b.subject_id.as_str()) {
            cache.insert(&b.subject_id, series_of(&b.subject_id)?);
        }
        let s = &cache[b.subject_id.as_str()];
        out.extend(normalized_window(s, b, Phase::Stim, spec.scope)?);
        if spec.include_rest {
            out.extend(normalized_window(s, b, Phase::Rest, spec.scope)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRoiVoxels {
    pub parent_label: u32,
    /// Spatial (storage-order) indices.
    pub voxels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedVoxel {
    pub voxel: usize,
    pub coord: [usize; 3],
    /// Region the voxel itself lies in.
    pub parent_label: u32,
    /// Position in the sub-ROI list of the best-correlated sub-ROI.
    pub best_sub_roi: usize,
    pub best_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcExpansion {
    pub threshold: f64,
    pub retained: Vec<ExpandedVoxel>,
    /// Candidates skipped for zero variance.
    pub degenerate: usize,
    pub candidates: usize,
}

/// Candidate voxel for expansion: storage index, its region and its
/// reference series.
pub struct Candidate {
    pub voxel: usize,
    pub coord: [usize; 3],
    pub parent_label: u32,
    pub series: Vec<f64>,
}

fn check_threshold(t: f64) -> Result<(), AtlasError> {
    if (-1.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(AtlasError::InvalidThreshold(t))
    }
}

/// Keeps a candidate iff its best correlation with any reference exceeds
/// `threshold` strictly. The first reference wins exact ties.
pub fn fc_expand_series(candidates: &[Candidate], references: &[Vec<f64>], threshold: f64) -> Result<FcExpansion, AtlasError> {
    check_threshold(threshold)?;
    let outcome: Vec<Option<Option<(usize, f64)>>> = candidates.par_iter().map(|c| best_match(&c.series, references)).collect();
    Ok(collect_expansion(
        candidates.len(),
        threshold,
        outcome
            .into_iter()
            .zip(candidates)
            .map(|(o, c)| (o, c.voxel, c.coord, c.parent_label)),
    ))
}

// None: degenerate candidate; Some(None): no usable reference.
fn best_match(series: &[f64], references: &[Vec<f64>]) -> Option<Option<(usize, f64)>> {
    if series_is_flat(series) {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, r) in references.iter().enumerate() {
        if let Some(v) = pearson(series, r) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
    }
    Some(best)
}

fn series_is_flat(s: &[f64]) -> bool {
    s.iter().all(|&v| v == s[0])
}

fn collect_expansion<I>(n: usize, threshold: f64, items: I) -> FcExpansion
where
    I: Iterator<Item = (Option<Option<(usize, f64)>>, usize, [usize; 3], u32)>,
{
    let mut retained = Vec::new();
    let mut degenerate = 0;
    for (outcome, voxel, coord, parent_label) in items {
        match outcome {
            None => degenerate += 1,
            Some(Some((k, r))) if r > threshold => retained.push(ExpandedVoxel {
                voxel,
                coord,
                parent_label,
                best_sub_roi: k,
                best_r: r,
            }),
            Some(_) => {}
        }
    }
    if degenerate > 0 {
        log::info!("{degenerate} zero-variance voxels skipped during expansion");
    }
    FcExpansion {
        threshold,
        retained,
        degenerate,
        candidates: n,
    }
}

/// Expansion over a set of subject volumes. Candidates are all labelled
/// voxels outside the regions that own a sub-ROI.
pub fn fc_expand(
    volumes: &BTreeMap<String, Volume4D>,
    parc: &Parcellation,
    blocks: &[Block],
    sub_rois: &[SubRoiVoxels],
    spec: ReferenceSpec,
    threshold: f64,
) -> Result<FcExpansion, AtlasError> {
    check_threshold(threshold)?;
    for v in volumes.values() {
        if !v.grid().same_dims(parc.grid()) {
            return Err(AtlasError::DimensionMismatch {
                atlas: parc.grid().dims,
                volume: v.grid().dims,
            });
        }
    }
    let volume_of = |id: &str| volumes.get(id).ok_or_else(|| FeatureError::UnknownSubject(id.to_string()));
    let mut references = Vec::with_capacity(sub_rois.len());
    for s in sub_rois {
        let r = reference_series(blocks, spec, |id| Ok(volume_of(id)?.mean_series_over(&s.voxels)))?;
        if series_is_flat(&r) {
            log::warn!("sub-ROI in region {} has a flat reference series", s.parent_label);
        }
        references.push(r);
    }
    if references.iter().all(|r| series_is_flat(r)) {
        return Err(AtlasError::NoReference);
    }
    let excluded: BTreeSet<u32> = sub_rois.iter().map(|s| s.parent_label).collect();
    let candidates: Vec<usize> = (0..parc.labels().len())
        .filter(|&v| {
            let l = parc.label_at(v);
            l != 0 && !excluded.contains(&l)
        })
        .collect();
    let outcome: Vec<Option<Option<(usize, f64)>>> = candidates
        .par_iter()
        .map(|&v| {
            let s = reference_series(blocks, spec, |id| Ok(volume_of(id)?.series_at(v)))?;
            Ok(best_match(&s, &references))
        })
        .collect::<Result<_, FeatureError>>()?;
    let grid = parc.grid();
    Ok(collect_expansion(
        candidates.len(),
        threshold,
        outcome
            .into_iter()
            .zip(&candidates)
            .map(|(o, &v)| (o, v, grid.coord(v), parc.label_at(v))),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SubRoi,
    FcExpanded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasUnit {
    pub parent_label: u32,
    pub provenance: Provenance,
    pub voxels: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstructionParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_schedule: Option<EliminationSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_schedule: Option<EliminationSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasSpec {
    pub name: String,
    pub fc_threshold: f64,
    pub parcellation_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<[usize; 3]>,
    pub units: Vec<AtlasUnit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub construction_params: Option<ConstructionParams>,
}

impl AtlasSpec {
    pub fn n_voxels(&self) -> usize {
        self.units.iter().map(|u| u.voxels.len()).sum()
    }

    /// Distinct parent regions across all units.
    pub fn region_count(&self) -> usize {
        self.units.iter().map(|u| u.parent_label).collect::<BTreeSet<_>>().len()
    }

    pub fn check_disjoint(&self) -> Result<(), AtlasError> {
        let mut seen = BTreeSet::new();
        for u in &self.units {
            for v in &u.voxels {
                if !seen.insert(*v) {
                    return Err(AtlasError::Overlap(*v));
                }
            }
        }
        Ok(())
    }

    /// Storage-order voxel indices per unit on `grid`.
    pub fn unit_indices(&self, grid: &Grid3) -> Result<Vec<Vec<usize>>, AtlasError> {
        if let Some(d) = self.dims {
            if d != grid.dims {
                return Err(AtlasError::DimensionMismatch {
                    atlas: d,
                    volume: grid.dims,
                });
            }
        }
        self.units
            .iter()
            .map(|u| u.voxels.iter().map(|&c| grid.check_contains(c).map_err(AtlasError::from)).collect())
            .collect()
    }
}

/// One unit per sub-ROI, then one unit per region of the expanded voxels
/// (ascending label). Voxels inside a unit are in storage order.
pub fn build_atlas(
    name: &str,
    sub_rois: &[SubRoiVoxels],
    expanded: &FcExpansion,
    parc: &Parcellation,
    params: Option<ConstructionParams>,
) -> Result<AtlasSpec, AtlasError> {
    let grid = parc.grid();
    let mut owner: BTreeSet<usize> = BTreeSet::new();
    let mut units = Vec::new();
    for s in sub_rois {
        let mut vox = s.voxels.clone();
        vox.sort_unstable();
        for &v in &vox {
            if v >= grid.n_voxels() {
                return Err(VolumeError::OutOfBounds([v, 0, 0], grid.dims).into());
            }
            if !owner.insert(v) {
                return Err(AtlasError::Overlap(grid.coord(v)));
            }
        }
        units.push(AtlasUnit {
            parent_label: s.parent_label,
            provenance: Provenance::SubRoi,
            voxels: vox.iter().map(|&v| grid.coord(v)).collect(),
        });
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for e in &expanded.retained {
        if !owner.insert(e.voxel) {
            return Err(AtlasError::Overlap(grid.coord(e.voxel)));
        }
        groups.entry(e.parent_label).or_default().push(e.voxel);
    }
    for (label, mut vox) in groups {
        vox.sort_unstable();
        units.push(AtlasUnit {
            parent_label: label,
            provenance: Provenance::FcExpanded,
            voxels: vox.iter().map(|&v| grid.coord(v)).collect(),
        });
    }
    Ok(AtlasSpec {
        name: name.to_string(),
        fc_threshold: expanded.threshold,
        parcellation_digest: parc.digest(),
        dims: Some(grid.dims),
        units,
        construction_params: params,
    })
}

pub fn save_atlas(atlas: &AtlasSpec, path: &Path) -> Result<(), AtlasError> {
    let text = serde_json::to_string_pretty(atlas).expect("atlas serialises");
    std::fs::write(path, text).map_err(|e| IoError::io(path, e))?;
    Ok(())
}

/// Loads an atlas; with `parc` given, the digest and voxel bounds are checked.
pub fn load_atlas(path: &Path, parc: Option<&Parcellation>) -> Result<AtlasSpec, AtlasError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let atlas: AtlasSpec = serde_json::from_str(&text).map_err(|e| AtlasError::Schema(format!("{}: {e}", path.display())))?;
    if atlas.units.iter().any(|u| u.voxels.is_empty()) {
        return Err(AtlasError::Schema("unit without voxels".into()));
    }
    atlas.check_disjoint()?;
    if let Some(p) = parc {
        let found = p.digest();
        if found != atlas.parcellation_digest {
            return Err(AtlasError::DigestMismatch {
                expected: atlas.parcellation_digest.clone(),
                found,
            });
        }
        atlas.unit_indices(p.grid())?;
    }
    Ok(atlas)
}

/// Mean series of every unit, in unit order.
pub fn atlas_series(vol: &Volume4D, atlas: &AtlasSpec) -> Result<Vec<Series>, AtlasError> {
    let units = atlas.unit_indices(vol.grid())?;
    units
        .iter()
        .map(|u| Series::new(vol.mean_series_over(u), vol.tr_seconds()).map_err(AtlasError::from))
        .collect()
}
