//! Dataset directories: one volume per subject (`<id>.json` raw-json header
//! or `<id>.nii`), a label image `parcellation.{json,nii}`, an optional
//! `labels.csv` name sidecar and, for task data, `design.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eak_core::blocks::{pool_blocks, split_blocks, Block, BlockDesign, Condition};
use eak_core::io::{load_parcellation, load_volume_auto};
use eak_core::volume::{Parcellation, Volume4D};
use serde::Serialize;

use crate::error::{io_err, CliError, CliResult};

const RESERVED: [&str; 5] = ["parcellation", "design", "manifest", "mask", "labels"];

pub struct Dataset {
    pub volumes: BTreeMap<String, Volume4D>,
    pub parcellation: Parcellation,
}

/// Subject id to volume path, sorted by id.
pub fn subject_files(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "json" && ext != "nii" {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if RESERVED.contains(&stem) || stem.ends_with(".cache") {
            continue;
        }
        if out.insert(stem.to_string(), path.clone()).is_some() {
            return Err(CliError::data(format!("subject {stem} appears twice in {}", dir.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::data(format!("no subject volumes in {}", dir.display())));
    }
    Ok(out)
}

fn find_parcellation(dir: &Path) -> CliResult<PathBuf> {
    for name in ["parcellation.json", "parcellation.nii"] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(CliError::data(format!(
        "no parcellation.json or parcellation.nii in {}",
        dir.display()
    )))
}

pub fn load_parc(dir: &Path) -> CliResult<Parcellation> {
    let names = dir.join("labels.csv");
    Ok(load_parcellation(
        &find_parcellation(dir)?,
        names.exists().then_some(names.as_path()),
    )?)
}

/// Subjects whose id starts with `prefix` (all when `None`).
pub fn load_dataset(dir: &Path, prefix: Option<&str>) -> CliResult<Dataset> {
    let parcellation = load_parc(dir)?;
    let mut volumes = BTreeMap::new();
    for (id, path) in subject_files(dir)? {
        if prefix.is_some_and(|p| !id.starts_with(p)) {
            continue;
        }
        let vol = load_volume_auto(&path)?;
        if !vol.grid().same_dims(parcellation.grid()) {
            return Err(CliError::data(format!(
                "{} has grid {:?}, parcellation has {:?}",
                path.display(),
                vol.grid().dims,
                parcellation.grid().dims
            )));
        }
        volumes.insert(id, vol);
    }
    if volumes.is_empty() {
        return Err(CliError::data(format!("no subjects matching {prefix:?} in {}", dir.display())));
    }
    Ok(Dataset { volumes, parcellation })
}

pub fn load_design(dir: &Path) -> CliResult<BlockDesign> {
    let path = dir.join("design.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Blocks of every subject in subject order.
pub fn split_all(ds: &Dataset, design: &BlockDesign) -> CliResult<Vec<Vec<Block>>> {
    ds.volumes
        .iter()
        .map(|(id, v)| Ok(split_blocks(v.nt(), v.tr_seconds(), design, id)?))
        .collect()
}

pub fn pooled(ds: &Dataset, design: &BlockDesign, condition: Condition) -> CliResult<Vec<Block>> {
    let blocks = pool_blocks(&split_all(ds, design)?, condition);
    if blocks.is_empty() {
        return Err(CliError::data(format!("design has no {} blocks", condition.as_str())));
    }
    Ok(blocks)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("output serialises");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}
