use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eak_core::atlas::{build_atlas, fc_expand, load_atlas, save_atlas, AtlasSpec, ConstructionParams, FcExpansion, SubRoiVoxels};
use eak_core::blocks::Condition;
use eak_core::classify::{atlas_features, grid_search_cv, metrics, save_bar_data, Confusion, GridSearchResult};
use eak_core::features::{assemble_matrix, roi_units, voxel_units, FeatureId, FeatureMatrix, SampleId, VolumeSet};
use eak_core::io::{load_volume_auto, save_volume_raw};
use eak_core::rfe::{svm_rfe_with, two_stage_select, RfeError, TwoStageConfig, TwoStageResult};
use eak_core::stats::{
    alff_map, bandpass_volume, extract_clusters, fdr_bh, gaussian_smooth, two_sample_t, ClusterReport, MapKind, StatMap,
};
use eak_core::synth::{synth_rest_dataset, synth_task_dataset};
use eak_core::volume::{Parcellation, Volume4D};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{ensure_dir, load_dataset, load_design, load_parc, pooled, read_json, split_all, subject_files, write_json, Dataset};
use crate::error::{io_err, CliError, CliResult};

pub fn synth_task(cfg: &Config, out: &Path, seed: u64) -> CliResult<()> {
    let d = synth_task_dataset(&cfg.synth, seed)?;
    d.save(out)?;
    log::info!("wrote {} task runs to {}", d.subjects.len(), out.display());
    Ok(())
}

pub fn synth_rest(cfg: &Config, out: &Path, seed: u64) -> CliResult<()> {
    let d = synth_rest_dataset(&cfg.synth, seed)?;
    d.save(out)?;
    log::info!("wrote {} + {} resting runs to {}", d.group_a.len(), d.group_b.len(), out.display());
    Ok(())
}

pub fn split(data: &Path, out: &Path) -> CliResult<()> {
    let ds = load_dataset(data, None)?;
    let design = load_design(data)?;
    let blocks: Vec<_> = split_all(&ds, &design)?.into_iter().flatten().collect();
    log::info!("{} blocks from {} subjects", blocks.len(), ds.volumes.len());
    write_json(out, &blocks)
}

fn preprocess(ds: &mut Dataset, cfg: &Config) -> CliResult<()> {
    if let Some(band) = cfg.features.bandpass {
        let filtered: Vec<(String, Volume4D)> = ds
            .volumes
            .par_iter()
            .map(|(id, v)| Ok((id.clone(), bandpass_volume(v, band)?)))
            .collect::<CliResult<_>>()?;
        ds.volumes = filtered.into_iter().collect();
    }
    Ok(())
}

fn volume_set(ds: Dataset) -> CliResult<VolumeSet> {
    Ok(VolumeSet::new(ds.volumes, ds.parcellation)?)
}

const CONDITIONS: [Condition; 2] = [Condition::Positive, Condition::Negative];

fn save_matrix(m: &FeatureMatrix, out: &Path, stem: &str) -> CliResult<()> {
    m.write_csv(&out.join(format!("{stem}.csv")))?;
    m.save_cache(&out.join(format!("{stem}.json")))?;
    log::info!("{stem}: {}x{}", m.n_rows(), m.n_cols());
    Ok(())
}

/// Region-level matrices per condition, or voxel-level ones for `region`.
pub fn features(cfg: &Config, data: &Path, out: &Path, region: Option<u32>) -> CliResult<()> {
    ensure_dir(out)?;
    let mut ds = load_dataset(data, None)?;
    preprocess(&mut ds, cfg)?;
    let design = load_design(data)?;
    let blocks: Vec<_> = CONDITIONS.iter().map(|&c| pooled(&ds, &design, c)).collect::<CliResult<_>>()?;
    let units = match region {
        Some(l) => voxel_units(&ds.parcellation, l)?,
        None => roi_units(&ds.parcellation),
    };
    let set = volume_set(ds)?;
    for (c, b) in CONDITIONS.iter().zip(&blocks) {
        let m = assemble_matrix(b, &units, &set, cfg.features.scope)?;
        let stem = match region {
            Some(l) => format!("features_{}_region_{l}", c.as_str()),
            None => format!("features_{}", c.as_str()),
        };
        save_matrix(&m, out, &stem)?;
    }
    Ok(())
}

pub fn rfe_matrix(cfg: &Config, matrix: &Path, out: &Path, seed: u64) -> CliResult<()> {
    ensure_dir(out)?;
    let m = FeatureMatrix::load_cache(matrix)?;
    let r = &cfg.rfe;
    let trace = svm_rfe_with(&m, r.folds, &r.svm, r.roi_schedule, r.subset_rule, seed)?;
    log::info!(
        "best subset: {} of {} features, accuracy {:.4}",
        trace.best_subset.len(),
        m.n_cols(),
        trace.best_accuracy
    );
    trace.save_json(&out.join("rfe_trace.json"))?;
    trace.save_csv(&out.join("rfe_curve.csv"))?;
    Ok(())
}

pub fn rfe_two_stage(cfg: &Config, data: &Path, condition: Condition, out: &Path, seed: u64) -> CliResult<()> {
    ensure_dir(out)?;
    let mut ds = load_dataset(data, None)?;
    preprocess(&mut ds, cfg)?;
    let design = load_design(data)?;
    let blocks = pooled(&ds, &design, condition)?;
    let units = roi_units(&ds.parcellation);
    let parc = ds.parcellation.clone();
    let set = volume_set(ds)?;
    let scope = cfg.features.scope;
    let roi_matrix = assemble_matrix(&blocks, &units, &set, scope)?;
    let r = &cfg.rfe;
    let two = TwoStageConfig {
        folds: r.folds,
        svm: r.svm,
        roi_schedule: r.roi_schedule,
        voxel_schedule: r.voxel_schedule,
        subset_rule: r.subset_rule,
    };
    let result = two_stage_select(
        &roi_matrix,
        |roi| {
            let FeatureId::Region(label) = roi else {
                return Err(RfeError::NoFeatures);
            };
            let vox = voxel_units(&parc, label)?;
            Ok(assemble_matrix(&blocks, &vox, &set, scope)?)
        },
        &two,
        seed,
    )?;
    log::info!(
        "{} characteristic regions, {} sub-ROIs with {} voxels",
        result.characteristic_rois.len(),
        result.sub_rois.len(),
        result.sub_rois.iter().map(|s| s.voxels.len()).sum::<usize>()
    );
    result.roi_trace.save_csv(&out.join("roi_curve.csv"))?;
    write_json(
        &out.join("selection.json"),
        &Selection {
            condition,
            seed,
            config: two,
            result,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Selection {
    pub condition: Condition,
    pub seed: u64,
    pub config: TwoStageConfig,
    pub result: TwoStageResult,
}

fn sub_roi_voxels(sel: &Selection, parc: &Parcellation) -> CliResult<Vec<SubRoiVoxels>> {
    sel.result
        .sub_rois
        .iter()
        .map(|s| {
            let FeatureId::Region(label) = s.parent else {
                return Err(CliError::data(format!("sub-ROI parent {} is not a region", s.parent)));
            };
            let voxels = s
                .voxels
                .iter()
                .map(|v| match v {
                    FeatureId::Voxel(c) => Ok(parc.grid().check_contains(*c)?),
                    other => Err(CliError::data(format!("sub-ROI member {other} is not a voxel"))),
                })
                .collect::<CliResult<_>>()?;
            Ok(SubRoiVoxels {
                parent_label: label,
                voxels,
            })
        })
        .collect()
}

pub fn fc_expand_cmd(cfg: &Config, data: &Path, selection: &Path, out: &Path) -> CliResult<()> {
    let sel: Selection = read_json(selection)?;
    let mut ds = load_dataset(data, None)?;
    preprocess(&mut ds, cfg)?;
    let design = load_design(data)?;
    let blocks = pooled(&ds, &design, sel.condition)?;
    let subs = sub_roi_voxels(&sel, &ds.parcellation)?;
    if subs.is_empty() {
        return Err(CliError::data("selection has no sub-ROIs"));
    }
    let exp = fc_expand(
        &ds.volumes,
        &ds.parcellation,
        &blocks,
        &subs,
        cfg.atlas.reference,
        cfg.atlas.fc_threshold,
    )?;
    log::info!(
        "{} of {} candidate voxels retained ({} flat)",
        exp.retained.len(),
        exp.candidates,
        exp.degenerate
    );
    write_json(out, &exp)
}

pub fn atlas_build(cfg: &Config, data: &Path, selection: &Path, expansion: &Path, name: &str, out: &Path) -> CliResult<()> {
    let sel: Selection = read_json(selection)?;
    let exp: FcExpansion = read_json(expansion)?;
    let parc = load_parc(data)?;
    let subs = sub_roi_voxels(&sel, &parc)?;
    let params = ConstructionParams {
        seed: Some(sel.seed),
        folds: Some(sel.config.folds),
        roi_schedule: Some(sel.config.roi_schedule),
        voxel_schedule: Some(sel.config.voxel_schedule),
        reference: Some(cfg.atlas.reference),
    };
    let atlas = build_atlas(name, &subs, &exp, &parc, Some(params))?;
    log::info!(
        "atlas {name}: {} units, {} regions, {} voxels",
        atlas.units.len(),
        atlas.region_count(),
        atlas.n_voxels()
    );
    save_atlas(&atlas, out)?;
    Ok(())
}

fn atlas_mask(atlas: &AtlasSpec, parc: &Parcellation) -> CliResult<Vec<bool>> {
    let mut mask = vec![false; parc.grid().n_voxels()];
    for unit in atlas.unit_indices(parc.grid())? {
        for v in unit {
            mask[v] = true;
        }
    }
    Ok(mask)
}

/// One ALFF map per subject plus the analysis mask.
pub fn alff(cfg: &Config, data: &Path, atlas: Option<&Path>, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    let ds = load_dataset(data, None)?;
    let mask = match atlas {
        Some(p) => atlas_mask(&load_atlas(p, Some(&ds.parcellation))?, &ds.parcellation)?,
        None => ds.parcellation.labels().iter().map(|&l| l != 0).collect(),
    };
    let a = &cfg.alff;
    let maps: Vec<(String, StatMap)> = ds
        .volumes
        .par_iter()
        .map(|(id, v)| {
            let mut v = v.clone();
            if let Some(band) = a.preprocess_band {
                v = bandpass_volume(&v, band)?;
            }
            if let Some(fwhm) = a.smooth_fwhm_mm {
                v = gaussian_smooth(&v, fwhm)?;
            }
            Ok((id.clone(), alff_map(&v, Some(&mask), a.band)?))
        })
        .collect::<CliResult<_>>()?;
    for (id, m) in &maps {
        save_volume_raw(&m.to_volume(), &out.join(format!("{id}.json")))?;
    }
    let mask_vol = Volume4D::new(
        *ds.parcellation.grid(),
        1,
        1.0,
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )?;
    save_volume_raw(&mask_vol, &out.join("mask.json"))?;
    log::info!("{} ALFF maps over {} voxels", maps.len(), mask.iter().filter(|&&m| m).count());
    Ok(())
}

fn load_maps(dir: &Path, prefix: &str, mask: &[bool]) -> CliResult<Vec<StatMap>> {
    let mut out = Vec::new();
    for (id, path) in subject_files(dir)? {
        if id.starts_with(prefix) {
            let v = load_volume_auto(&path)?;
            out.push(StatMap::from_volume(&v, MapKind::Alff, Some(mask.to_vec()))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct FdrSummary {
    q: f64,
    n_tested: usize,
    n_rejected: usize,
    p_threshold: Option<f64>,
    n_group_a: usize,
    n_group_b: usize,
}

pub fn group_stats(cfg: &Config, maps: &Path, group_a: &str, group_b: &str, parc_dir: Option<&Path>, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    let mask_path = maps.join("mask.json");
    let mask: Vec<bool> = if mask_path.exists() {
        load_volume_auto(&mask_path)?.frame(0).iter().map(|&v| v != 0.0).collect()
    } else {
        let first = subject_files(maps)?.into_values().next().expect("non-empty");
        vec![true; load_volume_auto(&first)?.grid().n_voxels()]
    };
    let a = load_maps(maps, group_a, &mask)?;
    let b = load_maps(maps, group_b, &mask)?;
    let (t, p) = two_sample_t(&a, &b)?;
    let masked_p = p.masked_values();
    let fdr = fdr_bh(&masked_p, cfg.stats.fdr_q);
    let mut reject = vec![false; mask.len()];
    let mut k = 0;
    for (v, &m) in mask.iter().enumerate() {
        if m {
            reject[v] = fdr.rejected[k];
            k += 1;
        }
    }
    let parc = parc_dir.map(load_parc).transpose()?;
    let mut report: ClusterReport = extract_clusters(&reject, &t, parc.as_ref(), cfg.stats.connectivity);
    report.fdr_q = Some(cfg.stats.fdr_q);
    report.p_threshold = fdr.p_threshold;
    log::info!(
        "{} of {} voxels significant at q={}, {} clusters",
        fdr.n_rejected(),
        masked_p.len(),
        cfg.stats.fdr_q,
        report.clusters.len()
    );
    save_volume_raw(&t.to_volume(), &out.join("t_map.json"))?;
    save_volume_raw(&p.to_volume(), &out.join("p_map.json"))?;
    write_json(
        &out.join("fdr.json"),
        &FdrSummary {
            q: cfg.stats.fdr_q,
            n_tested: masked_p.len(),
            n_rejected: fdr.n_rejected(),
            p_threshold: fdr.p_threshold,
            n_group_a: a.len(),
            n_group_b: b.len(),
        },
    )?;
    report.save_csv(&out.join("clusters.csv"))?;
    report.save_json(&out.join("clusters.json"))?;
    Ok(())
}

fn atlas_name(path: &Path, atlas: &AtlasSpec) -> String {
    if atlas.name.is_empty() {
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("atlas").to_string()
    } else {
        atlas.name.clone()
    }
}

/// Group-A (+1) vs group-B (-1) matrix of atlas features, one row per subject.
pub fn atlas_matrix(cfg: &Config, ds: &Dataset, atlas: &AtlasSpec, group_a: &str, group_b: &str) -> CliResult<FeatureMatrix> {
    let members: Vec<(&String, &Volume4D, i8)> = ds
        .volumes
        .iter()
        .filter_map(|(id, v)| {
            if id.starts_with(group_a) {
                Some((id, v, 1))
            } else if id.starts_with(group_b) {
                Some((id, v, -1))
            } else {
                None
            }
        })
        .collect();
    let rows: Vec<Vec<f64>> = members
        .par_iter()
        .map(|(_, v, _)| Ok(atlas_features(v, atlas, cfg.classify.mode)?))
        .collect::<CliResult<_>>()?;
    let n_cols = rows.first().map_or(0, Vec::len);
    Ok(FeatureMatrix::new(
        rows.concat(),
        members.iter().map(|m| m.2).collect(),
        (0..n_cols).map(FeatureId::Unit).collect(),
        members
            .iter()
            .map(|m| SampleId {
                subject: m.0.clone(),
                block: None,
                phase: None,
            })
            .collect(),
    )?)
}

pub fn classify(cfg: &Config, data: &Path, atlases: &[PathBuf], group_a: &str, group_b: &str, out: &Path, seed: u64) -> CliResult<()> {
    ensure_dir(out)?;
    let ds = load_dataset(data, None)?;
    let mut bars = Vec::new();
    for path in atlases {
        let atlas = load_atlas(path, Some(&ds.parcellation))?;
        let name = atlas_name(path, &atlas);
        let x = atlas_matrix(cfg, &ds, &atlas, group_a, group_b)?;
        let r = grid_search_cv(&x, &cfg.classify.grid, seed)?;
        let best = r.best();
        log::info!(
            "{name}: best C={} gamma={} accuracy {:.4} (recall {:.4})",
            best.c,
            best.gamma,
            best.mean_accuracy,
            best.recall
        );
        r.save_json(&out.join(format!("grid_{name}.json")))?;
        r.save_csv(&out.join(format!("grid_{name}.csv")))?;
        let mut m = metrics(Confusion::merged(&best.fold_confusion))?;
        m.accuracy = best.mean_accuracy;
        bars.push((name, m));
    }
    save_bar_data(&bars, &out.join("metrics_bar.csv"))?;
    Ok(())
}

/// Markdown summary of whatever result files are given.
pub fn report(atlases: &[PathBuf], clusters: &[PathBuf], grids: &[PathBuf], selections: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut md = String::from("# Pipeline report\n");
    for p in selections {
        let s: Selection = read_json(p)?;
        let r = &s.result;
        let _ = write!(
            md,
            "\n## Selection ({}, seed {})\n\nCharacteristic regions: {} (CV accuracy {:.4})\n\n| region | sub-ROI voxels |\n|---|---|\n",
            s.condition.as_str(),
            s.seed,
            r.characteristic_rois.len(),
            r.roi_trace.best_accuracy
        );
        for sr in &r.sub_rois {
            let _ = writeln!(md, "| {} | {} |", sr.parent, sr.voxels.len());
        }
    }
    for p in atlases {
        let a = load_atlas(p, None)?;
        let sub = a
            .units
            .iter()
            .filter(|u| u.provenance == eak_core::atlas::Provenance::SubRoi)
            .count();
        let expanded: usize = a
            .units
            .iter()
            .filter(|u| u.provenance == eak_core::atlas::Provenance::FcExpanded)
            .map(|u| u.voxels.len())
            .sum();
        let _ = write!(
            md,
            "\n## Atlas {}\n\n- sub-ROI units: {sub}\n- FC-expanded voxels: {expanded}\n- regions: {}\n- voxels: {}\n- FC threshold: {}\n",
            atlas_name(p, &a),
            a.region_count(),
            a.n_voxels(),
            a.fc_threshold
        );
    }
    for p in clusters {
        let c: ClusterReport = read_json(p)?;
        let _ = write!(
            md,
            "\n## Clusters ({})\n\n| cluster | voxels | size (mm3) | peak MNI | regions | peak t |\n|---|---|---|---|---|---|\n",
            p.display()
        );
        for cl in &c.clusters {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {}, {}, {} | {} | {:.2} |",
                cl.id,
                cl.n_voxels,
                cl.size_mm3,
                cl.peak_mni.x_mm,
                cl.peak_mni.y_mm,
                cl.peak_mni.z_mm,
                cl.region_names.join("; "),
                cl.peak_intensity
            );
        }
    }
    if !grids.is_empty() {
        md.push_str("\n## Classification\n\n| template | C | gamma | accuracy | precision | recall | F |\n|---|---|---|---|---|---|---|\n");
        for p in grids {
            let g: GridSearchResult = read_json(p)?;
            let b = g.best();
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("?").trim_start_matches("grid_");
            let _ = writeln!(
                md,
                "| {name} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                b.c, b.gamma, b.mean_accuracy, b.precision, b.recall, b.f_score
            );
        }
    }
    std::fs::write(out, md).map_err(|e| io_err(out, e))
}
