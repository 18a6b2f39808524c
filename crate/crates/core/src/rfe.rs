//! Recursive feature elimination driven by fold-averaged squared linear
//! SVM weights.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureId, FeatureMatrix};
use crate::rng::derive_seed;
use crate::svm::{cv_with_assignment, stratified_folds, Gram, KernelSpec, SvmError, TrainConfig};

const TAG_ITERATION: u64 = 0x5246_4549; // "RFEI"
const TAG_STAGE2: u64 = 0x5246_4532;

#[derive(Debug, Error)]
pub enum RfeError {
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("feature matrix has no columns")]
    NoFeatures,
    #[error("invalid elimination schedule: {0}")]
    InvalidSchedule(String),
    #[error("writing trace {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
#[derive(Default)]
pub enum EliminationSchedule {
    /// Drop exactly one feature per iteration.
    #[default]
    One,
    /// Drop `floor(f * n)` features per iteration (at least one).
    Fraction(f64),
}

impl EliminationSchedule {
    pub fn validate(&self) -> Result<(), RfeError> {
        match *self {
            EliminationSchedule::One => Ok(()),
            EliminationSchedule::Fraction(f) if f > 0.0 && f < 1.0 => Ok(()),
            EliminationSchedule::Fraction(f) => Err(RfeError::InvalidSchedule(format!("fraction {f} not in (0,1)"))),
        }
    }

    fn count(&self, n: usize) -> usize {
        let k = match *self {
            EliminationSchedule::One => 1,
            EliminationSchedule::Fraction(f) => ((f * n as f64).floor() as usize).max(1),
        };
        k.min(n.saturating_sub(1))
    }
}

/// How the reported subset is picked among the iterations that share the
/// highest mean CV accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetRule {
    /// Lowest held-out hinge loss, then fewest features.
    #[default]
    MinHingeLoss,
    /// Fewest features.
    Fewest,
}

/// Per-fold squared weights and their fold average for one feature subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub iteration: usize,
    pub feature_ids: Vec<FeatureId>,
    /// `fold_scores[j][i] = (w_i)^2` of the model trained without fold `j`.
    pub fold_scores: Vec<Vec<f64>>,
    /// Fold mean of `fold_scores`, per feature.
    pub scores: Vec<f64>,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_hinge_loss: f64,
}

impl RankingTable {
    /// Column positions sorted from first-to-eliminate to last: ascending
    /// score, equal scores put the larger feature id first.
    pub fn elimination_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| match self.scores[a].total_cmp(&self.scores[b]) {
            Ordering::Equal => self.feature_ids[b].cmp(&self.feature_ids[a]),
            o => o,
        });
        order
    }
}

fn rank_with_seed(x: &FeatureMatrix, k: usize, cfg: &TrainConfig, seed: u64, iteration: usize) -> Result<RankingTable, RfeError> {
    if x.n_cols() == 0 {
        return Err(RfeError::NoFeatures);
    }
    let assignment = stratified_folds(x.labels(), k, seed)?;
    let gram = Gram::new(x, KernelSpec::Linear);
    let cv = cv_with_assignment(x, &gram, &assignment, cfg, KernelSpec::Linear)?;
    let fold_scores: Vec<Vec<f64>> = cv
        .fold_models
        .iter()
        .map(|m| m.linear_weights().map(|w| w.iter().map(|v| v * v).collect()))
        .collect::<Result<_, _>>()?;
    let kf = fold_scores.len() as f64;
    let scores = (0..x.n_cols())
        .map(|i| fold_scores.iter().map(|f| f[i]).sum::<f64>() / kf)
        .collect();
    Ok(RankingTable {
        iteration,
        feature_ids: x.feature_ids().to_vec(),
        fold_scores,
        scores,
        fold_accuracies: cv.fold_accuracies,
        mean_accuracy: cv.mean_accuracy,
        mean_hinge_loss: cv.mean_hinge_loss,
    })
}

/// Fold-averaged ranking scores `a_i` with stratified `k`-fold splits.
pub fn rank_scores(x: &FeatureMatrix, k: usize, cfg: &TrainConfig, seed: u64) -> Result<RankingTable, RfeError> {
    rank_with_seed(x, k, cfg, seed, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeIteration {
    pub iteration: usize,
    pub surviving: Vec<FeatureId>,
    pub mean_accuracy: f64,
    pub mean_hinge_loss: f64,
    /// Removed after this iteration's evaluation, with their scores.
    pub eliminated: Vec<FeatureId>,
    pub eliminated_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeTrace {
    pub iterations: Vec<RfeIteration>,
    pub best_iteration: usize,
    pub best_subset: Vec<FeatureId>,
    pub best_accuracy: f64,
    pub folds: usize,
    pub seed: u64,
    pub schedule: EliminationSchedule,
    pub subset_rule: SubsetRule,
}

impl RfeTrace {
    pub fn save_json(&self, path: &Path) -> Result<(), RfeError> {
        let io = |source| RfeError::Io {
            path: path.display().to_string(),
            source,
        };
        let text = serde_json::to_string_pretty(self).expect("trace serialises");
        std::fs::write(path, text).map_err(io)
    }

    /// Accuracy curve: `iteration,n_features,mean_accuracy,eliminated`.
    pub fn save_csv(&self, path: &Path) -> Result<(), RfeError> {
        let io = |source| RfeError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "iteration,n_features,mean_accuracy,eliminated").map_err(io)?;
        for it in &self.iterations {
            let elim: Vec<String> = it.eliminated.iter().map(ToString::to_string).collect();
            writeln!(f, "{},{},{},{}", it.iteration, it.surviving.len(), it.mean_accuracy, elim.join(";")).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Backward elimination to a single feature. The returned subset is the one
/// with the highest mean CV accuracy, ties settled by [`SubsetRule::default`].
/// Folds are redrawn every iteration from `derive_seed(seed, .., iteration)`.
pub fn svm_rfe(x: &FeatureMatrix, k: usize, cfg: &TrainConfig, schedule: EliminationSchedule, seed: u64) -> Result<RfeTrace, RfeError> {
    svm_rfe_with(x, k, cfg, schedule, SubsetRule::default(), seed)
}

pub fn svm_rfe_with(
    x: &FeatureMatrix,
    k: usize,
    cfg: &TrainConfig,
    schedule: EliminationSchedule,
    subset_rule: SubsetRule,
    seed: u64,
) -> Result<RfeTrace, RfeError> {
    schedule.validate()?;
    if x.n_cols() == 0 {
        return Err(RfeError::NoFeatures);
    }
    let mut cols: Vec<usize> = (0..x.n_cols()).collect();
    let mut iterations = Vec::new();
    let mut used_k = k;
    for it in 0.. {
        let sub = x.select_columns(&cols);
        let table = rank_with_seed(&sub, k, cfg, derive_seed(seed, TAG_ITERATION, it as u64), it)?;
        used_k = table.fold_scores.len();
        let drop = schedule.count(cols.len());
        let order = table.elimination_order();
        let gone: Vec<usize> = order[..drop].to_vec();
        log::debug!("rfe iteration {it}: {} features, accuracy {:.4}", cols.len(), table.mean_accuracy);
        iterations.push(RfeIteration {
            iteration: it,
            surviving: sub.feature_ids().to_vec(),
            mean_accuracy: table.mean_accuracy,
            mean_hinge_loss: table.mean_hinge_loss,
            eliminated: gone.iter().map(|&p| sub.feature_ids()[p]).collect(),
            eliminated_scores: gone.iter().map(|&p| table.scores[p]).collect(),
        });
        if drop == 0 {
            break;
        }
        let mut keep = vec![true; cols.len()];
        for &p in &gone {
            keep[p] = false;
        }
        cols = cols.into_iter().zip(keep).filter_map(|(c, k)| k.then_some(c)).collect();
    }
    let best = pick_best(&iterations, subset_rule);
    let mut best_subset = iterations[best].surviving.clone();
    best_subset.sort();
    Ok(RfeTrace {
        best_iteration: best,
        best_subset,
        best_accuracy: iterations[best].mean_accuracy,
        iterations,
        folds: used_k,
        seed,
        schedule,
        subset_rule,
    })
}

// Later iterations have fewer features, so `>=`/`<=` settles remaining ties
// toward the smaller subset.
fn pick_best(iterations: &[RfeIteration], rule: SubsetRule) -> usize {
    let top = iterations.iter().map(|i| i.mean_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<usize> = None;
    for (i, it) in iterations.iter().enumerate() {
        if it.mean_accuracy != top {
            continue;
        }
        best = match (best, rule) {
            (None, _) | (Some(_), SubsetRule::Fewest) => Some(i),
            (Some(b), SubsetRule::MinHingeLoss) if it.mean_hinge_loss <= iterations[b].mean_hinge_loss => Some(i),
            (b, _) => b,
        };
    }
    best.expect("at least one iteration")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRoi {
    pub parent: FeatureId,
    pub voxels: Vec<FeatureId>,
    pub trace: RfeTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub roi_trace: RfeTrace,
    pub characteristic_rois: Vec<FeatureId>,
    pub sub_rois: Vec<SubRoi>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub folds: usize,
    pub svm: TrainConfig,
    pub roi_schedule: EliminationSchedule,
    pub voxel_schedule: EliminationSchedule,
    #[serde(default)]
    pub subset_rule: SubsetRule,
}

impl Default for TwoStageConfig {
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

/// Region-level RFE followed by voxel-level RFE inside each surviving
/// region. `voxel_matrix` builds the voxel feature matrix of one region.
pub fn two_stage_select<F>(roi_matrix: &FeatureMatrix, voxel_matrix: F, cfg: &TwoStageConfig, seed: u64) -> Result<TwoStageResult, RfeError>
where
    F: Fn(FeatureId) -> Result<FeatureMatrix, RfeError> + Sync,
{
    let roi_trace = svm_rfe_with(roi_matrix, cfg.folds, &cfg.svm, cfg.roi_schedule, cfg.subset_rule, seed)?;
    let characteristic_rois = roi_trace.best_subset.clone();
    log::info!(
        "stage 1 kept {} of {} regions (accuracy {:.4})",
        characteristic_rois.len(),
        roi_matrix.n_cols(),
        roi_trace.best_accuracy
    );
    let stage2: Vec<Option<SubRoi>> = characteristic_rois
        .par_iter()
        .map(|&roi| {
            let vm = voxel_matrix(roi)?;
            if vm.n_cols() == 0 {
                log::warn!("{roi} has no voxels; dropped");
                return Ok(None);
            }
            let s = match roi {
                FeatureId::Region(l) => l as u64,
                FeatureId::Unit(u) => u as u64,
                FeatureId::Voxel(_) => 0,
            };
            let trace = svm_rfe_with(
                &vm,
                cfg.folds,
                &cfg.svm,
                cfg.voxel_schedule,
                cfg.subset_rule,
                derive_seed(seed, TAG_STAGE2, s),
            )?;
            if trace.best_subset.is_empty() {
                log::warn!("{roi} kept no voxels; dropped");
                return Ok(None);
            }
            Ok(Some(SubRoi {
                parent: roi,
                voxels: trace.best_subset.clone(),
                trace,
            }))
        })
        .collect::<Result<_, RfeError>>()?;
    Ok(TwoStageResult {
        roi_trace,
        characteristic_rois,
        sub_rois: stage2.into_iter().flatten().collect(),
    })
}
