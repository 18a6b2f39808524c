//! Atlas-based group classification: feature vectors per subject,
//! cost-sensitive RBF grid search and confusion metrics.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{atlas_series, pearson, AtlasError, AtlasSpec};
use crate::features::{minmax_normalize, FeatureError, FeatureMatrix};
use crate::io::IoError;
use crate::stats::{alff, Band, StatsError, ALFF_BAND};
use crate::svm::{
    balanced_class_weights, decision_from_gram, sign_label, stratified_folds, train_subset_rows, FoldAssignment, Gram, KernelSpec,
    SvmError, TrainConfig,
};
use crate::volume::Volume4D;

pub const DEFAULT_C_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const DEFAULT_GAMMA_GRID: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 15.0];

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("feature mode needs at least {need} atlas units, got {got}")]
    InsufficientUnits { got: usize, need: usize },
    #[error("series of {nt} volumes at TR {tr} s is too short for ALFF in the {lo}-{hi} Hz band")]
    TooShortForAlff { nt: usize, tr: f64, lo: f64, hi: f64 },
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("parameter grid is empty")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    AlffPerUnit,
    MeanActivationPerUnit,
    FcUpperTriangle,
}

/// One subject's feature vector from an atlas.
///
/// `MeanActivationPerUnit` is the mean of each unit's Min-Max normalised
/// run series.
pub fn atlas_features(vol: &Volume4D, atlas: &AtlasSpec, mode: FeatureMode) -> Result<Vec<f64>, ClassifyError> {
    let series = atlas_series(vol, atlas)?;
    match mode {
        FeatureMode::AlffPerUnit => series
            .iter()
            .map(|s| alff(s, ALFF_BAND).map_err(|e| alff_error(e, vol, ALFF_BAND)))
            .collect(),
        FeatureMode::MeanActivationPerUnit => Ok(series
            .iter()
            .map(|s| {
                let n = minmax_normalize(&s.values);
                n.iter().sum::<f64>() / n.len().max(1) as f64
            })
            .collect()),
        FeatureMode::FcUpperTriangle => {
            let u = series.len();
            if u < 2 {
                return Err(ClassifyError::InsufficientUnits { got: u, need: 2 });
            }
            let mut out = Vec::with_capacity(u * (u - 1) / 2);
            for i in 0..u {
                for j in i + 1..u {
                    out.push(pearson(&series[i].values, &series[j].values).unwrap_or(0.0));
                }
            }
            Ok(out)
        }
    }
}

fn alff_error(e: StatsError, vol: &Volume4D, band: Band) -> ClassifyError {
    match e {
        StatsError::TooShort { .. } | StatsError::BandEmpty { .. } => ClassifyError::TooShortForAlff {
            nt: vol.nt(),
            tr: vol.tr_seconds(),
            lo: band.lo_hz,
            hi: band.hi_hz,
        },
        other => other.into(),
    }
}

/// Binary confusion counts; positive = label +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, truth: i8, predicted: i8) {
        match (truth > 0, predicted > 0) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merged(items: &[Confusion]) -> Confusion {
        items.iter().fold(Confusion::default(), |a, c| Confusion {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
            tn: a.tn + c.tn,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F-score; zero denominators give 0.
pub fn metrics(c: Confusion) -> Result<Metrics, ClassifyError> {
    if c.total() == 0 {
        return Err(ClassifyError::EmptyConfusion);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchConfig {
    pub c_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    /// `(positive, negative)` cost multipliers; `None` uses `n_neg / n_pos` for positives.
    #[serde(default)]
    pub class_weights: Option<(f64, f64)>,
    pub folds: usize,
    /// Min-Max scale every column across samples before training.
    pub scale_features: bool,
    pub kkt_tolerance: f64,
    pub max_passes: usize,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            c_grid: DEFAULT_C_GRID.to_vec(),
            gamma_grid: DEFAULT_GAMMA_GRID.to_vec(),
            class_weights: None,
            folds: 10,
            scale_features: true,
            kkt_tolerance: base.kkt_tolerance,
            max_passes: base.max_passes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub c: f64,
    pub gamma: f64,
    /// Mean of per-fold accuracies.
    pub mean_accuracy: f64,
    /// Precision, recall and F-score from the confusion pooled over folds.
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub fold_confusion: Vec<Confusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub candidates: Vec<CandidateResult>,
    pub best: usize,
    pub class_weights: (f64, f64),
    pub seed: u64,
    pub assignment: FoldAssignment,
}

impl GridSearchResult {
    pub fn best(&self) -> &CandidateResult {
        &self.candidates[self.best]
    }

    pub fn save_json(&self, path: &Path) -> Result<(), IoError> {
        let text = serde_json::to_string_pretty(self).expect("result serialises");
        std::fs::write(path, text).map_err(|e| IoError::io(path, e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), IoError> {
        let io = |e| IoError::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "c,gamma,accuracy,precision,recall,f_score,best").map_err(io)?;
        for (i, c) in self.candidates.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                c.c,
                c.gamma,
                c.mean_accuracy,
                c.precision,
                c.recall,
                c.f_score,
                u8::from(i == self.best)
            )
            .map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Long-format `template,metric,value` rows for bar charts.
pub fn save_bar_data(rows: &[(String, Metrics)], path: &Path) -> Result<(), IoError> {
    let io = |e| IoError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "template,metric,value").map_err(io)?;
    for (name, m) in rows {
        for (metric, v) in [
            ("accuracy", m.accuracy),
            ("precision", m.precision),
            ("recall", m.recall),
            ("f_score", m.f_score),
        ] {
            writeln!(f, "{name},{metric},{v}").map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

fn fold_confusions(
    x: &FeatureMatrix,
    gram: &Gram,
    assignment: &FoldAssignment,
    cfg: &TrainConfig,
    kernel: KernelSpec,
) -> Result<Vec<Confusion>, SvmError> {
    (0..assignment.k)
        .map(|f| {
            let (model, sv_rows) = train_subset_rows(x, &assignment.train_rows(f), gram, cfg, kernel)?;
            let mut c = Confusion::default();
            for t in assignment.test_rows(f) {
                c.add(x.labels()[t], sign_label(decision_from_gram(&model, &sv_rows, gram, t)));
            }
            Ok(c)
        })
        .collect()
}

/// Every `(C, gamma)` pair evaluated with RBF SVMs on one shared stratified
/// fold draw. Best = highest mean accuracy, ties to smaller C then smaller gamma.
pub fn grid_search_cv(x: &FeatureMatrix, cfg: &GridSearchConfig, seed: u64) -> Result<GridSearchResult, ClassifyError> {
    if cfg.c_grid.is_empty() || cfg.gamma_grid.is_empty() {
        return Err(ClassifyError::EmptyGrid);
    }
    let scaled;
    let x = if cfg.scale_features {
        scaled = x.minmax_columns();
        &scaled
    } else {
        x
    };
    let (pos, neg) = x.class_counts();
    if pos == 0 || neg == 0 {
        return Err(SvmError::SingleClassInput.into());
    }
    let class_weights = cfg.class_weights.unwrap_or_else(|| balanced_class_weights(x.labels()));
    let assignment = stratified_folds(x.labels(), cfg.folds, seed)?;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for &c in &cfg.c_grid {
        for &g in &cfg.gamma_grid {
            pairs.push((c, g));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs.dedup();
    let mut gammas: Vec<f64> = cfg.gamma_grid.clone();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    for &g in &gammas {
        KernelSpec::Rbf { gamma: g }.validate()?;
    }
    let grams: Vec<Gram> = gammas.iter().map(|&g| Gram::new(x, KernelSpec::Rbf { gamma: g })).collect();
    let candidates: Vec<CandidateResult> = pairs
        .par_iter()
        .map(|&(c, gamma)| {
            let train = TrainConfig {
                c,
                class_weight_pos: class_weights.0,
                class_weight_neg: class_weights.1,
                kkt_tolerance: cfg.kkt_tolerance,
                max_passes: cfg.max_passes,
            };
            let gi = gammas.iter().position(|&g| g == gamma).expect("gamma present");
            let folds = fold_confusions(x, &grams[gi], &assignment, &train, KernelSpec::Rbf { gamma })?;
            let mean_accuracy = folds.iter().map(|f| ratio(f.tp + f.tn, f.total())).sum::<f64>() / folds.len() as f64;
            let pooled = metrics(Confusion::merged(&folds))?;
            Ok(CandidateResult {
                c,
                gamma,
                mean_accuracy,
                precision: pooled.precision,
                recall: pooled.recall,
                f_score: pooled.f_score,
                fold_confusion: folds,
            })
        })
        .collect::<Result<_, ClassifyError>>()?;
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.mean_accuracy > candidates[best].mean_accuracy {
            best = i;
        }
    }
    Ok(GridSearchResult {
        candidates,
        best,
        class_weights,
        seed,
        assignment,
    })
}
