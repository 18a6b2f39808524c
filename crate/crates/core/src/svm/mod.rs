//! Binary soft-margin SVM trained on the dual, with per-class costs.
//!
//! Labels are +1 / -1. The positive class has box `C * class_weight_pos`,
//! the negative class `C * class_weight_neg`. Prediction is the sign of the
//! decision value with `sign(0) = +1`.

mod cv;
mod smo;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureMatrix;

pub use cv::{cv_with_assignment, k_fold_cv, stratified_folds, CvResult, FoldAssignment};

#[derive(Debug, Error, PartialEq)]
pub enum SvmError {
    #[error("training data must contain both classes")]
    SingleClassInput,
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("explicit weights need a linear kernel")]
    NonLinearKernel,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("solver stopped after {iterations} iterations without meeting the KKT tolerance")]
    NoConvergence { iterations: usize },
    #[error("cross-validation needs at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    /// `K(u, v) = exp(-gamma * |u - v|^2)`
    Rbf {
        gamma: f64,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), SvmError> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Rbf { gamma } if gamma.is_finite() && gamma > 0.0 => Ok(()),
            KernelSpec::Rbf { gamma } => Err(SvmError::InvalidConfig(format!("rbf gamma must be > 0, got {gamma}"))),
        }
    }

    #[inline]
    pub fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => u.iter().zip(v).map(|(a, b)| a * b).sum(),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub c: f64,
    pub class_weight_pos: f64,
    pub class_weight_neg: f64,
    /// Stop when the maximal KKT violation drops below this.
    pub kkt_tolerance: f64,
    /// Iteration budget is `max_passes * n_samples` pair updates.
    pub max_passes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            class_weight_pos: 1.0,
            class_weight_neg: 1.0,
            kkt_tolerance: 1e-3,
            max_passes: 1000,
        }
    }
}

impl TrainConfig {
    pub fn with_c(c: f64) -> Self {
        Self { c, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SvmError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.c) && pos(self.class_weight_pos) && pos(self.class_weight_neg) && pos(self.kkt_tolerance)) {
            return Err(SvmError::InvalidConfig(format!("all parameters must be positive: {self:?}")));
        }
        if self.max_passes == 0 {
            return Err(SvmError::InvalidConfig("max_passes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn upper_bound(&self, label: i8) -> f64 {
        if label > 0 {
            self.c * self.class_weight_pos
        } else {
            self.c * self.class_weight_neg
        }
    }

    /// Short hash identifying the configuration in serialised models.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(json)[..8])
    }
}

/// Class weight for the positive class that equalises total class cost:
/// `n_neg / n_pos`, with the negative class at 1.
pub fn balanced_class_weights(labels: &[i8]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&l| l > 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return (1.0, 1.0);
    }
    (neg as f64 / pos as f64, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub n_features: usize,
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub labels: Vec<i8>,
    pub bias: f64,
    pub kernel: KernelSpec,
    pub config: TrainConfig,
    pub config_digest: String,
    pub iterations: usize,
    pub converged: bool,
}

impl SvmModel {
    pub fn decision_value(&self, x: &[f64]) -> Result<f64, SvmError> {
        if x.len() != self.n_features {
            return Err(SvmError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.decision_unchecked(x))
    }

    fn decision_unchecked(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((sv, &a), &y) in self.support_vectors.iter().zip(&self.alphas).zip(&self.labels) {
            acc += a * y as f64 * self.kernel.eval(sv, x);
        }
        acc + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> Result<i8, SvmError> {
        Ok(sign_label(self.decision_value(x)?))
    }

    /// `w = sum a_k y_k x_k`.
    pub fn linear_weights(&self) -> Result<Vec<f64>, SvmError> {
        if self.kernel != KernelSpec::Linear {
            return Err(SvmError::NonLinearKernel);
        }
        let mut w = vec![0.0; self.n_features];
        for ((sv, &a), &y) in self.support_vectors.iter().zip(&self.alphas).zip(&self.labels) {
            let coef = a * y as f64;
            for (wi, xi) in w.iter_mut().zip(sv) {
                *wi += coef * xi;
            }
        }
        Ok(w)
    }

    /// Value of the minimised dual objective
    /// `1/2 sum_h sum_k y_h y_k a_h a_k K(x_h, x_k) - sum_k a_k`.
    pub fn dual_objective(&self) -> f64 {
        let m = self.alphas.len();
        let mut quad = 0.0;
        for h in 0..m {
            for k in 0..m {
                quad += self.labels[h] as f64
                    * self.labels[k] as f64
                    * self.alphas[h]
                    * self.alphas[k]
                    * self.kernel.eval(&self.support_vectors[h], &self.support_vectors[k]);
            }
        }
        0.5 * quad - self.alphas.iter().sum::<f64>()
    }

    pub fn ensure_converged(&self) -> Result<&Self, SvmError> {
        if self.converged {
            Ok(self)
        } else {
            Err(SvmError::NoConvergence {
                iterations: self.iterations,
            })
        }
    }
}

#[inline]
pub fn sign_label(decision: f64) -> i8 {
    if decision >= 0.0 {
        1
    } else {
        -1
    }
}

/// Symmetric kernel matrix over all rows of a feature matrix.
#[derive(Debug, Clone)]
pub struct Gram {
    n: usize,
    values: Vec<f64>,
}

impl Gram {
    pub fn new(x: &FeatureMatrix, kernel: KernelSpec) -> Self {
        let n = x.n_rows();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| kernel.eval(x.row(i), x.row(j))).collect())
            .collect();
        Self { n, values: rows.concat() }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

fn check_training_rows(x: &FeatureMatrix, idx: &[usize]) -> Result<(), SvmError> {
    let pos = idx.iter().filter(|&&i| x.labels()[i] > 0).count();
    if pos == 0 || pos == idx.len() {
        return Err(SvmError::SingleClassInput);
    }
    Ok(())
}

/// Trains on the rows `idx` of `x`, reusing a precomputed Gram matrix.
pub fn train_subset(x: &FeatureMatrix, idx: &[usize], gram: &Gram, cfg: &TrainConfig, kernel: KernelSpec) -> Result<SvmModel, SvmError> {
    train_subset_rows(x, idx, gram, cfg, kernel).map(|(m, _)| m)
}

/// As [`train_subset`], also returning the row index of every support vector.
pub(crate) fn train_subset_rows(
    x: &FeatureMatrix,
    idx: &[usize],
    gram: &Gram,
    cfg: &TrainConfig,
    kernel: KernelSpec,
) -> Result<(SvmModel, Vec<usize>), SvmError> {
    cfg.validate()?;
    kernel.validate()?;
    check_training_rows(x, idx)?;
    let n = idx.len();
    let y: Vec<f64> = idx.iter().map(|&i| x.labels()[i] as f64).collect();
    let upper: Vec<f64> = idx.iter().map(|&i| cfg.upper_bound(x.labels()[i])).collect();
    let mut q = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            q[a * n + b] = y[a] * y[b] * gram.get(idx[a], idx[b]);
        }
    }
    let sol = smo::solve_dual(&q, &y, &upper, cfg.kkt_tolerance, cfg.max_passes.saturating_mul(n.max(1)));
    if !sol.converged {
        log::warn!(
            "SVM solver hit the iteration budget ({} updates) before reaching KKT tolerance {}",
            sol.iterations,
            cfg.kkt_tolerance
        );
    }
    let mut model = SvmModel {
        n_features: x.n_cols(),
        support_vectors: Vec::new(),
        alphas: Vec::new(),
        labels: Vec::new(),
        bias: sol.bias,
        kernel,
        config: *cfg,
        config_digest: cfg.digest(),
        iterations: sol.iterations,
        converged: sol.converged,
    };
    let mut rows = Vec::new();
    for (a, &i) in sol.alpha.iter().zip(idx) {
        if *a > 0.0 {
            model.support_vectors.push(x.row(i).to_vec());
            model.alphas.push(*a);
            model.labels.push(x.labels()[i]);
            rows.push(i);
        }
    }
    Ok((model, rows))
}

pub fn train_svm(x: &FeatureMatrix, cfg: &TrainConfig, kernel: KernelSpec) -> Result<SvmModel, SvmError> {
    kernel.validate()?;
    let gram = Gram::new(x, kernel);
    let idx: Vec<usize> = (0..x.n_rows()).collect();
    train_subset(x, &idx, &gram, cfg, kernel)
}

/// Decision value of row `t` computed through the Gram matrix; `sv_rows`
/// are the training rows of the model in the order of its support vectors.
pub(crate) fn decision_from_gram(model: &SvmModel, sv_rows: &[usize], gram: &Gram, t: usize) -> f64 {
    let mut acc = 0.0;
    for ((&r, &a), &y) in sv_rows.iter().zip(&model.alphas).zip(&model.labels) {
        acc += a * y as f64 * gram.get(r, t);
    }
    acc + model.bias
}
