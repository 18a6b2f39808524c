use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{decision_from_gram, sign_label, train_subset_rows, Gram, KernelSpec, SvmError, SvmModel, TrainConfig};
use crate::features::FeatureMatrix;
use crate::rng::SeqRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold index of every row.
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified fold assignment. Each class is shuffled with its own stream
/// of `seed` and dealt round-robin; the second class starts where the
/// first one stopped so fold sizes differ by at most one overall.
///
/// If the smaller class has fewer than `k` samples, `k` drops to that count.
pub fn stratified_folds(labels: &[i8], k: usize, seed: u64) -> Result<FoldAssignment, SvmError> {
    if k < 2 {
        return Err(SvmError::TooFewFolds(k));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] <= 0).collect();
    let smallest = pos.len().min(neg.len());
    if smallest < 2 {
        return Err(SvmError::TooFewSamples(format!(
            "each class needs at least 2 samples for cross-validation (got {} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let k = if smallest < k {
        log::warn!("smallest class has {smallest} samples; lowering fold count from {k} to {smallest}");
        smallest
    } else {
        k
    };
    let mut fold_of = vec![0; labels.len()];
    let mut offset = 0;
    for (stream, mut members) in [(0u64, pos), (1u64, neg)] {
        let mut rng = SeqRng::new(seed, stream);
        rng.shuffle(&mut members);
        for (p, &row) in members.iter().enumerate() {
            fold_of[row] = (p + offset) % k;
        }
        offset = (offset + members.len()) % k;
    }
    Ok(FoldAssignment { k, fold_of })
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    /// Mean held-out hinge loss `max(0, 1 - y f(x))`, averaged over folds.
    pub mean_hinge_loss: f64,
    pub fold_models: Vec<SvmModel>,
    pub assignment: FoldAssignment,
}

/// Trains and tests on every fold of `assignment` using a shared Gram matrix.
pub fn cv_with_assignment(
    x: &FeatureMatrix,
    gram: &Gram,
    assignment: &FoldAssignment,
    cfg: &TrainConfig,
    kernel: KernelSpec,
) -> Result<CvResult, SvmError> {
    let per_fold: Vec<(SvmModel, f64, f64)> = (0..assignment.k)
        .into_par_iter()
        .map(|f| {
            let train = assignment.train_rows(f);
            let test = assignment.test_rows(f);
            let (model, sv_rows) = train_subset_rows(x, &train, gram, cfg, kernel)?;
            let mut correct = 0usize;
            let mut hinge = 0.0;
            for &t in &test {
                let f = decision_from_gram(&model, &sv_rows, gram, t);
                let y = x.labels()[t];
                if sign_label(f) == y {
                    correct += 1;
                }
                hinge += (1.0 - y as f64 * f).max(0.0);
            }
            let m = test.len().max(1) as f64;
            Ok((model, correct as f64 / m, hinge / m))
        })
        .collect::<Result<_, SvmError>>()?;
    let fold_accuracies: Vec<f64> = per_fold.iter().map(|p| p.1).collect();
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64;
    let mean_hinge_loss = per_fold.iter().map(|p| p.2).sum::<f64>() / per_fold.len() as f64;
    Ok(CvResult {
        mean_accuracy,
        fold_accuracies,
        mean_hinge_loss,
        fold_models: per_fold.into_iter().map(|p| p.0).collect(),
        assignment: assignment.clone(),
    })
}

pub fn k_fold_cv(x: &FeatureMatrix, k: usize, cfg: &TrainConfig, kernel: KernelSpec, seed: u64) -> Result<CvResult, SvmError> {
    cfg.validate()?;
    kernel.validate()?;
    let assignment = stratified_folds(x.labels(), k, seed)?;
    let gram = Gram::new(x, kernel);
    cv_with_assignment(x, &gram, &assignment, cfg, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeqRng;

    #[test]
    fn stratification_arithmetic() {
        let labels = [1, 1, 1, -1, -1, -1];
        let a = stratified_folds(&labels, 2, 9).unwrap();
        assert_eq!(a.k, 2);
        for class in [1i8, -1] {
            let mut sizes = [0usize; 2];
            for (i, &f) in a.fold_of.iter().enumerate() {
                if labels[i] == class {
                    sizes[f] += 1;
                }
            }
            sizes.sort();
            assert_eq!(sizes, [1, 2]);
        }
        assert_eq!(a.fold_sizes(), vec![3, 3]);
    }

    #[test]
    fn k_lowered_for_small_class() {
        let labels = [1, 1, 1, -1, -1, -1, -1, -1, -1, -1];
        let a = stratified_folds(&labels, 10, 1).unwrap();
        assert_eq!(a.k, 3);
        assert!(matches!(stratified_folds(&[1, -1, -1], 2, 0), Err(SvmError::TooFewSamples(_))));
        assert_eq!(stratified_folds(&labels, 1, 0), Err(SvmError::TooFewFolds(1)));
    }

    #[test]
    fn folds_are_seeded() {
        let labels: Vec<i8> = (0..40).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        assert_eq!(stratified_folds(&labels, 5, 3), stratified_folds(&labels, 5, 3));
        assert_ne!(stratified_folds(&labels, 5, 3), stratified_folds(&labels, 5, 4));
    }

    fn planted(n_per_class: usize, shift: f64, seed: u64) -> FeatureMatrix {
        let mut rng = SeqRng::new(seed, 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in [1i8, -1] {
            for _ in 0..n_per_class {
                let mut r: Vec<f64> = (0..5).map(|_| rng.next_f64()).collect();
                r[0] = 0.5 + class as f64 * shift + 0.05 * rng.next_gaussian();
                rows.push(r);
                labels.push(class);
            }
        }
        FeatureMatrix::from_rows(&rows, &labels).unwrap()
    }

    #[test]
    fn separable_planted_data_is_perfect() {
        let x = planted(63, 0.4, 5);
        let r = k_fold_cv(&x, 10, &TrainConfig::default(), KernelSpec::Linear, 11).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.fold_models.len(), 10);
    }

    #[test]
    fn shuffled_labels_near_chance() {
        // Permutation oracle: average over seeds of accuracy with labels
        // carrying no information.
        let x = planted(63, 0.0, 8);
        let mut total = 0.0;
        let seeds = 8;
        for s in 0..seeds {
            let mut labels = x.labels().to_vec();
            SeqRng::new(100 + s, 0).shuffle(&mut labels);
            let xs = x.with_labels(labels).unwrap();
            let r = k_fold_cv(&xs, 10, &TrainConfig::default(), KernelSpec::Linear, s).unwrap();
            assert!((0.0..=1.0).contains(&r.mean_accuracy));
            total += r.mean_accuracy;
        }
        let mean = total / seeds as f64;
        assert!((mean - 0.5).abs() <= 0.15, "mean accuracy {mean}");
    }

    #[test]
    fn small_k2_runs() {
        let x = FeatureMatrix::from_rows(
            &[vec![0.0], vec![0.1], vec![0.2], vec![0.8], vec![0.9], vec![1.0]],
            &[-1, -1, -1, 1, 1, 1],
        )
        .unwrap();
        let r = k_fold_cv(&x, 2, &TrainConfig::with_c(10.0), KernelSpec::Linear, 0).unwrap();
        assert_eq!(r.assignment.k, 2);
        assert_eq!(r.fold_accuracies.len(), 2);
    }
}
