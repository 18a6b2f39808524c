use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::special::t_two_sided_p;
use super::{MapKind, StatMap, StatsError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (m, ss / (n - 1.0))
}

/// Welch's unequal-variance t-test; `t > 0` when `a` has the larger mean.
///
/// Two constant groups give `t = 0, p = 1` when their means agree and
/// `t = +-f64::MAX, p = 0` otherwise.
pub fn welch(a: &[f64], b: &[f64]) -> Result<WelchResult, StatsError> {
    if a.len() < 2 {
        return Err(StatsError::GroupTooSmall(a.len()));
    }
    if b.len() < 2 {
        return Err(StatsError::GroupTooSmall(b.len()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return Ok(if ma == mb {
            WelchResult {
                t: 0.0,
                df: f64::NAN,
                p: 1.0,
            }
        } else {
            WelchResult {
                t: if ma > mb { f64::MAX } else { -f64::MAX },
                df: f64::NAN,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(WelchResult {
        t,
        df,
        p: t_two_sided_p(t, df),
    })
}

fn check_group(maps: &[StatMap], reference: &StatMap) -> Result<(), StatsError> {
    for m in maps {
        if m.grid != reference.grid || m.mask != reference.mask {
            return Err(StatsError::MaskMismatch);
        }
    }
    Ok(())
}

/// Voxelwise Welch test of group `a` against group `b` on their shared mask.
pub fn two_sample_t(group_a: &[StatMap], group_b: &[StatMap]) -> Result<(StatMap, StatMap), StatsError> {
    if group_a.len() < 2 {
        return Err(StatsError::GroupTooSmall(group_a.len()));
    }
    if group_b.len() < 2 {
        return Err(StatsError::GroupTooSmall(group_b.len()));
    }
    let reference = &group_a[0];
    check_group(group_a, reference)?;
    check_group(group_b, reference)?;
    let n = reference.values.len();
    let results: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|v| {
            if !reference.mask[v] {
                return Ok((0.0, 1.0));
            }
            let a: Vec<f64> = group_a.iter().map(|m| m.values[v]).collect();
            let b: Vec<f64> = group_b.iter().map(|m| m.values[v]).collect();
            welch(&a, &b).map(|r| (r.t, r.p))
        })
        .collect::<Result<_, StatsError>>()?;
    let t = StatMap::new(
        reference.grid,
        MapKind::T,
        results.iter().map(|r| r.0).collect(),
        reference.mask.clone(),
    )?;
    let p = StatMap::new(
        reference.grid,
        MapKind::P,
        results.iter().map(|r| r.1).collect(),
        reference.mask.clone(),
    )?;
    Ok((t, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub rejected: Vec<bool>,
    /// Largest rejected p-value; `None` when nothing is rejected.
    pub p_threshold: Option<f64>,
}

impl FdrResult {
    pub fn n_rejected(&self) -> usize {
        self.rejected.iter().filter(|&&r| r).count()
    }
}

/// Benjamini-Hochberg step-up procedure at level `q`.
pub fn fdr_bh(p_values: &[f64], q: f64) -> FdrResult {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut cut = None;
    for (rank, &i) in order.iter().enumerate() {
        if p_values[i] <= (rank + 1) as f64 * q / m as f64 {
            cut = Some(p_values[i]);
        }
    }
    let rejected = match cut {
        Some(c) => p_values.iter().map(|&p| p <= c).collect(),
        None => vec![false; m],
    };
    FdrResult {
        rejected,
        p_threshold: cut,
    }
}
