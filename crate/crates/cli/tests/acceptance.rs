//! Acceptance gate. Runs every criterion, prints one `[PASS]`/`[FAIL]` line
//! each and exits non-zero when any fails. Pass criterion numbers as
//! arguments to run a subset.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use eak_core::atlas::{build_atlas, fc_expand, fc_expand_series, reference_series, Candidate, FcExpansion, ReferenceSpec, SubRoiVoxels};
use eak_core::blocks::{pool_blocks, split_blocks, Condition};
use eak_core::classify::{atlas_features, grid_search_cv, FeatureMode, GridSearchConfig};
use eak_core::features::{FeatureId, FeatureMatrix};
use eak_core::rfe::{svm_rfe, EliminationSchedule};
use eak_core::rng::SeqRng;
use eak_core::stats::special::t_cdf;
use eak_core::stats::{
    alff, alff_map, bandpass, extract_clusters, fdr_bh, periodogram, two_sample_t, welch, Connectivity, StatMap, ALFF_BAND, PREPROCESS_BAND,
};
use eak_core::svm::{train_svm, KernelSpec, TrainConfig};
use eak_core::synth::{synth_rest_dataset, synth_task_dataset, PlantedAlff, SynthConfig};
use eak_core::volume::{Grid3, Series, Volume4D};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

// ---------------------------------------------------------------- criterion 1

fn kernel_eval(k: KernelSpec, u: &[f64], v: &[f64]) -> f64 {
    match k {
        KernelSpec::Linear => u.iter().zip(v).map(|(a, b)| a * b).sum(),
        KernelSpec::Rbf { gamma } => (-gamma * u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).exp(),
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn dual_value(q: &[Vec<f64>], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * q[i][j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// Maximum of the box- and equality-constrained dual by enumerating every
/// assignment of variables to {lower bound, upper bound, free} and solving
/// the stationarity system on the free set.
fn qp_oracle(q: &[Vec<f64>], y: &[f64], upper: &[f64]) -> f64 {
    let n = y.len();
    let mut best = f64::NEG_INFINITY;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut c = code;
        for s in state.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let mut alpha: Vec<f64> = (0..n).map(|i| if state[i] == 1 { upper[i] } else { 0.0 }).collect();
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        if free.is_empty() {
            if alpha.iter().zip(y).map(|(a, y)| a * y).sum::<f64>().abs() < 1e-9 {
                best = best.max(dual_value(q, &alpha));
            }
            continue;
        }
        let m = free.len();
        let mut a = vec![vec![0.0; m + 1]; m + 1];
        let mut b = vec![0.0; m + 1];
        for (r, &i) in free.iter().enumerate() {
            for (cc, &j) in free.iter().enumerate() {
                a[r][cc] = q[i][j];
            }
            a[r][m] = y[i];
            b[r] = 1.0 - (0..n).filter(|j| state[*j] != 2).map(|j| q[i][j] * alpha[j]).sum::<f64>();
            a[m][r] = y[i];
        }
        b[m] = -(0..n).filter(|j| state[*j] != 2).map(|j| y[j] * alpha[j]).sum::<f64>();
        let Some(sol) = solve_linear(a, b) else { continue };
        let mut feasible = true;
        for (r, &i) in free.iter().enumerate() {
            if sol[r] < -1e-9 || sol[r] > upper[i] + 1e-9 {
                feasible = false;
            }
            alpha[i] = sol[r];
        }
        if feasible {
            best = best.max(dual_value(q, &alpha));
        }
    }
    best
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for d in 0..30u64 {
        let mut rng = SeqRng::new(0xC1 + d, 0);
        let n = 3 + (d as usize % 6);
        let dims = 1 + (d as usize % 3);
        let labels: Vec<i8> = (0..n).map(|i| if i < n / 2 + (d as usize % 2) { 1 } else { -1 }).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..dims).map(|_| rng.next_gaussian() + 0.6 * l as f64).collect())
            .collect();
        let kernel = if d % 2 == 0 {
            KernelSpec::Linear
        } else {
            KernelSpec::Rbf {
                gamma: 0.5 * (1 + d % 4) as f64,
            }
        };
        let cfg = TrainConfig {
            c: [0.1, 1.0, 10.0][d as usize % 3],
            class_weight_pos: if d % 5 == 0 { 2.0 } else { 1.0 },
            class_weight_neg: if d % 7 == 0 { 0.5 } else { 1.0 },
            kkt_tolerance: 1e-10,
            max_passes: 100_000,
        };
        let x = FeatureMatrix::from_rows(&rows, &labels).map_err(|e| e.to_string())?;
        let model = train_svm(&x, &cfg, kernel).map_err(|e| e.to_string())?;
        ensure!(model.converged, "dataset {d}: solver did not converge");

        let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let q: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| y[i] * y[j] * kernel_eval(kernel, &rows[i], &rows[j])).collect())
            .collect();
        let upper: Vec<f64> = labels
            .iter()
            .map(|&l| cfg.c * if l > 0 { cfg.class_weight_pos } else { cfg.class_weight_neg })
            .collect();
        let want = qp_oracle(&q, &y, &upper);

        // Objective recomputed from the returned support vectors.
        let sv = &model.support_vectors;
        let mut quad = 0.0;
        for i in 0..sv.len() {
            for j in 0..sv.len() {
                quad +=
                    model.alphas[i] * model.alphas[j] * (model.labels[i] * model.labels[j]) as f64 * kernel_eval(kernel, &sv[i], &sv[j]);
            }
        }
        let from_svs = model.alphas.iter().sum::<f64>() - 0.5 * quad;
        // The model reports the minimised form, the negated maximum.
        for got in [from_svs, -model.dual_objective()] {
            let e = rel_err(got, want);
            worst = worst.max(e);
            ensure!(
                e <= 1e-6,
                "dataset {d} (n={n}, d={dims}, {kernel:?}): objective {got} vs oracle {want}"
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("30 datasets, worst relative error {worst:.2e}, {secs:.2} s"))
}

// ---------------------------------------------------------------- criterion 2

fn planted_rfe_matrix(seed: u64) -> (FeatureMatrix, Vec<usize>) {
    let mut rng = SeqRng::new(seed, 0xC2);
    let mut order: Vec<usize> = (0..246).collect();
    rng.shuffle(&mut order);
    let planted: Vec<usize> = order[..5].to_vec();
    let labels: Vec<i8> = (0..126).map(|i| if i < 63 { 1 } else { -1 }).collect();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            (0..246)
                .map(|j| {
                    let shift = if planted.contains(&j) { 0.15 * l as f64 } else { 0.0 };
                    0.5 + 0.1 * rng.next_gaussian() + shift
                })
                .collect()
        })
        .collect();
    (FeatureMatrix::from_rows(&rows, &labels).unwrap(), planted)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut hits = Vec::new();
    for seed in 0..5u64 {
        let (x, planted) = planted_rfe_matrix(seed);
        let trace = svm_rfe(&x, 10, &TrainConfig::default(), EliminationSchedule::One, seed).map_err(|e| e.to_string())?;
        let found = trace
            .best_subset
            .iter()
            .filter(|f| matches!(f, FeatureId::Unit(j) if planted.contains(j)))
            .count();
        hits.push((found, trace.best_subset.len()));
    }
    let secs = start.elapsed().as_secs_f64();
    let good = hits.iter().filter(|(f, _)| *f >= 4).count();
    let detail = format!("planted/selected per seed {hits:?}, {secs:.1} s");
    ensure!(good >= 4, "only {good}/5 seeds recovered >= 4 planted features; {detail}");
    ensure!(secs < 300.0, "too slow: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- CLI helpers

fn eak(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_eak"))
        .current_dir(dir)
        .args(args)
        .arg("--quiet")
        .output()
        .map_err(|e| format!("cannot run eak: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "eak {} failed ({}): {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    eak(dir, &["synth-task", "--out", "task", "--seed", "3"])?;
    eak(dir, &["features", "--data", "task", "--out", "feat"])?;
    let mut shapes = Vec::new();
    for cond in ["positive", "negative"] {
        let x = FeatureMatrix::load_cache(&dir.join(format!("feat/features_{cond}.json"))).map_err(|e| e.to_string())?;
        ensure!(x.n_rows() == 126 && x.n_cols() == 246, "{cond}: {}x{}", x.n_rows(), x.n_cols());
        ensure!(x.class_counts() == (63, 63), "{cond}: class counts {:?}", x.class_counts());
        ensure!(
            x.labels()[..63].iter().all(|&l| l == 1) && x.labels()[63..].iter().all(|&l| l == -1),
            "{cond}: stimulus rows must precede recovery rows"
        );
        let regions: Vec<u32> = x
            .feature_ids()
            .iter()
            .filter_map(|f| match f {
                FeatureId::Region(l) => Some(*l),
                _ => None,
            })
            .collect();
        ensure!(
            regions == (1..=246).collect::<Vec<u32>>(),
            "{cond}: columns are not regions 1..=246"
        );
        shapes.push(format!("{cond} {}x{} (63/63)", x.n_rows(), x.n_cols()));
    }
    Ok(shapes.join(", "))
}

// ---------------------------------------------------------------- criterion 4

/// `other` orthogonalised against centred `base` and mixed so that the
/// sample correlation with `base` is `rho`.
fn with_correlation(base: &[f64], other: &[f64], rho: f64) -> Vec<f64> {
    let n = base.len() as f64;
    let centre = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|x| x - m).collect::<Vec<f64>>()
    };
    let b = centre(base);
    let o = centre(other);
    let bb: f64 = b.iter().map(|v| v * v).sum();
    let ob: f64 = o.iter().zip(&b).map(|(x, y)| x * y).sum();
    let perp: Vec<f64> = o.iter().zip(&b).map(|(x, y)| x - ob / bb * y).collect();
    let pp: f64 = perp.iter().map(|v| v * v).sum();
    let (ub, up) = (bb.sqrt(), pp.sqrt());
    b.iter()
        .zip(&perp)
        .map(|(x, p)| rho * x / ub + (1.0 - rho * rho).sqrt() * p / up)
        .collect()
}

fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn criterion_4() -> Outcome {
    // 11 strips of 100 voxels: one sub-ROI voxel in region 1, 1000 candidates
    // in regions 2..=11.
    let cfg = SynthConfig {
        dims: [10, 10, 11],
        n_regions: 11,
        planted_active_regions: Vec::new(),
        planted_alff_regions: Vec::new(),
        ..SynthConfig::default()
    };
    let sub = vec![SubRoiVoxels {
        parent_label: 1,
        voxels: vec![0],
    }];
    let dup_voxel = 555usize;
    let mut ref_len = 0;
    for seed in 0..5u64 {
        let d = synth_task_dataset(&cfg, 4000 + seed).map_err(|e| e.to_string())?;
        let per_subject: Vec<_> = d
            .subjects
            .iter()
            .map(|(id, v)| split_blocks(v.nt(), v.tr_seconds(), &d.design, id).unwrap())
            .collect();
        let blocks = pool_blocks(&per_subject, Condition::Positive);
        let volumes: BTreeMap<String, Volume4D> = d.subjects.iter().cloned().collect();
        let reference =
            reference_series(&blocks, ReferenceSpec::default(), |id| Ok(volumes[id].series_at(0))).map_err(|e| e.to_string())?;
        ref_len = reference.len();
        ensure!(ref_len == 315, "reference series has {ref_len} samples");

        let noise = fc_expand(&volumes, &d.parcellation, &blocks, &sub, ReferenceSpec::default(), 0.95).map_err(|e| e.to_string())?;
        ensure!(noise.candidates == 1000, "{} candidates", noise.candidates);
        ensure!(
            noise.retained.is_empty(),
            "seed {seed}: {} noise voxels retained",
            noise.retained.len()
        );

        // Same field with one candidate replaced by a copy of the sub-ROI voxel.
        let copied: BTreeMap<String, Volume4D> = volumes
            .iter()
            .map(|(id, v)| {
                let nvox = v.grid().n_voxels();
                let mut data = v.data().to_vec();
                for t in 0..v.nt() {
                    data[dup_voxel + nvox * t] = data[nvox * t];
                }
                (id.clone(), Volume4D::new(*v.grid(), v.nt(), v.tr_seconds(), data).unwrap())
            })
            .collect();
        let dup = fc_expand(&copied, &d.parcellation, &blocks, &sub, ReferenceSpec::default(), 0.95).map_err(|e| e.to_string())?;
        let kept: Vec<usize> = dup.retained.iter().map(|e| e.voxel).collect();
        ensure!(kept == vec![dup_voxel], "seed {seed}: retained {kept:?}, want only the duplicate");
    }

    // Series-level: duplicates kept, r exactly at the threshold dropped.
    let mut rng = SeqRng::new(44, 0);
    let mut boundary_checked = 0;
    for _ in 0..20 {
        let base: Vec<f64> = (0..315).map(|_| rng.next_gaussian()).collect();
        let other: Vec<f64> = (0..315).map(|_| rng.next_gaussian()).collect();
        let at = with_correlation(&base, &other, 0.95);
        let r = pearson_oracle(&at, &base);
        ensure!((r - 0.95).abs() < 1e-12, "constructed r = {r}");
        let cand = |voxel: usize, series: Vec<f64>| Candidate {
            voxel,
            coord: [voxel, 0, 0],
            parent_label: 2,
            series,
        };
        let refs = vec![base.clone()];
        let got = fc_expand_series(&[cand(0, base.clone()), cand(1, at.clone())], &refs, 0.95).map_err(|e| e.to_string())?;
        let kept: Vec<usize> = got.retained.iter().map(|e| e.voxel).collect();
        ensure!(kept.contains(&0), "exact duplicate not retained");
        // Threshold set to the candidate's own computed r.
        let own_r = eak_core::atlas::pearson(&at, &base).ok_or("flat series")?;
        let at_own = fc_expand_series(&[cand(1, at)], &refs, own_r).map_err(|e| e.to_string())?;
        ensure!(at_own.retained.is_empty(), "voxel with r == threshold ({own_r}) retained");
        boundary_checked += 1;
    }
    Ok(format!(
        "5 seeds x 1000 noise voxels (series length {ref_len}): 0 retained; duplicate retained every seed; {boundary_checked} boundary cases rejected"
    ))
}

// ---------------------------------------------------------------- criterion 5

fn sinusoid(n: usize, dt: f64, hz: f64, amp: f64, phase: f64) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * hz * i as f64 * dt + phase).sin()).collect()
}

fn criterion_5() -> Outcome {
    let (n, dt) = (240usize, 2.0);
    let df = 1.0 / (n as f64 * dt);
    let mut worst_ratio: f64 = 0.0;
    // In-band bins 0.01..0.08 Hz are k = 5..=38 at this resolution.
    for (k, phase) in [(5usize, 0.0), (12, 0.4), (24, 1.3), (38, 2.9)] {
        let hz = k as f64 * df;
        let one = alff(&Series::new(sinusoid(n, dt, hz, 1.5, phase), dt).unwrap(), ALFF_BAND).map_err(|e| e.to_string())?;
        let two = alff(&Series::new(sinusoid(n, dt, hz, 3.0, phase), dt).unwrap(), ALFF_BAND).map_err(|e| e.to_string())?;
        let e = rel_err(two, 2.0 * one);
        worst_ratio = worst_ratio.max(e);
        ensure!(e <= 1e-9, "bin {k}: ALFF {one} -> {two} after doubling");
    }

    let mut worst_residual: f64 = 0.0;
    for (hz, phase) in [(0.2, 0.0), (0.15, 0.7), (96.0 * df + 0.0, 2.0)] {
        let x = sinusoid(n, dt, hz, 2.0, phase);
        let y = bandpass(&Series::new(x.clone(), dt).unwrap(), PREPROCESS_BAND).map_err(|e| e.to_string())?;
        let p_in: f64 = x.iter().map(|v| v * v).sum();
        let p_out: f64 = y.values.iter().map(|v| v * v).sum();
        worst_residual = worst_residual.max(p_out / p_in);
        ensure!(p_out / p_in <= 1e-10, "{hz} Hz: residual power ratio {:.3e}", p_out / p_in);
    }

    let mut rng = SeqRng::new(5, 5);
    let mut worst_parseval: f64 = 0.0;
    for len in [16usize, 97, 240, 315, 1000] {
        let x: Vec<f64> = (0..len).map(|_| 3.0 + rng.next_gaussian()).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spectral: f64 = periodogram(&x).iter().sum();
        let e = rel_err(spectral, energy);
        worst_parseval = worst_parseval.max(e);
        ensure!(e <= 1e-6, "n={len}: periodogram sum {spectral} vs energy {energy}");
    }
    Ok(format!(
        "doubling error {worst_ratio:.1e}, out-of-band residual {worst_residual:.1e}, Parseval error {worst_parseval:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 6

/// (t, df, P(T <= t)) evaluated with 40-digit arbitrary-precision arithmetic.
const T_CDF_ORACLE: [(f64, f64, f64); 50] = [
    (-6.0, 1.5, 0.02510122838816239173512039),
    (-2.75, 1.5, 0.07498040062806385335443953),
    (-1.5, 1.5, 0.1549973706113998514730344),
    (-0.8, 1.5, 0.2653321670007213686860856),
    (-0.1, 1.5, 0.4660207267434813114074314),
    (0.25, 1.5, 0.5837451579983958951556054),
    (1.1, 1.5, 0.7915501876926833505461541),
    (2.2, 1.5, 0.9002028109551107186188191),
    (3.3, 1.5, 0.9413261782388389235349714),
    (9.0, 1.5, 0.9861706223972345081739531),
    (-6.0, 3.0, 0.004636357446142333702056206),
    (-2.75, 3.0, 0.0353711241430203857241752),
    (-1.5, 3.0, 0.1152919326224115261409086),
    (-0.8, 3.0, 0.2410994758755411234718277),
    (-0.1, 3.0, 0.4633261744004029144544695),
    (0.25, 3.0, 0.5906353887855852070647242),
    (1.1, 3.0, 0.8241584025326745115827995),
    (2.2, 3.0, 0.9424140240117646339997529),
    (3.3, 3.0, 0.9771332746820006533701888),
    (9.0, 3.0, 0.9985520939190679265441678),
    (-6.0, 7.25, 0.0002370566478582981600644606),
    (-2.75, 7.25, 0.01377017041691103766838737),
    (-1.5, 7.25, 0.08792135806219984888187219),
    (-0.8, 7.25, 0.2245628691036603091349946),
    (-0.1, 7.25, 0.4615268137834759880280919),
    (0.25, 7.25, 0.5952380308115219762509264),
    (1.1, 7.25, 0.8467448904928070142494533),
    (2.2, 7.25, 0.968789890029686899071214),
    (3.3, 7.25, 0.9937606966601542173521614),
    (9.0, 7.25, 0.9999827887952365721129784),
    (-6.0, 30.0, 0.000000697138438360237135096476),
    (-2.75, 30.0, 0.004999947263465591678704648),
    (-1.5, 30.0, 0.07203296456432300065128832),
    (-0.8, 30.0, 0.2150002048921038464370154),
    (-0.1, 30.0, 0.4605048058951355780399225),
    (0.25, 30.0, 0.5978542954597124503040204),
    (1.1, 30.0, 0.8599595409561800803668105),
    (2.2, 30.0, 0.9821757800015821051209431),
    (3.3, 30.0, 0.998750346280100974963913),
    (9.0, 30.0, 0.9999999997492584041926061),
    (-6.0, 120.0, 1.07415190965302037701696e-8),
    (-2.75, 120.0, 0.003441163057721760109611457),
    (-1.5, 120.0, 0.06812041761535993235846226),
    (-0.8, 120.0, 0.212645829563730835630941),
    (-0.1, 120.0, 0.4602555996578349211947996),
    (0.25, 120.0, 0.5984925848832871249832643),
    (1.1, 120.0, 0.863233034836305548223495),
    (2.2, 120.0, 0.9851388010873816877056319),
    (3.3, 120.0, 0.9993633500061742406415047),
    (9.0, 120.0, 0.9999999999999979499882401),
];

/// Step-up rule evaluated literally: reject the `k` smallest p-values for
/// the largest `k` with `p_(k) <= k q / m`.
fn bh_brute_force(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut k_max = 0;
    for k in 1..=m {
        if sorted[k - 1] <= k as f64 * q / m as f64 {
            k_max = k;
        }
    }
    if k_max == 0 {
        return vec![false; m];
    }
    let cut = sorted[k_max - 1];
    p.iter().map(|&v| v <= cut).collect()
}

fn criterion_6() -> Outcome {
    // a = [1,2,3]: mean 2, var 1.  b = [2,4,6]: mean 4, var 4.
    // t = (2-4)/sqrt(1/3 + 4/3) = -2/sqrt(5/3)
    // df = (5/3)^2 / ((1/3)^2/2 + (4/3)^2/2) = 50/17
    let w = welch(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).map_err(|e| e.to_string())?;
    let t_hand = -2.0 / (5.0f64 / 3.0).sqrt();
    let df_hand = 50.0 / 17.0;
    let p_hand = 0.2208808404940959267312664;
    ensure!(rel_err(w.t, t_hand) <= 1e-9, "t {} vs {t_hand}", w.t);
    ensure!(rel_err(w.df, df_hand) <= 1e-9, "df {} vs {df_hand}", w.df);
    ensure!(rel_err(w.p, p_hand) <= 1e-9, "p {} vs {p_hand}", w.p);

    let mut rng = SeqRng::new(66, 0);
    let mut total_rejected = 0;
    for case in 0..100 {
        let m = 1 + rng.below(200);
        let q = [0.01, 0.05, 0.1, 0.2][case % 4];
        let p: Vec<f64> = (0..m)
            .map(|_| {
                let u = rng.next_f64();
                // A share of strong signals, plus occasional exact ties.
                match rng.below(10) {
                    0 => u * 1e-4,
                    1 => 0.005,
                    _ => u,
                }
            })
            .collect();
        let got = fdr_bh(&p, q);
        let want = bh_brute_force(&p, q);
        ensure!(got.rejected == want, "case {case} (m={m}, q={q}) differs from brute force");
        total_rejected += want.iter().filter(|&&r| r).count();
    }

    let mut worst: f64 = 0.0;
    for &(t, df, want) in T_CDF_ORACLE.iter() {
        let got = t_cdf(t, df);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-10, "t_cdf({t}, {df}) = {got}, oracle {want}");
    }
    Ok(format!(
        "Welch t={:.12} df={:.12} p={:.12}; BH identical on 100 vectors ({total_rejected} rejections); t-CDF max abs error {worst:.1e}",
        w.t, w.df, w.p
    ))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let grid = Grid3::isotropic([12, 12, 12], 3.0, [-18.0, -18.0, -18.0]);
    let n = grid.n_voxels();
    let t_map = |values: Vec<f64>| StatMap::new(grid, eak_core::stats::MapKind::T, values, vec![true; n]).unwrap();

    // Three isolated clusters of 1, 2 and 3 voxels.
    let mut mask = vec![false; n];
    for c in [[1, 1, 1], [5, 5, 5], [5, 6, 5], [9, 2, 8], [9, 3, 8], [9, 4, 8]] {
        mask[grid.index(c)] = true;
    }
    let report = extract_clusters(&mask, &t_map(vec![1.0; n]), None, Connectivity::TwentySix);
    let mut rows: Vec<(usize, f64)> = report.clusters.iter().map(|c| (c.n_voxels, c.size_mm3)).collect();
    rows.sort_by_key(|r| r.0);
    ensure!(rows == vec![(1, 27.0), (2, 54.0), (3, 81.0)], "size rows {rows:?}");

    let mut rng = SeqRng::new(77, 0);
    let offsets_within = |a: [usize; 3], b: [usize; 3], conn: Connectivity| {
        let d: Vec<usize> = (0..3).map(|i| a[i].abs_diff(b[i])).collect();
        if d.iter().any(|&v| v > 1) {
            return false;
        }
        let moved = d.iter().filter(|&&v| v == 1).count();
        let max_moved = match conn {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        moved >= 1 && moved <= max_moved
    };
    for trial in 0..100 {
        let density = 0.05 + 0.4 * rng.next_f64();
        let mask: Vec<bool> = (0..n).map(|_| rng.next_f64() < density).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.next_gaussian() * 3.0).collect();
        let tm = t_map(values);
        let mut counts = Vec::new();
        let mut labelings = Vec::new();
        for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            let r = extract_clusters(&mask, &tm, None, conn);
            let mut owner = vec![usize::MAX; n];
            for (ci, c) in r.clusters.iter().enumerate() {
                ensure!(c.size_mm3 == c.n_voxels as f64 * 27.0, "trial {trial}: size_mm3 {}", c.size_mm3);
                ensure!(c.voxels.len() == c.n_voxels, "trial {trial}: voxel count mismatch");
                for &v in &c.voxels {
                    let i = grid.index(v);
                    ensure!(mask[i], "trial {trial}: voxel {v:?} outside the mask");
                    ensure!(owner[i] == usize::MAX, "trial {trial}: voxel {v:?} in two clusters");
                    owner[i] = ci;
                }
            }
            ensure!(
                (0..n).all(|i| mask[i] == (owner[i] != usize::MAX)),
                "trial {trial}: clusters do not cover the mask"
            );
            // No two neighbouring mask voxels may sit in different clusters.
            for i in (0..n).filter(|&i| mask[i]) {
                for j in (i + 1..n).filter(|&j| mask[j]) {
                    if owner[i] != owner[j] && offsets_within(grid.coord(i), grid.coord(j), conn) {
                        return Err(format!("trial {trial}: adjacent voxels split under {conn:?}"));
                    }
                }
            }
            counts.push(r.clusters.len());
            labelings.push(owner);
        }
        ensure!(
            counts[0] >= counts[1] && counts[1] >= counts[2],
            "trial {trial}: cluster counts {counts:?}"
        );
        // Coarser connectivity only merges clusters of the finer one.
        for w in labelings.windows(2) {
            let mut map: BTreeMap<usize, usize> = BTreeMap::new();
            for i in (0..n).filter(|&i| mask[i]) {
                let coarse = *map.entry(w[0][i]).or_insert(w[1][i]);
                ensure!(coarse == w[1][i], "trial {trial}: finer cluster split by coarser connectivity");
            }
        }
    }
    Ok("1/2/3-voxel clusters = 27/54/81 mm3; partition and 6 <= 18 <= 26 nesting hold on 100 random masks".into())
}

// ---------------------------------------------------------------- criterion 8

struct GroupTest {
    t: StatMap,
    rejected: Vec<bool>,
}

fn rest_group_test(cfg: &SynthConfig, seed: u64, q: f64) -> Result<(GroupTest, eak_core::synth::RestDataset), String> {
    let d = synth_rest_dataset(cfg, seed).map_err(|e| e.to_string())?;
    let mask: Vec<bool> = d.parcellation.labels().iter().map(|&l| l != 0).collect();
    let maps = |g: &[(String, Volume4D)]| -> Result<Vec<StatMap>, String> {
        g.iter()
            .map(|(_, v)| alff_map(v, Some(&mask), ALFF_BAND).map_err(|e| e.to_string()))
            .collect()
    };
    let (t, p) = two_sample_t(&maps(&d.group_a)?, &maps(&d.group_b)?).map_err(|e| e.to_string())?;
    let in_mask: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let fdr = fdr_bh(&in_mask.iter().map(|&i| p.values[i]).collect::<Vec<_>>(), q);
    let mut rejected = vec![false; mask.len()];
    for (k, &i) in in_mask.iter().enumerate() {
        rejected[i] = fdr.rejected[k];
    }
    Ok((GroupTest { t, rejected }, d))
}

fn criterion_8() -> Outcome {
    let null_cfg = SynthConfig {
        planted_alff_regions: vec![PlantedAlff {
            label: 100,
            effect: 0.0,
            freq_hz: 0.05,
        }],
        ..SynthConfig::default()
    };
    let mut null_rates = Vec::new();
    for seed in 0..5u64 {
        let (g, d) = rest_group_test(&null_cfg, 800 + seed, 0.01)?;
        ensure!(
            d.group_a.len() == 46 && d.group_b.len() == 20,
            "groups {}/{}",
            d.group_a.len(),
            d.group_b.len()
        );
        let rate = g.rejected.iter().filter(|&&r| r).count() as f64 / g.rejected.len() as f64;
        null_rates.push(rate);
        ensure!(rate <= 0.03, "seed {seed}: null rejection rate {rate:.4}");
    }

    let cfg = SynthConfig::default();
    let planted = cfg.planted_alff_regions[0].label;
    let mut recovered = 0;
    let mut notes = Vec::new();
    for seed in 0..5u64 {
        let (g, d) = rest_group_test(&cfg, 900 + seed, 0.01)?;
        let direction = d
            .manifest
            .regions
            .iter()
            .find(|r| r.label == planted)
            .and_then(|r| r.direction)
            .ok_or("no planted direction")?;
        let report = extract_clusters(&g.rejected, &g.t, Some(&d.parcellation), Connectivity::TwentySix);
        let ok = report.clusters.first().is_some_and(|top| {
            let peak_label = d.parcellation.label_at(d.parcellation.grid().index(top.peak));
            peak_label == planted && top.region_labels.contains(&planted) && top.peak_intensity.signum() == direction as f64
        });
        if let Some(top) = report.clusters.first() {
            notes.push(format!("{}v t={:.1}", top.n_voxels, top.peak_intensity));
        }
        recovered += usize::from(ok);
    }
    ensure!(recovered >= 4, "planted region top cluster in {recovered}/5 seeds ({notes:?})");
    Ok(format!(
        "null rejection rates {:?}; planted region top with negative t in {recovered}/5 seeds ({})",
        null_rates.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
        notes.join(", ")
    ))
}

// ---------------------------------------------------------------- criterion 9

fn atlas_matrix(cfg: &SynthConfig, seed: u64) -> Result<FeatureMatrix, String> {
    let d = synth_rest_dataset(cfg, seed).map_err(|e| e.to_string())?;
    let subs: Vec<SubRoiVoxels> = (91..=110u32)
        .map(|l| SubRoiVoxels {
            parent_label: l,
            voxels: d.parcellation.voxels_of(l).unwrap(),
        })
        .collect();
    let none = FcExpansion {
        threshold: 0.95,
        retained: Vec::new(),
        degenerate: 0,
        candidates: 0,
    };
    let atlas = build_atlas("planted", &subs, &none, &d.parcellation, None).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (group, label) in [(&d.group_a, 1i8), (&d.group_b, -1i8)] {
        for (_, v) in group {
            rows.push(atlas_features(v, &atlas, FeatureMode::AlffPerUnit).map_err(|e| e.to_string())?);
            labels.push(label);
        }
    }
    FeatureMatrix::from_rows(&rows, &labels).map_err(|e| e.to_string())
}

fn criterion_9() -> Outcome {
    let c_grid = [0.25, 0.5, 1.0, 2.0, 4.0];
    let gamma_grid = [0.5, 1.0, 2.0, 4.0, 8.0, 15.0];
    let grid = GridSearchConfig::default();
    ensure!(
        grid.c_grid == c_grid && grid.gamma_grid == gamma_grid,
        "default grid {:?} x {:?}",
        grid.c_grid,
        grid.gamma_grid
    );

    let x = atlas_matrix(&SynthConfig::default(), 909)?;
    ensure!(x.class_counts() == (46, 20), "class counts {:?}", x.class_counts());
    let res = grid_search_cv(&x, &grid, 9).map_err(|e| e.to_string())?;
    ensure!(res.candidates.len() == 30, "{} candidates", res.candidates.len());
    let best = res.best();
    ensure!(best.mean_accuracy >= 0.9, "best CV accuracy {}", best.mean_accuracy);

    let mut shuffled = Vec::new();
    for seed in 0..20u64 {
        let mut labels = x.labels().to_vec();
        SeqRng::new(seed, 0x5F).shuffle(&mut labels);
        let xs = x.with_labels(labels).map_err(|e| e.to_string())?;
        shuffled.push(grid_search_cv(&xs, &grid, seed).map_err(|e| e.to_string())?.best().mean_accuracy);
    }
    let (lo, hi) = shuffled.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    ensure!(
        lo >= 0.35 && hi <= 0.75,
        "shuffled best accuracies span [{lo:.3}, {hi:.3}]: {shuffled:?}"
    );

    // Weak effect so that the classes overlap.
    let weak = SynthConfig {
        planted_alff_regions: vec![PlantedAlff {
            label: 100,
            effect: 0.3,
            freq_hz: 0.05,
        }],
        ..SynthConfig::default()
    };
    let xw = atlas_matrix(&weak, 919)?;
    let mut recalls = Vec::new();
    for w in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let cfg = GridSearchConfig {
            c_grid: vec![1.0],
            gamma_grid: vec![1.0],
            class_weights: Some((w, 1.0)),
            ..GridSearchConfig::default()
        };
        recalls.push((w, grid_search_cv(&xw, &cfg, 19).map_err(|e| e.to_string())?.best().recall));
    }
    ensure!(
        recalls.windows(2).all(|p| p[1].1 >= p[0].1),
        "recall decreases along the weight sweep: {recalls:?}"
    );
    Ok(format!(
        "best accuracy {:.3} at C={} gamma={}; shuffled best in [{lo:.3}, {hi:.3}] over 20 seeds; recall by weight {:?}",
        best.mean_accuracy,
        best.c,
        best.gamma,
        recalls.iter().map(|(w, r)| format!("{w}:{r:.3}")).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------- criterion 10

const SMALL_CONFIG: &str = r#"{
  "synth": {
    "dims": [8, 8, 6],
    "n_regions": 24,
    "n_subjects": 4,
    "n_group_a": 8,
    "n_group_b": 6,
    "rest_nt": 64,
    "planted_active_regions": [
      {"label": 3, "condition": "positive", "amplitude": 2.0},
      {"label": 8, "condition": "positive", "amplitude": 2.0},
      {"label": 16, "condition": "negative", "amplitude": 2.0}
    ],
    "planted_alff_regions": [{"label": 12, "effect": 1.0, "freq_hz": 0.0625}]
  }
}
"#;

fn pipeline(dir: &Path, threads: &str) -> Result<(), String> {
    std::fs::write(dir.join("config.json"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    let stages: Vec<Vec<&str>> = vec![
        vec!["synth-task", "--out", "task", "--seed", "7"],
        vec!["split", "--data", "task", "--out", "blocks.json"],
        vec!["features", "--data", "task", "--out", "feat"],
        vec!["features", "--data", "task", "--out", "feat_region", "--region", "3"],
        vec![
            "rfe",
            "--matrix",
            "feat/features_positive.json",
            "--out",
            "rfe_matrix",
            "--seed",
            "7",
            "--folds",
            "4",
        ],
        vec![
            "rfe",
            "--data",
            "task",
            "--condition",
            "positive",
            "--out",
            "sel",
            "--seed",
            "7",
            "--folds",
            "4",
            "--schedule",
            "fraction:0.2",
        ],
        vec![
            "fc-expand",
            "--data",
            "task",
            "--selection",
            "sel/selection.json",
            "--out",
            "expansion.json",
            "--threshold",
            "0.3",
        ],
        vec![
            "atlas-build",
            "--data",
            "task",
            "--selection",
            "sel/selection.json",
            "--expansion",
            "expansion.json",
            "--name",
            "PEA",
            "--out",
            "pea.json",
        ],
        vec!["synth-rest", "--out", "rest", "--seed", "7"],
        vec!["alff", "--data", "rest", "--atlas", "pea.json", "--out", "maps_atlas"],
        vec!["alff", "--data", "rest", "--out", "maps", "--fwhm", "6"],
        vec![
            "group-stats",
            "--maps",
            "maps",
            "--group-a",
            "a-",
            "--group-b",
            "b-",
            "--parcellation-dir",
            "rest",
            "--out",
            "stats",
            "--q",
            "0.05",
        ],
        vec![
            "classify",
            "--data",
            "rest",
            "--atlas",
            "pea.json",
            "--group-a",
            "a-",
            "--group-b",
            "b-",
            "--out",
            "cls",
            "--seed",
            "7",
            "--folds",
            "3",
        ],
        vec![
            "report",
            "--atlas",
            "pea.json",
            "--clusters",
            "stats/clusters.json",
            "--grid",
            "cls/grid_PEA.json",
            "--selection",
            "sel/selection.json",
            "--out",
            "report.md",
        ],
    ];
    for stage in stages {
        let mut args = vec!["--threads", threads, "--config", "config.json"];
        args.extend(stage);
        eak(dir, &args)?;
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let one = tempfile::tempdir().map_err(|e| e.to_string())?;
    let many = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(one.path(), "1")?;
    pipeline(many.path(), "8")?;
    let a = files_under(one.path());
    let b = files_under(many.path());
    ensure!(a == b, "file sets differ: {a:?} vs {b:?}");
    let mut bytes = 0;
    for rel in &a {
        let x = std::fs::read(one.path().join(rel)).unwrap();
        let y = std::fs::read(many.path().join(rel)).unwrap();
        ensure!(x == y, "{} differs between --threads 1 and --threads 8", rel.display());
        bytes += x.len();
    }
    ensure!(a.iter().any(|p| p.ends_with("report.md")), "pipeline produced no report");
    Ok(format!("14 stages, {} files ({bytes} bytes) byte-identical", a.len()))
}

// ----------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "SVM dual matches brute-force QP oracle", criterion_1),
        (2, "RFE recovers planted features", criterion_2),
        (3, "feature stage emits two 126x246 matrices", criterion_3),
        (4, "FC expansion false-positive control", criterion_4),
        (5, "ALFF and band-pass analytics", criterion_5),
        (6, "Welch, BH and t-CDF oracles", criterion_6),
        (7, "cluster sizes, partition and connectivity", criterion_7),
        (8, "null calibration and planted recovery", criterion_8),
        (9, "classification grid search end to end", criterion_9),
        (10, "thread-count determinism of every stage", criterion_10),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] criterion {n}: {name} ({secs:.1} s) - {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {n}: {name} ({secs:.1} s) - {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
