use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{MapKind, StatMap, StatsError};
use crate::volume::{Series, Volume4D};

/// Frequency band in Hz, inclusive at both ends.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Band {
    pub lo_hz: f64,
    pub hi_hz: f64,
}

pub const ALFF_BAND: Band = Band { lo_hz: 0.01, hi_hz: 0.08 };
pub const PREPROCESS_BAND: Band = Band { lo_hz: 0.01, hi_hz: 0.1 };

fn fft(values: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Frequency of DFT bin `k` of an `n`-point transform, folded to `[0, fs/2]`.
fn bin_hz(k: usize, n: usize, dt: f64) -> f64 {
    k.min(n - k) as f64 / (n as f64 * dt)
}

/// Least-squares line removed from the series.
pub fn detrend(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 || values.iter().all(|&v| v == values[0]) {
        return vec![0.0; n];
    }
    let nf = n as f64;
    let tm = (nf - 1.0) / 2.0;
    let ym = values.iter().sum::<f64>() / nf;
    let (mut sty, mut stt) = (0.0, 0.0);
    for (i, &y) in values.iter().enumerate() {
        let dt = i as f64 - tm;
        sty += dt * (y - ym);
        stt += dt * dt;
    }
    let slope = sty / stt;
    values.iter().enumerate().map(|(i, &y)| y - ym - slope * (i as f64 - tm)).collect()
}

/// `|X_k|^2 / n` for all `n` bins, so the bins sum to `sum x^2`.
pub fn periodogram(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    fft(values).iter().map(|c| c.norm_sqr() / n).collect()
}

/// Ideal band-pass: bins with folded frequency outside `band` are zeroed.
/// With `lo > 0` this also removes the mean.
pub fn bandpass(s: &Series, band: Band) -> Result<Series, StatsError> {
    let n = s.len();
    if n < 8 {
        return Err(StatsError::TooShort { got: n, need: 8 });
    }
    let dt = s.sampling_interval_s;
    let nyquist = 0.5 / dt;
    if !(band.lo_hz >= 0.0 && band.lo_hz < band.hi_hz && band.hi_hz <= nyquist) {
        return Err(StatsError::BandOutOfRange {
            lo: band.lo_hz,
            hi: band.hi_hz,
            nyquist,
        });
    }
    let mut spec = fft(&s.values);
    for (k, c) in spec.iter_mut().enumerate() {
        let f = bin_hz(k, n, dt);
        if f < band.lo_hz || f > band.hi_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let values = spec.iter().map(|c| c.re / n as f64).collect();
    Ok(Series::new(values, dt)?)
}

/// Band-pass every voxel series of a volume.
pub fn bandpass_volume(vol: &Volume4D, band: Band) -> Result<Volume4D, StatsError> {
    let nvox = vol.grid().n_voxels();
    let nt = vol.nt();
    let filtered: Vec<Vec<f64>> = (0..nvox)
        .into_par_iter()
        .map(|v| bandpass(&Series::new(vol.series_at(v), vol.tr_seconds())?, band).map(|s| s.values))
        .collect::<Result<_, StatsError>>()?;
    let mut data = vec![0f32; nvox * nt];
    for (v, s) in filtered.iter().enumerate() {
        for (t, &x) in s.iter().enumerate() {
            data[v + nvox * t] = x as f32;
        }
    }
    Ok(Volume4D::new(*vol.grid(), nt, vol.tr_seconds(), data)?)
}

/// Mean of `sqrt(P_k)` over the one-sided bins inside `band`, after linear
/// detrending.
pub fn alff(s: &Series, band: Band) -> Result<f64, StatsError> {
    let n = s.len();
    if n < 16 {
        return Err(StatsError::TooShort { got: n, need: 16 });
    }
    let dt = s.sampling_interval_s;
    let p = periodogram(&detrend(&s.values));
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, pk) in p.iter().enumerate().take(n / 2 + 1) {
        let f = bin_hz(k, n, dt);
        if f >= band.lo_hz && f <= band.hi_hz {
            sum += pk.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(StatsError::BandEmpty {
            lo: band.lo_hz,
            hi: band.hi_hz,
            n,
            dt,
        });
    }
    Ok(sum / count as f64)
}

/// ALFF of every voxel in `mask` (all voxels when `None`).
pub fn alff_map(vol: &Volume4D, mask: Option<&[bool]>, band: Band) -> Result<StatMap, StatsError> {
    let nvox = vol.grid().n_voxels();
    let mask: Vec<bool> = match mask {
        Some(m) if m.len() == nvox => m.to_vec(),
        Some(_) => return Err(StatsError::MaskMismatch),
        None => vec![true; nvox],
    };
    let values: Vec<f64> = (0..nvox)
        .into_par_iter()
        .map(|v| {
            if mask[v] {
                alff(&Series::new(vol.series_at(v), vol.tr_seconds())?, band)
            } else {
                Ok(0.0)
            }
        })
        .collect::<Result<_, StatsError>>()?;
    StatMap::new(*vol.grid(), MapKind::Alff, values, mask)
}
