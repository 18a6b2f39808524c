use rayon::prelude::*;

use crate::volume::{Volume4D, VolumeError};

/// FWHM = 2 sqrt(2 ln 2) sigma.
pub const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949;

fn kernel(fwhm_mm: f64, voxel_mm: f64) -> Vec<f64> {
    if fwhm_mm <= 0.0 {
        return vec![1.0];
    }
    let sigma = fwhm_mm / FWHM_TO_SIGMA / voxel_mm;
    let half = (3.0 * sigma).ceil() as isize;
    (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect()
}

/// Convolve one line in place; weights are renormalised where the kernel
/// runs off the grid.
fn smooth_line(line: &mut [f64], k: &[f64], scratch: &mut Vec<f64>) {
    if k.len() == 1 {
        return;
    }
    let half = (k.len() / 2) as isize;
    let n = line.len() as isize;
    scratch.clear();
    for i in 0..n {
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (j, &w) in k.iter().enumerate() {
            let p = i + j as isize - half;
            if p >= 0 && p < n {
                acc += w * line[p as usize];
                wsum += w;
            }
        }
        scratch.push(acc / wsum);
    }
    line.copy_from_slice(scratch);
}

fn smooth_frame(frame: &mut [f64], dims: [usize; 3], kernels: &[Vec<f64>; 3]) {
    let [nx, ny, nz] = dims;
    let mut line = Vec::new();
    let mut scratch = Vec::new();
    for axis in 0..3 {
        let (len, stride) = match axis {
            0 => (nx, 1),
            1 => (ny, nx),
            _ => (nz, nx * ny),
        };
        for start in 0..nx * ny * nz {
            let c = [start % nx, (start / nx) % ny, start / (nx * ny)];
            if c[axis] != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|i| frame[start + i * stride]));
            smooth_line(&mut line, &kernels[axis], &mut scratch);
            for (i, &v) in line.iter().enumerate() {
                frame[start + i * stride] = v;
            }
        }
    }
}

/// Separable Gaussian smoothing of every frame, kernel truncated at 3 sigma.
pub fn gaussian_smooth(vol: &Volume4D, fwhm_mm: [f64; 3]) -> Result<Volume4D, VolumeError> {
    let grid = *vol.grid();
    let kernels = [
        kernel(fwhm_mm[0], grid.voxel_size_mm[0]),
        kernel(fwhm_mm[1], grid.voxel_size_mm[1]),
        kernel(fwhm_mm[2], grid.voxel_size_mm[2]),
    ];
    let frames: Vec<Vec<f32>> = (0..vol.nt())
        .into_par_iter()
        .map(|t| {
            let mut f: Vec<f64> = vol.frame(t).iter().map(|&v| v as f64).collect();
            smooth_frame(&mut f, grid.dims, &kernels);
            f.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    Volume4D::new(grid, vol.nt(), vol.tr_seconds(), frames.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid3;

    #[test]
    fn constant_volume_unchanged() {
        let g = Grid3::isotropic([5, 4, 3], 3.0, [0.0; 3]);
        let v = Volume4D::new(g, 2, 2.0, vec![4.0; 120]).unwrap();
        let s = gaussian_smooth(&v, [6.0; 3]).unwrap();
        assert!(s.data().iter().all(|&x| (x - 4.0).abs() < 1e-5));
    }

    #[test]
    fn impulse_spreads_symmetrically_and_keeps_mass_inside() {
        let g = Grid3::isotropic([21, 21, 21], 2.0, [0.0; 3]);
        let mut data = vec![0.0f32; g.n_voxels()];
        let centre = g.index([10, 10, 10]);
        data[centre] = 1.0;
        let v = Volume4D::new(g, 1, 2.0, data).unwrap();
        let s = gaussian_smooth(&v, [4.0; 3]).unwrap();
        let total: f64 = s.data().iter().map(|&x| x as f64).sum();
        assert!((total - 1.0).abs() < 1e-5);
        let a = s.get(g.index([9, 10, 10]), 0);
        let b = s.get(g.index([11, 10, 10]), 0);
        let c = s.get(g.index([10, 11, 10]), 0);
        assert!((a - b).abs() < 1e-9 && (a - c).abs() < 1e-9);
        assert!(s.get(centre, 0) > a);
        // 1-D check of the centre weight against the continuous Gaussian.
        let k = kernel(4.0, 2.0);
        let sigma = 4.0 / FWHM_TO_SIGMA / 2.0;
        let sum: f64 = k.iter().sum();
        let centre_w = 1.0 / sum;
        let continuous = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        assert!((centre_w - continuous).abs() < 0.02);
    }

    #[test]
    fn zero_fwhm_is_identity() {
        let g = Grid3::isotropic([3, 3, 3], 3.0, [0.0; 3]);
        let data: Vec<f32> = (0..27).map(|i| i as f32).collect();
        let v = Volume4D::new(g, 1, 2.0, data.clone()).unwrap();
        assert_eq!(gaussian_smooth(&v, [0.0; 3]).unwrap().data(), &data[..]);
    }
}
