//! The raw-json container: a UTF-8 JSON header plus a sibling file of
//! little-endian `f32` samples in storage order (x fastest, t slowest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::IoError;
use crate::volume::{Affine, Grid3, Volume4D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawJsonHeader {
    pub dims: [usize; 4],
    pub voxel_size_mm: [f64; 3],
    pub tr_seconds: f64,
    /// 16 reals, row-major.
    pub affine: Vec<f64>,
    /// Path of the payload, relative to the header's directory.
    pub data_file: String,
}

fn sibling(header: &Path, name: &str) -> PathBuf {
    header.parent().map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

pub fn read_f32_payload(path: &Path, expected: usize) -> Result<Vec<f32>, IoError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| IoError::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(IoError::DimensionMismatch(format!(
            "{} holds {} bytes, header implies {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    let mut out = vec![0f32; expected];
    LittleEndian::read_f32_into(&bytes, &mut out);
    Ok(out)
}

pub fn write_f32_payload(path: &Path, data: &[f32]) -> Result<(), IoError> {
    let mut bytes = vec![0u8; data.len() * 4];
    LittleEndian::write_f32_into(data, &mut bytes);
    let mut w = BufWriter::new(File::create(path).map_err(|e| IoError::io(path, e))?);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

pub fn read_raw_json(path: &Path) -> Result<Volume4D, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let header: RawJsonHeader = serde_json::from_str(&text).map_err(|e| IoError::json(path, e))?;
    let affine = Affine::from_row_major(&header.affine)
        .ok_or_else(|| IoError::CorruptHeader(format!("affine has {} entries, need 16", header.affine.len())))?;
    let [nx, ny, nz, nt] = header.dims;
    let grid = Grid3::new([nx, ny, nz], header.voxel_size_mm, affine)?;
    let n = grid.n_voxels() * nt.max(1);
    let data = read_f32_payload(&sibling(path, &header.data_file), n)?;
    Ok(Volume4D::new(grid, nt, header.tr_seconds, data)?)
}

/// Writes `<path>` (header) and `<path stem>.bin` (payload) side by side.
pub fn save_volume_raw(vol: &Volume4D, path: &Path) -> Result<(), IoError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| IoError::CorruptHeader(format!("cannot derive payload name from {}", path.display())))?;
    let data_file = format!("{stem}.bin");
    let grid = vol.grid();
    let header = RawJsonHeader {
        dims: vol.dims4(),
        voxel_size_mm: grid.voxel_size_mm,
        tr_seconds: vol.tr_seconds(),
        affine: grid.affine.to_row_major(),
        data_file: data_file.clone(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| IoError::json(path, e))?;
    std::fs::write(path, json).map_err(|e| IoError::io(path, e))?;
    write_f32_payload(&sibling(path, &data_file), vol.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_by_two_by_three() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid3::isotropic([2, 2, 2], 3.0, [-90.0, -126.0, -72.0]);
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        let vol = Volume4D::new(grid, 3, 2.0, data).unwrap();
        let p = dir.path().join("v.json");
        save_volume_raw(&vol, &p).unwrap();
        let back = read_raw_json(&p).unwrap();
        assert_eq!(back.nt(), 3);
        assert_eq!(back, vol);
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid3::isotropic([2, 2, 2], 3.0, [0.0; 3]);
        let vol = Volume4D::new(grid, 3, 2.0, vec![1.0; 24]).unwrap();
        let p = dir.path().join("v.json");
        save_volume_raw(&vol, &p).unwrap();
        let bin = dir.path().join("v.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_raw_json(&p), Err(IoError::DimensionMismatch(_))));
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid3::isotropic([1, 1, 1], 1.0, [0.0; 3]);
        let vol = Volume4D::new(grid, 2, 1.0, vec![1.0, 2.0]).unwrap();
        let p = dir.path().join("v.json");
        save_volume_raw(&vol, &p).unwrap();
        write_f32_payload(&dir.path().join("v.bin"), &[1.0, f32::INFINITY]).unwrap();
        assert!(matches!(read_raw_json(&p), Err(IoError::Volume(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_bit_exact(
            nx in 1usize..4, ny in 1usize..4, nz in 1usize..3, nt in 1usize..5,
            tr in 0.1f64..5.0, vs in 0.5f64..4.0, off in -100.0f64..100.0,
            seed in any::<u64>(),
        ) {
            let grid = Grid3::new([nx, ny, nz], [vs, vs * 1.5, vs], Affine::from_scale_translation([vs, -vs, vs * 1.5], [off, 2.0 * off, -off])).unwrap();
            let rng = crate::rng::CounterRng::new(seed, 0);
            let n = nx * ny * nz * nt;
            let data: Vec<f32> = (0..n as u64).map(|c| (rng.gaussian(c) * 1e3) as f32).collect();
            let vol = Volume4D::new(grid, nt, tr, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.json");
            save_volume_raw(&vol, &p).unwrap();
            let back = read_raw_json(&p).unwrap();
            prop_assert_eq!(back.dims4(), vol.dims4());
            prop_assert_eq!(back.tr_seconds().to_bits(), vol.tr_seconds().to_bits());
            prop_assert_eq!(back.affine(), vol.affine());
            prop_assert!(back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
