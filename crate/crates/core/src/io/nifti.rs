//! Read-only NIfTI-1 subset: single-file `.nii`, uncompressed, little-endian,
//! datatypes uint8 / int16 / float32, with `scl_slope`/`scl_inter` applied
//! when the slope is nonzero.

use byteorder::{ByteOrder, LittleEndian};

use super::IoError;
use crate::volume::{Affine, Grid3, Volume4D};

const HEADER_SIZE: usize = 348;
const MIN_VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    UInt8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub fn from_code(code: i16) -> Result<Self, IoError> {
        match code {
            2 => Ok(Self::UInt8),
            4 => Ok(Self::Int16),
            16 => Ok(Self::Float32),
            other => Err(IoError::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Self::UInt8 => 2,
            Self::Int16 => 4,
            Self::Float32 => 16,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::UInt8 => 1,
            Self::Int16 => 2,
            Self::Float32 => 4,
        }
    }
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    LittleEndian::read_f32(&b[off..off + 4])
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    LittleEndian::read_i16(&b[off..off + 2])
}

fn affine_from_header(b: &[u8], pixdim: &[f32; 8]) -> Affine {
    let sform_code = i16_at(b, offsets::SFORM_CODE);
    let qform_code = i16_at(b, offsets::QFORM_CODE);
    if sform_code > 0 {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(b, offsets::SROW_X + 16 * r + 4 * c) as f64;
            }
        }
        m[3][3] = 1.0;
        return Affine(m);
    }
    if qform_code > 0 {
        let qb = f32_at(b, offsets::QUATERN_B) as f64;
        let qc = f32_at(b, offsets::QUATERN_B + 4) as f64;
        let qd = f32_at(b, offsets::QUATERN_B + 8) as f64;
        let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [
                qa * qa + qb * qb - qc * qc - qd * qd,
                2.0 * (qb * qc - qa * qd),
                2.0 * (qb * qd + qa * qc),
            ],
            [
                2.0 * (qb * qc + qa * qd),
                qa * qa + qc * qc - qb * qb - qd * qd,
                2.0 * (qc * qd - qa * qb),
            ],
            [
                2.0 * (qb * qd - qa * qc),
                2.0 * (qc * qd + qa * qb),
                qa * qa + qd * qd - qc * qc - qb * qb,
            ],
        ];
        let scale = [pixdim[1] as f64, pixdim[2] as f64, qfac * pixdim[3] as f64];
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[i][j] * scale[j];
            }
            m[i][3] = f32_at(b, offsets::QOFFSET_X + 4 * i) as f64;
        }
        m[3][3] = 1.0;
        return Affine(m);
    }
    Affine::from_scale_translation([pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64], [0.0; 3])
}

/// Parses a complete single-file NIfTI-1 image held in memory.
pub fn parse_nifti1(b: &[u8]) -> Result<Volume4D, IoError> {
    if b.len() < HEADER_SIZE {
        return Err(IoError::CorruptHeader(format!("file has {} bytes, header needs 348", b.len())));
    }
    let sizeof_hdr = LittleEndian::read_i32(&b[offsets::SIZEOF_HDR..4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        let be = byteorder::BigEndian::read_i32(&b[0..4]);
        return Err(IoError::CorruptHeader(if be == HEADER_SIZE as i32 {
            "big-endian NIfTI is not supported".into()
        } else {
            format!("sizeof_hdr is {sizeof_hdr}, expected 348")
        }));
    }
    if &b[offsets::MAGIC..offsets::MAGIC + 4] != b"n+1\0" {
        return Err(IoError::CorruptHeader("magic is not \"n+1\\0\" (single-file NIfTI-1)".into()));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = i16_at(b, offsets::DIM + 2 * i);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(IoError::CorruptHeader(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let axis = |k: usize| -> Result<usize, IoError> {
        if k > ndim {
            return Ok(1);
        }
        match dim[k] {
            d if d >= 1 => Ok(d as usize),
            d => Err(IoError::CorruptHeader(format!("dim[{k}] = {d}"))),
        }
    };
    let (nx, ny, nz, nt) = (axis(1)?, axis(2)?, axis(3)?, axis(4)?);
    for k in 5..=7 {
        if axis(k)? != 1 {
            return Err(IoError::DimensionMismatch(format!("dim[{k}] = {} (only up to 4D)", dim[k])));
        }
    }

    let datatype = NiftiDatatype::from_code(i16_at(b, offsets::DATATYPE))?;
    let bitpix = i16_at(b, offsets::BITPIX);
    if bitpix as usize != datatype.bytes() * 8 {
        return Err(IoError::CorruptHeader(format!(
            "bitpix {bitpix} does not match datatype {datatype:?}"
        )));
    }

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(b, offsets::PIXDIM + 4 * i);
    }
    let voxel_size = [pixdim[1].abs() as f64, pixdim[2].abs() as f64, pixdim[3].abs() as f64];

    let tr_raw = pixdim[4] as f64;
    let tr = match b[offsets::XYZT_UNITS] & 0x18 {
        16 => tr_raw / 1e3,
        24 => tr_raw / 1e6,
        _ => tr_raw,
    };
    let tr = if nt == 1 && !(tr.is_finite() && tr > 0.0) { 1.0 } else { tr };

    let vox_offset = f32_at(b, offsets::VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= MIN_VOX_OFFSET as f32) {
        return Err(IoError::CorruptHeader(format!("vox_offset {vox_offset} < 352")));
    }
    let start = vox_offset as usize;
    let n = nx * ny * nz * nt;
    let needed = n * datatype.bytes();
    if b.len() < start + needed {
        return Err(IoError::DimensionMismatch(format!(
            "data section truncated: need {needed} bytes at offset {start}, file has {}",
            b.len()
        )));
    }
    let raw = &b[start..start + needed];

    let slope = f32_at(b, offsets::SCL_SLOPE) as f64;
    let inter = f32_at(b, offsets::SCL_INTER) as f64;
    let scale = slope != 0.0 && slope.is_finite();
    let inter = if inter.is_finite() { inter } else { 0.0 };
    let convert = |v: f64| -> f32 {
        if scale {
            (v * slope + inter) as f32
        } else {
            v as f32
        }
    };
    let data: Vec<f32> = match datatype {
        NiftiDatatype::UInt8 => raw.iter().map(|&v| convert(v as f64)).collect(),
        NiftiDatatype::Int16 => raw.chunks_exact(2).map(|c| convert(LittleEndian::read_i16(c) as f64)).collect(),
        NiftiDatatype::Float32 => raw
            .chunks_exact(4)
            .map(|c| {
                let v = LittleEndian::read_f32(c);
                if scale {
                    convert(v as f64)
                } else {
                    v
                }
            })
            .collect(),
    };

    let grid = Grid3::new([nx, ny, nz], voxel_size, affine_from_header(b, &pixdim))?;
    Ok(Volume4D::new(grid, nt, tr, data)?)
}
