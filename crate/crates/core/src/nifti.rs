//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only little-endian 3D images with datatype codes 2 (uint8), 4 (int16) and
//! 16 (float32) are supported. On-disk voxel order has `dim[1]` fastest;
//! extents `(D, H, W)` map to `dim[1..=3]`, spacing to `pixdim[1..=3]`.
//! Orientation fields are carried as opaque bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::volume::{DataType, LabelMap, Orientation, Volume, MAX_CLASS};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gzip stream: {0}")]
    Gzip(#[source] std::io::Error),
    #[error("truncated {field}: need {needed} bytes, have {available}")]
    Truncated {
        field: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("sizeof_hdr is {0}, expected 348")]
    HeaderSize(i32),
    #[error("magic is {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("big-endian NIfTI files are not supported")]
    BigEndian,
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dim {0:?}: only 3D images are supported")]
    UnsupportedDims([i16; 8]),
    #[error("invalid {field}: {value}")]
    InvalidField { field: &'static str, value: String },
    #[error("voxel {voxel} holds {value}, not a class id in 0..={max}")]
    ClassRange { voxel: usize, value: f64, max: u8 },
    #[error("voxel {voxel} value {value} is not representable as {dtype:?}")]
    NotRepresentable { voxel: usize, value: f32, dtype: DataType },
}

type Result<T> = std::result::Result<T, NiftiError>;

/// A parsed header plus voxel values in memory order (`W` fastest).
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub dtype: DataType,
    pub orientation: Orientation,
    /// Values after `scl_slope`/`scl_inter` scaling.
    pub values: Vec<f64>,
    pub scaled: bool,
}

fn le_i16(b: &[u8], o: usize) -> i16 {
    i16::from_le_bytes([b[o], b[o + 1]])
}

fn le_i32(b: &[u8], o: usize) -> i32 {
    i32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn le_f32(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Memory index (`W` fastest) of on-disk voxel `i` (`D` fastest).
fn disk_to_memory(extents: [usize; 3]) -> impl Iterator<Item = usize> {
    let [nd, nh, nw] = extents;
    (0..nw).flat_map(move |w| (0..nh).flat_map(move |h| (0..nd).map(move |d| (d * nh + h) * nw + w)))
}

/// Parse an in-memory file, decompressing it first if it is gzip-wrapped.
pub fn parse(bytes: &[u8]) -> Result<NiftiImage> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut raw).map_err(NiftiError::Gzip)?;
        return parse_raw(&raw);
    }
    parse_raw(bytes)
}

fn parse_raw(b: &[u8]) -> Result<NiftiImage> {
    if b.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            field: "header",
            needed: HEADER_SIZE,
            available: b.len(),
        });
    }
    let sizeof_hdr = le_i32(b, 0);
    let dim0 = le_i16(b, 40);
    if sizeof_hdr != HEADER_SIZE as i32 || !(1..=7).contains(&dim0) {
        let swapped_dim0 = i16::from_be_bytes([b[40], b[41]]);
        if i32::from_be_bytes(b[0..4].try_into().unwrap()) == HEADER_SIZE as i32 || (1..=7).contains(&swapped_dim0) {
            return Err(NiftiError::BigEndian);
        }
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(NiftiError::HeaderSize(sizeof_hdr));
        }
    }
    let magic: [u8; 4] = b[344..348].try_into().unwrap();
    if &magic != MAGIC {
        return Err(NiftiError::BadMagic(magic));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = le_i16(b, 40 + 2 * i);
    }
    if !(3..=7).contains(&dim[0]) || dim[1..=3].iter().any(|&d| d < 1) || dim[4..=dim[0] as usize].iter().any(|&d| d != 1) {
        return Err(NiftiError::UnsupportedDims(dim));
    }
    let extents = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let code = le_i16(b, 70);
    let dtype = DataType::from_code(code).ok_or(NiftiError::UnsupportedDatatype(code))?;
    let bitpix = le_i16(b, 72);
    if bitpix as usize != 8 * dtype.bytes() {
        return Err(NiftiError::InvalidField {
            field: "bitpix",
            value: bitpix.to_string(),
        });
    }
    let spacing = [le_f32(b, 80), le_f32(b, 84), le_f32(b, 88)];
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(NiftiError::InvalidField {
            field: "pixdim",
            value: format!("{spacing:?}"),
        });
    }
    let vox_offset = le_f32(b, 108);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 || vox_offset > u32::MAX as f32 {
        return Err(NiftiError::InvalidField {
            field: "vox_offset",
            value: vox_offset.to_string(),
        });
    }
    let offset = vox_offset as usize;
    let count: usize = extents.iter().product();
    let needed = offset + count * dtype.bytes();
    if b.len() < needed {
        return Err(NiftiError::Truncated {
            field: "voxel data",
            needed,
            available: b.len(),
        });
    }
    let payload = &b[offset..needed];
    let (slope, inter) = (le_f32(b, 112), le_f32(b, 116));
    let scaled = slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0);
    let raw = |i: usize| -> f64 {
        match dtype {
            DataType::Uint8 => payload[i] as f64,
            DataType::Int16 => le_i16(payload, 2 * i) as f64,
            DataType::Float32 => le_f32(payload, 4 * i) as f64,
        }
    };
    let mut values = vec![0.0; count];
    for (i, m) in disk_to_memory(extents).enumerate() {
        let v = raw(i);
        values[m] = if scaled { v * slope as f64 + inter as f64 } else { v };
    }
    Ok(NiftiImage {
        extents,
        spacing,
        dtype,
        orientation: Orientation(b[252..328].try_into().unwrap()),
        values,
        scaled,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl NiftiImage {
    pub fn into_volume(self) -> Result<Volume> {
        let dtype = if self.scaled { DataType::Float32 } else { self.dtype };
        let data = self.values.iter().map(|&v| v as f32).collect();
        let mut v = Volume::new(self.extents, self.spacing, data)
            .map_err(|e| NiftiError::InvalidField {
                field: "image",
                value: e.to_string(),
            })?
            .with_dtype(dtype);
        v.orientation = self.orientation;
        Ok(v)
    }

    pub fn into_label_map(self) -> Result<LabelMap> {
        let mut labels = Vec::with_capacity(self.values.len());
        for (voxel, &value) in self.values.iter().enumerate() {
            if value.fract() != 0.0 || !(0.0..=MAX_CLASS as f64).contains(&value) {
                return Err(NiftiError::ClassRange {
                    voxel,
                    value,
                    max: MAX_CLASS,
                });
            }
            labels.push(value as u8);
        }
        let mut map = LabelMap::new(self.extents, self.spacing, labels).map_err(|e| NiftiError::InvalidField {
            field: "labels",
            value: e.to_string(),
        })?;
        map.orientation = self.orientation;
        Ok(map)
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    parse(&read_file(path)?)?.into_volume()
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    parse(&read_file(path)?)?.into_label_map()
}

fn header(extents: [usize; 3], spacing: [f32; 3], dtype: DataType, orientation: &Orientation) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    let mut put = |o: usize, bytes: &[u8]| h[o..o + bytes.len()].copy_from_slice(bytes);
    put(0, &(HEADER_SIZE as i32).to_le_bytes());
    put(38, b"r");
    let mut dim = [3i16, 0, 0, 0, 1, 1, 1, 1];
    for a in 0..3 {
        dim[a + 1] = i16::try_from(extents[a]).map_err(|_| NiftiError::InvalidField {
            field: "dim",
            value: format!("{extents:?}"),
        })?;
    }
    for (i, d) in dim.iter().enumerate() {
        put(40 + 2 * i, &d.to_le_bytes());
    }
    put(70, &dtype.code().to_le_bytes());
    put(72, &((8 * dtype.bytes()) as i16).to_le_bytes());
    let pixdim = [1.0f32, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(76 + 4 * i, &p.to_le_bytes());
    }
    put(108, &(VOX_OFFSET as f32).to_le_bytes());
    put(112, &1.0f32.to_le_bytes());
    put(123, &[2]); // xyzt_units: mm
    put(252, &orientation.0);
    put(344, MAGIC);
    Ok(h)
}

fn encode(
    extents: [usize; 3],
    spacing: [f32; 3],
    dtype: DataType,
    orientation: &Orientation,
    value: impl Fn(usize) -> f32,
) -> Result<Vec<u8>> {
    let mut out = header(extents, spacing, dtype, orientation)?;
    let count: usize = extents.iter().product();
    out.reserve(count * dtype.bytes());
    for m in disk_to_memory(extents) {
        let v = value(m);
        let unrepresentable = || NiftiError::NotRepresentable { voxel: m, value: v, dtype };
        match dtype {
            DataType::Uint8 => {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(unrepresentable());
                }
                out.push(v as u8);
            }
            DataType::Int16 => {
                if v.fract() != 0.0 || !(-32768.0..=32767.0).contains(&v) {
                    return Err(unrepresentable());
                }
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
            DataType::Float32 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

/// Serialize a volume in its own `dtype`.
pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    encode(v.extents(), v.spacing(), v.dtype, &v.orientation, |i| v.data()[i])
}

/// Serialize a label map as uint8.
pub fn encode_label_map(l: &LabelMap) -> Result<Vec<u8>> {
    encode(l.extents(), l.spacing(), DataType::Uint8, &l.orientation, |i| l.labels()[i] as f32)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    };
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(io)?;
        fs::write(path, enc.finish().map_err(io)?).map_err(io)
    } else {
        fs::write(path, bytes).map_err(io)
    }
}

/// Write a volume; gzip-compressed when the path ends in `.gz`.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_file(path, &encode_volume(v)?)
}

/// Write a label map as uint8; gzip-compressed when the path ends in `.gz`.
pub fn write_label_map(path: &Path, l: &LabelMap) -> Result<()> {
    write_file(path, &encode_label_map(l)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_labels() -> LabelMap {
        LabelMap::new([2, 3, 4], [1.5, 1.5, 3.0], (0..24).map(|i| (i % 5) as u8).collect()).unwrap()
    }

    #[test]
    fn header_fields() {
        let bytes = encode_label_map(&sample_labels()).unwrap();
        assert_eq!(le_i32(&bytes, 0), 348);
        let dim: Vec<i16> = (0..8).map(|i| le_i16(&bytes, 40 + 2 * i)).collect();
        assert_eq!(dim, vec![3, 2, 3, 4, 1, 1, 1, 1]);
        assert_eq!(le_i16(&bytes, 70), 2);
        assert_eq!(le_f32(&bytes, 108), 352.0);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(bytes.len(), 352 + 24);
    }

    #[test]
    fn disk_order_has_first_axis_fastest() {
        let v = Volume::new([2, 1, 3], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let bytes = encode_volume(&v).unwrap();
        let disk: Vec<f32> = (0..6).map(|i| le_f32(&bytes, 352 + 4 * i)).collect();
        // memory (d, w): d=0 -> 0,1,2 ; d=1 -> 3,4,5 ; disk iterates d fastest
        assert_eq!(disk, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn rejects_bad_sizeof_hdr() {
        let mut bytes = encode_label_map(&sample_labels()).unwrap();
        bytes[0..4].copy_from_slice(&540i32.to_le_bytes());
        assert!(matches!(parse(&bytes), Err(NiftiError::HeaderSize(540))));
    }

    #[test]
    fn rejects_big_endian() {
        let mut bytes = encode_label_map(&sample_labels()).unwrap();
        bytes[0..4].copy_from_slice(&348i32.to_be_bytes());
        for i in 0..8 {
            let v = le_i16(&bytes, 40 + 2 * i);
            bytes[40 + 2 * i..42 + 2 * i].copy_from_slice(&v.to_be_bytes());
        }
        assert!(matches!(parse(&bytes), Err(NiftiError::BigEndian)));
    }

    #[test]
    fn rejects_bad_magic_and_datatype() {
        let good = encode_label_map(&sample_labels()).unwrap();
        let mut bytes = good.clone();
        bytes[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(parse(&bytes), Err(NiftiError::BadMagic(_))));
        let mut bytes = good;
        bytes[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(parse(&bytes), Err(NiftiError::UnsupportedDatatype(64))));
    }

    #[test]
    fn label_out_of_range() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![0.0, 7.0, 1.0]).unwrap().with_dtype(DataType::Uint8);
        let bytes = encode_volume(&v).unwrap();
        assert!(matches!(
            parse(&bytes).unwrap().into_label_map(),
            Err(NiftiError::ClassRange { voxel: 1, .. })
        ));
    }

    #[test]
    fn scaling_is_applied() {
        let v = Volume::new([1, 1, 2], [1.0; 3], vec![2.0, 4.0]).unwrap().with_dtype(DataType::Int16);
        let mut bytes = encode_volume(&v).unwrap();
        bytes[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        let back = parse(&bytes).unwrap().into_volume().unwrap();
        assert_eq!(back.data(), &[2.0, 3.0]);
        assert_eq!(back.dtype, DataType::Float32);
    }

    #[test]
    fn unrepresentable_values_rejected() {
        let v = Volume::new([1, 1, 1], [1.0; 3], vec![0.5]).unwrap().with_dtype(DataType::Int16);
        assert!(matches!(encode_volume(&v), Err(NiftiError::NotRepresentable { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_label_map(&sample_labels()).unwrap();
        assert!(matches!(
            parse(&bytes[..bytes.len() - 1]),
            Err(NiftiError::Truncated { field: "voxel data", .. })
        ));
        assert!(matches!(parse(&bytes[..100]), Err(NiftiError::Truncated { field: "header", .. })));
    }
}
