//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Only what the pipeline needs: 3-D scalar volumes stored as unsigned 8-bit,
//! signed 16-bit, 32-bit float or 64-bit float. Every payload is converted to
//! `f32` with `scl_slope`/`scl_inter` applied.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume3D, IDENTITY3};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
const DEFAULT_VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

/// The subset of the NIfTI-1 header this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub datatype: i16,
    pub bitpix: i16,
    /// Raw `dim` field; `dim[0]` is the dimensionality.
    pub dim: [i16; 8],
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub little_endian: bool,
}

impl NiftiHeader {
    /// Parse the first 348 bytes of a file image.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the {HEADER_SIZE}-byte header",
                bytes.len()
            )));
        }
        let le_size = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let be_size = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let little_endian = if le_size == HEADER_SIZE as i32 {
            true
        } else if be_size == HEADER_SIZE as i32 {
            false
        } else {
            return Err(Error::Format(format!("sizeof_hdr is {le_size}, expected 348")));
        };
        let r = Reader { bytes, little_endian };

        let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
        if &magic[..3] != b"n+1" || magic[3] != 0 {
            return Err(Error::Format(format!(
                "magic {:?} does not identify a single-file NIfTI-1 volume",
                String::from_utf8_lossy(&magic[..3])
            )));
        }

        let mut dim = [0i16; 8];
        for (n, d) in dim.iter_mut().enumerate() {
            *d = r.i16(40 + 2 * n);
        }
        let mut pixdim = [0f32; 8];
        for (n, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(76 + 4 * n);
        }
        let mut srow = [[0f32; 4]; 3];
        for (row, s) in srow.iter_mut().enumerate() {
            for (col, v) in s.iter_mut().enumerate() {
                *v = r.f32(280 + 16 * row + 4 * col);
            }
        }
        let descrip = {
            let raw = &bytes[148..228];
            let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
            String::from_utf8_lossy(&raw[..end]).into_owned()
        };

        Ok(NiftiHeader {
            datatype: r.i16(70),
            bitpix: r.i16(72),
            dim,
            pixdim,
            vox_offset: r.f32(108),
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            descrip,
            qform_code: r.i16(252),
            sform_code: r.i16(254),
            quatern: [r.f32(256), r.f32(260), r.f32(264)],
            qoffset: [r.f32(268), r.f32(272), r.f32(276)],
            srow,
            magic,
            little_endian,
        })
    }

    /// Spatial dims with trailing singleton dimensions dropped.
    pub fn dims3(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::Format(format!("dim[0] = {ndim} is out of range")));
        }
        let mut dims = [1usize; 3];
        for a in 0..ndim as usize {
            let d = self.dim[a + 1];
            if d < 1 {
                return Err(Error::Format(format!("dim[{}] = {d} is not positive", a + 1)));
            }
            if a < 3 {
                dims[a] = d as usize;
            } else if d != 1 {
                return Err(Error::Format(format!(
                    "dimension {} has extent {d}; only 3-D volumes are supported",
                    a + 1
                )));
            }
        }
        Ok(dims)
    }

    fn bytes_per_voxel(&self) -> Result<usize> {
        match self.datatype {
            DT_UINT8 => Ok(1),
            DT_INT16 => Ok(2),
            DT_FLOAT32 => Ok(4),
            DT_FLOAT64 => Ok(8),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    /// `(slope, intercept)`, with slope 0 (or non-finite) meaning identity.
    pub fn scaling(&self) -> (f64, f64) {
        let slope = self.scl_slope as f64;
        if slope == 0.0 || !slope.is_finite() {
            (1.0, 0.0)
        } else {
            let inter = self.scl_inter as f64;
            (slope, if inter.is_finite() { inter } else { 0.0 })
        }
    }

    fn geometry(&self) -> Result<Geometry> {
        let dims = self.dims3()?;
        let mut spacing = [1.0f64; 3];
        for (a, s) in spacing.iter_mut().enumerate() {
            let p = (self.pixdim[a + 1] as f64).abs();
            if p > 0.0 && p.is_finite() {
                *s = p;
            }
        }
        let (orientation, origin) = if self.sform_code > 0 {
            let mut orient = [[0.0; 3]; 3];
            for (axis, o) in orient.iter_mut().enumerate() {
                let col: Vec<f64> = (0..3).map(|r| self.srow[r][axis] as f64).collect();
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for r in 0..3 {
                        o[r] = col[r] / norm;
                    }
                } else {
                    *o = IDENTITY3[axis];
                }
            }
            let origin = [self.srow[0][3] as f64, self.srow[1][3] as f64, self.srow[2][3] as f64];
            (orient, origin)
        } else if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|q| q as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let rot = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            let mut orient = [[0.0; 3]; 3];
            for (axis, o) in orient.iter_mut().enumerate() {
                let sign = if axis == 2 { qfac } else { 1.0 };
                let col = [rot[0][axis] * sign, rot[1][axis] * sign, rot[2][axis] * sign];
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                *o = col.map(|v| v / norm);
            }
            (orient, self.qoffset.map(|q| q as f64))
        } else {
            (IDENTITY3, [0.0; 3])
        };
        let g = Geometry {
            dims,
            spacing,
            origin,
            orientation,
        };
        g.validate()?;
        Ok(g)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    little_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        self.bytes[at..at + N].try_into().unwrap()
    }
    fn i16(&self, at: usize) -> i16 {
        let b = self.arr::<2>(at);
        if self.little_endian {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }
    fn f32(&self, at: usize) -> f32 {
        let b = self.arr::<4>(at);
        if self.little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }
    fn f64(&self, at: usize) -> f64 {
        let b = self.arr::<8>(at);
        if self.little_endian {
            f64::from_le_bytes(b)
        } else {
            f64::from_be_bytes(b)
        }
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B
}

/// Decode a complete in-memory file image.
pub fn decode_nifti(raw: &[u8]) -> Result<Volume3D> {
    decode_with_report(raw).map(|(v, _, _)| v)
}

/// Like [`decode_nifti`], also returning the parsed header and how many
/// non-finite voxels were replaced by zero.
pub fn decode_with_report(raw: &[u8]) -> Result<(Volume3D, NiftiHeader, usize)> {
    let inflated;
    let bytes: &[u8] = if is_gzip(raw) {
        let mut buf = Vec::new();
        GzDecoder::new(raw)
            .read_to_end(&mut buf)
            .map_err(|e| Error::Corrupt(format!("gzip stream: {e}")))?;
        inflated = buf;
        &inflated
    } else {
        raw
    };

    let header = NiftiHeader::parse(bytes)?;
    let bpv = header.bytes_per_voxel()?;
    let geometry = header.geometry()?;
    let n = geometry.len();

    let offset = header.vox_offset;
    if !(offset.is_finite() && offset >= 0.0) {
        return Err(Error::Corrupt(format!("vox_offset {offset} is invalid")));
    }
    let offset = (offset as usize).max(HEADER_SIZE);
    let needed = offset + n * bpv;
    if bytes.len() < needed {
        return Err(Error::Corrupt(format!(
            "payload truncated: need {needed} bytes, file has {}",
            bytes.len()
        )));
    }

    let r = Reader {
        bytes,
        little_endian: header.little_endian,
    };
    let (slope, inter) = header.scaling();
    let identity = slope == 1.0 && inter == 0.0;
    let mut non_finite = 0usize;
    let mut data = Vec::with_capacity(n);
    for v in 0..n {
        let at = offset + v * bpv;
        let raw_value: f64 = match header.datatype {
            DT_UINT8 => bytes[at] as f64,
            DT_INT16 => r.i16(at) as f64,
            DT_FLOAT32 => {
                let x = r.f32(at);
                if identity && x.is_finite() {
                    data.push(x);
                    continue;
                }
                x as f64
            }
            DT_FLOAT64 => r.f64(at),
            other => return Err(Error::UnsupportedDatatype(other)),
        };
        let value = (raw_value * slope + inter) as f32;
        if value.is_finite() {
            data.push(value);
        } else {
            non_finite += 1;
            data.push(0.0);
        }
    }
    if non_finite > 0 {
        log::warn!("replaced {non_finite} non-finite voxel values with 0");
    }

    let mut vol = Volume3D::new(geometry, data)?;
    vol.intensity_units = header.descrip.clone();
    Ok((vol, header, non_finite))
}

/// Read a `.nii` or gzip-compressed `.nii.gz` file.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&raw)
}

/// Encode a volume as an uncompressed little-endian float32 NIfTI-1 image.
pub fn encode_nifti(vol: &Volume3D) -> Vec<u8> {
    let g = vol.geometry();
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, g.dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, g.spacing[a] as f32);
    }
    put_f32(&mut h, 108, DEFAULT_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    // xyzt_units: millimeters
    h[123] = 2;
    let desc = vol.intensity_units.as_bytes();
    let len = desc.len().min(79);
    h[148..148 + len].copy_from_slice(&desc[..len]);
    put_i16(&mut h, 254, 1);
    for row in 0..3 {
        for axis in 0..3 {
            put_f32(
                &mut h,
                280 + 16 * row + 4 * axis,
                (g.orientation[axis][row] * g.spacing[axis]) as f32,
            );
        }
        put_f32(&mut h, 280 + 16 * row + 12, g.origin[row] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(vol.len() * 4);
    for &v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write a volume as float32 NIfTI-1; paths ending in `.gz` are gzip-compressed.
///
/// The file is written to a temporary sibling and renamed into place.
pub fn write_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let encoded = encode_nifti(vol);
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&encoded).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        encoded
    };
    crate::fsutil::write_atomic(path, &bytes)
}
