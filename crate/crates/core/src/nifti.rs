//! Reader and writer for a strict subset of single-file NIfTI-1.
//!
//! Supported: 3D `.nii` / `.nii.gz` with datatype uint8 (2) or float32 (16).
//! Reads either byte order; always writes little-endian with `vox_offset`
//! 352. Orientation fields are carried through [`Orientation`] when a
//! reference header is supplied, otherwise zeroed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, LabelMask, Spacing, Volume};

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const DT_UINT8: i16 = 2;
pub const DT_FLOAT32: i16 = 16;
const MAGIC: &[u8; 4] = b"n+1\0";

/// qform/sform block, copied verbatim between headers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Orientation {
    pub qfac: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub orientation: Orientation,
}

impl NiftiHeader {
    fn for_grid(dims: Dims, spacing: Spacing, datatype: i16, reference: Option<&NiftiHeader>) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for a in 0..3 {
            dim[a + 1] = dims[a] as i16;
        }
        let orientation = reference.map(|r| r.orientation).unwrap_or_default();
        let mut pixdim = [0f32; 8];
        pixdim[0] = if orientation.qfac == 0.0 { 1.0 } else { orientation.qfac };
        for a in 0..3 {
            pixdim[a + 1] = spacing[a] as f32;
        }
        Self {
            dim,
            datatype,
            bitpix: if datatype == DT_UINT8 { 8 } else { 32 },
            pixdim,
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // mm, seconds
            xyzt_units: 2 | 8,
            orientation,
        }
    }

    pub fn dims(&self) -> Dims {
        [
            self.dim[1] as usize,
            self.dim[2] as usize,
            self.dim[3] as usize,
        ]
    }

    /// `|pixdim[1..=3]|`, zeros replaced by 1.0.
    pub fn spacing(&self) -> Spacing {
        let mut s = [1.0; 3];
        for a in 0..3 {
            let p = f64::from(self.pixdim[a + 1]).abs();
            if p == 0.0 || !p.is_finite() {
                log::warn!("pixdim[{}] is {}, using 1.0", a + 1, self.pixdim[a + 1]);
            } else {
                s[a] = p;
            }
        }
        s
    }

    fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; DEFAULT_VOX_OFFSET];
        put(&mut b, 0, &(HEADER_SIZE as i32).to_le_bytes());
        for (i, d) in self.dim.iter().enumerate() {
            put(&mut b, 40 + 2 * i, &d.to_le_bytes());
        }
        put(&mut b, 70, &self.datatype.to_le_bytes());
        put(&mut b, 72, &self.bitpix.to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            put(&mut b, 76 + 4 * i, &p.to_le_bytes());
        }
        put(&mut b, 108, &self.vox_offset.to_le_bytes());
        put(&mut b, 112, &self.scl_slope.to_le_bytes());
        put(&mut b, 116, &self.scl_inter.to_le_bytes());
        b[123] = self.xyzt_units;
        let o = &self.orientation;
        put(&mut b, 252, &o.qform_code.to_le_bytes());
        put(&mut b, 254, &o.sform_code.to_le_bytes());
        for (i, q) in o.quatern.iter().enumerate() {
            put(&mut b, 256 + 4 * i, &q.to_le_bytes());
        }
        for (r, row) in o.srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                put(&mut b, 280 + 16 * r + 4 * c, &v.to_le_bytes());
            }
        }
        put(&mut b, 344, MAGIC);
        b
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Truncated {
                needed: HEADER_SIZE,
                available: bytes.len(),
            });
        }
        let big = match i32::from_le_bytes(arr(bytes, 0)) {
            348 => false,
            _ if i32::from_be_bytes(arr(bytes, 0)) == 348 => true,
            other => {
                return Err(Error::NiftiHeader {
                    field: "sizeof_hdr",
                    detail: format!("expected 348, got {other}"),
                })
            }
        };
        let r = Fields { bytes, big };
        if &bytes[344..347] != b"n+1" {
            return Err(Error::NiftiHeader {
                field: "magic",
                detail: format!("expected \"n+1\", got {:?}", &bytes[344..348]),
            });
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(40 + 2 * i);
        }
        if !(3..=7).contains(&dim[0]) || dim[4..=dim[0] as usize].iter().any(|&d| d != 1) {
            return Err(Error::NiftiHeader {
                field: "dim",
                detail: format!("only 3D volumes are supported, got {dim:?}"),
            });
        }
        if dim[1..=3].iter().any(|&d| d < 1) {
            return Err(Error::NiftiHeader {
                field: "dim",
                detail: format!("dim[1..3] must be >= 1, got {:?}", &dim[1..=3]),
            });
        }
        let datatype = r.i16(70);
        if datatype != DT_UINT8 && datatype != DT_FLOAT32 {
            return Err(Error::UnsupportedDatatype(datatype));
        }
        let bitpix = r.i16(72);
        let expected_bitpix = if datatype == DT_UINT8 { 8 } else { 32 };
        if bitpix != expected_bitpix {
            return Err(Error::NiftiHeader {
                field: "bitpix",
                detail: format!("datatype {datatype} needs bitpix {expected_bitpix}, got {bitpix}"),
            });
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(76 + 4 * i);
        }
        let vox_offset = r.f32(108);
        if !(vox_offset >= DEFAULT_VOX_OFFSET as f32) {
            return Err(Error::NiftiHeader {
                field: "vox_offset",
                detail: format!("must be >= 352 for single-file NIfTI, got {vox_offset}"),
            });
        }
        let mut quatern = [0f32; 6];
        for (i, q) in quatern.iter_mut().enumerate() {
            *q = r.f32(256 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (ri, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = r.f32(280 + 16 * ri + 4 * c);
            }
        }
        Ok(Self {
            dim,
            datatype,
            bitpix,
            pixdim,
            vox_offset,
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            xyzt_units: bytes[123],
            orientation: Orientation {
                qfac: pixdim[0],
                qform_code: r.i16(252),
                sform_code: r.i16(254),
                quatern,
                srow,
            },
        })
    }
}

fn put(buf: &mut [u8], at: usize, src: &[u8]) {
    buf[at..at + src.len()].copy_from_slice(src);
}

fn arr<const N: usize>(b: &[u8], at: usize) -> [u8; N] {
    b[at..at + N].try_into().expect("slice length")
}

struct Fields<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let a = arr(self.bytes, at);
        if self.big {
            i16::from_be_bytes(a)
        } else {
            i16::from_le_bytes(a)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let a = arr(self.bytes, at);
        if self.big {
            f32::from_be_bytes(a)
        } else {
            f32::from_le_bytes(a)
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().map_or(false, |e| e == "gz");
    if gz {
        // flate2 writes a zero mtime, so output is byte-stable
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Parse a NIfTI image from in-memory (uncompressed) bytes.
pub fn decode(bytes: &[u8]) -> Result<(NiftiHeader, Volume)> {
    let header = NiftiHeader::decode(bytes)?;
    let big = i32::from_le_bytes(arr(bytes, 0)) != HEADER_SIZE as i32;
    let dims = header.dims();
    let n = voxel_count(dims);
    let width = if header.datatype == DT_UINT8 { 1 } else { 4 };
    let start = header.vox_offset as usize;
    let needed = start + n * width;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let (slope, inter) = if header.scl_slope == 0.0 || !header.scl_slope.is_finite() {
        (1.0, 0.0)
    } else {
        (header.scl_slope, header.scl_inter)
    };
    let raw = &bytes[start..needed];
    let data: Vec<f32> = if header.datatype == DT_UINT8 {
        raw.iter().map(|&v| f32::from(v) * slope + inter).collect()
    } else {
        raw.chunks_exact(4)
            .map(|c| {
                let a = [c[0], c[1], c[2], c[3]];
                let v = if big {
                    f32::from_be_bytes(a)
                } else {
                    f32::from_le_bytes(a)
                };
                v * slope + inter
            })
            .collect()
    };
    let spacing = header.spacing();
    let volume = Volume::new(dims, spacing, data)?;
    Ok((header, volume))
}

/// Read header and volume; gzip is detected from the magic bytes.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<(NiftiHeader, Volume)> {
    decode(&read_bytes(path.as_ref())?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti(path).map(|(_, v)| v)
}

/// Read a uint8/float file whose values are all 0 or 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let v = read_volume(path)?;
    let data = v
        .data()
        .iter()
        .enumerate()
        .map(|(index, &x)| {
            if x == 0.0 || x == 1.0 {
                Ok(x as u8)
            } else {
                Err(Error::NotBinary {
                    index,
                    value: x.clamp(0.0, 255.0) as u8,
                })
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMask::new(v.dims(), v.spacing(), data)
}

pub fn encode_volume(v: &Volume, reference: Option<&NiftiHeader>) -> Vec<u8> {
    let mut bytes = NiftiHeader::for_grid(v.dims(), v.spacing(), DT_FLOAT32, reference).encode();
    bytes.reserve(v.len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    bytes
}

pub fn encode_mask(m: &LabelMask, reference: Option<&NiftiHeader>) -> Vec<u8> {
    let mut bytes = NiftiHeader::for_grid(m.dims(), m.spacing(), DT_UINT8, reference).encode();
    bytes.extend_from_slice(m.data());
    bytes
}

/// Write float32; `.gz` suffix selects gzip.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>, reference: Option<&NiftiHeader>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v, reference))
}

/// Write uint8 with slope 1, intercept 0, vox_offset 352.
pub fn write_mask(m: &LabelMask, path: impl AsRef<Path>, reference: Option<&NiftiHeader>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(m, reference))
}
