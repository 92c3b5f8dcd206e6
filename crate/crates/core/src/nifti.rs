//! Single-file NIfTI-1 (`n+1`) reader and writer.
//!
//! Only the subset the pipeline needs: 3D (or 4D with one frame) `int16` and
//! `float32` payloads, little- or big-endian on read, little-endian on write.
//! The qform/sform block is carried through as opaque bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Orientation, Volume3D};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const VOX_OFFSET: usize = 352;

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_ORIENTATION: usize = 252;
const OFF_MAGIC: usize = 344;

#[derive(Clone, Copy)]
struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[off..off + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.take(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.take(off))
    }
}

/// Decodes a NIfTI-1 byte buffer. `path` is only used in error messages.
pub fn decode_nifti(bytes: &[u8], path: &Path) -> Result<Volume3D> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::parse(
            "sizeof_hdr",
            format!("file has {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => {
            return Err(Error::parse(
                "sizeof_hdr",
                format!("expected 348, found {le}"),
            ))
        }
    };
    let r = Reader { bytes, big_endian };

    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != b"n+1\0" {
        return Err(Error::parse(
            "magic",
            format!(
                "expected single-file \"n+1\", found {:?}",
                String::from_utf8_lossy(&bytes[OFF_MAGIC..OFF_MAGIC + 3])
            ),
        ));
    }

    let dim: Vec<i16> = (0..8).map(|i| r.i16(OFF_DIM + 2 * i)).collect();
    match dim[0] {
        3 => {}
        4 if dim[4] == 1 => {}
        n => {
            return Err(Error::parse(
                "dim",
                format!("need a 3D volume (dim[0]=3, or 4 with one frame), found dim[0]={n}, dim[4]={}", dim[4]),
            ))
        }
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::parse("dim", format!("non-positive extent in {:?}", &dim[1..4])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = r.i16(OFF_DATATYPE);
    let bytes_per_voxel = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::Unsupported(format!(
                "NIfTI datatype code {other} (only int16 and float32 are read)"
            )))
        }
    };

    let pixdim: Vec<f64> = (1..4).map(|i| f64::from(r.f32(OFF_PIXDIM + 4 * i))).collect();
    if pixdim.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(Error::parse("pixdim", format!("spacing must be > 0, found {pixdim:?}")));
    }
    let spacing = [pixdim[0], pixdim[1], pixdim[2]];

    let vox_offset = r.f32(OFF_VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::parse("vox_offset", format!("invalid offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;

    let n = dims[0] * dims[1] * dims[2];
    let expected = (vox_offset + n * bytes_per_voxel) as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }

    let slope = f64::from(r.f32(OFF_SCL_SLOPE));
    let inter = f64::from(r.f32(OFF_SCL_INTER));
    let rescale = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);

    let payload = Reader {
        bytes: &bytes[vox_offset..],
        big_endian,
    };
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let raw = match datatype {
            DT_INT16 => f64::from(payload.i16(2 * i)),
            _ => f64::from(payload.f32(4 * i)),
        };
        let v = if rescale { slope * raw + inter } else { raw };
        if !v.is_finite() {
            return Err(Error::Corrupt(format!(
                "{}: non-finite intensity at voxel {i}",
                path.display()
            )));
        }
        data.push(v);
    }

    let mut orientation = [0u8; 76];
    orientation.copy_from_slice(&bytes[OFF_ORIENTATION..OFF_ORIENTATION + 76]);
    // The opaque block is only meaningful in the byte order we write.
    let orientation = (!big_endian).then_some(Orientation(orientation));

    Ok(Volume3D::new(dims, spacing, data)?.with_orientation(orientation))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&bytes, path)
}

/// Encodes a volume as little-endian float32 NIfTI-1 with `vox_offset` 352.
pub fn encode_nifti(vol: &Volume3D) -> Result<Vec<u8>> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::contract(format!("dims {dims:?} exceed the NIfTI-1 limit")));
    }
    let mut h = vec![0u8; VOX_OFFSET + 4 * vol.len()];
    let put = |h: &mut [u8], off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);

    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut h, OFF_DIM + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, OFF_DATATYPE, &DT_FLOAT32.to_le_bytes());
    put(&mut h, OFF_BITPIX, &32i16.to_le_bytes());
    let sp = vol.spacing();
    let pixdim: [f32; 8] = [1.0, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, OFF_PIXDIM + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, OFF_VOX_OFFSET, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, OFF_SCL_SLOPE, &1.0f32.to_le_bytes());
    put(&mut h, OFF_SCL_INTER, &0.0f32.to_le_bytes());
    // mm + s
    h[OFF_XYZT_UNITS] = 2 | 8;
    if let Some(o) = vol.orientation() {
        put(&mut h, OFF_ORIENTATION, &o.0);
    }
    put(&mut h, OFF_MAGIC, b"n+1\0");

    for (i, v) in vol.data().iter().enumerate() {
        put(&mut h, VOX_OFFSET + 4 * i, &(*v as f32).to_le_bytes());
    }
    Ok(h)
}

pub fn write_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(vol)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
