//! Multi-channel raw cube format used to hand volumes to the grade predictor.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CDCUBE01"                      8 bytes
//! nchan, nx, ny, nz               u32 each
//! sx, sy, sz                      f32 each
//! payload                         nchan*nx*ny*nz f32, channel-major, x-fastest
//! ```
//!
//! Channel names are not stored in the file; [`read_cube`] names them
//! `ch0`, `ch1`, ... and callers that know the layout rename them.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

pub const CUBE_MAGIC: &[u8; 8] = b"CDCUBE01";
pub const CUBE_HEADER_LEN: usize = 8 + 4 * 4 + 3 * 4;
/// Dimensions every exported cube is standardized to.
pub const STANDARD_DIMS: [usize; 3] = [224, 224, 25];

/// Named multi-channel volume on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardCube {
    pub patient_id: String,
    names: Vec<String>,
    dims: [usize; 3],
    spacing: [f64; 3],
    channels: Vec<Vec<f64>>,
}

impl StandardCube {
    pub fn new(patient_id: impl Into<String>, channels: Vec<(String, Volume3D)>) -> Result<Self> {
        let Some((_, first)) = channels.first() else {
            return Err(Error::validation("cube.channels", "a cube needs at least one channel"));
        };
        let (dims, spacing) = (first.dims(), first.spacing());
        let mut names: Vec<String> = Vec::with_capacity(channels.len());
        let mut data = Vec::with_capacity(channels.len());
        for (name, vol) in channels {
            if names.contains(&name) {
                return Err(Error::validation("cube.channels", format!("duplicate channel name {name:?}")));
            }
            if !vol.same_grid(dims, spacing) {
                return Err(Error::validation(
                    "cube.grid",
                    format!("channel {name:?} has dims {:?}, expected {dims:?}", vol.dims()),
                ));
            }
            names.push(name);
            data.push(vol.into_data());
        }
        Ok(Self {
            patient_id: patient_id.into(),
            names,
            dims,
            spacing,
            channels: data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_standard(&self) -> bool {
        self.dims == STANDARD_DIMS
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.channels[i].as_slice())
    }

    pub fn channel_data(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn channel_volume(&self, index: usize) -> Volume3D {
        Volume3D::new(self.dims, self.spacing, self.channels[index].clone())
            .expect("cube channels are validated on construction")
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.channels.len() {
            return Err(Error::validation(
                "cube.channels",
                format!("{} names for {} channels", names.len(), self.channels.len()),
            ));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::validation("cube.channels", format!("duplicate channel name {n:?}")));
            }
        }
        self.names = names;
        Ok(self)
    }
}

pub fn encode_cube(cube: &StandardCube) -> Vec<u8> {
    let n: usize = cube.dims.iter().product();
    let mut out = Vec::with_capacity(CUBE_HEADER_LEN + 4 * n * cube.n_channels());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&(cube.n_channels() as u32).to_le_bytes());
    for d in cube.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in cube.spacing {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for ch in &cube.channels {
        for v in ch {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_cube(bytes: &[u8], patient_id: &str) -> Result<StandardCube> {
    if bytes.len() < 8 || &bytes[..8] != CUBE_MAGIC {
        return Err(Error::parse("magic", "missing CDCUBE01 magic"));
    }
    if bytes.len() < CUBE_HEADER_LEN {
        return Err(Error::parse("header", format!("cube header needs {CUBE_HEADER_LEN} bytes, found {}", bytes.len())));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let nchan = u32_at(8);
    let dims = [u32_at(12), u32_at(16), u32_at(20)];
    let spacing = [f32_at(24), f32_at(28), f32_at(32)].map(f64::from);
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = n
        .and_then(|n| n.checked_mul(nchan))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Corrupt("cube header dimensions overflow".into()))?;
    let payload = &bytes[CUBE_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Corrupt(format!(
            "header declares {nchan} x {dims:?} ({expected} payload bytes) but file carries {}",
            payload.len()
        )));
    }
    let n = n.unwrap();
    let mut channels = Vec::with_capacity(nchan);
    for c in 0..nchan {
        let data: Vec<f64> = payload[4 * n * c..4 * n * (c + 1)]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        channels.push((format!("ch{c}"), Volume3D::new(dims, spacing, data)?));
    }
    StandardCube::new(patient_id, channels)
}

pub fn write_cube(cube: &StandardCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cube(cube)).map_err(|e| Error::io(path, e))
}

/// Reads a cube; the patient id is taken from the file stem.
pub fn read_cube(path: impl AsRef<Path>) -> Result<StandardCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_cube(&bytes, &id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: [usize; 3], nchan: usize) -> StandardCube {
        let chans = (0..nchan)
            .map(|c| {
                let v = Volume3D::from_fn(dims, [0.5, 0.75, 2.0], |i, j, k| (i + j * 3 + k * 7 + c) as f64 * 0.25)
                    .unwrap();
                (format!("ch{c}"), v)
            })
            .collect();
        StandardCube::new("P001", chans).unwrap()
    }

    #[test]
    fn standard_two_channel_round_trip() {
        let c = cube(STANDARD_DIMS, 2);
        let bytes = encode_cube(&c);
        assert_eq!(bytes.len(), CUBE_HEADER_LEN + 2 * 224 * 224 * 25 * 4);
        let back = decode_cube(&bytes, "P001").unwrap();
        assert_eq!(back, c);
        assert!(back.is_standard());
    }

    #[test]
    fn channel_count_mismatch_is_corruption() {
        let mut bytes = encode_cube(&cube([4, 3, 2], 2));
        bytes[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_cube(&bytes, "x"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn empty_file_is_magic_error() {
        let err = decode_cube(&[], "x").unwrap_err();
        assert!(matches!(err, Error::Parse { field: "magic", .. }));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let c = cube([2, 2, 2], 2);
        assert!(c.with_channel_names(vec!["a".into(), "a".into()]).is_err());
    }
}
