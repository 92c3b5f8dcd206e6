//! Binary (P5) 8-bit PGM slice dumps for visual inspection.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Encodes z-slice `k`, mapping the slice's own [min, max] onto [0, 255].
pub fn encode_slice(vol: &Volume3D, k: usize) -> Result<Vec<u8>> {
    let [nx, ny, nz] = vol.dims();
    if k >= nz {
        return Err(Error::validation("cli.dump_slice", format!("slice z={k} outside 0..{nz}")));
    }
    let slice = vol.slice_z(k);
    let lo = slice.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    // Rows top to bottom = descending y.
    for j in (0..ny).rev() {
        for i in 0..nx {
            let v = (slice[i + nx * j] - lo) / span;
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn write_slice(vol: &Volume3D, k: usize, path: &Path) -> Result<()> {
    let bytes = encode_slice(vol, k)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
