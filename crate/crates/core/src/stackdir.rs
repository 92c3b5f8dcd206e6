//! On-disk layout of one patient's acquisition: a directory of NIfTI
//! channels described by `stack.json`, with an optional `mask.nii`.
//!
//! ```json
//! {"patient_id": "P001",
//!  "channels": [{"b": 0.0, "provenance": "native", "file": "dwi_b0.nii"}, ...],
//!  "mask": "mask.nii"}
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::dwi_channel_name;
use crate::nifti::{read_nifti, write_nifti};
use crate::volume::{Channel, DwiStack, MaskVolume, Provenance};

pub const STACK_INDEX: &str = "stack.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChannelEntry {
    b: f64,
    provenance: Provenance,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackIndex {
    patient_id: String,
    channels: Vec<ChannelEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

/// Writes the stack (and mask) into `dir`, returning the files written.
pub fn write_stack_dir(stack: &DwiStack, mask: Option<&MaskVolume>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut channels = Vec::with_capacity(stack.len());
    for c in stack.channels() {
        let file = format!("{}.nii", dwi_channel_name(c.bvalue));
        let path = dir.join(&file);
        write_nifti(&c.volume, &path)?;
        written.push(path);
        channels.push(ChannelEntry {
            b: c.bvalue,
            provenance: c.provenance,
            file,
        });
    }
    let mask_file = match mask {
        Some(m) => {
            let path = dir.join("mask.nii");
            write_nifti(&m.to_volume(), &path)?;
            written.push(path);
            Some("mask.nii".to_string())
        }
        None => None,
    };
    let index = StackIndex {
        patient_id: stack.patient_id().to_string(),
        channels,
        mask: mask_file,
    };
    let path = dir.join(STACK_INDEX);
    let text = serde_json::to_string_pretty(&index).expect("plain data serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// A loaded stack directory.
#[derive(Debug, Clone)]
pub struct LoadedStack {
    pub stack: DwiStack,
    pub mask: Option<MaskVolume>,
    /// Every file read, in read order.
    pub files: Vec<PathBuf>,
}

pub fn read_stack_dir(dir: &Path) -> Result<LoadedStack> {
    let index_path = dir.join(STACK_INDEX);
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: StackIndex =
        serde_json::from_str(&text).map_err(|e| Error::parse("stack.json", format!("{}: {e}", index_path.display())))?;
    let mut files = vec![index_path];
    let mut channels = Vec::with_capacity(index.channels.len());
    for entry in &index.channels {
        let path = dir.join(&entry.file);
        channels.push(Channel {
            bvalue: entry.b,
            provenance: entry.provenance,
            volume: read_nifti(&path)?,
        });
        files.push(path);
    }
    let stack = DwiStack::new(index.patient_id, channels)?;
    stack.check_acquisition()?;
    let mask = match &index.mask {
        Some(f) => {
            let path = dir.join(f);
            let m = MaskVolume::from_volume(&read_nifti(&path)?)?;
            if m.dims() != stack.dims() {
                return Err(Error::validation(
                    "stack.mask",
                    format!("{}: mask dims {:?} differ from stack dims {:?}", path.display(), m.dims(), stack.dims()),
                ));
            }
            files.push(path);
            Some(m)
        }
        None => None,
    };
    Ok(LoadedStack { stack, mask, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_patient, PhantomSpec};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = generate_patient(&PhantomSpec { noise_sigma: 0.05, ..Default::default() }, "P001").unwrap();
        write_stack_dir(&p.stack, Some(&p.mask), dir.path()).unwrap();
        let back = read_stack_dir(dir.path()).unwrap();
        assert_eq!(back.mask.as_ref(), Some(&p.mask));
        assert_eq!(back.stack.bvalues(), p.stack.bvalues());
        for (a, b) in back.stack.channels().iter().zip(p.stack.channels()) {
            for (x, y) in a.volume.data().iter().zip(b.volume.data()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
    }

    #[test]
    fn missing_index_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_stack_dir(dir.path()), Err(Error::Io { .. })));
    }
}
