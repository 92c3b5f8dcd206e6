//! In-memory volume types shared by every stage of the pipeline.
//!
//! Intensities are held as `f64` in memory. Files on disk carry `float32`
//! payloads, so anything loaded from disk is exactly representable in `f32`
//! and survives a write/read cycle bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw NIfTI orientation block (`qform_code` through `srow_z`, 76 bytes).
///
/// Carried through a read/write cycle untouched and never interpreted.
#[derive(Clone, PartialEq, Eq)]
pub struct Orientation(pub [u8; 76]);

impl std::fmt::Debug for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Orientation(..)")
    }
}

fn check_grid(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::validation(
            "volume.dims",
            format!("dims must be positive, got {dims:?}"),
        ));
    }
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::validation(
            "volume.spacing",
            format!("spacing must be finite and > 0, got {spacing:?}"),
        ));
    }
    Ok(())
}

/// A scalar 3D volume with x-fastest linear layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    orientation: Option<Orientation>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_grid(dims, spacing)?;
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::validation(
                "volume.data",
                format!("data length {} does not match dims {dims:?}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                "volume.data",
                format!("non-finite intensity {} at voxel {i}", data[i]),
            ));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            orientation: None,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    /// Same grid as `self`, new intensities.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut v = Self::new(self.dims, self.spacing, data)?;
        v.orientation = self.orientation.clone();
        Ok(v)
    }

    pub fn with_orientation(mut self, orientation: Option<Orientation>) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn orientation(&self) -> Option<&Orientation> {
        self.orientation.as_ref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn same_grid(&self, dims: [usize; 3], spacing: [f64; 3]) -> bool {
        self.dims == dims && self.spacing == spacing
    }

    /// One z-slice as a row-major (y rows, x columns) buffer.
    pub fn slice_z(&self, k: usize) -> Vec<f64> {
        let n = self.dims[0] * self.dims[1];
        self.data[k * n..(k + 1) * n].to_vec()
    }
}

/// Binary volume with voxels in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    dims: [usize; 3],
    spacing: [u64; 3],
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing)?;
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::validation(
                "mask.data",
                format!("mask length {} does not match dims {dims:?}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::validation(
                "mask.data",
                format!("mask voxel {i} has value {} (expected 0 or 1)", data[i]),
            ));
        }
        Ok(Self {
            dims,
            spacing: spacing.map(f64::to_bits),
            data,
        })
    }

    /// Interprets a loaded volume as a mask; every voxel must be exactly 0 or 1.
    pub fn from_volume(vol: &Volume3D) -> Result<Self> {
        let mut data = Vec::with_capacity(vol.len());
        for (i, &v) in vol.data().iter().enumerate() {
            match v {
                0.0 => data.push(0),
                1.0 => data.push(1),
                other => {
                    return Err(Error::validation(
                        "mask.data",
                        format!("mask voxel {i} has value {other} (expected 0 or 1)"),
                    ))
                }
            }
        }
        Self::new(vol.dims(), vol.spacing(), data)
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(
            self.dims,
            self.spacing(),
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("mask grid already validated")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing.map(f64::from_bits)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of voxels set to 1.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let n = self.count();
        n > 0 && n < self.data.len()
    }
}

/// Whether a channel was measured or computed from a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Native,
    Synthetic,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Native => "native",
            Provenance::Synthetic => "synthetic",
        })
    }
}

/// One diffusion-weighted acquisition in a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub bvalue: f64,
    pub provenance: Provenance,
    pub volume: Volume3D,
}

/// Per-patient multi-b-value diffusion acquisition.
///
/// Channels are strictly ascending by b-value and share one grid. The
/// stronger acquisition requirement (native channels below and above
/// b = 200 s/mm²) is checked by [`DwiStack::check_acquisition`].
#[derive(Debug, Clone, PartialEq)]
pub struct DwiStack {
    patient_id: String,
    channels: Vec<Channel>,
}

/// b-value separating "low" from "high" diffusion weighting for acquisition checks.
pub const LOW_HIGH_SPLIT_B: f64 = 200.0;

impl DwiStack {
    pub fn new(patient_id: impl Into<String>, channels: Vec<Channel>) -> Result<Self> {
        let patient_id = patient_id.into();
        let first = channels
            .first()
            .ok_or_else(|| Error::validation("stack.channels", "stack has no channels"))?;
        if !(first.bvalue >= 0.0) || channels.iter().any(|c| !c.bvalue.is_finite()) {
            return Err(Error::validation(
                "stack.bvalues",
                "b-values must be finite and the first must be >= 0",
            ));
        }
        for w in channels.windows(2) {
            if w[1].bvalue <= w[0].bvalue {
                return Err(Error::validation(
                    "stack.bvalues",
                    format!(
                        "b-values must be strictly ascending ({} then {})",
                        w[0].bvalue, w[1].bvalue
                    ),
                ));
            }
        }
        let (dims, spacing) = (first.volume.dims(), first.volume.spacing());
        if let Some(c) = channels
            .iter()
            .find(|c| !c.volume.same_grid(dims, spacing))
        {
            return Err(Error::validation(
                "stack.grid",
                format!(
                    "channel b={} has grid {:?}/{:?}, expected {dims:?}/{spacing:?}",
                    c.bvalue,
                    c.volume.dims(),
                    c.volume.spacing()
                ),
            ));
        }
        Ok(Self {
            patient_id,
            channels,
        })
    }

    /// Checks the measured-protocol requirements: at least two channels, with
    /// native acquisitions on both sides of b = 200 s/mm².
    pub fn check_acquisition(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::validation(
                "stack.bvalues",
                "a stack needs at least two b-values",
            ));
        }
        let native = || {
            self.channels
                .iter()
                .filter(|c| c.provenance == Provenance::Native)
        };
        if !native().any(|c| c.bvalue < LOW_HIGH_SPLIT_B)
            || !native().any(|c| c.bvalue >= LOW_HIGH_SPLIT_B)
        {
            return Err(Error::validation(
                "stack.bvalues",
                "need a native channel with b < 200 and one with b >= 200",
            ));
        }
        Ok(())
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Channel> {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn bvalues(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.bvalue).collect()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].volume.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.channels[0].volume.spacing()
    }

    pub fn native(&self) -> impl Iterator<Item = &Channel> {
        self.channels
            .iter()
            .filter(|c| c.provenance == Provenance::Native)
    }

    pub fn channel_at(&self, b: f64) -> Option<&Channel> {
        self.channels.iter().find(|c| c.bvalue == b)
    }

    /// Largest intensity over all channels.
    pub fn max_signal(&self) -> f64 {
        self.channels
            .iter()
            .map(|c| c.volume.max())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}
