//! Fusion of the calibrated CDI signal with DWI channels, resampling onto
//! the standard grid, and cube export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cdis::{calibrate, CdisVolume, DEFAULT_P_HI, DEFAULT_P_LO};
use crate::cube::{write_cube, StandardCube, STANDARD_DIMS};
use crate::error::{Error, Result};
use crate::manifest::{Grade, ManifestRow};
use crate::volume::{DwiStack, MaskVolume, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseMode {
    /// Channel concatenation: `[cdis, dwi...]`.
    #[default]
    Stack,
    /// One voxelwise product `cdis * calibrated(dwi)`.
    Product,
}

impl std::str::FromStr for FuseMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "stack" => Ok(FuseMode::Stack),
            "product" => Ok(FuseMode::Product),
            other => Err(format!("unknown fuse mode {other:?} (expected stack or product)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionOptions {
    pub mode: FuseMode,
    /// DWI b-values to fuse; empty selects the highest native b-value.
    pub dwi_bvalues: Vec<f64>,
    /// Product mode: also emit the `cdis` and DWI inputs as extra channels.
    pub keep_inputs: bool,
    /// Percentiles used to bring DWI into [0, 1] in product mode.
    pub p_lo: f64,
    pub p_hi: f64,
    pub target_dims: [usize; 3],
    /// Also write the resampled mask as `<id>_mask.cube`.
    pub export_mask: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            mode: FuseMode::Stack,
            dwi_bvalues: Vec::new(),
            keep_inputs: false,
            p_lo: DEFAULT_P_LO,
            p_hi: DEFAULT_P_HI,
            target_dims: STANDARD_DIMS,
            export_mask: false,
        }
    }
}

impl FusionOptions {
    /// Channels per cube under these options.
    pub fn n_channels(&self) -> usize {
        let n_dwi = self.dwi_bvalues.len().max(1);
        match self.mode {
            FuseMode::Stack => 1 + n_dwi,
            FuseMode::Product if self.keep_inputs => 3,
            FuseMode::Product => 1,
        }
    }
}

pub fn dwi_channel_name(b: f64) -> String {
    if b.fract() == 0.0 {
        format!("dwi_b{}", b as i64)
    } else {
        format!("dwi_b{b}")
    }
}

/// Fuses `cdis` with the given DWI volumes.
pub fn fuse(
    cdis: &CdisVolume,
    dwi: &[(String, Volume3D)],
    mode: FuseMode,
    keep_inputs: bool,
    dwi_percentiles: (f64, f64),
) -> Result<Vec<(String, Volume3D)>> {
    let dims = cdis.signal.dims();
    if let Some((n, v)) = dwi.iter().find(|(_, v)| v.dims() != dims) {
        return Err(Error::contract(format!("DWI channel {n} has dims {:?}, cdis has {dims:?}", v.dims())));
    }
    match mode {
        FuseMode::Stack => {
            let mut out = vec![("cdis".to_string(), cdis.signal.clone())];
            out.extend(dwi.iter().cloned());
            Ok(out)
        }
        FuseMode::Product => {
            let [(name, vol)] = dwi else {
                return Err(Error::validation(
                    "config.fusion.dwi_bvalues",
                    format!("product fusion takes exactly one DWI channel, got {}", dwi.len()),
                ));
            };
            let (norm, _) = calibrate(vol, dwi_percentiles.0, dwi_percentiles.1)?;
            let product = cdis
                .signal
                .data()
                .iter()
                .zip(norm.data())
                .map(|(c, d)| c * d)
                .collect();
            let mut out = vec![(format!("cdis_x_{name}"), cdis.signal.with_data(product)?)];
            if keep_inputs {
                out.push(("cdis".to_string(), cdis.signal.clone()));
                out.push((name.clone(), vol.clone()));
            }
            Ok(out)
        }
    }
}

/// Per-axis sample positions under the align-corners convention: target
/// index `t` maps to source coordinate `t * (n_src - 1) / (n_tgt - 1)`.
fn axis_positions(n_src: usize, n_tgt: usize) -> Vec<(usize, f64)> {
    let scale = (n_src - 1) as f64 / (n_tgt - 1) as f64;
    (0..n_tgt)
        .map(|t| {
            let x = t as f64 * scale;
            let i0 = (x.floor() as usize).min(n_src - 2);
            (i0, x - i0 as f64)
        })
        .collect()
}

fn check_resample(src: [usize; 3], target: [usize; 3]) -> Result<()> {
    if src.iter().chain(&target).any(|&d| d < 2) {
        return Err(Error::validation(
            "resample.dims",
            format!("resampling needs at least 2 voxels per axis (source {src:?}, target {target:?})"),
        ));
    }
    Ok(())
}

fn resampled_spacing(spacing: [f64; 3], src: [usize; 3], target: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| spacing[a] * (src[a] - 1) as f64 / (target[a] - 1) as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Trilinear resampling onto `target` dims.
pub fn resample_volume(vol: &Volume3D, target: [usize; 3]) -> Result<Volume3D> {
    let src = vol.dims();
    check_resample(src, target)?;
    if src == target {
        return Ok(vol.clone());
    }
    let [px, py, pz] = [0, 1, 2].map(|a| axis_positions(src[a], target[a]));
    let mut data = Vec::with_capacity(target.iter().product());
    for &(k, tz) in &pz {
        for &(j, ty) in &py {
            for &(i, tx) in &px {
                let at = |di: usize, dj: usize, dk: usize| vol.get(i + di, j + dj, k + dk);
                let plane = |dk: usize| {
                    lerp(
                        lerp(at(0, 0, dk), at(1, 0, dk), tx),
                        lerp(at(0, 1, dk), at(1, 1, dk), tx),
                        ty,
                    )
                };
                data.push(lerp(plane(0), plane(1), tz));
            }
        }
    }
    Ok(Volume3D::new(target, resampled_spacing(vol.spacing(), src, target), data)?
        .with_orientation(vol.orientation().cloned()))
}

/// Nearest-neighbour resampling onto `target` dims.
pub fn resample_mask(mask: &MaskVolume, target: [usize; 3]) -> Result<MaskVolume> {
    let src = mask.dims();
    check_resample(src, target)?;
    if src == target {
        return Ok(mask.clone());
    }
    let near = |a: usize| -> Vec<usize> {
        axis_positions(src[a], target[a])
            .into_iter()
            .map(|(i0, t)| if t >= 0.5 { i0 + 1 } else { i0 })
            .collect()
    };
    let [nx, ny, nz] = [near(0), near(1), near(2)];
    let mut data = Vec::with_capacity(target.iter().product());
    for &k in &nz {
        for &j in &ny {
            for &i in &nx {
                data.push(mask.data()[i + src[0] * (j + src[1] * k)]);
            }
        }
    }
    MaskVolume::new(target, resampled_spacing(mask.spacing(), src, target), data)
}

/// DWI channels selected for fusion, named `dwi_b<b>`.
pub fn select_dwi(stack: &DwiStack, bvalues: &[f64]) -> Result<Vec<(String, Volume3D)>> {
    let wanted: Vec<f64> = if bvalues.is_empty() {
        let top = stack
            .native()
            .map(|c| c.bvalue)
            .fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::validation("config.fusion.dwi_bvalues", "stack has no native channel"));
        }
        vec![top]
    } else {
        bvalues.to_vec()
    };
    wanted
        .iter()
        .map(|&b| {
            stack
                .channel_at(b)
                .map(|c| (dwi_channel_name(b), c.volume.clone()))
                .ok_or_else(|| {
                    Error::validation(
                        "config.fusion.dwi_bvalues",
                        format!("stack {} has no channel at b={b}", stack.patient_id()),
                    )
                })
        })
        .collect()
}

/// Fused, resampled cube for one patient.
pub fn build_cube(cdis: &CdisVolume, stack: &DwiStack, opts: &FusionOptions) -> Result<StandardCube> {
    let dwi = select_dwi(stack, &opts.dwi_bvalues)?;
    let fused = fuse(cdis, &dwi, opts.mode, opts.keep_inputs, (opts.p_lo, opts.p_hi))?;
    let channels = fused
        .into_iter()
        .map(|(name, vol)| Ok((name, resample_volume(&vol, opts.target_dims)?)))
        .collect::<Result<Vec<_>>>()?;
    StandardCube::new(stack.patient_id(), channels)
}

/// Writes `<out_dir>/<id>.cube` (and the mask cube if requested) and
/// returns the manifest row pointing at it.
pub fn export_patient(
    cdis: &CdisVolume,
    stack: &DwiStack,
    mask: &MaskVolume,
    grade: Grade,
    opts: &FusionOptions,
    out_dir: &Path,
) -> Result<ManifestRow> {
    let id = stack.patient_id();
    let cube = build_cube(cdis, stack, opts)?;
    let file = format!("{id}.cube");
    write_cube(&cube, out_dir.join(&file))?;
    if opts.export_mask {
        let m = resample_mask(mask, opts.target_dims)?;
        let mc = StandardCube::new(id, vec![("mask".into(), m.to_volume())])?;
        write_cube(&mc, out_dir.join(format!("{id}_mask.cube")))?;
    }
    Ok(ManifestRow::new(id, grade, file))
}
