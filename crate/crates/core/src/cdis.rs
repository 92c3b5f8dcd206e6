//! Correlated diffusion signal: geometric mixing of the stack channels under
//! per-channel exponents, followed by percentile calibration to [0, 1].
//!
//! The mix is `raw(x) = prod_i max(S_i(x), eps)^rho_i`, evaluated in log
//! space. Each factor is monotone in its channel, and scaling every exponent
//! by the same positive factor raises `raw` to a power, which leaves the
//! voxel ordering (and therefore any rank-based score) unchanged.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DwiStack, Provenance, Volume3D};

pub const DEFAULT_BOUNDS: (f64, f64) = (0.0, 4.0);
pub const DEFAULT_P_LO: f64 = 1.0;
pub const DEFAULT_P_HI: f64 = 99.0;
pub const DEFAULT_EPS_FRACTION: f64 = 1e-6;

/// One entry of a coefficient file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub b: f64,
    pub provenance: Provenance,
    pub rho: f64,
}

/// Per-channel mixing exponents, tied to the b-values they were tuned for.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub rho: Vec<f64>,
    pub channel_bvalues: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub bounds: (f64, f64),
}

impl CoefficientVector {
    /// Exponents laid out over the channels of `stack`.
    pub fn for_stack(stack: &DwiStack, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != stack.len() {
            return Err(Error::contract(format!(
                "{} coefficients for {} channels",
                rho.len(),
                stack.len()
            )));
        }
        Ok(Self {
            rho,
            channel_bvalues: stack.bvalues(),
            provenance: stack.channels().iter().map(|c| c.provenance).collect(),
            bounds: DEFAULT_BOUNDS,
        })
    }

    pub fn ones(stack: &DwiStack) -> Self {
        Self::for_stack(stack, vec![1.0; stack.len()]).expect("length matches")
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn with_bounds(mut self, bounds: (f64, f64)) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn within_bounds(&self) -> bool {
        self.rho.iter().all(|r| (self.bounds.0..=self.bounds.1).contains(r))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rho: self.rho.iter().map(|r| r * factor).collect(),
            ..self.clone()
        }
    }

    /// Rescales so that `max |rho_i| = 1`; an all-zero vector is returned as is.
    pub fn normalized(&self) -> Self {
        let m = self.rho.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        if m > 0.0 {
            self.scaled(1.0 / m)
        } else {
            self.clone()
        }
    }

    pub fn entries(&self) -> Vec<CoefficientEntry> {
        self.rho
            .iter()
            .zip(&self.channel_bvalues)
            .zip(&self.provenance)
            .map(|((&rho, &b), &provenance)| CoefficientEntry { b, provenance, rho })
            .collect()
    }

    pub fn from_entries(entries: &[CoefficientEntry]) -> Self {
        Self {
            rho: entries.iter().map(|e| e.rho).collect(),
            channel_bvalues: entries.iter().map(|e| e.b).collect(),
            provenance: entries.iter().map(|e| e.provenance).collect(),
            bounds: DEFAULT_BOUNDS,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let entries: Vec<CoefficientEntry> =
            serde_json::from_str(s).map_err(|e| Error::parse("coefficients", e.to_string()))?;
        Ok(Self::from_entries(&entries))
    }

    fn check_stack(&self, stack: &DwiStack) -> Result<()> {
        if self.rho.len() != stack.len() {
            return Err(Error::contract(format!(
                "{} coefficients for a {}-channel stack",
                self.rho.len(),
                stack.len()
            )));
        }
        if self.channel_bvalues != stack.bvalues() {
            return Err(Error::contract(format!(
                "coefficients target b-values {:?}, stack has {:?}",
                self.channel_bvalues,
                stack.bvalues()
            )));
        }
        Ok(())
    }
}

pub fn read_coefficients(path: impl AsRef<Path>) -> Result<CoefficientVector> {
    let path = path.as_ref();
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CoefficientVector::from_json(&s)
}

pub fn write_coefficients(c: &CoefficientVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, c.to_json() + "\n").map_err(|e| Error::io(path, e))
}

/// `1e-6 * max signal` of the stack, kept strictly positive.
pub fn default_eps(stack: &DwiStack) -> f64 {
    (DEFAULT_EPS_FRACTION * stack.max_signal()).max(f64::MIN_POSITIVE)
}

/// Uncalibrated geometric mix `exp(sum_i rho_i * ln max(S_i, eps))`.
pub fn mix(stack: &DwiStack, coeffs: &CoefficientVector, eps: f64) -> Result<Volume3D> {
    coeffs.check_stack(stack)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::contract(format!("eps must be > 0, got {eps}")));
    }
    let chans: Vec<(&[f64], f64)> = stack
        .channels()
        .iter()
        .zip(&coeffs.rho)
        .filter(|(_, &r)| r != 0.0)
        .map(|(c, &r)| (c.volume.data(), r))
        .collect();
    let nvox = stack.channels()[0].volume.len();
    let raw: Vec<f64> = (0..nvox)
        .into_par_iter()
        .map(|v| chans.iter().map(|(d, r)| r * d[v].max(eps).ln()).sum::<f64>().exp())
        .collect();
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("numerical.mix.overflow", "mixed signal overflowed f64"));
    }
    stack.channels()[0].volume.with_data(raw)
}

/// Percentile of already sorted data, linearly interpolating between order
/// statistics at rank `(n - 1) * p / 100` (the "linear" rule of common
/// numerical libraries).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let h = (sorted.len() - 1) as f64 * (p / 100.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn percentiles(data: &[f64], ps: &[f64]) -> Vec<f64> {
    let mut sorted = data.to_vec();
    sorted.par_sort_unstable_by(f64::total_cmp);
    ps.iter().map(|&p| percentile_sorted(&sorted, p)).collect()
}

/// What [`calibrate`] actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub p_lo: f64,
    pub p_hi: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    /// The two percentiles coincided, so the output is all zeros.
    pub degenerate: bool,
}

/// Calibrated correlated diffusion signal in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CdisVolume {
    pub signal: Volume3D,
    pub coefficients: CoefficientVector,
    pub calibration: Calibration,
}

pub(crate) fn check_percentiles(p_lo: f64, p_hi: f64) -> Result<()> {
    if !(0.0 <= p_lo && p_lo < p_hi && p_hi <= 100.0) {
        return Err(Error::validation(
            "config.calibration.percentiles",
            format!("need 0 <= p_lo < p_hi <= 100, got p_lo={p_lo}, p_hi={p_hi}"),
        ));
    }
    Ok(())
}

/// Maps `[v_lo, v_hi]` (the `p_lo`/`p_hi` percentiles of `raw`) linearly
/// onto [0, 1] and clamps.
pub fn calibrate(raw: &Volume3D, p_lo: f64, p_hi: f64) -> Result<(Volume3D, Calibration)> {
    check_percentiles(p_lo, p_hi)?;
    let v = percentiles(raw.data(), &[p_lo, p_hi]);
    let (v_lo, v_hi) = (v[0], v[1]);
    let degenerate = !(v_hi > v_lo);
    let data: Vec<f64> = if degenerate {
        vec![0.0; raw.len()]
    } else {
        let span = v_hi - v_lo;
        raw.data()
            .par_iter()
            .map(|&x| ((x - v_lo) / span).clamp(0.0, 1.0))
            .collect()
    };
    Ok((
        raw.with_data(data)?,
        Calibration {
            p_lo,
            p_hi,
            v_lo,
            v_hi,
            degenerate,
        },
    ))
}

/// `calibrate(mix(stack, coeffs, eps), p_lo, p_hi)`.
pub fn cdis(stack: &DwiStack, coeffs: &CoefficientVector, eps: f64, p_lo: f64, p_hi: f64) -> Result<CdisVolume> {
    check_percentiles(p_lo, p_hi)?;
    let raw = mix(stack, coeffs, eps)?;
    let (signal, calibration) = calibrate(&raw, p_lo, p_hi)?;
    Ok(CdisVolume {
        signal,
        coefficients: coeffs.clone(),
        calibration,
    })
}

/// Mixing and calibration settings shared by every patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdisParams {
    /// Absolute eps; `None` uses `1e-6 * max signal` per stack.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default = "default_p_lo")]
    pub p_lo: f64,
    #[serde(default = "default_p_hi")]
    pub p_hi: f64,
}

fn default_p_lo() -> f64 {
    DEFAULT_P_LO
}

fn default_p_hi() -> f64 {
    DEFAULT_P_HI
}

impl Default for CdisParams {
    fn default() -> Self {
        Self {
            eps: None,
            p_lo: DEFAULT_P_LO,
            p_hi: DEFAULT_P_HI,
        }
    }
}

impl CdisParams {
    pub fn validate(&self) -> Result<()> {
        check_percentiles(self.p_lo, self.p_hi)?;
        if let Some(e) = self.eps {
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::validation("config.cdis.eps", format!("eps must be > 0, got {e}")));
            }
        }
        Ok(())
    }

    pub fn eps_for(&self, stack: &DwiStack) -> f64 {
        self.eps.unwrap_or_else(|| default_eps(stack))
    }

    pub fn apply(&self, stack: &DwiStack, coeffs: &CoefficientVector) -> Result<CdisVolume> {
        cdis(stack, coeffs, self.eps_for(stack), self.p_lo, self.p_hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Channel;

    fn stack(values: &[&[f64]]) -> DwiStack {
        let n = values[0].len();
        let chans = values
            .iter()
            .enumerate()
            .map(|(i, v)| Channel {
                bvalue: 100.0 * i as f64,
                provenance: Provenance::Native,
                volume: Volume3D::new([n, 1, 1], [1.0; 3], v.to_vec()).unwrap(),
            })
            .collect();
        DwiStack::new("p", chans).unwrap()
    }

    #[test]
    fn zero_exponents_give_ones() {
        let s = stack(&[&[2.0, 5.0], &[3.0, 0.0]]);
        let raw = mix(&s, &CoefficientVector::for_stack(&s, vec![0.0, 0.0]).unwrap(), 1e-6).unwrap();
        assert_eq!(raw.data(), &[1.0, 1.0]);
    }

    #[test]
    fn one_hot_selects_channel() {
        let s = stack(&[&[2.0, 5.0, 0.0], &[3.0, 0.5, 7.0]]);
        let raw = mix(&s, &CoefficientVector::for_stack(&s, vec![0.0, 1.0]).unwrap(), 1e-6).unwrap();
        for (a, b) in raw.data().iter().zip([3.0, 0.5, 7.0]) {
            assert!((a / b - 1.0).abs() < 1e-14);
        }
        let raw = mix(&s, &CoefficientVector::for_stack(&s, vec![1.0, 0.0]).unwrap(), 1e-3).unwrap();
        assert!((raw.data()[2] - 1e-3).abs() < 1e-17);
    }

    #[test]
    fn product_of_two_channels() {
        let s = stack(&[&[2.0], &[3.0]]);
        let raw = mix(&s, &CoefficientVector::ones(&s), 1e-6).unwrap();
        assert!((raw.data()[0] - 6.0).abs() < 1e-13);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let s = stack(&[&[2.0], &[3.0]]);
        let mut c = CoefficientVector::ones(&s);
        c.rho.pop();
        c.channel_bvalues.pop();
        assert!(matches!(mix(&s, &c, 1e-6), Err(Error::Contract(_))));
    }

    #[test]
    fn ramp_calibrates_to_unit_ramp() {
        let raw = Volume3D::new([101, 1, 1], [1.0; 3], (0..=100).map(f64::from).collect()).unwrap();
        let (out, cal) = calibrate(&raw, 0.0, 100.0).unwrap();
        assert_eq!((cal.v_lo, cal.v_hi, cal.degenerate), (0.0, 100.0, false));
        for (i, v) in out.data().iter().enumerate() {
            assert!((v - i as f64 / 100.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let raw = Volume3D::filled([4, 1, 1], [1.0; 3], 3.0).unwrap();
        let (out, cal) = calibrate(&raw, 1.0, 99.0).unwrap();
        assert!(cal.degenerate);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn percentile_order_enforced() {
        let raw = Volume3D::filled([4, 1, 1], [1.0; 3], 3.0).unwrap();
        let err = calibrate(&raw, 50.0, 50.0).unwrap_err();
        assert_eq!(err.tag(), "config.calibration.percentiles");
        assert!(calibrate(&raw, -1.0, 50.0).is_err());
        assert!(calibrate(&raw, 1.0, 101.0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 0.0), 1.0);
        assert_eq!(percentile_sorted(&v, 100.0), 4.0);
        assert!((percentile_sorted(&v, 50.0) - 2.5).abs() < 1e-15);
        assert!((percentile_sorted(&v, 10.0) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn normalization_and_json() {
        let s = stack(&[&[2.0], &[3.0], &[4.0]]);
        let c = CoefficientVector::for_stack(&s, vec![0.5, 2.0, 1.0]).unwrap();
        assert_eq!(c.normalized().rho, vec![0.25, 1.0, 0.5]);
        let back = CoefficientVector::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let json: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(json[1]["b"], 100.0);
        assert_eq!(json[1]["provenance"], "native");
        assert_eq!(json[1]["rho"], 2.0);
    }
}
