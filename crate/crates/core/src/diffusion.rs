//! Monoexponential diffusion model: voxelwise ADC fitting from native
//! channels and synthesis of signals at unmeasured b-values.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Channel, DwiStack, MaskVolume, Provenance, Volume3D};

/// Relative signal floor applied before taking logarithms.
pub const DEFAULT_FLOOR_FRACTION: f64 = 1e-6;

/// Fitted `S(b) = S0 * exp(-b * ADC)` parameters per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcMap {
    /// mm²/s
    pub adc: Volume3D,
    pub s0: Volume3D,
    pub fit_mask: MaskVolume,
}

/// `1e-6 * max signal` of the stack, kept strictly positive.
pub fn default_floor(stack: &DwiStack) -> f64 {
    (DEFAULT_FLOOR_FRACTION * stack.max_signal()).max(f64::MIN_POSITIVE)
}

/// Log-linear least-squares fit of `ln S` against `b` over the native channels.
///
/// Voxels whose native signals all sit at or below `floor` are left out of
/// the fit mask with `ADC = 0`, `S0 = floor`. A positive log-slope is clamped
/// to `ADC = 0`.
pub fn fit_adc(stack: &DwiStack, floor: f64) -> Result<AdcMap> {
    if !(floor > 0.0) || !floor.is_finite() {
        return Err(Error::contract(format!("signal floor must be > 0, got {floor}")));
    }
    let native: Vec<&Channel> = stack.native().collect();
    if native.len() < 2 {
        return Err(Error::contract(format!(
            "ADC fit needs at least 2 native channels, stack {} has {}",
            stack.patient_id(),
            native.len()
        )));
    }
    let bs: Vec<f64> = native.iter().map(|c| c.bvalue).collect();
    let n = bs.len() as f64;
    let b_mean = bs.iter().sum::<f64>() / n;
    let sxx: f64 = bs.iter().map(|b| (b - b_mean).powi(2)).sum();
    let data: Vec<&[f64]> = native.iter().map(|c| c.volume.data()).collect();

    let nvox = stack.channels()[0].volume.len();
    let fitted: Vec<(f64, f64, u8)> = (0..nvox)
        .into_par_iter()
        .map(|v| {
            let mut any_above = false;
            let (mut sum_y, mut sxy) = (0.0, 0.0);
            // sum_i (b_i - b_mean) = 0, so sxy needs no centering of y.
            for (ch, b) in data.iter().zip(&bs) {
                let s = ch[v];
                any_above |= s > floor;
                let y = s.max(floor).ln();
                sum_y += y;
                sxy += (b - b_mean) * y;
            }
            if !any_above {
                return (0.0, floor, 0);
            }
            let slope = sxy / sxx;
            let intercept = sum_y / n - slope * b_mean;
            ((-slope).max(0.0), intercept.exp(), 1)
        })
        .collect();

    let (dims, spacing) = (stack.dims(), stack.spacing());
    let mut adc = Vec::with_capacity(nvox);
    let mut s0 = Vec::with_capacity(nvox);
    let mut mask = Vec::with_capacity(nvox);
    for (a, s, m) in fitted {
        adc.push(a);
        s0.push(s);
        mask.push(m);
    }
    let orientation = stack.channels()[0].volume.orientation().cloned();
    Ok(AdcMap {
        adc: Volume3D::new(dims, spacing, adc)?.with_orientation(orientation.clone()),
        s0: Volume3D::new(dims, spacing, s0)
            .map_err(|_| Error::numerical("numerical.adc.s0", "S0 fit overflowed"))?
            .with_orientation(orientation),
        fit_mask: MaskVolume::new(dims, spacing, mask)?,
    })
}

/// `S0 * exp(-b * ADC)` inside the fit mask, 0 elsewhere.
pub fn synthesize_signal(adc_map: &AdcMap, b: f64) -> Result<Volume3D> {
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::contract(format!("b-value must be finite and >= 0, got {b}")));
    }
    let data = adc_map
        .adc
        .data()
        .par_iter()
        .zip(adc_map.s0.data().par_iter())
        .zip(adc_map.fit_mask.data().par_iter())
        .map(|((&adc, &s0), &m)| if m == 1 { s0 * (-b * adc).exp() } else { 0.0 })
        .collect();
    adc_map.adc.with_data(data)
}

/// Adds synthetic channels at `synthetic_bvalues` computed from `adc_map`.
///
/// The result is sorted ascending by b-value with each channel tagged.
pub fn extend_stack(stack: &DwiStack, adc_map: &AdcMap, synthetic_bvalues: &[f64]) -> Result<DwiStack> {
    if !adc_map.adc.same_grid(stack.dims(), stack.spacing()) {
        return Err(Error::contract("ADC map grid does not match the stack"));
    }
    let mut channels: Vec<Channel> = stack.channels().to_vec();
    for &b in synthetic_bvalues {
        if channels.iter().any(|c| c.bvalue == b) {
            return Err(Error::validation(
                "stack.duplicate_bvalue",
                format!("synthetic b-value {b} duplicates an existing channel"),
            ));
        }
        channels.push(Channel {
            bvalue: b,
            provenance: Provenance::Synthetic,
            volume: synthesize_signal(adc_map, b)?,
        });
    }
    channels.sort_by(|a, b| a.bvalue.total_cmp(&b.bvalue));
    DwiStack::new(stack.patient_id(), channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_of(bs: &[f64], signal: impl Fn(f64) -> f64) -> DwiStack {
        let chans = bs
            .iter()
            .map(|&b| Channel {
                bvalue: b,
                provenance: Provenance::Native,
                volume: Volume3D::filled([1, 1, 1], [1.0; 3], signal(b)).unwrap(),
            })
            .collect();
        DwiStack::new("p", chans).unwrap()
    }

    #[test]
    fn two_point_closed_form() {
        // ln(1000 / 301.1942) / 800 = 1.2 / 800 to ~1e-8
        let s = stack_of(&[0.0, 800.0], |b| if b == 0.0 { 1000.0 } else { 301.1942 });
        let m = fit_adc(&s, 1e-3).unwrap();
        let expected = (1000.0f64 / 301.1942).ln() / 800.0;
        assert!((m.adc.data()[0] - expected).abs() < 1e-15);
        assert!((m.adc.data()[0] - 1.5e-3).abs() < 1e-9);
        assert!((m.s0.data()[0] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn constant_signal_has_zero_adc() {
        let s = stack_of(&[0.0, 800.0], |_| 500.0);
        let m = fit_adc(&s, 1e-3).unwrap();
        assert_eq!(m.adc.data()[0], 0.0);
        assert!((m.s0.data()[0] - 500.0).abs() < 1e-10);
    }

    #[test]
    fn rising_signal_is_clamped() {
        let s = stack_of(&[0.0, 800.0], |b| 100.0 + b);
        let m = fit_adc(&s, 1e-3).unwrap();
        assert_eq!(m.adc.data()[0], 0.0);
    }

    #[test]
    fn signal_below_floor_is_excluded() {
        let s = stack_of(&[0.0, 800.0], |_| 0.0);
        let m = fit_adc(&s, 0.5).unwrap();
        assert_eq!(m.fit_mask.data()[0], 0);
        assert_eq!(m.adc.data()[0], 0.0);
        assert_eq!(m.s0.data()[0], 0.5);
        assert_eq!(synthesize_signal(&m, 0.0).unwrap().data()[0], 0.0);
    }

    #[test]
    fn needs_two_native_channels() {
        let mut s = stack_of(&[0.0, 800.0], |_| 1.0).into_channels();
        s[1].provenance = Provenance::Synthetic;
        let s = DwiStack::new("p", s).unwrap();
        assert!(matches!(fit_adc(&s, 1e-3), Err(Error::Contract(_))));
        assert!(matches!(fit_adc(&stack_of(&[0.0, 800.0], |_| 1.0), 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn synthesis_values() {
        let s = stack_of(&[0.0, 800.0], |b| 1000.0 * (-1.5e-3 * b).exp());
        let m = fit_adc(&s, 1e-3).unwrap();
        assert!((synthesize_signal(&m, 800.0).unwrap().data()[0] - 301.194211912).abs() < 1e-6);
        assert!((synthesize_signal(&m, 0.0).unwrap().data()[0] - m.s0.data()[0]).abs() == 0.0);
        assert!(synthesize_signal(&m, -1.0).is_err());
    }

    #[test]
    fn extend_tags_and_sorts() {
        let s = stack_of(&[0.0, 800.0], |b| 1000.0 * (-1.5e-3 * b).exp());
        let m = fit_adc(&s, 1e-3).unwrap();
        let e = extend_stack(&s, &m, &[1500.0]).unwrap();
        assert_eq!(e.bvalues(), [0.0, 800.0, 1500.0]);
        let prov: Vec<_> = e.channels().iter().map(|c| c.provenance).collect();
        assert_eq!(prov, [Provenance::Native, Provenance::Native, Provenance::Synthetic]);
        assert_eq!(extend_stack(&s, &m, &[]).unwrap(), s);
        assert!(extend_stack(&s, &m, &[800.0]).is_err());
        assert!(extend_stack(&s, &m, &[1500.0, 1500.0]).is_err());

        let e = extend_stack(&s, &m, &[400.0]).unwrap();
        assert_eq!(e.bvalues(), [0.0, 400.0, 800.0]);
    }
}
