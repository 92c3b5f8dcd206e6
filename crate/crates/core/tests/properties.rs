use std::path::Path;

use proptest::prelude::*;

use cdis_core::cdis::{calibrate, cdis, CoefficientVector};
use cdis_core::cube::{decode_cube, encode_cube, StandardCube};
use cdis_core::fusion::{resample_mask, resample_volume};
use cdis_core::nifti::{decode_nifti, encode_nifti};
use cdis_core::phantom::{generate_patient, PhantomSpec};
use cdis_core::roc::{auc_oracle, auc_rank};
use cdis_core::volume::{MaskVolume, Volume3D};

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120)
        .prop_flat_map(|n| (prop::collection::vec(-20i32..20, n), prop::collection::vec(0u8..=1, n)))
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        .prop_map(|(s, l)| (s.into_iter().map(|v| f64::from(v) * 0.25).collect(), l))
}

fn volume(max: usize) -> impl Strategy<Value = Volume3D> {
    (1..max, 1..max, 1..max).prop_flat_map(|(x, y, z)| {
        prop::collection::vec(-1e3f32..1e3, x * y * z)
            .prop_map(move |d| Volume3D::new([x, y, z], [1.0, 1.0, 2.0], d.into_iter().map(f64::from).collect()).unwrap())
    })
}

proptest! {
    #[test]
    fn rank_auc_equals_pair_count((s, l) in scored()) {
        let a = auc_rank(&s, &l).unwrap().auc;
        prop_assert!((a - auc_oracle(&s, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn swapping_labels_mirrors_auc((s, l) in scored()) {
        let a = auc_rank(&s, &l).unwrap().auc;
        let flipped: Vec<u8> = l.iter().map(|v| 1 - v).collect();
        prop_assert!((a + auc_rank(&s, &flipped).unwrap().auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_curve_area_matches_auc((s, l) in scored()) {
        let r = auc_rank(&s, &l).unwrap();
        prop_assert!((r.trapezoid_area() - r.auc).abs() < 1e-12);
        prop_assert!(r.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn calibration_is_monotone_and_bounded(v in volume(8), lo in 0.0f64..40.0, span in 1.0f64..60.0) {
        let (c, cal) = calibrate(&v, lo, lo + span).unwrap();
        prop_assert!(c.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let mut pairs: Vec<(f64, f64)> = v.data().iter().copied().zip(c.data().iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert!(cal.v_lo <= cal.v_hi);
    }

    #[test]
    fn nifti_round_trip_is_bit_exact(v in volume(6)) {
        let bytes = encode_nifti(&v).unwrap();
        let back = decode_nifti(&bytes, Path::new("p.nii")).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn cube_round_trip_is_bit_exact(v in volume(6)) {
        let cube = StandardCube::new("p", vec![("a".into(), v.clone()), ("b".into(), v.clone())]).unwrap();
        let bytes = encode_cube(&cube);
        let back = decode_cube(&bytes, "p").unwrap();
        prop_assert_eq!(encode_cube(&back), bytes);
        prop_assert!(back.channel_data(1).iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn resampling_stays_in_range(v in volume(6), t in (2usize..12, 2usize..12, 2usize..6)) {
        prop_assume!(v.dims().iter().all(|&d| d >= 2));
        let r = resample_volume(&v, [t.0, t.1, t.2]).unwrap();
        let (lo, hi) = (v.min(), v.max());
        prop_assert!(r.data().iter().all(|x| (lo..=hi).contains(x)));
    }

    #[test]
    fn resampled_masks_stay_binary(bits in prop::collection::vec(0u8..=1, 4 * 4 * 3), t in (2usize..20, 2usize..20, 2usize..8)) {
        let m = MaskVolume::new([4, 4, 3], [1.0; 3], bits).unwrap();
        let r = resample_mask(&m, [t.0, t.1, t.2]).unwrap();
        prop_assert!(r.data().iter().all(|&b| b <= 1));
    }
}

#[test]
fn one_to_ninety_nine_clips_at_most_two_percent() {
    let spec = PhantomSpec {
        dims: [40, 40, 10],
        tumor_center: [19.5, 19.5, 4.5],
        tumor_radii: [8.0, 8.0, 3.0],
        noise_sigma: 0.02,
        seed: 3,
        ..Default::default()
    };
    let p = generate_patient(&spec, "Q").unwrap();
    let c = cdis(&p.stack, &CoefficientVector::ones(&p.stack), 1e-3, 1.0, 99.0).unwrap();
    let clipped = c.signal.data().iter().filter(|&&x| x == 0.0 || x == 1.0).count();
    assert!(clipped as f64 <= 0.02 * c.signal.len() as f64, "{clipped} of {}", c.signal.len());
}
