//! The two artifacts the grade predictor consumes: `cubes/manifest.csv` and
//! the `.cube` files it points at.

use cdis_core::cdis::{CdisParams, CoefficientVector};
use cdis_core::cube::{read_cube, CUBE_HEADER_LEN, CUBE_MAGIC};
use cdis_core::fusion::{export_patient, FusionOptions};
use cdis_core::manifest::{read_manifest, write_manifest, DatasetManifest, Grade, ManifestRow, MANIFEST_SCHEMA_VERSION};
use cdis_core::phantom::{generate_cohort, CohortSpec, GradeMix, PhantomSpec};

#[test]
fn manifest_csv_layout() {
    let m = DatasetManifest::new(vec![
        ManifestRow::new("P1", Grade::I, "P1.cube"),
        ManifestRow::new("P2", Grade::III, "P2.cube"),
    ])
    .unwrap();
    assert_eq!(MANIFEST_SCHEMA_VERSION, 1);
    let text = String::from_utf8(m.to_csv_bytes()).unwrap();
    assert_eq!(text, "patient_id,grade,cube_path\nP1,I,P1.cube\nP2,III,P2.cube\n");
    assert_eq!(m.rows()[1].binary_label, 1);
    assert_eq!(m.class_counts(), [1, 1]);
    m.require_both_classes().unwrap();
}

#[test]
fn single_class_manifest_is_rejected_for_training() {
    let m = DatasetManifest::new(vec![
        ManifestRow::new("P1", Grade::I, "a"),
        ManifestRow::new("P2", Grade::II, "b"),
    ])
    .unwrap();
    let e = m.require_both_classes().unwrap_err();
    assert_eq!(e.tag(), "manifest.classes");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn bad_rows_are_reported_with_row_numbers() {
    let e = DatasetManifest::from_csv_reader("patient_id,grade,cube_path\nP1,I,a\nP2,IV,b\n".as_bytes()).unwrap_err();
    assert_eq!(e.tag(), "manifest.grade");
    assert!(e.to_string().contains("row 2"));
    let e = DatasetManifest::from_csv_reader("id,grade,cube_path\n".as_bytes()).unwrap_err();
    assert_eq!(e.tag(), "manifest.header");
}

#[test]
fn exported_cohort_matches_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = CohortSpec {
        template: PhantomSpec {
            dims: [12, 12, 4],
            tumor_center: [5.5, 5.5, 1.5],
            tumor_radii: [3.0, 3.0, 1.5],
            noise_sigma: 0.02,
            seed: 8,
            ..Default::default()
        },
        n_patients: 4,
        grade_mix: GradeMix { i: 0.25, ii: 0.25, iii: 0.5 },
        jitter: 0.05,
    };
    let (patients, _) = generate_cohort(&cohort).unwrap();
    let opts = FusionOptions { target_dims: [16, 16, 6], ..Default::default() };
    let rows: Vec<ManifestRow> = patients
        .iter()
        .map(|p| {
            let s = &p.data.stack;
            let c = CdisParams::default().apply(s, &CoefficientVector::ones(s)).unwrap();
            export_patient(&c, s, &p.data.mask, p.grade, &opts, dir.path()).unwrap()
        })
        .collect();
    let m = DatasetManifest::new(rows).unwrap();
    write_manifest(&m, dir.path().join("manifest.csv")).unwrap();

    let back = read_manifest(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.grade_counts(), [1, 1, 2]);
    for row in back.rows() {
        let path = dir.path().join(&row.cube_path);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CUBE_MAGIC);
        assert_eq!(bytes.len(), CUBE_HEADER_LEN + 4 * 2 * 16 * 16 * 6);
        let cube = read_cube(&path).unwrap();
        assert_eq!(cube.patient_id, row.patient_id);
        assert_eq!((cube.dims(), cube.n_channels()), ([16, 16, 6], 2));
        assert!(cube.channel_data(0).iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
