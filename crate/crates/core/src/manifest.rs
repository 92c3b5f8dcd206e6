//! Cohort manifest: one CSV row per patient with its histological grade.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_HEADER: [&str; 3] = ["patient_id", "grade", "cube_path"];

/// Scarff-Bloom-Richardson grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grade {
    I,
    II,
    III,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::I, Grade::II, Grade::III];

    /// Grades I and II form the low/intermediate class (0); grade III is 1.
    pub fn binary_label(self) -> u8 {
        match self {
            Grade::I | Grade::II => 0,
            Grade::III => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::I => "I",
            Grade::II => "II",
            Grade::III => "III",
        }
    }
}

impl std::str::FromStr for Grade {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "I" => Ok(Grade::I),
            "II" => Ok(Grade::II),
            "III" => Ok(Grade::III),
            other => Err(format!("unknown grade {other:?} (expected I, II or III)")),
        }
    }
}

impl std::fmt::Display for Grade {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub patient_id: String,
    pub grade: Grade,
    pub binary_label: u8,
    pub cube_path: String,
}

impl ManifestRow {
    pub fn new(patient_id: impl Into<String>, grade: Grade, cube_path: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            grade,
            binary_label: grade.binary_label(),
            cube_path: cube_path.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    rows: Vec<ManifestRow>,
}

#[derive(Deserialize, Serialize)]
struct CsvRow {
    patient_id: String,
    grade: String,
    cube_path: String,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            if !seen.insert(r.patient_id.as_str()) {
                return Err(Error::validation(
                    "manifest.duplicate_id",
                    format!("row {}: duplicate patient_id {:?}", i + 1, r.patient_id),
                ));
            }
            if r.binary_label != r.grade.binary_label() {
                return Err(Error::validation(
                    "manifest.label",
                    format!("row {}: label {} inconsistent with grade {}", i + 1, r.binary_label, r.grade),
                ));
            }
        }
        Ok(Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            rows,
        })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of rows with binary label 0 and 1 respectively.
    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.rows.iter().filter(|r| r.binary_label == 1).count();
        [self.rows.len() - ones, ones]
    }

    pub fn grade_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.rows {
            c[r.grade as usize] += 1;
        }
        c
    }

    /// Rejects manifests whose binary labels are all the same.
    pub fn require_both_classes(&self) -> Result<()> {
        let [neg, pos] = self.class_counts();
        if neg == 0 || pos == 0 {
            return Err(Error::validation(
                "manifest.classes",
                format!("need both binary classes, found {neg} low-grade and {pos} high-grade rows"),
            ));
        }
        Ok(())
    }

    pub fn get(&self, patient_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.patient_id == patient_id)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::parse("header", e.to_string()))?
            .clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::validation(
                "manifest.header",
                format!("expected header `{}`, found `{}`", MANIFEST_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
            let row_no = i + 1;
            let rec = rec.map_err(|e| Error::validation("manifest.row", format!("row {row_no}: {e}")))?;
            let grade: Grade = rec
                .grade
                .parse()
                .map_err(|e| Error::validation("manifest.grade", format!("row {row_no}: {e}")))?;
            rows.push(ManifestRow::new(rec.patient_id, grade, rec.cube_path));
        }
        Self::new(rows)
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                patient_id: r.patient_id.clone(),
                grade: r.grade.to_string(),
                cube_path: r.cube_path.clone(),
            })
            .expect("writing to memory");
        }
        if self.rows.is_empty() {
            w.write_record(MANIFEST_HEADER).expect("writing to memory");
        }
        w.into_inner().expect("writing to memory")
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_csv_reader(file)
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, m.to_csv_bytes()).map_err(|e| Error::io(path, e))
}
