//! Synthetic DWI phantoms with known ADC fields and tumour masks.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), a counter-based stream
//! cipher generator. A single patient draws from the stream seeded by
//! `PhantomSpec::seed` (stream 0). A cohort seeded with `s` uses stream 0 of
//! `s` for grade assignment and stream `i + 1` for patient `i`'s jitter and
//! its own noise seed, so patients never share draws and the output depends
//! only on the seed.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::AdcMap;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Grade, ManifestRow};
use crate::volume::{Channel, DwiStack, MaskVolume, Provenance, Volume3D};

pub const DEFAULT_BVALUES: [f64; 4] = [0.0, 100.0, 600.0, 800.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// mm²/s
    pub background_adc: f64,
    /// mm²/s
    pub tumor_adc: f64,
    pub s0_mean: f64,
    /// Ellipsoid centre in voxel coordinates.
    pub tumor_center: [f64; 3],
    /// Ellipsoid semi-axes in voxels.
    pub tumor_radii: [f64; 3],
    /// Noise standard deviation as a fraction of `s0_mean`.
    pub noise_sigma: f64,
    pub bvalues: Vec<f64>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 8],
            spacing: [1.0, 1.0, 3.0],
            background_adc: 2.0e-3,
            tumor_adc: 1.0e-3,
            s0_mean: 1000.0,
            tumor_center: [15.5, 15.5, 3.5],
            tumor_radii: [6.0, 6.0, 2.5],
            noise_sigma: 0.0,
            bvalues: DEFAULT_BVALUES.to_vec(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |tag: &str, msg: String| Err(Error::validation(format!("phantom.{tag}"), msg));
        if self.dims.contains(&0) {
            return bad("dims", format!("dims must be positive, got {:?}", self.dims));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return bad("spacing", format!("spacing must be > 0, got {:?}", self.spacing));
        }
        for (name, adc) in [("background_adc", self.background_adc), ("tumor_adc", self.tumor_adc)] {
            if !(adc > 0.0 && adc < 0.01) {
                return bad(name, format!("{name} must lie in (0, 0.01) mm²/s, got {adc}"));
            }
        }
        if !(self.s0_mean > 0.0) || !self.s0_mean.is_finite() {
            return bad("s0_mean", format!("s0_mean must be > 0, got {}", self.s0_mean));
        }
        if !(0.0..=0.2).contains(&self.noise_sigma) {
            return bad("noise_sigma", format!("noise_sigma must lie in [0, 0.2], got {}", self.noise_sigma));
        }
        for a in 0..3 {
            let (c, r, n) = (self.tumor_center[a], self.tumor_radii[a], self.dims[a] as f64);
            if !(r > 0.0) || !c.is_finite() || c - r < 0.0 || c + r > n - 1.0 {
                return bad(
                    "tumor_shape",
                    format!("ellipsoid axis {a} (centre {c}, radius {r}) does not fit in {n} voxels"),
                );
            }
        }
        if self.bvalues.len() < 2 || !(self.bvalues[0] >= 0.0) || self.bvalues.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("bvalues", format!("b-values must be >= 0 and strictly ascending, got {:?}", self.bvalues));
        }
        if !self.bvalues.iter().any(|&b| b < 200.0) || !self.bvalues.iter().any(|&b| b >= 200.0) {
            return bad("bvalues", "need one b-value below 200 and one at or above 200".into());
        }
        Ok(())
    }

    pub fn inside_tumor(&self, i: usize, j: usize, k: usize) -> bool {
        let p = [i as f64, j as f64, k as f64];
        let r2: f64 = (0..3)
            .map(|a| ((p[a] - self.tumor_center[a]) / self.tumor_radii[a]).powi(2))
            .sum();
        r2 <= 1.0
    }
}

/// One generated patient with its ground truth.
#[derive(Debug, Clone)]
pub struct PhantomPatient {
    pub stack: DwiStack,
    pub mask: MaskVolume,
    pub truth: AdcMap,
}

/// `S(b) = S0 * exp(-b * ADC(x)) + noise`, clamped at zero.
pub fn generate_patient(spec: &PhantomSpec, patient_id: &str) -> Result<PhantomPatient> {
    spec.validate()?;
    let (dims, spacing) = (spec.dims, spec.spacing);
    let mask = Volume3D::from_fn(dims, spacing, |i, j, k| f64::from(u8::from(spec.inside_tumor(i, j, k))))?;
    let mask = MaskVolume::from_volume(&mask)?;
    let adc_data: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m == 1 { spec.tumor_adc } else { spec.background_adc })
        .collect();
    let adc = Volume3D::new(dims, spacing, adc_data)?;
    let s0 = Volume3D::filled(dims, spacing, spec.s0_mean)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma * spec.s0_mean)
        .map_err(|e| Error::validation("phantom.noise_sigma", e.to_string()))?;

    let mut channels = Vec::with_capacity(spec.bvalues.len());
    for &b in &spec.bvalues {
        let data = adc
            .data()
            .iter()
            .map(|&d| {
                let clean = spec.s0_mean * (-b * d).exp();
                if spec.noise_sigma > 0.0 {
                    (clean + noise.sample(&mut rng)).max(0.0)
                } else {
                    clean
                }
            })
            .collect();
        channels.push(Channel {
            bvalue: b,
            provenance: Provenance::Native,
            volume: Volume3D::new(dims, spacing, data)?,
        });
    }
    let stack = DwiStack::new(patient_id, channels)?;
    stack.check_acquisition()?;
    let fit_mask = MaskVolume::new(dims, spacing, vec![1; adc.len()])?;
    Ok(PhantomPatient {
        stack,
        mask,
        truth: AdcMap { adc, s0, fit_mask },
    })
}

/// Proportions of grades I, II and III in a generated cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradeMix {
    #[serde(default)]
    pub i: f64,
    #[serde(default)]
    pub ii: f64,
    #[serde(default)]
    pub iii: f64,
}

impl GradeMix {
    /// Counts from the grade distribution of the reference breast cohort.
    pub const REFERENCE_COUNTS: [usize; 3] = [10, 99, 200];

    pub fn reference() -> Self {
        let [a, b, c] = Self::REFERENCE_COUNTS.map(|n| n as f64);
        let t = a + b + c;
        Self { i: a / t, ii: b / t, iii: c / t }
    }

    pub fn validate(&self) -> Result<()> {
        let p = [self.i, self.ii, self.iii];
        if p.iter().any(|x| !(*x >= 0.0)) || ((p.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::validation(
                "phantom.grade_mix",
                format!("grade proportions must be >= 0 and sum to 1, got {p:?}"),
            ));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` patients.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let p = [self.i, self.ii, self.iii];
        let quotas: Vec<f64> = p.iter().map(|x| x * n as f64).collect();
        let mut counts = quotas.iter().map(|q| q.floor() as usize).collect::<Vec<_>>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
        let missing = n - counts.iter().sum::<usize>();
        for &g in order.iter().cycle().take(missing) {
            counts[g] += 1;
        }
        [counts[0], counts[1], counts[2]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub template: PhantomSpec,
    pub n_patients: usize,
    pub grade_mix: GradeMix,
    /// Half-width of the uniform per-patient jitter on tumour ADC and radii.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    0.05
}

#[derive(Debug, Clone)]
pub struct CohortPatient {
    pub patient_id: String,
    pub grade: Grade,
    pub spec: PhantomSpec,
    pub data: PhantomPatient,
}

/// Grade-dependent tumour shaping: high-grade tumours are larger and more
/// diffusion-restricted, so the two label groups are separable.
fn grade_factors(grade: Grade) -> (f64, f64) {
    match grade {
        Grade::I => (1.15, 0.8),
        Grade::II => (1.05, 0.9),
        Grade::III => (0.85, 1.15),
    }
}

fn patient_spec(template: &PhantomSpec, grade: Grade, jitter: f64, rng: &mut ChaCha8Rng) -> PhantomSpec {
    let (adc_f, r_f) = grade_factors(grade);
    let mut j = || 1.0 + rng.random_range(-jitter..=jitter);
    let mut spec = template.clone();
    spec.tumor_adc = (template.tumor_adc * adc_f * j()).clamp(1e-5, 0.01 - 1e-5);
    let scale = r_f * j();
    for a in 0..3 {
        let c = spec.tumor_center[a];
        let room = c.min(spec.dims[a] as f64 - 1.0 - c);
        spec.tumor_radii[a] = (template.tumor_radii[a] * scale).min(room).max(0.5);
    }
    spec.seed = rng.next_u64();
    spec
}

/// Generates `n_patients` phantoms with grades apportioned by `grade_mix`.
///
/// Manifest rows point at each patient's stack directory (`cube_path` is the
/// patient id), which is where the CLI writes the volumes.
pub fn generate_cohort(cohort: &CohortSpec) -> Result<(Vec<CohortPatient>, DatasetManifest)> {
    if cohort.n_patients < 2 {
        return Err(Error::validation("phantom.n_patients", "a cohort needs at least 2 patients"));
    }
    if !(0.0..0.5).contains(&cohort.jitter) {
        return Err(Error::validation("phantom.jitter", format!("jitter must lie in [0, 0.5), got {}", cohort.jitter)));
    }
    cohort.grade_mix.validate()?;
    cohort.template.validate()?;

    let counts = cohort.grade_mix.counts(cohort.n_patients);
    let mut grades: Vec<Grade> = Grade::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&g, n)| std::iter::repeat_n(g, n))
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cohort.template.seed);
    grades.shuffle(&mut order_rng);

    let width = cohort.n_patients.to_string().len().max(3);
    let mut patients = Vec::with_capacity(grades.len());
    let mut rows = Vec::with_capacity(grades.len());
    for (i, &grade) in grades.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cohort.template.seed);
        rng.set_stream(i as u64 + 1);
        let spec = patient_spec(&cohort.template, grade, cohort.jitter, &mut rng);
        let id = format!("P{:0width$}", i + 1);
        let data = generate_patient(&spec, &id)?;
        rows.push(ManifestRow::new(id.clone(), grade, id.clone()));
        patients.push(CohortPatient {
            patient_id: id,
            grade,
            spec,
            data,
        });
    }
    Ok((patients, DatasetManifest::new(rows)?))
}
