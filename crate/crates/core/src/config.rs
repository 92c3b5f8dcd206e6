//! Declarative pipeline configuration (TOML), with `CDIS_<SECTION>_<KEY>`
//! environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cdis::{CdisParams, DEFAULT_BOUNDS, DEFAULT_P_HI, DEFAULT_P_LO};
use crate::error::{Error, Result};
use crate::fusion::FusionOptions;
use crate::optimizer::ObjectiveMode;
use crate::phantom::{CohortSpec, GradeMix, PhantomSpec, DEFAULT_BVALUES};
use crate::simplex::NmConfig;

pub const ENV_PREFIX: &str = "CDIS_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BValueConfig {
    pub native: Vec<f64>,
    pub synthetic: Vec<f64>,
}

impl Default for BValueConfig {
    fn default() -> Self {
        Self {
            native: DEFAULT_BVALUES.to_vec(),
            synthetic: vec![1500.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub background_adc: f64,
    pub tumor_adc: f64,
    pub s0_mean: f64,
    pub tumor_center: [f64; 3],
    pub tumor_radii: [f64; 3],
    pub noise_sigma: f64,
    pub n_patients: usize,
    pub grade_mix: GradeMix,
    pub jitter: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let s = PhantomSpec::default();
        Self {
            dims: s.dims,
            spacing: s.spacing,
            background_adc: s.background_adc,
            tumor_adc: s.tumor_adc,
            s0_mean: s.s0_mean,
            tumor_center: s.tumor_center,
            tumor_radii: s.tumor_radii,
            noise_sigma: 0.02,
            n_patients: 6,
            grade_mix: GradeMix { i: 0.0, ii: 0.5, iii: 0.5 },
            jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdisConfig {
    pub eps: Option<f64>,
    pub p_lo: f64,
    pub p_hi: f64,
    pub bounds: (f64, f64),
    /// Starting exponents; empty means all ones.
    pub x0: Vec<f64>,
    /// Treat a degenerate (constant) calibration as a numerical error.
    pub fail_on_degenerate: bool,
}

impl Default for CdisConfig {
    fn default() -> Self {
        Self {
            eps: None,
            p_lo: DEFAULT_P_LO,
            p_hi: DEFAULT_P_HI,
            bounds: DEFAULT_BOUNDS,
            x0: Vec::new(),
            fail_on_degenerate: false,
        }
    }
}

impl CdisConfig {
    pub fn params(&self) -> CdisParams {
        CdisParams {
            eps: self.eps,
            p_lo: self.p_lo,
            p_hi: self.p_hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub nm: NmConfig,
    pub objective_mode: ObjectiveMode,
    pub subsample_stride: usize,
    /// Patient ids withheld from optimization and scored afterwards.
    pub holdout: Vec<String>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            nm: NmConfig::default(),
            objective_mode: ObjectiveMode::default(),
            subsample_stride: 1,
            holdout: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    pub cohort: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            cohort: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub bvalues: BValueConfig,
    pub phantom: PhantomConfig,
    pub cdis: CdisConfig,
    pub optimizer: OptimizerConfig,
    pub fusion: FusionOptions,
    pub io: IoConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 20240601,
            bvalues: BValueConfig::default(),
            phantom: PhantomConfig::default(),
            cdis: CdisConfig::default(),
            optimizer: OptimizerConfig::default(),
            fusion: FusionOptions::default(),
            io: IoConfig::default(),
        }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `section.key` (or top-level `key`) from `CDIS_<SECTION>_<KEY>` pairs.
fn apply_overrides(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let value = parse_env_value(&raw);
        if rest == "seed" {
            table.insert(rest, value);
            continue;
        }
        let Some((section, key)) = rest.split_once('_') else {
            return Err(Error::validation("config.env", format!("{name}: expected CDIS_<SECTION>_<KEY>")));
        };
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(sec) = entry else {
            return Err(Error::validation("config.env", format!("{name}: `{section}` is not a section")));
        };
        sec.insert(key.to_string(), value);
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::validation("config.syntax", e.to_string()))?;
        apply_overrides(&mut table, env)?;
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::validation("config.schema", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies process
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::validation("config.io", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        self.cdis.params().validate()?;
        let (lo, hi) = self.cdis.bounds;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::validation("config.cdis.bounds", format!("bounds [{lo}, {hi}] are empty")));
        }
        if self.cdis.x0.iter().any(|x| !(lo..=hi).contains(x)) {
            return Err(Error::validation("config.cdis.x0", format!("x0 {:?} leaves bounds [{lo}, {hi}]", self.cdis.x0)));
        }
        if self.bvalues.synthetic.iter().any(|b| !(*b >= 0.0) || self.bvalues.native.contains(b)) {
            return Err(Error::validation(
                "config.bvalues.synthetic",
                "synthetic b-values must be >= 0 and distinct from the native ones",
            ));
        }
        if self.optimizer.subsample_stride == 0 {
            return Err(Error::validation("config.optimizer.subsample_stride", "stride must be >= 1"));
        }
        let n_channels = self.bvalues.native.len() + self.bvalues.synthetic.len();
        self.optimizer.nm.validate(n_channels)?;
        if !self.cdis.x0.is_empty() && self.cdis.x0.len() != n_channels {
            return Err(Error::validation(
                "config.cdis.x0",
                format!("x0 has {} entries for {n_channels} channels", self.cdis.x0.len()),
            ));
        }
        if !(self.fusion.p_lo < self.fusion.p_hi) {
            return Err(Error::validation(
                "config.calibration.percentiles",
                format!("fusion p_lo ({}) must be < p_hi ({})", self.fusion.p_lo, self.fusion.p_hi),
            ));
        }
        if self.fusion.target_dims.iter().any(|&d| d < 2) {
            return Err(Error::validation("config.fusion.target_dims", "target dims must be >= 2"));
        }
        self.cohort_spec().template.validate()?;
        self.phantom.grade_mix.validate()?;
        Ok(())
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let p = &self.phantom;
        PhantomSpec {
            dims: p.dims,
            spacing: p.spacing,
            background_adc: p.background_adc,
            tumor_adc: p.tumor_adc,
            s0_mean: p.s0_mean,
            tumor_center: p.tumor_center,
            tumor_radii: p.tumor_radii,
            noise_sigma: p.noise_sigma,
            bvalues: self.bvalues.native.clone(),
            seed: self.seed,
        }
    }

    pub fn cohort_spec(&self) -> CohortSpec {
        CohortSpec {
            template: self.phantom_spec(),
            n_patients: self.phantom.n_patients,
            grade_mix: self.phantom.grade_mix,
            jitter: self.phantom.jitter,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("sha256:{}", hex(&Sha256::digest(bytes)))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
