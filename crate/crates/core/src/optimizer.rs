//! Cohort-level tumour delineation objective and its Nelder-Mead driver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdis::{CdisParams, CoefficientVector, DEFAULT_BOUNDS};
use crate::diffusion::{default_floor, extend_stack, fit_adc};
use crate::error::{Error, Result};
use crate::roc::auc_rank;
use crate::simplex::{try_minimize, NmConfig, NmResult};
use crate::volume::{DwiStack, MaskVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Unweighted mean of per-patient AUCs.
    #[default]
    MeanPatientAuc,
    /// One AUC over every patient's voxels together.
    PooledAuc,
}

/// An extended stack with its tumour mask.
#[derive(Debug, Clone)]
pub struct TrainingPatient {
    pub patient_id: String,
    pub stack: DwiStack,
    pub mask: MaskVolume,
}

impl TrainingPatient {
    /// Fits ADC on the native channels and appends synthetic channels.
    pub fn prepare(stack: &DwiStack, mask: MaskVolume, synthetic_bvalues: &[f64], floor: Option<f64>) -> Result<Self> {
        let floor = floor.unwrap_or_else(|| default_floor(stack));
        let adc = fit_adc(stack, floor)?;
        Ok(Self {
            patient_id: stack.patient_id().to_string(),
            stack: extend_stack(stack, &adc, synthetic_bvalues)?,
            mask,
        })
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationProblem {
    patients: Vec<TrainingPatient>,
    pub mode: ObjectiveMode,
    pub bounds: (f64, f64),
    pub params: CdisParams,
    pub x0: Vec<f64>,
    pub nm: NmConfig,
    /// Score every `stride`-th voxel only; 1 uses all voxels.
    pub subsample_stride: usize,
    template: CoefficientVector,
}

impl OptimizationProblem {
    /// Defaults: mean-patient AUC, bounds [0, 4], all-ones start, full voxel set.
    pub fn new(mut patients: Vec<TrainingPatient>) -> Result<Self> {
        let first = patients
            .first()
            .ok_or_else(|| Error::validation("optimizer.patients", "need at least one training patient"))?;
        let template = CoefficientVector::ones(&first.stack);
        let bvalues = first.stack.bvalues();
        for p in &patients {
            if p.stack.bvalues() != bvalues {
                return Err(Error::validation(
                    "optimizer.channels",
                    format!("patient {} has b-values {:?}, expected {bvalues:?}", p.patient_id, p.stack.bvalues()),
                ));
            }
            if p.mask.dims() != p.stack.dims() {
                return Err(Error::validation(
                    "optimizer.mask",
                    format!("patient {}: mask dims do not match the stack", p.patient_id),
                ));
            }
            if !p.mask.has_both_classes() {
                return Err(Error::UndefinedAuc {
                    n_pos: p.mask.count(),
                    n_neg: p.mask.len() - p.mask.count(),
                    context: Some(format!("patient {}", p.patient_id)),
                });
            }
        }
        patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        if let Some(w) = patients.windows(2).find(|w| w[0].patient_id == w[1].patient_id) {
            return Err(Error::validation("optimizer.patients", format!("duplicate patient {}", w[0].patient_id)));
        }
        let n = template.len();
        Ok(Self {
            patients,
            mode: ObjectiveMode::default(),
            bounds: DEFAULT_BOUNDS,
            params: CdisParams::default(),
            x0: vec![1.0; n],
            nm: NmConfig::default(),
            subsample_stride: 1,
            template,
        })
    }

    pub fn patients(&self) -> &[TrainingPatient] {
        &self.patients
    }

    pub fn n_channels(&self) -> usize {
        self.template.len()
    }

    pub fn coefficients(&self, rho: &[f64]) -> CoefficientVector {
        CoefficientVector {
            rho: rho.to_vec(),
            ..self.template.clone()
        }
        .with_bounds(self.bounds)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let (lo, hi) = self.bounds;
        if !(lo <= hi) {
            return Err(Error::validation("config.cdis.bounds", format!("bounds [{lo}, {hi}] are empty")));
        }
        if self.x0.len() != self.n_channels() {
            return Err(Error::validation(
                "config.cdis.x0",
                format!("x0 has {} entries for {} channels", self.x0.len(), self.n_channels()),
            ));
        }
        if self.x0.iter().any(|x| !(lo..=hi).contains(x)) {
            return Err(Error::validation("config.cdis.x0", format!("x0 {:?} leaves bounds [{lo}, {hi}]", self.x0)));
        }
        if self.subsample_stride == 0 {
            return Err(Error::validation("config.optimizer.subsample_stride", "stride must be >= 1"));
        }
        Ok(())
    }

    /// Per-patient delineation AUCs, ordered by patient id.
    pub fn per_patient_auc(&self, rho: &[f64]) -> Result<Vec<(String, f64)>> {
        patient_aucs(&self.patients, &self.coefficients(rho), &self.params, self.subsample_stride)
    }

    /// Aggregate AUC under the configured mode.
    pub fn aggregate_auc(&self, rho: &[f64]) -> Result<f64> {
        if rho.len() != self.n_channels() {
            return Err(Error::contract(format!("{} coefficients for {} channels", rho.len(), self.n_channels())));
        }
        match self.mode {
            ObjectiveMode::MeanPatientAuc => {
                let aucs = self.per_patient_auc(rho)?;
                Ok(aucs.iter().map(|(_, a)| a).sum::<f64>() / aucs.len() as f64)
            }
            ObjectiveMode::PooledAuc => {
                let coeffs = self.coefficients(rho);
                let parts: Vec<Result<(Vec<f64>, Vec<u8>)>> =
                    self.patients.par_iter().map(|p| patient_scores(p, &coeffs, &self.params, self.subsample_stride)).collect();
                let (mut scores, mut labels) = (Vec::new(), Vec::new());
                for part in parts {
                    let (s, l) = part?;
                    scores.extend(s);
                    labels.extend(l);
                }
                Ok(auc_rank(&scores, &labels)?.auc)
            }
        }
    }

    /// `1 - aggregate AUC`, the quantity minimized.
    pub fn objective(&self, rho: &[f64]) -> Result<f64> {
        Ok(1.0 - self.aggregate_auc(rho)?)
    }

    pub fn optimize(&self) -> Result<OptimizationResult> {
        self.validate()?;
        let baseline_auc = self.aggregate_auc(&self.x0)?;
        let nm = NmConfig {
            bounds: Some(vec![self.bounds; self.n_channels()]),
            ..self.nm.clone()
        };
        let run = try_minimize(|x| self.objective(x), &self.x0, &nm)?;
        let raw = self.coefficients(&run.x_best);
        let normalized = raw.normalized();
        let objective_value = 1.0 - run.f_best;
        let normalized_auc = self.aggregate_auc(&normalized.rho)?;
        Ok(OptimizationResult {
            per_patient_auc: self.per_patient_auc(&run.x_best)?,
            coefficients: normalized,
            raw_coefficients: raw,
            objective_value,
            normalized_auc,
            baseline_auc,
            mode: self.mode,
            run,
        })
    }
}

fn patient_scores(
    p: &TrainingPatient,
    coeffs: &CoefficientVector,
    params: &CdisParams,
    stride: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let c = params.apply(&p.stack, coeffs)?;
    if stride == 1 {
        return Ok((c.signal.into_data(), p.mask.data().to_vec()));
    }
    let scores = c.signal.data().iter().step_by(stride).copied().collect();
    let labels = p.mask.data().iter().step_by(stride).copied().collect();
    Ok((scores, labels))
}

fn patient_aucs(
    patients: &[TrainingPatient],
    coeffs: &CoefficientVector,
    params: &CdisParams,
    stride: usize,
) -> Result<Vec<(String, f64)>> {
    let results: Vec<Result<(String, f64)>> = patients
        .par_iter()
        .map(|p| {
            let (scores, labels) = patient_scores(p, coeffs, params, stride)?;
            let auc = auc_rank(&scores, &labels).map_err(|e| match e {
                Error::UndefinedAuc { n_pos, n_neg, .. } => Error::UndefinedAuc {
                    n_pos,
                    n_neg,
                    context: Some(format!("patient {}", p.patient_id)),
                },
                other => other,
            })?;
            Ok((p.patient_id.clone(), auc.auc))
        })
        .collect();
    let mut out = results.into_iter().collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Applies fixed coefficients to unseen patients; no optimization.
pub fn evaluate_holdout(
    coefficients: &CoefficientVector,
    holdout: &[TrainingPatient],
    params: &CdisParams,
) -> Result<Vec<(String, f64)>> {
    patient_aucs(holdout, coefficients, params, 1)
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    /// Best coefficients rescaled to `max |rho| = 1`.
    pub coefficients: CoefficientVector,
    /// Best coefficients as found by the simplex.
    pub raw_coefficients: CoefficientVector,
    /// Aggregate AUC at the best point.
    pub objective_value: f64,
    /// Aggregate AUC at the normalized coefficients. Equals `objective_value`
    /// in mean-patient mode; pooled mode is only approximately scale-free.
    pub normalized_auc: f64,
    pub baseline_auc: f64,
    pub per_patient_auc: Vec<(String, f64)>,
    pub mode: ObjectiveMode,
    pub run: NmResult,
}

impl OptimizationResult {
    pub fn report_json(&self) -> serde_json::Value {
        serde_json::json!({
            "objective_mode": self.mode,
            "baseline_auc": self.baseline_auc,
            "final_auc": self.objective_value,
            "normalized_auc": self.normalized_auc,
            "per_patient_auc": self.per_patient_auc.iter()
                .map(|(id, a)| serde_json::json!({"patient_id": id, "auc": a}))
                .collect::<Vec<_>>(),
            "iterations": self.run.iterations(),
            "evaluations": self.run.n_evals(),
            "stop_reason": self.run.stop_reason,
            "coefficients": self.coefficients.entries(),
            "raw_coefficients": self.raw_coefficients.entries(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_patient, PhantomSpec};
    use crate::volume::{Channel, Provenance, Volume3D};

    fn phantom(seed: u64, noise: f64) -> TrainingPatient {
        let spec = PhantomSpec {
            dims: [12, 12, 4],
            tumor_center: [5.5, 5.5, 1.5],
            tumor_radii: [3.0, 3.0, 1.5],
            noise_sigma: noise,
            seed,
            ..Default::default()
        };
        let p = generate_patient(&spec, &format!("P{seed:03}")).unwrap();
        TrainingPatient::prepare(&p.stack, p.mask, &[1500.0], None).unwrap()
    }

    #[test]
    fn perfect_separation_objective_is_zero() {
        let problem = OptimizationProblem::new(vec![phantom(1, 0.0)]).unwrap();
        let mut rho = vec![0.0; problem.n_channels()];
        rho[3] = 1.0; // b = 800
        assert_eq!(problem.objective(&rho).unwrap(), 0.0);
    }

    #[test]
    fn modes_agree_for_one_patient() {
        let mut problem = OptimizationProblem::new(vec![phantom(2, 0.05)]).unwrap();
        let rho = vec![1.0, 0.3, 0.0, 2.0, 0.5];
        let mean = problem.objective(&rho).unwrap();
        problem.mode = ObjectiveMode::PooledAuc;
        assert!((problem.objective(&rho).unwrap() - mean).abs() < 1e-15);
    }

    #[test]
    fn doubling_exponents_keeps_objective() {
        let problem = OptimizationProblem::new(vec![phantom(3, 0.1), phantom(4, 0.1)]).unwrap();
        let rho = vec![0.2, 1.0, 0.4, 0.7, 0.1];
        let twice: Vec<f64> = rho.iter().map(|r| 2.0 * r).collect();
        let (a, b) = (problem.objective(&rho).unwrap(), problem.objective(&twice).unwrap());
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn single_channel_problem_is_rank_invariant() {
        let p = phantom(5, 0.1);
        let ch = p.stack.channel_at(800.0).unwrap().clone();
        let stack = DwiStack::new("P005", vec![ch]).unwrap();
        let one = TrainingPatient { patient_id: "P005".into(), stack, mask: p.mask };
        let problem = OptimizationProblem::new(vec![one]).unwrap();
        let r = problem.optimize().unwrap();
        assert!((r.objective_value - r.baseline_auc).abs() < 1e-9);
        for rho in [0.3, 1.0, 3.7] {
            assert!((problem.aggregate_auc(&[rho]).unwrap() - r.baseline_auc).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_or_single_class_rejected() {
        assert!(OptimizationProblem::new(vec![]).is_err());
        let mut p = phantom(6, 0.0);
        p.mask = MaskVolume::new(p.mask.dims(), p.mask.spacing(), vec![0; p.mask.len()]).unwrap();
        let err = OptimizationProblem::new(vec![p]).unwrap_err();
        assert!(err.to_string().contains("P006"), "{err}");
    }

    #[test]
    fn holdout_on_training_set_matches_objective() {
        let pats = vec![phantom(7, 0.05), phantom(8, 0.05)];
        let problem = OptimizationProblem::new(pats.clone()).unwrap();
        let rho = vec![1.0, 1.0, 0.5, 1.5, 1.0];
        let h = evaluate_holdout(&problem.coefficients(&rho), &pats, &problem.params).unwrap();
        let mean = h.iter().map(|(_, a)| a).sum::<f64>() / h.len() as f64;
        assert!((mean - problem.aggregate_auc(&rho).unwrap()).abs() < 1e-15);
        assert!(evaluate_holdout(&problem.coefficients(&rho), &[], &problem.params).unwrap().is_empty());
    }

    #[test]
    fn mismatched_channels_rejected() {
        let a = phantom(9, 0.0);
        let chans = vec![
            Channel { bvalue: 0.0, provenance: Provenance::Native, volume: Volume3D::filled(a.stack.dims(), a.stack.spacing(), 1.0).unwrap() },
        ];
        let b = TrainingPatient { patient_id: "X".into(), stack: DwiStack::new("X", chans).unwrap(), mask: a.mask.clone() };
        assert!(OptimizationProblem::new(vec![a, b]).is_err());
    }

    #[test]
    fn optimize_never_loses_to_baseline() {
        let problem = OptimizationProblem::new(vec![phantom(10, 0.15), phantom(11, 0.15)]).unwrap();
        let r = problem.optimize().unwrap();
        assert!(r.objective_value >= r.baseline_auc);
        assert!((r.normalized_auc - r.objective_value).abs() < 1e-9);
        let m = r.coefficients.rho.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!((m - 1.0).abs() < 1e-15);
    }
}
