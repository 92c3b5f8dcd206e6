//! Nelder-Mead downhill simplex minimizer.
//!
//! Deterministic: vertices are ordered by value with ties broken
//! lexicographically on coordinates, and the objective is called serially.
//! Bounds are handled by projection at evaluation time; the simplex itself
//! moves freely.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmConfig {
    /// Reflection.
    pub alpha: f64,
    /// Expansion.
    pub gamma: f64,
    /// Contraction.
    pub beta: f64,
    /// Shrink.
    pub delta: f64,
    /// Edge length of the initial simplex along each axis; a single value is
    /// used for every dimension.
    pub init_step: Vec<f64>,
    /// Stop once the vertex value spread falls below this...
    pub tol_f: f64,
    /// ...and the simplex extent (max-norm distance to the best vertex)
    /// falls below this.
    pub tol_x: f64,
    /// Defaults to `500 * n`.
    pub max_iter: Option<usize>,
    /// Defaults to unlimited (bounded by `max_iter`).
    pub max_evals: Option<usize>,
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl Default for NmConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 2.0,
            beta: 0.5,
            delta: 0.5,
            init_step: vec![0.25],
            tol_f: 1e-6,
            tol_x: 1e-6,
            max_iter: None,
            max_evals: None,
            bounds: None,
        }
    }
}

impl NmConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::validation("config.optimizer", m));
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.gamma > 1.0) {
            return bad(format!("gamma must be > 1, got {}", self.gamma));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.tol_f > 0.0) || !(self.tol_x > 0.0) {
            return bad("tolerances must be > 0".into());
        }
        if !(self.init_step.len() == 1 || self.init_step.len() == n) {
            return bad(format!("init_step needs 1 or {n} entries, got {}", self.init_step.len()));
        }
        if self.init_step.iter().any(|s| !s.is_finite() || *s == 0.0) {
            return bad("init_step entries must be finite and non-zero".into());
        }
        if let Some(b) = &self.bounds {
            if b.len() != n {
                return bad(format!("{} bounds for {n} dimensions", b.len()));
            }
            if b.iter().any(|(lo, hi)| !(lo <= hi)) {
                return bad("bounds need lo <= hi".into());
            }
        }
        Ok(())
    }

    fn step(&self, i: usize) -> f64 {
        if self.init_step.len() == 1 {
            self.init_step[0]
        } else {
            self.init_step[i]
        }
    }
}

/// Componentwise clamp into `bounds`.
pub fn project_bounds(x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter()
        .zip(bounds)
        .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Init,
    Reflect,
    Expand,
    ContractOutside,
    ContractInside,
    Shrink,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub op: Step,
    pub best_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Value spread and simplex extent both under tolerance.
    Converged,
    /// Every vertex of the initial simplex has the same value.
    FlatSimplex,
    MaxIter,
    MaxEvals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexState {
    pub vertices: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub iteration: usize,
    pub n_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    /// Best point ever evaluated, already projected into the bounds.
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub trace: Vec<TraceEntry>,
    pub stop_reason: StopReason,
    pub state: SimplexState,
}

impl NmResult {
    pub fn iterations(&self) -> usize {
        self.state.iteration
    }

    pub fn n_evals(&self) -> usize {
        self.state.n_evals
    }

    /// Trace as JSON lines (`iteration`, `op`, `best_value`).
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|t| serde_json::to_string(t).expect("plain data serializes") + "\n")
            .collect()
    }
}

fn cmp_vertex(a: (&[f64], f64), b: (&[f64], f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then_with(|| {
        a.0.iter()
            .zip(b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

struct Evaluator<'a, F> {
    f: F,
    bounds: Option<&'a [(f64, f64)]>,
    n_evals: usize,
    best_x: Vec<f64>,
    best_f: f64,
}

impl<F: FnMut(&[f64]) -> Result<f64>> Evaluator<'_, F> {
    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        let projected;
        let xp = match self.bounds {
            Some(b) => {
                projected = project_bounds(x, b);
                &projected[..]
            }
            None => x,
        };
        let v = (self.f)(xp)?;
        self.n_evals += 1;
        if v.is_finite() && v < self.best_f {
            self.best_f = v;
            self.best_x = xp.to_vec();
        }
        Ok(if v.is_nan() { f64::INFINITY } else { v })
    }
}

/// Minimizes an infallible objective.
pub fn minimize(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], cfg: &NmConfig) -> Result<NmResult> {
    try_minimize(|x| Ok(f(x)), x0, cfg)
}

/// Minimizes an objective that may fail; the first objective error aborts
/// the run and is returned unchanged.
pub fn try_minimize(f: impl FnMut(&[f64]) -> Result<f64>, x0: &[f64], cfg: &NmConfig) -> Result<NmResult> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::contract("cannot minimize over zero dimensions"));
    }
    cfg.validate(n)?;
    if let Some(b) = &cfg.bounds {
        if let Some(i) = x0.iter().zip(b).position(|(v, (lo, hi))| !(lo..=hi).contains(&v)) {
            return Err(Error::contract(format!(
                "x0[{i}] = {} lies outside bounds [{}, {}]",
                x0[i], b[i].0, b[i].1
            )));
        }
    }
    let max_iter = cfg.max_iter.unwrap_or(500 * n);
    let max_evals = cfg.max_evals.unwrap_or(usize::MAX);

    let mut ev = Evaluator {
        f,
        bounds: cfg.bounds.as_deref(),
        n_evals: 0,
        best_x: x0.to_vec(),
        best_f: f64::INFINITY,
    };

    let mut vertices: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    vertices.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += cfg.step(i);
        vertices.push(v);
    }
    let mut values = Vec::with_capacity(n + 1);
    for v in &vertices {
        let fv = ev.eval(v)?;
        if !fv.is_finite() {
            return Err(Error::numerical(
                "numerical.simplex.init",
                format!("objective is not finite at initial vertex {v:?}"),
            ));
        }
        values.push(fv);
    }

    let mut trace = Vec::new();
    let mut iteration = 0;
    let order = |vertices: &mut Vec<Vec<f64>>, values: &mut Vec<f64>| {
        let mut idx: Vec<usize> = (0..vertices.len()).collect();
        idx.sort_by(|&a, &b| cmp_vertex((&vertices[a], values[a]), (&vertices[b], values[b])));
        *vertices = idx.iter().map(|&i| vertices[i].clone()).collect();
        *values = idx.iter().map(|&i| values[i]).collect();
    };
    order(&mut vertices, &mut values);
    trace.push(TraceEntry {
        iteration: 0,
        op: Step::Init,
        best_value: values[0],
    });

    let stop_reason = loop {
        let spread = values[n] - values[0];
        let extent = vertices[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&vertices[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if spread == 0.0 && iteration == 0 {
            break StopReason::FlatSimplex;
        }
        if spread < cfg.tol_f && extent < cfg.tol_x {
            break StopReason::Converged;
        }
        if iteration >= max_iter {
            break StopReason::MaxIter;
        }
        if ev.n_evals >= max_evals {
            break StopReason::MaxEvals;
        }
        iteration += 1;

        let mut centroid = vec![0.0; n];
        for v in &vertices[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n as f64);
        let along = |t: f64, from: &[f64]| -> Vec<f64> {
            // centroid + t * (from - centroid)
            centroid.iter().zip(from).map(|(c, x)| c + t * (x - c)).collect()
        };

        let worst = vertices[n].clone();
        let xr = along(-cfg.alpha, &worst);
        let fr = ev.eval(&xr)?;

        let op = if fr < values[0] {
            let xe = along(cfg.gamma, &xr);
            let fe = ev.eval(&xe)?;
            if fe < fr {
                vertices[n] = xe;
                values[n] = fe;
                Step::Expand
            } else {
                vertices[n] = xr;
                values[n] = fr;
                Step::Reflect
            }
        } else if fr < values[n - 1] {
            vertices[n] = xr;
            values[n] = fr;
            Step::Reflect
        } else {
            let (xc, outside) = if fr < values[n] {
                (along(cfg.beta, &xr), true)
            } else {
                (along(cfg.beta, &worst), false)
            };
            let fc = ev.eval(&xc)?;
            let accept = if outside { fc <= fr } else { fc < values[n] };
            if accept {
                vertices[n] = xc;
                values[n] = fc;
                if outside {
                    Step::ContractOutside
                } else {
                    Step::ContractInside
                }
            } else {
                let best = vertices[0].clone();
                for i in 1..=n {
                    let shrunk: Vec<f64> = best
                        .iter()
                        .zip(&vertices[i])
                        .map(|(b, x)| b + cfg.delta * (x - b))
                        .collect();
                    let fs = ev.eval(&shrunk)?;
                    if !fs.is_finite() {
                        return Err(Error::numerical(
                            "numerical.simplex.shrink",
                            format!("objective is not finite at shrunk vertex {shrunk:?}"),
                        ));
                    }
                    vertices[i] = shrunk;
                    values[i] = fs;
                }
                Step::Shrink
            }
        };
        order(&mut vertices, &mut values);
        trace.push(TraceEntry {
            iteration,
            op,
            best_value: values[0],
        });
    };

    Ok(NmResult {
        x_best: ev.best_x,
        f_best: ev.best_f,
        trace,
        stop_reason,
        state: SimplexState {
            vertices,
            values,
            iteration,
            n_evals: ev.n_evals,
        },
    })
}
