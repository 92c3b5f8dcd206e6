//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Criteria run sequentially so wall-clock limits are
//! measured without contention from each other.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cdis_core::cdis::{CdisParams, CoefficientVector};
use cdis_core::cube::{decode_cube, encode_cube, read_cube, StandardCube, STANDARD_DIMS};
use cdis_core::diffusion::{default_floor, fit_adc};
use cdis_core::fusion::{export_patient, resample_mask, resample_volume, FuseMode, FusionOptions};
use cdis_core::manifest::Grade;
use cdis_core::nifti::{decode_nifti, encode_nifti};
use cdis_core::optimizer::{evaluate_holdout, OptimizationProblem, TrainingPatient};
use cdis_core::phantom::{generate_cohort, generate_patient, CohortSpec, GradeMix, PhantomSpec};
use cdis_core::roc::{auc_oracle, auc_rank};
use cdis_core::simplex::{minimize, NmConfig};
use cdis_core::volume::{MaskVolume, Volume3D};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant) -> Result<Duration, String> {
    let took = started.elapsed();
    check(took < limit, || format!("took {took:.2?}, limit {limit:?}"))?;
    Ok(took)
}

fn random_instance(rng: &mut ChaCha8Rng, max_n: usize, levels: i32) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = rng.random_range(2..=max_n);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-levels..=levels)) / 8.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1u8)).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

fn auc_oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for i in 0..1000 {
        let (s, l) = random_instance(&mut rng, 200, 12);
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        tied += usize::from(sorted.len() < s.len());
        let fast = auc_rank(&s, &l).map_err(|e| e.to_string())?.auc;
        let slow = auc_oracle(&s, &l).map_err(|e| e.to_string())?;
        let d = (fast - slow).abs();
        check(d < 1e-12, || format!("instance {i}: |{fast} - {slow}| = {d:e}"))?;
        worst = worst.max(d);
    }
    let took = within(Duration::from_secs(10), t)?;
    Ok(format!("1000 instances ({tied} with ties), max |diff| {worst:e}, {took:.2?}"))
}

fn auc_monotone_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let (s, l) = random_instance(&mut rng, 200, 24);
        let base = auc_rank(&s, &l).map_err(|e| e.to_string())?.auc;
        let cube: Vec<f64> = s.iter().map(|x| x.powi(3)).collect();
        let exp: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        for (name, t) in [("x^3", &cube), ("exp", &exp)] {
            let a = auc_rank(t, &l).map_err(|e| e.to_string())?.auc;
            check(a == base, || format!("instance {i}, {name}: {a} != {base}"))?;
        }
    }
    Ok("100 instances, x^3 and exp, exact equality".into())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn adc_recovery() -> Outcome {
    let t = Instant::now();
    let spec = PhantomSpec::default();
    check(spec.dims == [32, 32, 8] && spec.bvalues.len() == 4, || "default phantom shape changed".into())?;
    let p = generate_patient(&spec, "A1").map_err(|e| e.to_string())?;
    let fit = fit_adc(&p.stack, default_floor(&p.stack)).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (f, tr) in [(&fit.adc, &p.truth.adc), (&fit.s0, &p.truth.s0)] {
        for (a, b) in f.data().iter().zip(tr.data()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    check(worst < 1e-9, || format!("noiseless max relative error {worst:e}"))?;

    let noisy = PhantomSpec {
        noise_sigma: 0.01,
        seed: 7,
        ..spec
    };
    let p = generate_patient(&noisy, "A2").map_err(|e| e.to_string())?;
    let fit = fit_adc(&p.stack, default_floor(&p.stack)).map_err(|e| e.to_string())?;
    let mut errs: Vec<f64> = fit.adc.data().iter().zip(p.truth.adc.data()).map(|(a, b)| rel_err(*a, *b)).collect();
    errs.sort_by(f64::total_cmp);
    let median = errs[errs.len() / 2];
    check(median < 0.05, || format!("noisy median ADC error {median:.4}"))?;
    let took = within(Duration::from_secs(5), t)?;
    Ok(format!("noiseless max rel err {worst:.2e}; sigma 0.01 median ADC err {:.2}%; {took:.2?}", median * 100.0))
}

fn nelder_mead_benchmarks() -> Outcome {
    let t = Instant::now();
    let cfg = NmConfig::default();
    type Bench = (&'static str, Box<dyn Fn(&[f64]) -> f64>, Vec<f64>, Vec<f64>);
    let benches: Vec<Bench> = vec![
        ("sphere2", Box::new(|x: &[f64]| x.iter().map(|v| v * v).sum()), vec![1.5, -0.8], vec![0.0; 2]),
        (
            "sphere5",
            Box::new(|x: &[f64]| x.iter().map(|v| v * v).sum()),
            vec![1.0, -2.0, 0.5, 3.0, -1.5],
            vec![0.0; 5],
        ),
        (
            "booth",
            Box::new(|x: &[f64]| (x[0] + 2.0 * x[1] - 7.0).powi(2) + (2.0 * x[0] + x[1] - 5.0).powi(2)),
            vec![0.0, 0.0],
            vec![1.0, 3.0],
        ),
        (
            "rosenbrock",
            Box::new(|x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)),
            vec![-1.2, 1.0],
            vec![1.0, 1.0],
        ),
    ];
    let mut detail = Vec::new();
    for (name, f, x0, opt) in &benches {
        let r = minimize(f, x0, &cfg).map_err(|e| e.to_string())?;
        let dist = r.x_best.iter().zip(opt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check(r.f_best < 1e-8 && dist < 1e-3, || {
            format!("{name}: f={:e} at {:?} after {} iterations ({:?})", r.f_best, r.x_best, r.iterations(), r.stop_reason)
        })?;
        detail.push(format!("{name} {:.1e}", r.f_best));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for q in 0..100 {
        let n = rng.random_range(2..=6);
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        // f = |M (x - c)|^2 + 0.1 |x - c|^2, positive definite
        let f = |x: &[f64]| -> f64 {
            let d: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
            let mr: f64 = m.iter().map(|row| row.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum();
            mr + 0.1 * d.iter().map(|v| v * v).sum::<f64>()
        };
        let r = minimize(f, &x0, &cfg).map_err(|e| e.to_string())?;
        for w in r.trace.windows(2) {
            check(w[1].best_value <= w[0].best_value, || {
                format!("quadratic {q}: best value rose at iteration {}", w[1].iteration)
            })?;
        }
    }
    let took = within(Duration::from_secs(10), t)?;
    Ok(format!("{}; 100 quadratic traces monotone; {took:.2?}", detail.join(", ")))
}

fn small_phantom(seed: u64, noise: f64) -> PhantomSpec {
    PhantomSpec {
        dims: [16, 16, 6],
        tumor_center: [7.5, 7.5, 2.5],
        tumor_radii: [4.0, 4.0, 2.0],
        noise_sigma: noise,
        seed,
        ..Default::default()
    }
}

fn scaling_degeneracy() -> Outcome {
    let patients: Vec<TrainingPatient> = (0..3)
        .map(|i| {
            let p = generate_patient(&small_phantom(100 + i, 0.05), &format!("S{i}")).map_err(|e| e.to_string())?;
            TrainingPatient::prepare(&p.stack, p.mask, &[1500.0], None).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let problem = OptimizationProblem::new(patients).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let rho: Vec<f64> = (0..problem.n_channels()).map(|_| rng.random_range(0.05..2.0)).collect();
        let twice: Vec<f64> = rho.iter().map(|r| 2.0 * r).collect();
        let a = problem.objective(&rho).map_err(|e| e.to_string())?;
        let b = problem.objective(&twice).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    check(worst < 1e-9, || format!("max |objective(rho) - objective(2 rho)| = {worst:e}"))?;
    Ok(format!("3 patients, 10 random rho, max diff {worst:e}"))
}

fn end_to_end_optimization() -> Outcome {
    let t = Instant::now();
    let template = PhantomSpec {
        tumor_adc: 1.0e-3,
        background_adc: 2.0e-3,
        noise_sigma: 0.02,
        seed: 20240601,
        ..Default::default()
    };
    let cohort = CohortSpec {
        template,
        n_patients: 9,
        grade_mix: GradeMix { i: 0.0, ii: 0.5, iii: 0.5 },
        jitter: 0.05,
    };
    let (patients, _) = generate_cohort(&cohort).map_err(|e| e.to_string())?;
    let mut prepared: Vec<TrainingPatient> = patients
        .iter()
        .map(|p| TrainingPatient::prepare(&p.data.stack, p.data.mask.clone(), &[1500.0], None).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let holdout = prepared.split_off(6);
    let problem = OptimizationProblem::new(prepared).map_err(|e| e.to_string())?;
    let r = problem.optimize().map_err(|e| e.to_string())?;
    let train_mean = r.objective_value;
    check(train_mean >= 0.95, || format!("training mean AUC {train_mean:.4} < 0.95"))?;
    check(train_mean >= r.baseline_auc, || format!("optimized {train_mean:.4} < baseline {:.4}", r.baseline_auc))?;
    let held = evaluate_holdout(&r.coefficients, &holdout, &problem.params).map_err(|e| e.to_string())?;
    let held_mean = held.iter().map(|(_, a)| a).sum::<f64>() / held.len() as f64;
    check((held_mean - train_mean).abs() <= 0.05, || {
        format!("holdout mean {held_mean:.4} vs training {train_mean:.4}")
    })?;
    let took = within(Duration::from_secs(60), t)?;
    Ok(format!(
        "train mean AUC {train_mean:.4} (baseline {:.4}), holdout mean {held_mean:.4}, {} iterations, {took:.2?}",
        r.baseline_auc,
        r.run.iterations()
    ))
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn io_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vol = Volume3D::from_fn([7, 5, 3], [0.75, 0.75, 3.5], |_, _, _| f64::from(rng.random_range(-1e4f32..1e4))).unwrap();
    let bytes = encode_nifti(&vol).map_err(|e| e.to_string())?;
    let back = decode_nifti(&bytes, Path::new("mem.nii")).map_err(|e| e.to_string())?;
    let bit_exact = back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    check(bit_exact && back.dims() == vol.dims() && back.spacing() == vol.spacing(), || "NIfTI round trip differs".into())?;
    check(encode_nifti(&back).ok() == Some(bytes), || "NIfTI re-encode differs".into())?;

    let other = vol.with_data(vol.data().iter().map(|v| v * 0.5).collect()).unwrap();
    let cube = StandardCube::new("C1", vec![("a".into(), vol.clone()), ("b".into(), other)]).unwrap();
    let cb = encode_cube(&cube);
    let cback = decode_cube(&cb, "C1").map_err(|e| e.to_string())?;
    let same = (0..2).all(|i| {
        cback.channel_data(i).iter().zip(cube.channel_data(i)).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    check(same && encode_cube(&cback) == cb, || "cube round trip differs".into())?;

    // Exported cubes: standard dims and declared channel count, deterministic.
    let dir = tempfile::tempdir().unwrap();
    let p = generate_patient(&small_phantom(9, 0.02), "E1").map_err(|e| e.to_string())?;
    let coeffs = CoefficientVector::ones(&p.stack);
    let c = CdisParams::default().apply(&p.stack, &coeffs).map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for (mode, keep) in [(FuseMode::Stack, false), (FuseMode::Product, false), (FuseMode::Product, true)] {
        let opts = FusionOptions { mode, keep_inputs: keep, ..Default::default() };
        let sub = dir.path().join(format!("{mode:?}{keep}"));
        std::fs::create_dir_all(&sub).unwrap();
        let row = export_patient(&c, &p.stack, &p.mask, Grade::III, &opts, &sub).map_err(|e| e.to_string())?;
        let cube = read_cube(sub.join(&row.cube_path)).map_err(|e| e.to_string())?;
        check(cube.dims() == STANDARD_DIMS && cube.n_channels() == opts.n_channels(), || {
            format!("{mode:?}: cube {:?} x {} channels", cube.dims(), cube.n_channels())
        })?;
        counts.push(cube.n_channels());
    }

    let cfg = dir.path().join("small.toml");
    std::fs::write(
        &cfg,
        "seed = 11\n[phantom]\nn_patients = 3\ndims = [16, 16, 6]\ntumor_center = [7.5, 7.5, 2.5]\ntumor_radii = [4.0, 4.0, 2.0]\n\n[optimizer]\nmax_iter = 30\n\n[fusion]\nexport_mask = true\n",
    )
    .unwrap();
    let mut runs = Vec::new();
    for (i, workers) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let args = ["cdistool", "--config", cfg.to_str().unwrap(), "--workers", workers, "pipeline", "all", "--out", out.to_str().unwrap()];
        let code = cdis_core::cli::run(args);
        check(code == 0, || format!("pipeline run {i} exited {code}"))?;
        runs.push(files_under(&out));
    }
    check(runs[0] == runs[1], || "two pipeline runs produced different artifacts".into())?;
    Ok(format!(
        "NIfTI and cube bit-exact; cubes {STANDARD_DIMS:?} with channels {counts:?}; two pipeline runs ({} files) byte-identical",
        runs[0].len()
    ))
}

fn resampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = Volume3D::from_fn([9, 7, 4], [1.0, 1.0, 2.5], |_, _, _| rng.random_range(-50.0..50.0)).unwrap();
    let same = resample_volume(&v, v.dims()).map_err(|e| e.to_string())?;
    check(same.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || "identity not bit-exact".into())?;
    let (lo, hi) = (v.min(), v.max());
    for target in [STANDARD_DIMS, [5, 3, 2], [17, 13, 9]] {
        let r = resample_volume(&v, target).map_err(|e| e.to_string())?;
        check(r.dims() == target, || format!("dims {:?}", r.dims()))?;
        check(r.data().iter().all(|x| (lo..=hi).contains(x)), || format!("{target:?}: value outside [{lo}, {hi}]"))?;
    }
    let p = generate_patient(&small_phantom(10, 0.0), "R1").map_err(|e| e.to_string())?;
    let m = resample_mask(&p.mask, STANDARD_DIMS).map_err(|e| e.to_string())?;
    check(m.data().iter().all(|&x| x <= 1) && m.has_both_classes(), || "resampled mask not binary".into())?;
    let again = MaskVolume::from_volume(&m.to_volume()).map_err(|e| e.to_string())?;
    check(again == m, || "mask volume conversion not binary".into())?;
    Ok("identity bit-exact; 3 targets within source range; mask binary at 224x224x25".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("auc oracle equivalence", auc_oracle_equivalence),
        ("auc monotone invariance", auc_monotone_invariance),
        ("adc recovery", adc_recovery),
        ("nelder-mead benchmarks", nelder_mead_benchmarks),
        ("scaling degeneracy", scaling_degeneracy),
        ("end-to-end phantom optimization", end_to_end_optimization),
        ("i/o round trips and determinism", io_round_trips),
        ("resampling", resampling),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
