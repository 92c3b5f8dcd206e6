//! The `cdistool` command line.
//!
//! Every subcommand writes a run report (see [`crate::report`]). Failures
//! print one line `error[<tag>]: <message>` on stderr and exit with
//! [`Error::exit_code`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::cdis::{read_coefficients, write_coefficients, CdisVolume, CoefficientVector};
use crate::config::PipelineConfig;
use crate::diffusion::{default_floor, extend_stack, fit_adc};
use crate::error::{Error, Result};
use crate::fusion::{export_patient, select_dwi, FuseMode};
use crate::manifest::{read_manifest, write_manifest, DatasetManifest, Grade, ManifestRow};
use crate::nifti::{read_nifti, write_nifti};
use crate::optimizer::{evaluate_holdout, OptimizationProblem, TrainingPatient};
use crate::pgm::write_slice;
use crate::phantom::generate_cohort;
use crate::report::RunReport;
use crate::roc::volume_auc;
use crate::stackdir::{read_stack_dir, write_stack_dir};
use crate::volume::{Channel, DwiStack, MaskVolume, Provenance, Volume3D};

#[derive(Debug, Parser)]
#[command(name = "cdistool", version, about = "Correlated diffusion imaging toolkit")]
pub struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true, visible_alias = "spec")]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to available cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Where to write the run report.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    /// Write the optimizer trace as JSON lines.
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
    /// Write PGM images of one axial slice, e.g. `z=3`.
    #[arg(long, global = true, value_parser = parse_dump_slice)]
    pub dump_slice: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_dump_slice(s: &str) -> std::result::Result<usize, String> {
    s.strip_prefix("z=")
        .and_then(|k| k.parse().ok())
        .ok_or_else(|| format!("expected z=K, got `{s}`"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic phantom cohorts.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Monoexponential ADC fitting.
    #[command(subcommand)]
    Adc(AdcCmd),
    /// Synthesis, mixing and coefficient optimization.
    #[command(subcommand)]
    Cdis(CdisCmd),
    /// Delineation metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Fuse and standardize a whole cohort into cubes.
    Fuse(FuseArgs),
    /// Fuse and standardize one patient.
    Export(ExportArgs),
    /// End-to-end runs.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCmd {
    /// Write a phantom cohort as stack directories plus `manifest.csv`.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AdcCmd {
    /// Fit ADC; writes `<out>` plus `<stem>_s0.nii` and `<stem>_fitmask.nii`.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum CdisCmd {
    /// Append synthetic b-value channels; writes a new stack directory.
    Synth {
        #[arg(long = "in")]
        input: PathBuf,
        /// Synthetic b-value (repeatable); defaults to the config.
        #[arg(long = "b")]
        bvalues: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mix and calibrate one stack with a coefficient file.
    Mix {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        coeffs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit coefficients over a cohort.
    Optimize {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Voxelwise AUC of a score volume against a mask.
    Auc {
        #[arg(long)]
        cdis: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub coeffs: PathBuf,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<FuseMode>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub coeffs: PathBuf,
    #[arg(long)]
    pub grade: Grade,
    #[arg(long)]
    pub mode: Option<FuseMode>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PipelineCmd {
    /// Phantoms, optimization, holdout scoring and fusion in one go.
    All {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let text = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {text}", e.tag());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::validation("cli.workers", "--workers must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::validation("cli.workers", e.to_string()))?;
    let cfg = PipelineConfig::load(cli.config.as_deref())?;
    pool.install(|| dispatch(cli, cfg))
}

/// Inputs and outputs touched by one command, for the report.
#[derive(Default)]
struct Files {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn finish(
    cli: &Cli,
    command: &str,
    cfg: &PipelineConfig,
    mut files: Files,
    metrics: serde_json::Value,
    default_report: PathBuf,
) -> Result<()> {
    if let Some(c) = &cli.config {
        files.inputs.push(c.clone());
    }
    let path = cli.report.clone().unwrap_or(default_report);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut report = RunReport::new(command, cfg.digest());
    report.metrics = metrics;
    report.write(&files.inputs, &files.outputs, &path)
}

/// `dir/report.json` for directory outputs, `<stem>.report.json` for files.
fn sibling_report(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.report.json"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => create_dir(d),
        None => Ok(()),
    }
}

fn dispatch(cli: &Cli, mut cfg: PipelineConfig) -> Result<()> {
    match &cli.command {
        Command::Phantom(PhantomCmd::Gen { out, n, seed }) => {
            if let Some(n) = n {
                cfg.phantom.n_patients = *n;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            cfg.validate()?;
            let (files, metrics) = phantom_gen(&cfg, out)?;
            finish(cli, "phantom gen", &cfg, files, metrics, out.join("report.json"))
        }
        Command::Adc(AdcCmd::Fit { input, out }) => {
            let mut files = Files::default();
            let loaded = read_stack_dir(input)?;
            files.inputs.extend(loaded.files);
            let map = fit_adc(&loaded.stack, default_floor(&loaded.stack))?;
            parent_dir(out)?;
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let s0 = out.with_file_name(format!("{stem}_s0.nii"));
            let fm = out.with_file_name(format!("{stem}_fitmask.nii"));
            write_nifti(&map.adc, out)?;
            write_nifti(&map.s0, &s0)?;
            write_nifti(&map.fit_mask.to_volume(), &fm)?;
            files.outputs.extend([out.clone(), s0, fm]);
            if let Some(k) = cli.dump_slice {
                let p = out.with_file_name(format!("{stem}_z{k}.pgm"));
                write_slice(&map.adc, k, &p)?;
                files.outputs.push(p);
            }
            let fitted = map.fit_mask.count();
            let metrics = serde_json::json!({
                "fitted_voxels": fitted,
                "adc_min": map.adc.min(),
                "adc_max": map.adc.max(),
            });
            finish(cli, "adc fit", &cfg, files, metrics, sibling_report(out))
        }
        Command::Cdis(CdisCmd::Synth { input, bvalues, out }) => {
            if !bvalues.is_empty() {
                cfg.bvalues.synthetic = bvalues.clone();
            }
            let mut files = Files::default();
            let loaded = read_stack_dir(input)?;
            files.inputs.extend(loaded.files);
            let native = native_only(&loaded.stack)?;
            let map = fit_adc(&native, default_floor(&native))?;
            let ext = extend_stack(&native, &map, &cfg.bvalues.synthetic)?;
            files.outputs.extend(write_stack_dir(&ext, loaded.mask.as_ref(), out)?);
            let metrics = serde_json::json!({ "bvalues": ext.bvalues() });
            finish(cli, "cdis synth", &cfg, files, metrics, out.join("report.json"))
        }
        Command::Cdis(CdisCmd::Mix { input, coeffs, out }) => {
            let mut files = Files::default();
            let loaded = read_stack_dir(input)?;
            files.inputs.extend(loaded.files);
            let coefficients = read_coefficients(coeffs)?;
            files.inputs.push(coeffs.clone());
            let stack = stack_for(&loaded.stack, &coefficients)?;
            let c = apply(&cfg, &stack, &coefficients)?;
            parent_dir(out)?;
            write_nifti(&c.signal, out)?;
            files.outputs.push(out.clone());
            if let Some(k) = cli.dump_slice {
                let dir = out.parent().unwrap_or(Path::new("."));
                let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                files.outputs.extend(dump_patient(&c, &stack, loaded.mask.as_ref(), &cfg, k, dir, &stem)?);
            }
            let mut metrics = serde_json::json!({ "calibration": c.calibration });
            if let Some(m) = &loaded.mask {
                metrics["auc"] = volume_auc(&c.signal, m)?.auc.into();
            }
            finish(cli, "cdis mix", &cfg, files, metrics, sibling_report(out))
        }
        Command::Cdis(CdisCmd::Optimize { cohort, out }) => {
            let cohort = cohort_path(cohort.as_ref(), &cfg)?;
            let mut files = Files::default();
            let (_, patients) = load_cohort(&cohort, &mut files)?;
            let (result_json, trained) = optimize(&cfg, patients)?;
            parent_dir(out)?;
            write_coefficients(&trained, out)?;
            files.outputs.push(out.clone());
            if let Some(t) = &cli.trace {
                parent_dir(t)?;
                std::fs::write(t, &result_json.1).map_err(|e| Error::io(t, e))?;
                files.outputs.push(t.clone());
            }
            finish(cli, "cdis optimize", &cfg, files, result_json.0, sibling_report(out))
        }
        Command::Eval(EvalCmd::Auc { cdis, mask, json }) => {
            let scores = read_nifti(cdis)?;
            let m = MaskVolume::from_volume(&read_nifti(mask)?)?;
            let roc = volume_auc(&scores, &m)?;
            let metrics = serde_json::json!({
                "auc": roc.auc,
                "n_pos": roc.n_pos,
                "n_neg": roc.n_neg,
            });
            println!("auc={}", roc.auc);
            let mut files = Files {
                inputs: vec![cdis.clone(), mask.clone()],
                outputs: Vec::new(),
            };
            if let Some(j) = json {
                parent_dir(j)?;
                let doc = serde_json::json!({
                    "auc": roc.auc,
                    "n_pos": roc.n_pos,
                    "n_neg": roc.n_neg,
                    "roc": roc.points,
                });
                let text = serde_json::to_string_pretty(&doc).expect("plain data") + "\n";
                std::fs::write(j, text).map_err(|e| Error::io(j, e))?;
                files.outputs.push(j.clone());
            }
            let default = json.as_ref().map(|j| sibling_report(j)).unwrap_or_else(|| PathBuf::from("eval_auc.report.json"));
            finish(cli, "eval auc", &cfg, files, metrics, default)
        }
        Command::Fuse(a) => {
            if let Some(m) = a.mode {
                cfg.fusion.mode = m;
            }
            let cohort = cohort_path(a.cohort.as_ref(), &cfg)?;
            let mut files = Files::default();
            let coefficients = read_coefficients(&a.coeffs)?;
            files.inputs.push(a.coeffs.clone());
            let (manifest, patients) = load_cohort(&cohort, &mut files)?;
            let metrics = fuse_cohort(&cfg, &coefficients, &manifest, &patients, &a.out, cli.dump_slice, &mut files)?;
            finish(cli, "fuse", &cfg, files, metrics, a.out.join("report.json"))
        }
        Command::Export(a) => {
            if let Some(m) = a.mode {
                cfg.fusion.mode = m;
            }
            let mut files = Files::default();
            let loaded = read_stack_dir(&a.input)?;
            files.inputs.extend(loaded.files);
            let coefficients = read_coefficients(&a.coeffs)?;
            files.inputs.push(a.coeffs.clone());
            let mask = loaded
                .mask
                .ok_or_else(|| Error::validation("export.mask", format!("{} has no mask", a.input.display())))?;
            create_dir(&a.out)?;
            let stack = stack_for(&loaded.stack, &coefficients)?;
            let c = apply(&cfg, &stack, &coefficients)?;
            let row = export_patient(&c, &stack, &mask, a.grade, &cfg.fusion, &a.out)?;
            files.outputs.extend(cube_files(&row, &cfg, &a.out));
            if let Some(k) = cli.dump_slice {
                files.outputs.extend(dump_patient(&c, &stack, Some(&mask), &cfg, k, &a.out, stack.patient_id())?);
            }
            let metrics = serde_json::json!({
                "patient_id": row.patient_id,
                "cube_path": row.cube_path,
                "calibration": c.calibration,
            });
            finish(cli, "export", &cfg, files, metrics, a.out.join(format!("{}.report.json", row.patient_id)))
        }
        Command::Pipeline(PipelineCmd::All { out }) => {
            let out = out.clone().unwrap_or_else(|| cfg.io.out_dir.clone());
            let metrics = pipeline_all(&cfg, &out, cli.dump_slice, cli.trace.as_deref())?;
            let report = cli.report.clone().unwrap_or_else(|| out.join("report.json"));
            let mut files = Files::default();
            if let Some(c) = &cli.config {
                files.inputs.push(c.clone());
            }
            files.outputs = list_files(&out, &report)?;
            let mut r = RunReport::new("pipeline all", cfg.digest());
            r.metrics = metrics;
            r.write(&files.inputs, &files.outputs, &report)
        }
    }
}

fn phantom_gen(cfg: &PipelineConfig, out: &Path) -> Result<(Files, serde_json::Value)> {
    let (patients, manifest) = generate_cohort(&cfg.cohort_spec())?;
    create_dir(out)?;
    let mut files = Files::default();
    let written: Vec<Result<Vec<PathBuf>>> = patients
        .par_iter()
        .map(|p| write_stack_dir(&p.data.stack, Some(&p.data.mask), &out.join(&p.patient_id)))
        .collect();
    for w in written {
        files.outputs.extend(w?);
    }
    let mpath = out.join("manifest.csv");
    write_manifest(&manifest, &mpath)?;
    files.outputs.push(mpath);
    let metrics = serde_json::json!({
        "n_patients": manifest.len(),
        "grade_counts": manifest.grade_counts(),
        "class_counts": manifest.class_counts(),
    });
    Ok((files, metrics))
}

fn cohort_path(cli: Option<&PathBuf>, cfg: &PipelineConfig) -> Result<PathBuf> {
    cli.cloned()
        .or_else(|| cfg.io.cohort.clone())
        .ok_or_else(|| Error::validation("config.io.cohort", "no cohort manifest given (--cohort or [io] cohort)"))
}

/// A cohort patient loaded from its stack directory.
struct LoadedPatient {
    row: ManifestRow,
    stack: DwiStack,
    mask: MaskVolume,
}

fn load_cohort(manifest_path: &Path, files: &mut Files) -> Result<(DatasetManifest, Vec<LoadedPatient>)> {
    let manifest = read_manifest(manifest_path)?;
    files.inputs.push(manifest_path.to_path_buf());
    if manifest.is_empty() {
        return Err(Error::validation("manifest.empty", format!("{} lists no patients", manifest_path.display())));
    }
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let loaded: Vec<Result<(LoadedPatient, Vec<PathBuf>)>> = manifest
        .rows()
        .par_iter()
        .map(|row| {
            let dir = base.join(&row.cube_path);
            let l = read_stack_dir(&dir)?;
            let mask = l
                .mask
                .ok_or_else(|| Error::validation("manifest.mask", format!("{}: stack has no mask", dir.display())))?;
            if l.stack.patient_id() != row.patient_id {
                return Err(Error::validation(
                    "manifest.patient_id",
                    format!("{}: stack is {}, manifest says {}", dir.display(), l.stack.patient_id(), row.patient_id),
                ));
            }
            Ok((
                LoadedPatient {
                    row: row.clone(),
                    stack: l.stack,
                    mask,
                },
                l.files,
            ))
        })
        .collect();
    let mut patients = Vec::with_capacity(loaded.len());
    for l in loaded {
        let (p, f) = l?;
        files.inputs.extend(f);
        patients.push(p);
    }
    Ok((manifest, patients))
}

fn native_only(stack: &DwiStack) -> Result<DwiStack> {
    let native: Vec<Channel> = stack.native().cloned().collect();
    DwiStack::new(stack.patient_id(), native)
}

/// The native channels of `stack` plus whatever synthetic channels the
/// coefficient file expects, synthesized from a fresh fit.
fn stack_for(stack: &DwiStack, coeffs: &CoefficientVector) -> Result<DwiStack> {
    let native = native_only(stack)?;
    let synth: Vec<f64> = coeffs
        .channel_bvalues
        .iter()
        .zip(&coeffs.provenance)
        .filter(|(_, p)| **p == Provenance::Synthetic)
        .map(|(b, _)| *b)
        .collect();
    if synth.is_empty() {
        return Ok(native);
    }
    let map = fit_adc(&native, default_floor(&native))?;
    extend_stack(&native, &map, &synth)
}

fn apply(cfg: &PipelineConfig, stack: &DwiStack, coeffs: &CoefficientVector) -> Result<CdisVolume> {
    let c = cfg.cdis.params().apply(stack, coeffs)?;
    if cfg.cdis.fail_on_degenerate && c.calibration.degenerate {
        return Err(Error::numerical(
            "numerical.calibration.degenerate",
            format!(
                "patient {}: percentiles {} and {} coincide at {}",
                stack.patient_id(),
                c.calibration.p_lo,
                c.calibration.p_hi,
                c.calibration.v_lo
            ),
        ));
    }
    Ok(c)
}

/// Runs the optimizer; returns ((metrics, trace), normalized coefficients).
fn optimize(cfg: &PipelineConfig, patients: Vec<LoadedPatient>) -> Result<((serde_json::Value, String), CoefficientVector)> {
    for id in &cfg.optimizer.holdout {
        if !patients.iter().any(|p| &p.row.patient_id == id) {
            return Err(Error::validation("config.optimizer.holdout", format!("holdout patient {id} is not in the cohort")));
        }
    }
    let prepared: Vec<Result<(bool, TrainingPatient)>> = patients
        .into_par_iter()
        .map(|p| {
            let held = cfg.optimizer.holdout.contains(&p.row.patient_id);
            let native = native_only(&p.stack)?;
            Ok((held, TrainingPatient::prepare(&native, p.mask, &cfg.bvalues.synthetic, None)?))
        })
        .collect();
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for p in prepared {
        let (held, tp) = p?;
        if held {
            holdout.push(tp);
        } else {
            train.push(tp);
        }
    }
    let mut problem = OptimizationProblem::new(train)?;
    problem.mode = cfg.optimizer.objective_mode;
    problem.bounds = cfg.cdis.bounds;
    problem.params = cfg.cdis.params();
    problem.nm = cfg.optimizer.nm.clone();
    problem.subsample_stride = cfg.optimizer.subsample_stride;
    if !cfg.cdis.x0.is_empty() {
        problem.x0 = cfg.cdis.x0.clone();
    }
    let result = problem.optimize()?;
    let mut metrics = result.report_json();
    holdout.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if !holdout.is_empty() {
        let aucs = evaluate_holdout(&result.coefficients, &holdout, &problem.params)?;
        let mean = aucs.iter().map(|(_, a)| a).sum::<f64>() / aucs.len() as f64;
        metrics["holdout_auc"] = aucs
            .iter()
            .map(|(id, a)| serde_json::json!({"patient_id": id, "auc": a}))
            .collect::<Vec<_>>()
            .into();
        metrics["holdout_mean_auc"] = mean.into();
    }
    let trace = result.run.trace_jsonl();
    let coeffs = result.coefficients.clone().with_bounds(cfg.cdis.bounds);
    Ok(((metrics, trace), coeffs))
}

fn cube_files(row: &ManifestRow, cfg: &PipelineConfig, out: &Path) -> Vec<PathBuf> {
    let mut v = vec![out.join(&row.cube_path)];
    if cfg.fusion.export_mask {
        v.push(out.join(format!("{}_mask.cube", row.patient_id)));
    }
    v
}

fn dump_patient(
    c: &CdisVolume,
    stack: &DwiStack,
    mask: Option<&MaskVolume>,
    cfg: &PipelineConfig,
    k: usize,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut dump = |name: &str, v: &Volume3D| -> Result<()> {
        let p = dir.join(format!("{stem}_{name}_z{k}.pgm"));
        write_slice(v, k, &p)?;
        out.push(p);
        Ok(())
    };
    dump("cdis", &c.signal)?;
    for (name, v) in select_dwi(stack, &cfg.fusion.dwi_bvalues)? {
        dump(&name, &v)?;
    }
    if let Some(m) = mask {
        dump("mask", &m.to_volume())?;
    }
    Ok(out)
}

fn fuse_cohort(
    cfg: &PipelineConfig,
    coeffs: &CoefficientVector,
    manifest: &DatasetManifest,
    patients: &[LoadedPatient],
    out: &Path,
    dump: Option<usize>,
    files: &mut Files,
) -> Result<serde_json::Value> {
    create_dir(out)?;
    let slices = out.join("slices");
    if dump.is_some() {
        create_dir(&slices)?;
    }
    type Fused = (ManifestRow, Vec<PathBuf>);
    let results: Vec<Result<Fused>> = patients
        .par_iter()
        .map(|p| {
            let stack = stack_for(&p.stack, coeffs)?;
            let c = apply(cfg, &stack, coeffs)?;
            let row = export_patient(&c, &stack, &p.mask, p.row.grade, &cfg.fusion, out)?;
            let mut written = cube_files(&row, cfg, out);
            if let Some(k) = dump {
                written.extend(dump_patient(&c, &stack, Some(&p.mask), cfg, k, &slices, stack.patient_id())?);
            }
            Ok((row, written))
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let (row, written) = r?;
        files.outputs.extend(written);
        rows.push(row);
    }
    let fused = DatasetManifest::new(rows)?;
    let mpath = out.join("manifest.csv");
    write_manifest(&fused, &mpath)?;
    files.outputs.push(mpath);
    Ok(serde_json::json!({
        "n_patients": manifest.len(),
        "mode": cfg.fusion.mode,
        "n_channels": cfg.fusion.n_channels(),
        "dims": cfg.fusion.target_dims,
    }))
}

fn pipeline_all(cfg: &PipelineConfig, out: &Path, dump: Option<usize>, trace: Option<&Path>) -> Result<serde_json::Value> {
    create_dir(out)?;
    let phantoms = out.join("phantoms");
    let (_, gen_metrics) = phantom_gen(cfg, &phantoms)?;

    let mut files = Files::default();
    let (manifest, patients) = load_cohort(&phantoms.join("manifest.csv"), &mut files)?;
    let ((opt_metrics, trace_text), coeffs) = optimize(cfg, patients)?;
    write_coefficients(&coeffs, out.join("coeffs.json"))?;
    let trace_path = trace.map(Path::to_path_buf).unwrap_or_else(|| out.join("trace.jsonl"));
    std::fs::write(&trace_path, trace_text).map_err(|e| Error::io(&trace_path, e))?;

    let (_, patients) = load_cohort(&phantoms.join("manifest.csv"), &mut files)?;
    let fuse_metrics = fuse_cohort(cfg, &coeffs, &manifest, &patients, &out.join("cubes"), dump, &mut files)?;
    Ok(serde_json::json!({
        "phantom": gen_metrics,
        "optimize": opt_metrics,
        "fuse": fuse_metrics,
    }))
}

/// Every file under `dir` except `skip`, sorted.
fn list_files(dir: &Path, skip: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path != skip {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}
