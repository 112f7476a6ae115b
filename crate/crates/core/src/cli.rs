//! `kdis` subcommands.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data or format error,
//! 4 a requested check failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::config::{ExperimentConfig, RunManifest};
use crate::data::{
    build_folds, ingest_csv, write_csv, Dataset, SensorStream, Standardizer, TimeWindow,
};
use crate::error::KdisError;
use crate::evaluation::{format_table, report_csv, summarize_folds, MetricsReport, ReportRow};
use crate::gradcheck::{run_gradcheck, GradPerturbation, GradcheckConfig};
use crate::network::{deserialize_expecting, serialize, ArchitectureSpec, CnnParameters};
use crate::orchestrator::{
    evaluate, fit_model, run_case_experiment, run_multi_unit_experiment, unit_trials,
    window_streams, CaseReport, CaseRoles, FitRequest, FittedModel, ModelRole,
};
use crate::parallel::Execution;
use crate::synthesizer::generate_scenario;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

const MODEL_EXT: &str = "kdis";
const SCALE_SUFFIX: &str = ".standardizer.json";

/// A failed command: message plus exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CHECK,
            message: message.into(),
        }
    }
}

impl From<KdisError> for CliError {
    fn from(e: KdisError) -> Self {
        let code = match &e {
            KdisError::Config(_) | KdisError::InvalidArgument(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "kdis",
    version,
    about = "Knowledge-distillation information sharing between units"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `io.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct DataSelect {
    /// Sensor CSV; overrides `io.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Unit whose trials are used.
    #[arg(long)]
    unit: Option<String>,
    /// Comma-separated trial groups.
    #[arg(long, value_delimiter = ',')]
    trials: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    Teacher,
    StudentKd,
    Baseline,
    DataRich,
}

impl From<RoleArg> for ModelRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Teacher => ModelRole::Teacher,
            RoleArg::StudentKd => ModelRole::StudentKd,
            RoleArg::Baseline => ModelRole::Baseline,
            RoleArg::DataRich => ModelRole::DataRich,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured scenario as a sensor CSV.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model role.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: DataSelect,
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Frozen teacher model file (student-kd only).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Student epoch budget of case 1 or 2.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        case: u8,
    },
    /// Score a model file on a unit's trials.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: DataSelect,
        #[arg(long)]
        model: PathBuf,
    },
    /// Both cases over every fold, plus the multi-unit run when the scenario
    /// has more than two units.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        /// Sensor CSV; overrides `io.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train folds and students on the thread pool.
        #[arg(long)]
        parallel: bool,
        /// Exit 4 unless the KD student beats the baseline and trains faster
        /// than the data-rich network in every case, and every multi-unit KD
        /// student matches its baseline with the teacher unchanged.
        #[arg(long)]
        check: bool,
    },
    /// Backward pass against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, hide = true)]
        perturb_index: Option<usize>,
        #[arg(long, hide = true, default_value_t = 1e-2)]
        perturb_delta: f64,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common } => cmd_gen_data(&common),
        Command::Train {
            common,
            select,
            role,
            teacher,
            case,
        } => cmd_train(&common, &select, role.into(), teacher.as_deref(), case),
        Command::Evaluate {
            common,
            select,
            model,
        } => cmd_evaluate(&common, &select, &model),
        Command::RunExperiment {
            common,
            data,
            parallel,
            check,
        } => cmd_run_experiment(&common, data, parallel, check),
        Command::Gradcheck {
            common,
            trials,
            perturb_index,
            perturb_delta,
        } => {
            let perturb = perturb_index.map(|index| GradPerturbation {
                index,
                delta: perturb_delta,
            });
            cmd_gradcheck(&common, trials, perturb)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

struct Context {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
}

fn context(common: &Common) -> CliResult<Context> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            KdisError::Io { .. } => CliError::usage(e.to_string()),
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.io.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("kdis-out"));
    fs::create_dir_all(&out)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out.display())))?;
    Ok(Context {
        seed: cfg.train.seed,
        cfg,
        out,
    })
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn write_out(out: &Path, rel: &str, bytes: &[u8], outputs: &mut Vec<String>) -> CliResult<()> {
    let path = out.join(rel);
    atomic_write(&path, bytes)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    outputs.push(rel.to_string());
    Ok(())
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> CliResult<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let path = out.join("manifest.json");
    atomic_write(&path, json.as_bytes())
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

/// Model file, standardizer sidecar and training log under `stem`.
fn save_fitted(
    out: &Path,
    stem: &str,
    fitted: &FittedModel,
    outputs: &mut Vec<String>,
) -> CliResult<()> {
    write_out(
        out,
        &format!("{stem}.{MODEL_EXT}"),
        &serialize(&fitted.model.params),
        outputs,
    )?;
    let scale =
        serde_json::to_string_pretty(&fitted.standardizer).expect("standardizer serializes");
    write_out(
        out,
        &format!("{stem}{SCALE_SUFFIX}"),
        scale.as_bytes(),
        outputs,
    )?;
    write_out(
        out,
        &format!("{stem}.log.csv"),
        fitted.log.to_csv().as_bytes(),
        outputs,
    )
}

fn sidecar_path(model: &Path) -> PathBuf {
    let stem = model
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    model.with_file_name(format!("{stem}{SCALE_SUFFIX}"))
}

/// A model file and its standardizer sidecar.
pub fn load_model(
    path: &Path,
    spec: &ArchitectureSpec,
) -> Result<(CnnParameters, Standardizer), KdisError> {
    let bytes = fs::read(path).map_err(|e| KdisError::io(path, e))?;
    let params = deserialize_expecting(&bytes, spec)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| KdisError::io(&side, e))?;
    let scale: Standardizer = serde_json::from_str(&text).map_err(|e| KdisError::Parse {
        line: e.line(),
        message: format!("{}: {e}", side.display()),
    })?;
    Ok((params, scale))
}

fn load_streams(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    spec: &ArchitectureSpec,
) -> CliResult<Vec<SensorStream>> {
    match data.or(cfg.io.data.as_deref()) {
        Some(path) => Ok(ingest_csv(path, spec.num_classes())?),
        None => Ok(generate_scenario(&cfg.scenario)?),
    }
}

fn windows_for(
    cfg: &ExperimentConfig,
    streams: &[SensorStream],
    unit: &str,
    trials: &[String],
) -> CliResult<Vec<TimeWindow>> {
    let all = window_streams(
        streams,
        cfg.window.window()?,
        cfg.window.reduction,
        cfg.window.label_rule,
    )?;
    let mut out = Vec::new();
    for t in trials {
        let w = all
            .get(&(unit.to_string(), t.clone()))
            .ok_or_else(|| CliError::usage(format!("unit `{unit}` has no trial `{t}`")))?;
        out.extend(w.iter().cloned());
    }
    if out.is_empty() {
        return Err(CliError::usage(format!(
            "no windows selected for unit `{unit}`"
        )));
    }
    Ok(out)
}

fn first_poor_unit(cfg: &ExperimentConfig) -> CliResult<String> {
    cfg.scenario
        .poor_units()
        .next()
        .map(|u| u.unit_id.clone())
        .ok_or_else(|| CliError::usage("scenario has no data-poor unit"))
}

fn execution(parallel: bool) -> Execution {
    if parallel {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(common: &Common) -> CliResult<()> {
    let ctx = context(common)?;
    let streams = generate_scenario(&ctx.cfg.scenario)?;
    let mut bytes = Vec::new();
    write_csv(&streams, &mut bytes)?;
    let mut manifest = RunManifest::new("gen-data", &ctx.cfg, ctx.seed);
    write_out(&ctx.out, "data.csv", &bytes, &mut manifest.outputs)?;
    write_manifest(&ctx.out, &manifest)?;
    let groups: std::collections::BTreeSet<_> = streams
        .iter()
        .map(|s| (s.unit_id.clone(), s.trial_id.clone()))
        .collect();
    println!(
        "wrote {} ({} streams)",
        ctx.out.join("data.csv").display(),
        groups.len()
    );
    Ok(())
}

fn cmd_train(
    common: &Common,
    select: &DataSelect,
    role: ModelRole,
    teacher_path: Option<&Path>,
    case: u8,
) -> CliResult<()> {
    if role == ModelRole::StudentKd && teacher_path.is_none() {
        return Err(CliError::usage(
            "--role student-kd requires --teacher <model file>",
        ));
    }
    if role != ModelRole::StudentKd && teacher_path.is_some() {
        return Err(CliError::usage(
            "--teacher only applies to --role student-kd",
        ));
    }
    let ctx = context(common)?;
    let cfg = &ctx.cfg;
    let spec = cfg.architecture()?;
    let teacher = teacher_path.map(|p| load_model(p, &spec)).transpose()?;
    let streams = load_streams(cfg, select.data.as_deref(), &spec)?;

    let rich = cfg.scenario.rich_unit_id.clone();
    let unit = match (&select.unit, role) {
        (Some(u), _) => u.clone(),
        (None, ModelRole::Teacher) => rich.clone(),
        (None, _) => first_poor_unit(cfg)?,
    };
    let available = unit_trials(&streams, &unit);
    let trials = if !select.trials.is_empty() {
        select.trials.clone()
    } else if role == ModelRole::Teacher {
        available.clone()
    } else {
        available.first().cloned().into_iter().collect()
    };
    let mut windows = windows_for(cfg, &streams, &unit, &trials)?;
    if role == ModelRole::DataRich {
        let mut rich_windows = windows_for(cfg, &streams, &rich, &unit_trials(&streams, &rich))?;
        rich_windows.append(&mut windows);
        windows = rich_windows;
    }

    let train_cfg = match role {
        ModelRole::Teacher => cfg.train_config(cfg.train.epochs_teacher, None)?,
        ModelRole::StudentKd => cfg.train_config(
            cfg.train.epochs_student[case as usize - 1],
            Some(cfg.distill_config()?),
        )?,
        _ => cfg.train_config(cfg.train.epochs_student[case as usize - 1], None)?,
    };
    info!(
        "training {} on {} windows of {unit}",
        role.slug(),
        windows.len()
    );
    let fitted = fit_model(
        &FitRequest {
            role,
            unit_id: &unit,
            fold: None,
            spec: &spec,
            cfg: &train_cfg,
            seed: ctx.seed,
        },
        &windows,
        teacher.as_ref().map(|(p, s)| (p, s)),
    )?;

    let manifest_path = ctx.out.join("manifest.json");
    let mut manifest = fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
        .filter(|m| m.command == "train" && m.config_digest == format!("{:016x}", cfg.digest()))
        .unwrap_or_else(|| RunManifest::new("train", cfg, ctx.seed));
    let mut outputs = Vec::new();
    save_fitted(&ctx.out, role.slug(), &fitted, &mut outputs)?;
    for o in outputs {
        if !manifest.outputs.contains(&o) {
            manifest.outputs.push(o);
        }
    }
    manifest
        .timings
        .insert(format!("train/{}", role.slug()), fitted.train_seconds);
    write_manifest(&ctx.out, &manifest)?;

    let last = fitted.log.entries.last();
    println!(
        "{}: {} samples, {} epochs, final loss {:.6}, train accuracy {:.4}, {:.2}s -> {}",
        role.slug(),
        fitted.train_samples,
        fitted.log.entries.len(),
        last.map_or(f64::NAN, |e| e.loss),
        last.map_or(f64::NAN, |e| e.train_acc),
        fitted.train_seconds,
        ctx.out
            .join(format!("{}.{MODEL_EXT}", role.slug()))
            .display()
    );
    Ok(())
}

fn cmd_evaluate(common: &Common, select: &DataSelect, model: &Path) -> CliResult<()> {
    let ctx = context(common)?;
    let cfg = &ctx.cfg;
    let spec = cfg.architecture()?;
    let (params, scale) = load_model(model, &spec)?;
    let streams = load_streams(cfg, select.data.as_deref(), &spec)?;
    let unit = match &select.unit {
        Some(u) => u.clone(),
        None => first_poor_unit(cfg)?,
    };
    let trials = if select.trials.is_empty() {
        unit_trials(&streams, &unit)
    } else {
        select.trials.clone()
    };
    let stem = model
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let mut rows = Vec::new();
    let mut per_trial = Vec::new();
    for (i, t) in trials.iter().enumerate() {
        let windows = windows_for(cfg, &streams, &unit, std::slice::from_ref(t))?;
        let report = evaluate(&params, &Dataset::standardized(&windows, &scale)?)?;
        per_trial.push(report);
        rows.push(ReportRow {
            model: stem.clone(),
            fold: Some(i),
            report,
        });
    }
    let all = windows_for(cfg, &streams, &unit, &trials)?;
    let pooled = evaluate(&params, &Dataset::standardized(&all, &scale)?)?;
    let summary = summarize_folds(&per_trial)?;
    rows.push(ReportRow {
        model: stem.clone(),
        fold: None,
        report: summary,
    });
    let mut manifest = RunManifest::new("evaluate", cfg, ctx.seed);
    write_out(
        &ctx.out,
        &format!("{stem}.metrics.csv"),
        report_csv(&rows).as_bytes(),
        &mut manifest.outputs,
    )?;
    write_manifest(&ctx.out, &manifest)?;
    print!(
        "{}",
        format_table(
            &format!("{stem} on {unit} ({} windows)", all.len()),
            &[
                ("per-trial mean".to_string(), summary),
                ("pooled".to_string(), pooled)
            ]
        )
    );
    Ok(())
}

fn case_rows(report: &CaseReport) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for role in ModelRole::ALL {
        for fold in &report.folds {
            rows.push(ReportRow {
                model: role.slug().to_string(),
                fold: Some(fold.fold),
                report: fold.reports[&role],
            });
        }
        rows.push(ReportRow {
            model: role.slug().to_string(),
            fold: None,
            report: report.summary[&role],
        });
    }
    rows
}

fn table_rows(summary: &BTreeMap<ModelRole, MetricsReport>) -> Vec<(String, MetricsReport)> {
    ModelRole::ALL
        .iter()
        .map(|r| (r.title().to_string(), summary[r]))
        .collect()
}

fn cmd_run_experiment(
    common: &Common,
    data: Option<PathBuf>,
    parallel: bool,
    check: bool,
) -> CliResult<()> {
    let ctx = context(common)?;
    let cfg = &ctx.cfg;
    let spec = cfg.architecture()?;
    let streams = load_streams(cfg, data.as_deref(), &spec)?;
    let exec = execution(parallel || cfg.train.parallel);
    let rich = cfg.scenario.rich_unit_id.clone();
    let poor: Vec<String> = cfg
        .scenario
        .poor_units()
        .map(|u| u.unit_id.clone())
        .collect();
    let first_poor = poor
        .first()
        .cloned()
        .ok_or_else(|| CliError::usage("scenario has no data-poor unit"))?;
    let case1 = CaseRoles {
        teacher_unit: rich.clone(),
        student_unit: first_poor,
    };
    let mut manifest = RunManifest::new("run-experiment", cfg, ctx.seed);
    let mut failures = Vec::new();
    let started = Instant::now();

    for (idx, roles) in [case1.clone(), case1.swapped()].into_iter().enumerate() {
        let name = format!("case{}", idx + 1);
        let settings = cfg.experiment_settings(idx, ctx.seed, exec)?;
        let plan = build_folds(
            &unit_trials(&streams, &roles.student_unit),
            &unit_trials(&streams, &roles.teacher_unit),
        )?;
        info!(
            "{name}: teacher {} -> student {}, {} folds",
            roles.teacher_unit,
            roles.student_unit,
            plan.folds.len()
        );
        let t0 = Instant::now();
        let report = run_case_experiment(&streams, &roles, &plan, &settings)?;
        manifest
            .timings
            .insert(format!("{name}/total"), t0.elapsed().as_secs_f64());

        let teacher = &report.folds[0].models[&ModelRole::Teacher];
        save_fitted(
            &ctx.out,
            &format!("{name}/teacher"),
            teacher,
            &mut manifest.outputs,
        )?;
        manifest
            .timings
            .insert(format!("{name}/train/teacher"), teacher.train_seconds);
        for fold in &report.folds {
            for role in [
                ModelRole::Baseline,
                ModelRole::StudentKd,
                ModelRole::DataRich,
            ] {
                let fitted = &fold.models[&role];
                save_fitted(
                    &ctx.out,
                    &format!("{name}/fold{}/{}", fold.fold, role.slug()),
                    fitted,
                    &mut manifest.outputs,
                )?;
            }
        }
        for role in [
            ModelRole::Baseline,
            ModelRole::StudentKd,
            ModelRole::DataRich,
        ] {
            manifest.timings.insert(
                format!("{name}/train/{}/mean_per_fold", role.slug()),
                report.mean_train_seconds(role),
            );
        }
        write_out(
            &ctx.out,
            &format!("{name}/metrics.csv"),
            report_csv(&case_rows(&report)).as_bytes(),
            &mut manifest.outputs,
        )?;
        let title = format!(
            "Case {}: teacher {} ({} trials), student {}",
            idx + 1,
            roles.teacher_unit,
            plan.teacher_trials.len(),
            roles.student_unit
        );
        let table = format_table(&title, &table_rows(&report.summary));
        write_out(
            &ctx.out,
            &format!("{name}/table.txt"),
            table.as_bytes(),
            &mut manifest.outputs,
        )?;
        print!("{table}");
        let fold0 = &report.folds[0].models;
        println!(
            "  training samples per fold: student {}, data-rich {}; mean train time KD {:.2}s, data-rich {:.2}s\n",
            fold0[&ModelRole::StudentKd].train_samples,
            fold0[&ModelRole::DataRich].train_samples,
            report.mean_train_seconds(ModelRole::StudentKd),
            report.mean_train_seconds(ModelRole::DataRich),
        );

        let kd = report.summary[&ModelRole::StudentKd].accuracy;
        let base = report.summary[&ModelRole::Baseline].accuracy;
        if kd <= base {
            failures.push(format!(
                "{name}: KD accuracy {kd:.4} does not exceed baseline {base:.4}"
            ));
        }
        let (t_kd, t_dr) = (
            report.mean_train_seconds(ModelRole::StudentKd),
            report.mean_train_seconds(ModelRole::DataRich),
        );
        if t_kd >= t_dr {
            failures.push(format!(
                "{name}: KD train time {t_kd:.3}s not below data-rich {t_dr:.3}s"
            ));
        }
    }

    if poor.len() > 1 {
        let settings = cfg.experiment_settings(0, ctx.seed, exec)?;
        let t0 = Instant::now();
        let report = run_multi_unit_experiment(&streams, &rich, &poor, &settings)?;
        manifest
            .timings
            .insert("multi/total".into(), t0.elapsed().as_secs_f64());
        save_fitted(
            &ctx.out,
            "multi/teacher",
            &report.teacher,
            &mut manifest.outputs,
        )?;
        let mut rows = Vec::new();
        for (i, u) in report.units.iter().enumerate() {
            save_fitted(
                &ctx.out,
                &format!("multi/{}/baseline", u.unit_id),
                &u.baseline,
                &mut manifest.outputs,
            )?;
            save_fitted(
                &ctx.out,
                &format!("multi/{}/student-kd", u.unit_id),
                &u.student_kd,
                &mut manifest.outputs,
            )?;
            rows.push(ReportRow {
                model: format!("{}/baseline", u.unit_id),
                fold: Some(i),
                report: u.baseline_report,
            });
            rows.push(ReportRow {
                model: format!("{}/student-kd", u.unit_id),
                fold: Some(i),
                report: u.kd_report,
            });
            println!(
                "multi-unit {}: baseline accuracy {:.4}, KD accuracy {:.4}",
                u.unit_id, u.baseline_report.accuracy, u.kd_report.accuracy
            );
            if u.kd_report.accuracy < u.baseline_report.accuracy {
                failures.push(format!("multi-unit {}: KD below baseline", u.unit_id));
            }
        }
        if report.teacher_checksum_before != report.teacher_checksum_after {
            failures.push("multi-unit: teacher parameters changed during student training".into());
        }
        write_out(
            &ctx.out,
            "multi/metrics.csv",
            report_csv(&rows).as_bytes(),
            &mut manifest.outputs,
        )?;
    }

    manifest
        .timings
        .insert("total".into(), started.elapsed().as_secs_f64());
    write_manifest(&ctx.out, &manifest)?;
    if check && !failures.is_empty() {
        return Err(CliError::check(failures.join("; ")));
    }
    for f in &failures {
        warn!("{f}");
    }
    Ok(())
}

fn cmd_gradcheck(
    common: &Common,
    trials: usize,
    perturb: Option<GradPerturbation>,
) -> CliResult<()> {
    let ctx = context(common)?;
    let spec = ctx.cfg.architecture()?;
    if trials == 0 {
        eprintln!("warning: --trials 0 checks nothing; passing vacuously");
    }
    let gc = GradcheckConfig::default();
    let t0 = Instant::now();
    let report = run_gradcheck(&spec, ctx.seed, trials, &gc, perturb)?;
    for r in &report.results {
        println!(
            "seed {} alpha {} T {}: {} coordinates, {} failures, max rel err {:.3e} at {} ({}){}",
            r.seed,
            r.alpha,
            r.temperature,
            r.coordinates,
            r.failures,
            r.max_rel_err,
            r.worst_index,
            r.worst_layer,
            if r.passed() {
                String::new()
            } else {
                format!(" FAIL in {}", r.failing_layers.join(", "))
            }
        );
    }
    let mut manifest = RunManifest::new("gradcheck", &ctx.cfg, ctx.seed);
    manifest
        .timings
        .insert("gradcheck".into(), t0.elapsed().as_secs_f64());
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_out(
        &ctx.out,
        "gradcheck.json",
        json.as_bytes(),
        &mut manifest.outputs,
    )?;
    write_manifest(&ctx.out, &manifest)?;
    println!(
        "gradcheck {}: max relative error {:.3e} (tolerance {:e})",
        if report.passed() { "PASS" } else { "FAIL" },
        report.max_rel_err(),
        gc.rel_tol
    );
    if report.passed() {
        Ok(())
    } else {
        let layers: Vec<String> = report
            .results
            .iter()
            .flat_map(|r| r.failing_layers.iter().cloned())
            .fold(Vec::new(), |mut acc, l| {
                if !acc.contains(&l) {
                    acc.push(l);
                }
                acc
            });
        Err(CliError::check(format!(
            "gradient mismatch in {}",
            layers.join(", ")
        )))
    }
}
