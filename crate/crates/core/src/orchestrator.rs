//! Training loops for the teacher, the baseline student, the distilled
//! student and the data-rich network, plus the per-fold case experiment.
//!
//! Every loop is plain minibatch SGD with descent updates `θ ← θ − λ∇L`.
//! Data order comes from a seeded permutation per epoch
//! (`derive_stream(shuffle_seed, epoch)`), so a run is a pure function of
//! its data, config and seeds.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    fit_standardizer, make_windows, reduce_channels, ChannelReduction, Dataset, FoldPlan,
    LabelRule, SensorStream, Standardizer, TimeWindow, WindowConfig,
};
use crate::distillation::{
    cross_entropy, cross_entropy_grad, softmax_t, student_loss, student_loss_grad, DistillConfig,
    KnowledgeSource, Reduction, SoftTarget,
};
use crate::error::{KdisError, Result};
use crate::evaluation::{confusion, metrics, summarize_folds, MetricsReport};
use crate::network::{
    backward, forward, init_params, predict_logits, ArchitectureSpec, CnnParameters,
};
use crate::numerics::{derive_stream, fnv1a64, RngStream, Tensor};
use crate::parallel::{map_ordered, Execution};

/// Stop when the epoch loss has not improved by `min_delta` for `patience`
/// consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.01,
            shuffle_seed: 0,
            distill: None,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(KdisError::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(KdisError::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding.
    pub fn digest(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelRole {
    Teacher,
    Baseline,
    StudentKd,
    DataRich,
}

impl ModelRole {
    pub const ALL: [ModelRole; 4] = [
        ModelRole::Teacher,
        ModelRole::Baseline,
        ModelRole::StudentKd,
        ModelRole::DataRich,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            ModelRole::Teacher => "teacher",
            ModelRole::Baseline => "baseline",
            ModelRole::StudentKd => "student-kd",
            ModelRole::DataRich => "data-rich",
        }
    }

    /// Row label used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            ModelRole::Teacher => "Teacher network",
            ModelRole::Baseline => "Student network without KD",
            ModelRole::StudentKd => "Student network with KD",
            ModelRole::DataRich => "Data-rich network",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub role: ModelRole,
    pub unit_id: String,
    pub fold: Option<usize>,
    pub config_digest: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: CnnParameters,
    pub provenance: Provenance,
}

impl TrainedModel {
    pub fn spec(&self) -> &ArchitectureSpec {
        self.params.spec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<EpochLog>,
}

impl TrainingLog {
    /// `epoch,loss,train_acc,test_acc`; a missing held-out accuracy is an
    /// empty cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc,test_acc\n");
        for e in &self.entries {
            let test = e.test_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.9},{:.6},{}\n",
                e.epoch, e.loss, e.train_acc, test
            ));
        }
        out
    }
}

/// `θ ← θ − λ·g`.
pub fn sgd_step(
    params: &mut CnnParameters,
    grads: &CnnParameters,
    learning_rate: f64,
) -> Result<()> {
    if params.spec() != grads.spec() || params.len() != grads.len() {
        return Err(KdisError::invalid(
            "gradient shape does not match parameters",
        ));
    }
    for (p, g) in params.values_mut().iter_mut().zip(grads.values()) {
        *p -= learning_rate * g;
    }
    Ok(())
}

/// Argmax class (1-based) per row; ties go to the lower class.
pub fn predict_classes(logits: &Tensor) -> Vec<usize> {
    logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best + 1
        })
        .collect()
}

const EVAL_CHUNK: usize = 512;

/// Predicted classes for every sample of `data`.
pub fn predict_dataset(params: &CnnParameters, data: &Dataset) -> Result<Vec<usize>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (batch, _) = data.batch(chunk)?;
        out.extend(predict_classes(&predict_logits(params, &batch)?));
    }
    Ok(out)
}

pub fn evaluate(params: &CnnParameters, data: &Dataset) -> Result<MetricsReport> {
    let preds = predict_dataset(params, data)?;
    metrics(&confusion(
        &preds,
        data.labels(),
        params.spec().num_classes(),
    )?)
}

fn accuracy(params: &CnnParameters, data: &Dataset) -> Result<f64> {
    Ok(evaluate(params, data)?.accuracy)
}

enum Objective<'a> {
    CrossEntropy,
    Distill {
        teacher: &'a dyn KnowledgeSource,
        cfg: DistillConfig,
    },
}

fn train_loop(
    data: &Dataset,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    objective: Objective<'_>,
    holdout: Option<&Dataset>,
) -> Result<(CnnParameters, TrainingLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(KdisError::invalid("training data is empty"));
    }
    if data.channels() != spec.input_channels || data.length() != spec.input_length {
        return Err(KdisError::invalid(format!(
            "data samples are {}×{}, architecture expects {}×{}",
            data.channels(),
            data.length(),
            spec.input_channels,
            spec.input_length
        )));
    }
    let mut params = init_params(spec, rng)?;
    let mut log = TrainingLog::default();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let order = derive_stream(cfg.shuffle_seed, epoch as u64).permutation(data.len());
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (batch, labels) = data.batch(idx)?;
            let (logits, cache) = forward(&params, &batch)?;
            let (loss, dlogits) = match &objective {
                Objective::CrossEntropy => (
                    cross_entropy(&softmax_t(&logits, 1.0)?, &labels, Reduction::Mean)?,
                    cross_entropy_grad(&logits, &labels)?,
                ),
                Objective::Distill { teacher, cfg: dcfg } => {
                    let soft = teacher.soft_targets(&batch, dcfg.temperature)?;
                    if soft.probs().shape() != logits.shape() {
                        return Err(KdisError::InvalidState(format!(
                            "teacher returned {:?} soft targets for {:?} student logits",
                            soft.probs().shape(),
                            logits.shape()
                        )));
                    }
                    (
                        student_loss(&logits, &labels, &soft, dcfg)?,
                        student_loss_grad(&logits, &labels, &soft, dcfg)?,
                    )
                }
            };
            loss_sum += loss * idx.len() as f64;
            correct += predict_classes(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            let grads = backward(&params, &cache, &dlogits)?;
            sgd_step(&mut params, &grads, cfg.learning_rate)?;
        }
        if !params.is_finite() {
            return Err(KdisError::Numeric {
                index: params
                    .values()
                    .iter()
                    .position(|v| !v.is_finite())
                    .unwrap_or(0),
                detail: format!("parameters diverged in epoch {}", epoch + 1),
            });
        }
        let loss = loss_sum / data.len() as f64;
        log.entries.push(EpochLog {
            epoch: epoch + 1,
            loss,
            train_acc: correct as f64 / data.len() as f64,
            test_acc: holdout.map(|h| accuracy(&params, h)).transpose()?,
        });
        if let Some(es) = cfg.early_stop {
            if loss < best_loss - es.min_delta {
                best_loss = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= es.patience {
                    break;
                }
            }
        }
    }
    Ok((params, log))
}

fn provenance(
    role: ModelRole,
    unit_id: &str,
    fold: Option<usize>,
    cfg: &TrainConfig,
) -> Provenance {
    Provenance {
        role,
        unit_id: unit_id.to_string(),
        fold,
        config_digest: cfg.digest(),
    }
}

fn require_no_distill(cfg: &TrainConfig, what: &str) -> Result<()> {
    if cfg.distill.is_some() {
        return Err(KdisError::invalid(format!(
            "{what} training takes no distillation config"
        )));
    }
    Ok(())
}

/// Minibatch cross-entropy training on the data-rich unit.
pub fn train_teacher(
    data: &Dataset,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(TrainedModel, TrainingLog)> {
    require_no_distill(cfg, "teacher")?;
    let (params, log) = train_loop(data, spec, cfg, rng, Objective::CrossEntropy, None)?;
    Ok((
        TrainedModel {
            params,
            provenance: provenance(ModelRole::Teacher, "", None, cfg),
        },
        log,
    ))
}

/// Same loop as [`train_teacher`], used for students trained on their own
/// data only.
pub fn train_baseline(
    data: &Dataset,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(TrainedModel, TrainingLog)> {
    require_no_distill(cfg, "baseline")?;
    let (params, log) = train_loop(data, spec, cfg, rng, Objective::CrossEntropy, None)?;
    Ok((
        TrainedModel {
            params,
            provenance: provenance(ModelRole::Baseline, "", None, cfg),
        },
        log,
    ))
}

/// Student training against a frozen teacher's soft targets on the
/// student's own minibatches.
pub fn train_student_kd(
    data: &Dataset,
    teacher: &dyn KnowledgeSource,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(TrainedModel, TrainingLog)> {
    let dcfg = cfg
        .distill
        .ok_or_else(|| KdisError::invalid("student KD training needs a distillation config"))?;
    let (params, log) = train_loop(
        data,
        spec,
        cfg,
        rng,
        Objective::Distill { teacher, cfg: dcfg },
        None,
    )?;
    Ok((
        TrainedModel {
            params,
            provenance: provenance(ModelRole::StudentKd, "", None, cfg),
        },
        log,
    ))
}

/// [`train_teacher`]/[`train_baseline`]/[`train_student_kd`] with a held-out
/// set scored after every epoch.
pub fn train_with_holdout(
    data: &Dataset,
    holdout: &Dataset,
    teacher: Option<&dyn KnowledgeSource>,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(CnnParameters, TrainingLog)> {
    let objective = match (teacher, cfg.distill) {
        (Some(teacher), Some(dcfg)) => Objective::Distill { teacher, cfg: dcfg },
        (None, None) => Objective::CrossEntropy,
        _ => {
            return Err(KdisError::invalid(
                "a teacher and a distillation config go together",
            ))
        }
    };
    train_loop(data, spec, cfg, rng, objective, Some(holdout))
}

/// A frozen teacher queried on student-standardized inputs. Each sample is
/// mapped back to raw units with the student's statistics and re-standardized
/// with the teacher's own before the forward pass.
#[derive(Debug, Clone)]
pub struct StandardizedTeacher<'a> {
    pub params: &'a CnnParameters,
    pub teacher_scale: &'a Standardizer,
    pub student_scale: &'a Standardizer,
}

impl KnowledgeSource for StandardizedTeacher<'_> {
    fn soft_targets(&self, batch: &Tensor, temperature: f64) -> Result<SoftTarget> {
        let mut mapped = batch.clone();
        let width = batch.row_len();
        for sample in mapped.values_mut().chunks_exact_mut(width) {
            self.student_scale.invert_in_place(sample);
            self.teacher_scale.apply_in_place(sample);
        }
        softmax_t(&predict_logits(self.params, &mapped)?, temperature)
    }
}

// ---------------------------------------------------------------------------
// Multi-unit fan-out
// ---------------------------------------------------------------------------

/// One unit's raw windows and its training config.
#[derive(Debug, Clone)]
pub struct UnitTask {
    pub unit_id: String,
    pub windows: Vec<TimeWindow>,
    pub cfg: TrainConfig,
}

/// A trained model together with the standardizer fitted on its data.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: TrainedModel,
    pub standardizer: Standardizer,
    pub log: TrainingLog,
    pub train_seconds: f64,
    pub train_samples: usize,
}

#[derive(Debug, Clone)]
pub struct MultiUnitOutcome {
    pub teacher: FittedModel,
    pub students: Vec<FittedModel>,
    /// Teacher parameter checksum right after its training, before any
    /// student ran.
    pub teacher_checksum: u64,
}

/// Init stream for a unit-keyed model; independent of list position.
pub fn unit_stream(seed: u64, unit_id: &str, role: ModelRole) -> RngStream {
    derive_stream(
        seed,
        fnv1a64(format!("{unit_id}\u{1f}{}", role.slug()).as_bytes()),
    )
}

fn with_shuffle(cfg: &TrainConfig, seed: u64, key: &str) -> TrainConfig {
    let mut c = cfg.clone();
    c.shuffle_seed = cfg.shuffle_seed ^ fnv1a64(format!("{seed}\u{1f}{key}").as_bytes());
    c
}

/// What to train and under which keys.
#[derive(Debug, Clone, Copy)]
pub struct FitRequest<'a> {
    pub role: ModelRole,
    pub unit_id: &'a str,
    pub fold: Option<usize>,
    pub spec: &'a ArchitectureSpec,
    pub cfg: &'a TrainConfig,
    pub seed: u64,
}

/// Trains `req.role` on raw `windows` after fitting a standardizer on them.
/// Init and shuffle streams are keyed by `(seed, unit, fold, role)`;
/// baseline and KD students with the same key share both.
pub fn fit_model(
    req: &FitRequest<'_>,
    windows: &[TimeWindow],
    teacher: Option<(&CnnParameters, &Standardizer)>,
) -> Result<FittedModel> {
    let FitRequest {
        role,
        unit_id,
        fold,
        spec,
        cfg,
        seed,
    } = *req;
    let standardizer = fit_standardizer(windows)?;
    let data = Dataset::standardized(windows, &standardizer)?;
    let stream_role = if role == ModelRole::StudentKd {
        ModelRole::Baseline
    } else {
        role
    };
    let key = format!(
        "{unit_id}/{}/{}",
        fold.map_or(-1, |f| f as i64),
        stream_role.slug()
    );
    let mut rng = derive_stream(seed, fnv1a64(key.as_bytes()));
    let cfg = with_shuffle(cfg, seed, &key);
    let start = Instant::now();
    let (mut model, log) = match role {
        ModelRole::StudentKd => {
            let (params, teacher_scale) =
                teacher.ok_or_else(|| KdisError::invalid("KD student needs a teacher"))?;
            let source = StandardizedTeacher {
                params,
                teacher_scale,
                student_scale: &standardizer,
            };
            train_student_kd(&data, &source, spec, &cfg, &mut rng)?
        }
        ModelRole::Teacher => train_teacher(&data, spec, &without_distill(&cfg), &mut rng)?,
        ModelRole::Baseline | ModelRole::DataRich => {
            train_baseline(&data, spec, &without_distill(&cfg), &mut rng)?
        }
    };
    let train_seconds = start.elapsed().as_secs_f64();
    model.provenance.role = role;
    model.provenance.unit_id = unit_id.to_string();
    model.provenance.fold = fold;
    Ok(FittedModel {
        model,
        standardizer,
        log,
        train_seconds,
        train_samples: data.len(),
    })
}

fn without_distill(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        distill: None,
        ..cfg.clone()
    }
}

/// Trains the teacher once, then each student independently against the
/// frozen teacher. Results follow the order of `students`.
pub fn train_multi_unit(
    teacher: &UnitTask,
    students: &[UnitTask],
    spec: &ArchitectureSpec,
    seed: u64,
    exec: Execution,
) -> Result<MultiUnitOutcome> {
    if students.is_empty() {
        return Err(KdisError::invalid("at least one student unit is required"));
    }
    let teacher_fit = fit_model(
        &FitRequest {
            role: ModelRole::Teacher,
            unit_id: &teacher.unit_id,
            fold: None,
            spec,
            cfg: &teacher.cfg,
            seed,
        },
        &teacher.windows,
        None,
    )?;
    let teacher_checksum = teacher_fit.model.params.checksum();
    let frozen = (&teacher_fit.model.params, &teacher_fit.standardizer);
    let students = map_ordered(students, exec, |_, task| {
        fit_model(
            &FitRequest {
                role: ModelRole::StudentKd,
                unit_id: &task.unit_id,
                fold: None,
                spec,
                cfg: &task.cfg,
                seed,
            },
            &task.windows,
            Some(frozen),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MultiUnitOutcome {
        teacher: teacher_fit,
        students,
        teacher_checksum,
    })
}

/// Baseline counterpart of a [`train_multi_unit`] student: same init and
/// shuffle streams, cross-entropy only.
pub fn train_unit_baseline(
    task: &UnitTask,
    spec: &ArchitectureSpec,
    seed: u64,
) -> Result<FittedModel> {
    fit_model(
        &FitRequest {
            role: ModelRole::Baseline,
            unit_id: &task.unit_id,
            fold: None,
            spec,
            cfg: &task.cfg,
            seed,
        },
        &task.windows,
        None,
    )
}

// ---------------------------------------------------------------------------
// Case experiment
// ---------------------------------------------------------------------------

/// Which unit teaches and which unit learns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRoles {
    pub teacher_unit: String,
    pub student_unit: String,
}

impl CaseRoles {
    pub fn swapped(&self) -> Self {
        Self {
            teacher_unit: self.student_unit.clone(),
            student_unit: self.teacher_unit.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub window: WindowConfig,
    pub reduction: ChannelReduction,
    pub label_rule: LabelRule,
    pub spec: ArchitectureSpec,
    /// Teacher training.
    pub teacher: TrainConfig,
    /// Baseline, KD student and data-rich training; `distill` must be set.
    pub student: TrainConfig,
    pub seed: u64,
    pub execution: Execution,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub models: BTreeMap<ModelRole, FittedModel>,
    pub reports: BTreeMap<ModelRole, MetricsReport>,
    pub test_samples: usize,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub roles: CaseRoles,
    pub folds: Vec<FoldOutcome>,
    pub summary: BTreeMap<ModelRole, MetricsReport>,
}

impl CaseReport {
    /// Mean training wall time per role across folds.
    pub fn mean_train_seconds(&self, role: ModelRole) -> f64 {
        let n = self.folds.len() as f64;
        self.folds
            .iter()
            .map(|f| f.models[&role].train_seconds)
            .sum::<f64>()
            / n
    }
}

type TrialWindows = BTreeMap<(String, String), Vec<TimeWindow>>;

/// Reduces channels and windows every stream, grouped by `(unit, trial group)`
/// in stream order.
pub fn window_streams(
    streams: &[SensorStream],
    window: WindowConfig,
    reduction: ChannelReduction,
    rule: LabelRule,
) -> Result<TrialWindows> {
    let mut out: TrialWindows = BTreeMap::new();
    for s in streams {
        let reduced = reduce_channels(s, reduction)?;
        let windows = make_windows(&reduced, window, rule)?;
        out.entry((s.unit_id.clone(), s.trial_group().to_string()))
            .or_default()
            .extend(windows);
    }
    Ok(out)
}

/// Trial groups of `unit` in first-appearance order.
pub fn unit_trials(streams: &[SensorStream], unit: &str) -> Vec<String> {
    let mut seen = Vec::<String>::new();
    for s in streams.iter().filter(|s| s.unit_id == unit) {
        if !seen.iter().any(|t| t == s.trial_group()) {
            seen.push(s.trial_group().to_string());
        }
    }
    seen
}

fn gather(windows: &TrialWindows, unit: &str, trials: &[String]) -> Result<Vec<TimeWindow>> {
    let mut out = Vec::new();
    for t in trials {
        let w = windows.get(&(unit.to_string(), t.clone())).ok_or_else(|| {
            KdisError::invalid(format!("no windows for unit `{unit}` trial `{t}`"))
        })?;
        out.extend(w.iter().cloned());
    }
    Ok(out)
}

/// Runs every fold of `plan`: the teacher on the teacher unit's trials, and
/// per fold the baseline student, the KD student and the data-rich network
/// (teacher trials plus the fold's student trial). All four are scored on the
/// fold's test trials, each through the standardizer fitted on its own
/// training data.
pub fn run_case_experiment(
    streams: &[SensorStream],
    roles: &CaseRoles,
    plan: &FoldPlan,
    settings: &ExperimentSettings,
) -> Result<CaseReport> {
    settings.window.validate()?;
    if settings.student.distill.is_none() {
        return Err(KdisError::invalid(
            "student config needs a distillation section",
        ));
    }
    if plan.folds.is_empty() {
        return Err(KdisError::invalid("fold plan has no folds"));
    }
    let windows = window_streams(
        streams,
        settings.window,
        settings.reduction,
        settings.label_rule,
    )?;
    let teacher_windows = gather(&windows, &roles.teacher_unit, &plan.teacher_trials)?;
    let spec = &settings.spec;
    let seed = settings.seed;

    // Identical for every fold, so trained once.
    let teacher = fit_model(
        &FitRequest {
            role: ModelRole::Teacher,
            unit_id: &roles.teacher_unit,
            fold: None,
            spec,
            cfg: &settings.teacher,
            seed,
        },
        &teacher_windows,
        None,
    )?;

    let outcomes = map_ordered(
        &plan.folds,
        settings.execution,
        |_, fold| -> Result<FoldOutcome> {
            let train = gather(&windows, &roles.student_unit, &fold.train_trials)?;
            let test = gather(&windows, &roles.student_unit, &fold.test_trials)?;
            let unit = roles.student_unit.as_str();
            let f = Some(fold.index);
            let baseline = fit_model(
                &FitRequest {
                    role: ModelRole::Baseline,
                    unit_id: unit,
                    fold: f,
                    spec,
                    cfg: &settings.student,
                    seed,
                },
                &train,
                None,
            )?;
            let kd = fit_model(
                &FitRequest {
                    role: ModelRole::StudentKd,
                    unit_id: unit,
                    fold: f,
                    spec,
                    cfg: &settings.student,
                    seed,
                },
                &train,
                Some((&teacher.model.params, &teacher.standardizer)),
            )?;
            let rich_windows: Vec<TimeWindow> =
                teacher_windows.iter().chain(&train).cloned().collect();
            let data_rich = fit_model(
                &FitRequest {
                    role: ModelRole::DataRich,
                    unit_id: unit,
                    fold: f,
                    spec,
                    cfg: &settings.student,
                    seed,
                },
                &rich_windows,
                None,
            )?;

            let mut models = BTreeMap::new();
            let mut teacher_copy = teacher.clone();
            teacher_copy.model.provenance.fold = f;
            models.insert(ModelRole::Teacher, teacher_copy);
            models.insert(ModelRole::Baseline, baseline);
            models.insert(ModelRole::StudentKd, kd);
            models.insert(ModelRole::DataRich, data_rich);
            let mut reports = BTreeMap::new();
            for (role, fitted) in &models {
                let data = Dataset::standardized(&test, &fitted.standardizer)?;
                reports.insert(*role, evaluate(&fitted.model.params, &data)?);
            }
            Ok(FoldOutcome {
                fold: fold.index,
                models,
                reports,
                test_samples: test.len(),
            })
        },
    )
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut summary = BTreeMap::new();
    for role in ModelRole::ALL {
        let per_fold: Vec<MetricsReport> = outcomes.iter().map(|o| o.reports[&role]).collect();
        summary.insert(role, summarize_folds(&per_fold)?);
    }
    Ok(CaseReport {
        roles: roles.clone(),
        folds: outcomes,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Multi-unit experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct UnitOutcome {
    pub unit_id: String,
    pub baseline: FittedModel,
    pub student_kd: FittedModel,
    pub baseline_report: MetricsReport,
    pub kd_report: MetricsReport,
    pub test_samples: usize,
}

#[derive(Debug, Clone)]
pub struct MultiUnitReport {
    pub teacher: FittedModel,
    pub units: Vec<UnitOutcome>,
    pub teacher_checksum_before: u64,
    pub teacher_checksum_after: u64,
}

/// One teacher on all of `teacher_unit`'s trials; every student unit trains a
/// KD student and a baseline on its first trial and is scored on the rest.
pub fn run_multi_unit_experiment(
    streams: &[SensorStream],
    teacher_unit: &str,
    student_units: &[String],
    settings: &ExperimentSettings,
) -> Result<MultiUnitReport> {
    let windows = window_streams(
        streams,
        settings.window,
        settings.reduction,
        settings.label_rule,
    )?;
    let teacher_task = UnitTask {
        unit_id: teacher_unit.to_string(),
        windows: gather(&windows, teacher_unit, &unit_trials(streams, teacher_unit))?,
        cfg: settings.teacher.clone(),
    };
    let mut tasks = Vec::with_capacity(student_units.len());
    let mut tests = Vec::with_capacity(student_units.len());
    for unit in student_units {
        let trials = unit_trials(streams, unit);
        if trials.len() < 2 {
            return Err(KdisError::invalid(format!(
                "unit `{unit}` needs at least two trials"
            )));
        }
        tasks.push(UnitTask {
            unit_id: unit.clone(),
            windows: gather(&windows, unit, &trials[..1])?,
            cfg: settings.student.clone(),
        });
        tests.push(gather(&windows, unit, &trials[1..])?);
    }

    let outcome = train_multi_unit(
        &teacher_task,
        &tasks,
        &settings.spec,
        settings.seed,
        settings.execution,
    )?;
    let teacher_checksum_before = outcome.teacher_checksum;
    let baselines = map_ordered(&tasks, settings.execution, |_, task| {
        train_unit_baseline(task, &settings.spec, settings.seed)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let teacher_checksum_after = outcome.teacher.model.params.checksum();

    let mut units = Vec::with_capacity(tasks.len());
    for ((kd, baseline), (task, test)) in outcome
        .students
        .into_iter()
        .zip(baselines)
        .zip(tasks.iter().zip(&tests))
    {
        let kd_report = evaluate(
            &kd.model.params,
            &Dataset::standardized(test, &kd.standardizer)?,
        )?;
        let baseline_report = evaluate(
            &baseline.model.params,
            &Dataset::standardized(test, &baseline.standardizer)?,
        )?;
        units.push(UnitOutcome {
            unit_id: task.unit_id.clone(),
            baseline,
            student_kd: kd,
            baseline_report,
            kd_report,
            test_samples: test.len(),
        });
    }
    Ok(MultiUnitReport {
        teacher: outcome.teacher,
        units,
        teacher_checksum_before,
        teacher_checksum_after,
    })
}
