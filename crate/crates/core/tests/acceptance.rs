//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! and then asserts the same condition.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use kdis::config::ExperimentConfig;
use kdis::data::{build_folds, make_windows, Dataset, LabelRule, SensorStream, WindowConfig};
use kdis::distillation::{
    cross_entropy, kl_divergence, softmax_t, student_loss, DistillConfig, Reduction,
};
use kdis::evaluation::f_score;
use kdis::gradcheck::{run_gradcheck, GradcheckConfig};
use kdis::network::{serialize, ArchitectureSpec, ConvLayerSpec, DenseLayerSpec};
use kdis::numerics::{derive_stream, Tensor};
use kdis::orchestrator::{
    run_case_experiment, run_multi_unit_experiment, train_baseline, train_student_kd, unit_trials,
    window_streams, CaseRoles, ModelRole, StandardizedTeacher,
};
use kdis::parallel::Execution;
use kdis::synthesizer::generate_scenario;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn report(criterion: u32, ok: bool, detail: &str) {
    println!(
        "criterion {criterion:>2}: {} {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

#[test]
fn c01_gradient_correctness() {
    let started = Instant::now();
    let spec = ArchitectureSpec::default();
    let report_ = run_gradcheck(&spec, 0, 5, &GradcheckConfig::default(), None).unwrap();
    let elapsed = started.elapsed();
    let failing: Vec<String> = report_
        .results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            format!(
                "seed {} α={} T={}: {:?}",
                r.seed, r.alpha, r.temperature, r.failing_layers
            )
        })
        .collect();
    let ok =
        report_.results.len() == 10 && failing.is_empty() && elapsed < Duration::from_secs(120);
    report(
        1,
        ok,
        &format!(
            "{} checks, max rel err {:.2e}, {:.1}s {:?}",
            report_.results.len(),
            report_.max_rel_err(),
            elapsed.as_secs_f64(),
            failing
        ),
    );
    assert!(ok);
}

#[test]
fn c02_distillation_math() {
    let mut rng = derive_stream(2024, 0);
    let mut problems = Vec::new();
    for case in 0..1000 {
        let m = 2 + case % 4;
        let z: Vec<f64> = (0..m).map(|_| 4.0 * rng.standard_normal()).collect();
        let logits = Tensor::new(vec![1, m], z.clone()).unwrap();
        let c = 50.0 * rng.standard_normal();
        let shifted = Tensor::new(vec![1, m], z.iter().map(|v| v + c).collect()).unwrap();

        let p = softmax_t(&logits, 1.0).unwrap();
        let sum: f64 = p.row(0).iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            problems.push(format!("case {case}: row sum {sum}"));
        }
        let ps = softmax_t(&shifted, 1.0).unwrap();
        if p.row(0)
            .iter()
            .zip(ps.row(0))
            .any(|(a, b)| (a - b).abs() > 1e-9)
        {
            problems.push(format!("case {case}: not shift invariant"));
        }

        let q = softmax_t(&logits, 1.0 + 9.0 * rng.uniform(0.0, 1.0)).unwrap();
        let kl = kl_divergence(&p, &q, Reduction::Mean).unwrap();
        let self_kl = kl_divergence(&p, &p, Reduction::Mean).unwrap();
        if kl < 0.0 || self_kl != 0.0 {
            problems.push(format!("case {case}: KL {kl}, KL(p||p) {self_kl}"));
        }

        let distinct = z.iter().any(|&v| v != z[0]);
        if distinct {
            let maxes: Vec<f64> = [1.0, 2.0, 5.0, 15.0]
                .iter()
                .map(|&t| {
                    softmax_t(&logits, t)
                        .unwrap()
                        .row(0)
                        .iter()
                        .cloned()
                        .fold(0.0, f64::max)
                })
                .collect();
            if maxes.windows(2).any(|w| w[1] >= w[0]) {
                problems.push(format!(
                    "case {case}: max prob not decreasing in T {maxes:?}"
                ));
            }
        }

        let label = [1 + case % m];
        let teacher = softmax_t(&shifted, 15.0).unwrap();
        let ce = cross_entropy(&p, &label, Reduction::Mean).unwrap();
        let at0 = student_loss(
            &logits,
            &label,
            &teacher,
            &DistillConfig {
                temperature: 15.0,
                alpha: 0.0,
            },
        )
        .unwrap();
        let soft = softmax_t(&logits, 15.0).unwrap();
        let kl15 = kl_divergence(&teacher, &soft, Reduction::Mean).unwrap();
        let at1 = student_loss(
            &logits,
            &label,
            &teacher,
            &DistillConfig {
                temperature: 15.0,
                alpha: 1.0,
            },
        )
        .unwrap();
        if (at0 - ce).abs() > 1e-12 || (at1 - kl15).abs() > 1e-12 {
            problems.push(format!(
                "case {case}: α=0 {at0} vs CE {ce}, α=1 {at1} vs KL {kl15}"
            ));
        }
    }
    let ok = problems.is_empty();
    report(
        2,
        ok,
        &format!(
            "1000 random vectors, {} problems {:?}",
            problems.len(),
            problems.iter().take(3).collect::<Vec<_>>()
        ),
    );
    assert!(ok);
}

#[test]
fn c03_architecture_conformance() {
    let spec = ArchitectureSpec::default();
    let lengths = spec.conv_lengths();
    let flatten = spec.flatten_size();
    let count = spec.param_count();
    let bad = ArchitectureSpec::new(
        1,
        30,
        spec.conv_layers.clone(),
        vec![DenseLayerSpec {
            inputs: 250,
            outputs: 150,
        }]
        .into_iter()
        .chain(spec.dense_layers[1..].iter().cloned())
        .collect(),
        spec.hidden_activation,
    );
    let bad_conv = ArchitectureSpec::new(
        1,
        30,
        vec![
            ConvLayerSpec {
                in_channels: 2,
                ..spec.conv_layers[0]
            },
            spec.conv_layers[1],
        ],
        spec.dense_layers.clone(),
        spec.hidden_activation,
    );
    let ok = lengths == vec![30, 15, 8]
        && flatten == 256
        && count == 42_796
        && bad.is_err()
        && bad_conv.is_err();
    report(
        3,
        ok,
        &format!(
            "lengths {lengths:?}, flatten {flatten}, params {count} (expected 42796), bad flatten rejected {}",
            bad.is_err()
        ),
    );
    assert!(ok);
}

fn ramp_stream(len: usize) -> SensorStream {
    SensorStream::new(
        "u",
        "1",
        vec![(1..=len).map(|t| t as f64).collect()],
        vec![1; len],
        2,
    )
    .unwrap()
}

#[test]
fn c04_windowing_conformance() {
    let cfg = WindowConfig::new(30, 28).unwrap();
    let mut problems = Vec::new();
    for len in 30..=200 {
        let windows = make_windows(&ramp_stream(len), cfg, LabelRule::Majority).unwrap();
        if windows.len() != (len - 30) / 2 + 1 {
            problems.push(format!("L={len}: {} windows", windows.len()));
        }
        for (i, w) in windows.iter().enumerate() {
            let j = i + 1;
            // Ramp values equal their 1-based sample index.
            let first = w.values.values()[0] as usize;
            if w.origin.start != 2 * j - 1 || first != 2 * j - 1 {
                problems.push(format!("L={len}: window {j} starts at {}", w.origin.start));
            }
        }
        for pair in windows.windows(2) {
            let a = pair[0].values.values();
            let b = pair[1].values.values();
            let shared = a.iter().filter(|v| b.contains(v)).count();
            if shared != 28 || a[2..] != b[..28] {
                problems.push(format!("L={len}: consecutive windows share {shared}"));
            }
        }
    }
    let at_900 = make_windows(&ramp_stream(900), cfg, LabelRule::Majority)
        .unwrap()
        .len();
    let ok = problems.is_empty() && at_900 == 436;
    report(
        4,
        ok,
        &format!(
            "L=30..200 enumerated, L=900 gives {at_900}, {} problems {:?}",
            problems.len(),
            problems.iter().take(3).collect::<Vec<_>>()
        ),
    );
    assert!(ok);
}

#[test]
fn c05_metric_identities() {
    // (row, precision, recall, reported F)
    let rows = [
        ("case 1 teacher", 0.768, 0.82, 0.793),
        ("case 1 student without KD", 0.811, 0.708, 0.749),
        ("case 1 student with KD", 0.808, 0.810, 0.809),
        ("case 2 teacher", 0.810, 0.738, 0.772),
        ("case 2 student without KD", 0.729, 0.821, 0.765),
        ("case 2 student with KD", 0.748, 0.875, 0.807),
    ];
    let mut all = true;
    for (name, p, r, reported) in rows {
        let f = f_score(p, r);
        let ok = (f - reported).abs() <= 0.0005;
        all &= ok;
        println!(
            "    {name}: F({p}, {r}) = {f:.4}, reported {reported} {}",
            if ok { "ok" } else { "MISMATCH" }
        );
    }
    report(5, all, "six reported rows recomputed");
    assert!(all);
}

#[test]
fn c06_alpha_zero_matches_baseline() {
    let cfg = ExperimentConfig::load(&fixture("shifted_two_unit.toml")).unwrap();
    let streams = generate_scenario(&cfg.scenario).unwrap();
    let windows = window_streams(
        &streams,
        cfg.window.window().unwrap(),
        cfg.window.reduction,
        cfg.window.label_rule,
    )
    .unwrap();
    let spec = cfg.architecture().unwrap();
    let rich = cfg.scenario.rich_unit_id.clone();
    let poor = cfg.scenario.poor_units().next().unwrap().unit_id.clone();
    let teacher_windows: Vec<_> = windows
        .iter()
        .filter(|((u, _), _)| *u == rich)
        .flat_map(|(_, w)| w.clone())
        .collect();
    let student_trial = &unit_trials(&streams, &poor)[0];
    let student_windows = windows[&(poor.clone(), student_trial.clone())].clone();

    let t_scale = kdis::data::fit_standardizer(&teacher_windows).unwrap();
    let s_scale = kdis::data::fit_standardizer(&student_windows).unwrap();
    let teacher_data = Dataset::standardized(&teacher_windows, &t_scale).unwrap();
    let student_data = Dataset::standardized(&student_windows, &s_scale).unwrap();
    let teacher_cfg = cfg.train_config(cfg.train.epochs_teacher, None).unwrap();
    let (teacher, _) = kdis::orchestrator::train_teacher(
        &teacher_data,
        &spec,
        &teacher_cfg,
        &mut derive_stream(5, 0),
    )
    .unwrap();
    let source = StandardizedTeacher {
        params: &teacher.params,
        teacher_scale: &t_scale,
        student_scale: &s_scale,
    };

    let base_cfg = cfg.train_config(cfg.train.epochs_student[0], None).unwrap();
    let kd_cfg = cfg
        .train_config(
            cfg.train.epochs_student[0],
            Some(DistillConfig {
                temperature: 15.0,
                alpha: 0.0,
            }),
        )
        .unwrap();
    let (base, _) =
        train_baseline(&student_data, &spec, &base_cfg, &mut derive_stream(6, 0)).unwrap();
    let (kd, _) = train_student_kd(
        &student_data,
        &source,
        &spec,
        &kd_cfg,
        &mut derive_stream(6, 0),
    )
    .unwrap();
    let ok = serialize(&base.params) == serialize(&kd.params);
    report(
        6,
        ok,
        &format!(
            "{} serialized bytes compared",
            serialize(&base.params).len()
        ),
    );
    assert!(ok);
}

struct DirectionalRun {
    per_seed: Vec<[f64; 4]>,
    kd_seconds: f64,
    dr_seconds: f64,
    elapsed: Duration,
}

impl DirectionalRun {
    fn mean(&self, role: ModelRole) -> f64 {
        let i = ModelRole::ALL.iter().position(|&r| r == role).unwrap();
        self.per_seed.iter().map(|a| a[i]).sum::<f64>() / self.per_seed.len() as f64
    }
}

fn directional() -> &'static DirectionalRun {
    static RUN: OnceLock<DirectionalRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let started = Instant::now();
        let cfg = ExperimentConfig::load(&fixture("shifted_two_unit.toml")).unwrap();
        let streams = generate_scenario(&cfg.scenario).unwrap();
        let roles = CaseRoles {
            teacher_unit: cfg.scenario.rich_unit_id.clone(),
            student_unit: cfg.scenario.poor_units().next().unwrap().unit_id.clone(),
        };
        let plan = build_folds(
            &unit_trials(&streams, &roles.student_unit),
            &unit_trials(&streams, &roles.teacher_unit),
        )
        .unwrap();
        let mut per_seed = Vec::new();
        let (mut kd_seconds, mut dr_seconds) = (0.0, 0.0);
        for seed in 0..10 {
            let mut settings = cfg
                .experiment_settings(0, seed, Execution::Sequential)
                .unwrap();
            settings.teacher.shuffle_seed = seed;
            settings.student.shuffle_seed = seed;
            let r = run_case_experiment(&streams, &roles, &plan, &settings).unwrap();
            let accs = ModelRole::ALL.map(|m| r.summary[&m].accuracy);
            println!(
                "    seed {seed}: teacher {:.3} baseline {:.3} kd {:.3} data-rich {:.3}",
                accs[0], accs[1], accs[2], accs[3]
            );
            per_seed.push(accs);
            kd_seconds += r.mean_train_seconds(ModelRole::StudentKd);
            dr_seconds += r.mean_train_seconds(ModelRole::DataRich);
        }
        DirectionalRun {
            per_seed,
            kd_seconds,
            dr_seconds,
            elapsed: started.elapsed(),
        }
    })
}

#[test]
fn c07_kd_beats_baseline() {
    let run = directional();
    let (b, kd) = (
        run.mean(ModelRole::Baseline),
        run.mean(ModelRole::StudentKd),
    );
    let ok = kd - b >= 0.02 && run.elapsed < Duration::from_secs(15 * 60);
    report(
        7,
        ok,
        &format!(
            "baseline {b:.4}, kd {kd:.4}, gain {:+.4} (need ≥ +0.02), {:.0}s",
            kd - b,
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn c08_kd_close_to_data_rich_and_faster() {
    let run = directional();
    let (kd, dr) = (
        run.mean(ModelRole::StudentKd),
        run.mean(ModelRole::DataRich),
    );
    let ok = (dr - kd).abs() <= 0.04 && run.kd_seconds < run.dr_seconds;
    report(
        8,
        ok,
        &format!(
            "kd {kd:.4}, data-rich {dr:.4}, gap {:+.4} (need within 0.04), train time kd {:.1}s vs data-rich {:.1}s",
            dr - kd,
            run.kd_seconds,
            run.dr_seconds
        ),
    );
    assert!(ok);
}

#[test]
fn c09_multi_unit() {
    let cfg = ExperimentConfig::load(&fixture("three_unit.toml")).unwrap();
    let streams = generate_scenario(&cfg.scenario).unwrap();
    let poor: Vec<String> = cfg
        .scenario
        .poor_units()
        .map(|u| u.unit_id.clone())
        .collect();
    let settings = cfg
        .experiment_settings(0, cfg.train.seed, Execution::Sequential)
        .unwrap();
    let r =
        run_multi_unit_experiment(&streams, &cfg.scenario.rich_unit_id, &poor, &settings).unwrap();
    let mut ok = r.teacher_checksum_before == r.teacher_checksum_after && r.units.len() == 2;
    for u in &r.units {
        let unit_ok = u.kd_report.accuracy >= u.baseline_report.accuracy;
        ok &= unit_ok;
        println!(
            "    {}: baseline {:.4}, kd {:.4} {}",
            u.unit_id,
            u.baseline_report.accuracy,
            u.kd_report.accuracy,
            if unit_ok { "ok" } else { "below baseline" }
        );
    }
    report(
        9,
        ok,
        &format!(
            "teacher checksum {:016x} -> {:016x}",
            r.teacher_checksum_before, r.teacher_checksum_after
        ),
    );
    assert!(ok);
}

const SMALL_EXPERIMENT: &str = r#"
[train]
epochs_teacher = 2
epochs_student = [4, 4]
seed = 3

[net]
conv_layers = [
    { in_channels = 1, out_channels = 4, kernel = 3, stride = 2, padding = 1 },
    { in_channels = 4, out_channels = 4, kernel = 3, stride = 2, padding = 1 },
]
dense_layers = [
    { inputs = 32, outputs = 8 },
    { inputs = 8, outputs = 2 },
]

[scenario]
rich_unit_id = "printer-1"
seed = 11

[[scenario.units]]
unit_id = "printer-1"
base_frequency = 0.05
base_amplitude = 1.0
noise_std = 0.3
anomaly_amp_gain = 1.5
anomaly_freq_shift = 0.002
trial_count = 3
trial_length = 80

[[scenario.units]]
unit_id = "printer-2"
base_frequency = 0.0575
base_amplitude = 1.0
noise_std = 0.3
anomaly_amp_gain = 1.5
anomaly_freq_shift = 0.002
trial_count = 3
trial_length = 80
"#;

fn output_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.file_name().unwrap().to_string_lossy().to_string();
                if name.ends_with(".kdis") || name.ends_with(".csv") {
                    out.push(path.strip_prefix(dir).unwrap().to_path_buf());
                }
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c10_reproducible_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, SMALL_EXPERIMENT).unwrap();
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_kdis"))
            .args(["run-experiment", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        outs.push(out);
    }
    let files = output_files(&outs[0]);
    let models = files
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "kdis"))
        .count();
    let mut differing = Vec::new();
    if files != output_files(&outs[1]) {
        differing.push("file sets differ".to_string());
    }
    for f in &files {
        if std::fs::read(outs[0].join(f)).ok() != std::fs::read(outs[1].join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let ok = models > 0 && differing.is_empty();
    report(
        10,
        ok,
        &format!(
            "{models} model files, {} csv files, differing {differing:?}",
            files.len() - models
        ),
    );
    assert!(ok);
}
