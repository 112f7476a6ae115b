//! Backward pass versus central finite differences on the combined
//! distillation loss, coordinate by coordinate.

use serde::Serialize;

use crate::distillation::{softmax_t, student_loss, student_loss_grad, DistillConfig, SoftTarget};
use crate::error::{KdisError, Result};
use crate::network::{
    backward, forward, init_params, predict_logits, ArchitectureSpec, CnnParameters,
};
use crate::numerics::{derive_stream, finite_diff_gradient, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub batch: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Loss settings checked for every seed.
    pub losses: Vec<DistillConfig>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
            losses: vec![
                DistillConfig {
                    temperature: 15.0,
                    alpha: 0.7,
                },
                DistillConfig {
                    temperature: 1.0,
                    alpha: 0.0,
                },
            ],
        }
    }
}

/// Adds `delta` to one analytic gradient coordinate before comparison.
/// Exists so the suite's failure path can be exercised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradPerturbation {
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub seed: u64,
    pub alpha: f64,
    pub temperature: f64,
    pub coordinates: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_layer: String,
    /// Layers holding at least one failing coordinate, in parameter order.
    pub failing_layers: Vec<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    /// True when every check passed; vacuously true with no checks.
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Relative error with an absolute floor: coordinates whose absolute
/// difference is within `abs_floor` count as exact.
pub fn coordinate_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn random_inputs(
    spec: &ArchitectureSpec,
    batch: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let mut rng = derive_stream(seed, 2);
    let width = spec.sample_width();
    let m = spec.num_classes();
    let x: Vec<f64> = (0..batch * width).map(|_| rng.standard_normal()).collect();
    let labels: Vec<usize> = (0..batch)
        .map(|_| 1 + rng.below(m as u64) as usize)
        .collect();
    let teacher_logits: Vec<f64> = (0..batch * m)
        .map(|_| 3.0 * rng.standard_normal())
        .collect();
    Ok((
        Tensor::new(vec![batch, spec.input_channels, spec.input_length], x)?,
        labels,
        Tensor::new(vec![batch, m], teacher_logits)?,
    ))
}

/// One seed, one loss setting: random parameters from `derive_stream(seed, 1)`,
/// a random batch and random teacher logits from `derive_stream(seed, 2)`.
pub fn check_one(
    spec: &ArchitectureSpec,
    seed: u64,
    loss: DistillConfig,
    cfg: &GradcheckConfig,
    perturb: Option<GradPerturbation>,
) -> Result<CheckResult> {
    loss.validate()?;
    let params = init_params(spec, &mut derive_stream(seed, 1))?;
    let (x, labels, teacher_logits) = random_inputs(spec, cfg.batch, seed)?;
    let soft: SoftTarget = softmax_t(&teacher_logits, loss.temperature)?;

    let (logits, cache) = forward(&params, &x)?;
    let dlogits = student_loss_grad(&logits, &labels, &soft, &loss)?;
    let mut analytic = backward(&params, &cache, &dlogits)?.values().to_vec();
    if let Some(p) = perturb {
        let slot = analytic.get_mut(p.index).ok_or_else(|| {
            KdisError::invalid(format!("perturbation index {} out of range", p.index))
        })?;
        *slot += p.delta;
    }

    let mut probe = CnnParameters::zeros(spec);
    let point = Tensor::new(vec![params.len()], params.values().to_vec())?;
    let numeric = finite_diff_gradient(
        |v| {
            probe.values_mut().copy_from_slice(v);
            predict_logits(&probe, &x)
                .and_then(|z| student_loss(&z, &labels, &soft, &loss))
                .unwrap_or(f64::NAN)
        },
        &point,
        cfg.step,
    )?;

    let mut failures = 0;
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut failing_layers: Vec<String> = Vec::new();
    for (i, (&a, &n)) in analytic.iter().zip(numeric.values()).enumerate() {
        let err = coordinate_error(a, n, cfg.abs_floor);
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
        if err > cfg.rel_tol {
            failures += 1;
            let layer = layer_name(spec, i);
            if !failing_layers.contains(&layer) {
                failing_layers.push(layer);
            }
        }
    }
    Ok(CheckResult {
        seed,
        alpha: loss.alpha,
        temperature: loss.temperature,
        coordinates: analytic.len(),
        failures,
        max_rel_err,
        worst_index,
        worst_layer: layer_name(spec, worst_index),
        failing_layers,
    })
}

/// `conv1.weight`, `dense2.bias`, ... for a flat parameter index.
pub fn layer_name(spec: &ArchitectureSpec, index: usize) -> String {
    let n_conv = spec.conv_layers.len();
    for (slot, range) in spec.layout().iter().enumerate() {
        let (kind, number) = if slot < n_conv {
            ("conv", slot + 1)
        } else {
            ("dense", slot - n_conv + 1)
        };
        if range.weight.contains(&index) {
            return format!("{kind}{number}.weight");
        }
        if range.bias.contains(&index) {
            return format!("{kind}{number}.bias");
        }
    }
    format!("index {index} (out of range)")
}

/// Seeds `seed, seed+1, …, seed+trials−1`, each under every loss setting.
pub fn run_gradcheck(
    spec: &ArchitectureSpec,
    seed: u64,
    trials: usize,
    cfg: &GradcheckConfig,
    perturb: Option<GradPerturbation>,
) -> Result<GradcheckReport> {
    let mut results = Vec::with_capacity(trials * cfg.losses.len());
    for t in 0..trials as u64 {
        for loss in &cfg.losses {
            results.push(check_one(spec, seed.wrapping_add(t), *loss, cfg, perturb)?);
        }
    }
    Ok(GradcheckReport { results })
}
