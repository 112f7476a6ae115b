//! Temperature softmax, KL divergence against soft targets, hard-label
//! cross-entropy, and the combined student objective with its analytic
//! gradient over student logits.
//!
//! The combined loss is `α·KL(p_t(T) ‖ p_s(T)) + (1 − α)·CE(p_s(1), y)`
//! with no `T²` factor on the KL term, so the KL part of the logit gradient
//! carries a `1/T` factor. Class labels are 1-based throughout.

use serde::{Deserialize, Serialize};

use crate::error::{KdisError, Result};
use crate::network::{predict_logits, CnnParameters};
use crate::numerics::Tensor;

/// Probabilities are clamped to this before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 15.0,
            alpha: 0.7,
        }
    }
}

impl DistillConfig {
    pub fn new(temperature: f64, alpha: f64) -> Result<Self> {
        let cfg = Self { temperature, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(KdisError::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(KdisError::invalid(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// A `B × M` matrix whose rows are probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    probs: Tensor,
}

impl SoftTarget {
    /// Validates that every row is a distribution (entries in `[0, 1]`,
    /// sum within 1e-9 of 1).
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 2 {
            return Err(KdisError::invalid(format!(
                "soft target must be B × M, got {:?}",
                probs.shape()
            )));
        }
        for (i, row) in probs.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(KdisError::invalid(format!(
                    "row {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn batch_size(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.row_len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }
}

/// Anything that can produce soft targets for a batch. Implementations must
/// return identical output for identical input.
pub trait KnowledgeSource: Sync {
    fn soft_targets(&self, batch: &Tensor, temperature: f64) -> Result<SoftTarget>;
}

impl KnowledgeSource for CnnParameters {
    fn soft_targets(&self, batch: &Tensor, temperature: f64) -> Result<SoftTarget> {
        softmax_t(&predict_logits(self, batch)?, temperature)
    }
}

fn check_matrix(logits: &Tensor) -> Result<()> {
    if logits.shape().len() != 2 {
        return Err(KdisError::invalid(format!(
            "expected a B × M matrix, got shape {:?}",
            logits.shape()
        )));
    }
    Ok(())
}

fn softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = ((z - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise `exp(z_m / T) / Σ exp(z_m' / T)`, with the row maximum
/// subtracted first.
pub fn softmax_t(logits: &Tensor, temperature: f64) -> Result<SoftTarget> {
    check_matrix(logits)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(KdisError::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let m = logits.row_len();
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.iter_rows().zip(out.chunks_exact_mut(m)) {
        softmax_row(row, temperature, dst);
    }
    Ok(SoftTarget {
        probs: Tensor::new(logits.shape().to_vec(), out)?,
    })
}

fn reduce(total: f64, batch: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / batch as f64,
    }
}

/// `Σ_rows Σ_m p_t log(p_t / p_s)`, taking `0·log 0 = 0` and clamping `p_s`
/// below at [`PROB_FLOOR`].
pub fn kl_divergence(
    teacher: &SoftTarget,
    student: &SoftTarget,
    reduction: Reduction,
) -> Result<f64> {
    if teacher.probs.shape() != student.probs.shape() {
        return Err(KdisError::invalid(format!(
            "teacher {:?} vs student {:?}",
            teacher.probs.shape(),
            student.probs.shape()
        )));
    }
    let total: f64 = teacher
        .probs
        .values()
        .iter()
        .zip(student.probs.values())
        .filter(|(&pt, _)| pt > 0.0)
        .map(|(&pt, &ps)| pt * (pt / ps.max(PROB_FLOOR)).ln())
        .sum();
    Ok(reduce(total.max(0.0), teacher.batch_size(), reduction))
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(KdisError::invalid(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(i) = labels.iter().position(|&y| y == 0 || y > classes) {
        return Err(KdisError::invalid(format!(
            "label {} at index {i} outside 1..={classes}",
            labels[i]
        )));
    }
    Ok(())
}

/// `−Σ_rows log p[label]` with probabilities clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &SoftTarget, labels: &[usize], reduction: Reduction) -> Result<f64> {
    check_labels(labels, probs.batch_size(), probs.num_classes())?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.row(i)[y - 1].max(PROB_FLOOR).ln())
        .sum();
    Ok(reduce(total, probs.batch_size(), reduction))
}

fn check_student(student_logits: &Tensor, teacher: &SoftTarget, cfg: &DistillConfig) -> Result<()> {
    cfg.validate()?;
    check_matrix(student_logits)?;
    if student_logits.shape() != teacher.probs.shape() {
        return Err(KdisError::invalid(format!(
            "student logits {:?} vs teacher soft targets {:?}",
            student_logits.shape(),
            teacher.probs.shape()
        )));
    }
    Ok(())
}

/// Mean-reduced `α·KL(teacher ‖ softmax_t(z, T)) + (1 − α)·CE(softmax_t(z, 1), y)`.
pub fn student_loss(
    student_logits: &Tensor,
    labels: &[usize],
    teacher_soft: &SoftTarget,
    cfg: &DistillConfig,
) -> Result<f64> {
    check_student(student_logits, teacher_soft, cfg)?;
    let soft = softmax_t(student_logits, cfg.temperature)?;
    let hard = softmax_t(student_logits, 1.0)?;
    let kl = kl_divergence(teacher_soft, &soft, Reduction::Mean)?;
    let ce = cross_entropy(&hard, labels, Reduction::Mean)?;
    Ok(cfg.alpha * kl + (1.0 - cfg.alpha) * ce)
}

/// Gradient of [`student_loss`] over the student logits:
/// `[(α/T)(p_s(T) − p_t) + (1 − α)(p_s(1) − onehot(y))] / B`.
pub fn student_loss_grad(
    student_logits: &Tensor,
    labels: &[usize],
    teacher_soft: &SoftTarget,
    cfg: &DistillConfig,
) -> Result<Tensor> {
    check_student(student_logits, teacher_soft, cfg)?;
    let b = student_logits.rows();
    let m = student_logits.row_len();
    check_labels(labels, b, m)?;
    let soft = softmax_t(student_logits, cfg.temperature)?;
    let hard = softmax_t(student_logits, 1.0)?;
    let kd_weight = cfg.alpha / cfg.temperature;
    let ce_weight = 1.0 - cfg.alpha;
    let scale = b as f64;
    let mut grad = Vec::with_capacity(b * m);
    for i in 0..b {
        for c in 0..m {
            let onehot = if labels[i] == c + 1 { 1.0 } else { 0.0 };
            let g = kd_weight * (soft.row(i)[c] - teacher_soft.row(i)[c])
                + ce_weight * (hard.row(i)[c] - onehot);
            grad.push(g / scale);
        }
    }
    Tensor::new(vec![b, m], grad)
}

/// Mean cross-entropy logit gradient `(softmax(z) − onehot(y)) / B`.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check_matrix(logits)?;
    let b = logits.rows();
    let m = logits.row_len();
    check_labels(labels, b, m)?;
    let hard = softmax_t(logits, 1.0)?;
    let scale = b as f64;
    let mut grad = Vec::with_capacity(b * m);
    for i in 0..b {
        for c in 0..m {
            let onehot = if labels[i] == c + 1 { 1.0 } else { 0.0 };
            grad.push((hard.row(i)[c] - onehot) / scale);
        }
    }
    Tensor::new(vec![b, m], grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{derive_stream, finite_diff_gradient};

    fn logits(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn st(rows: &[Vec<f64>]) -> SoftTarget {
        SoftTarget::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_t(&logits(&[vec![0.0, 0.0]]), 1.0).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        let p = softmax_t(&logits(&[vec![2.0, 0.0]]), 1.0).unwrap();
        assert!((p.row(0)[0] - 0.880797).abs() < 1e-5);
        assert!((p.row(0)[1] - 0.119203).abs() < 1e-5);
        // 1 / (1 + exp(-2/15)) evaluated independently.
        let p = softmax_t(&logits(&[vec![2.0, 0.0]]), 15.0).unwrap();
        assert!((p.row(0)[0] - 0.533284).abs() < 1e-5);
        assert!((p.row(0)[1] - 0.466716).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let z = logits(&[vec![1.0, 0.0]]);
        assert!(softmax_t(&z, 0.0).is_err());
        assert!(softmax_t(&z, -1.0).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax_t(&logits(&[vec![1000.0, -1000.0]]), 1.0).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn kl_examples() {
        let p = st(&[vec![0.3, 0.7]]);
        assert_eq!(kl_divergence(&p, &p, Reduction::Sum).unwrap(), 0.0);
        let v = kl_divergence(
            &st(&[vec![1.0, 0.0]]),
            &st(&[vec![0.5, 0.5]]),
            Reduction::Sum,
        )
        .unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = kl_divergence(
            &st(&[vec![0.5, 0.5]]),
            &st(&[vec![0.9, 0.1]]),
            Reduction::Sum,
        )
        .unwrap();
        assert!((v - 0.510826).abs() < 1e-5);
    }

    #[test]
    fn kl_shape_mismatch() {
        let a = st(&[vec![0.5, 0.5]]);
        let b = st(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(
            kl_divergence(&a, &b, Reduction::Mean),
            Err(KdisError::InvalidArgument(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let v = cross_entropy(&st(&[vec![1.0, 0.0]]), &[1], Reduction::Sum).unwrap();
        assert!(v.abs() < 1e-9);
        let half = st(&[vec![0.5, 0.5]]);
        for y in [1, 2] {
            let v = cross_entropy(&half, &[y], Reduction::Sum).unwrap();
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let two = st(&[vec![0.5, 0.5], vec![0.9, 0.1]]);
        let a = -(0.5f64).ln();
        let b = -(0.1f64).ln();
        let v = cross_entropy(&two, &[1, 2], Reduction::Mean).unwrap();
        assert!((v - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let p = st(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let err = cross_entropy(&p, &[1, 3], Reduction::Mean).unwrap_err();
        assert!(err.to_string().contains("index 1"));
        assert!(cross_entropy(&p, &[0, 1], Reduction::Mean).is_err());
    }

    #[test]
    fn student_loss_degenerate_alphas() {
        let z = logits(&[vec![0.3, -1.2], vec![2.0, 0.5]]);
        let labels = [2, 1];
        let teacher = st(&[vec![0.4, 0.6], vec![0.8, 0.2]]);
        let t = 5.0;
        let ce = cross_entropy(&softmax_t(&z, 1.0).unwrap(), &labels, Reduction::Mean).unwrap();
        let kl = kl_divergence(&teacher, &softmax_t(&z, t).unwrap(), Reduction::Mean).unwrap();
        let l0 = student_loss(&z, &labels, &teacher, &DistillConfig::new(t, 0.0).unwrap()).unwrap();
        let l1 = student_loss(&z, &labels, &teacher, &DistillConfig::new(t, 1.0).unwrap()).unwrap();
        assert!((l0 - ce).abs() < 1e-12);
        assert!((l1 - kl).abs() < 1e-12);
        let mixed =
            student_loss(&z, &labels, &teacher, &DistillConfig::new(t, 0.7).unwrap()).unwrap();
        assert!((mixed - (0.7 * kl + 0.3 * ce)).abs() < 1e-12);
    }

    #[test]
    fn linear_combination_arithmetic() {
        assert!((0.7f64 * 0.5 + 0.3 * 0.7 - 0.56).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::new(0.0, 0.5).is_err());
        assert!(DistillConfig::new(1.0, 1.5).is_err());
        assert!(DistillConfig::new(1.0, -0.1).is_err());
        assert_eq!(
            DistillConfig::default(),
            DistillConfig::new(15.0, 0.7).unwrap()
        );
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        // Logits large enough that p_s(1) is onehot to machine precision.
        let z = logits(&[vec![60.0, -60.0]]);
        let cfg = DistillConfig::new(15.0, 0.7).unwrap();
        let teacher = softmax_t(&z, cfg.temperature).unwrap();
        let g = student_loss_grad(&z, &[1], &teacher, &cfg).unwrap();
        assert!(g.values().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn alpha_zero_gradient_is_plain_cross_entropy() {
        let z = logits(&[vec![0.2, 1.1, -0.4], vec![1.0, 0.0, 0.5]]);
        let teacher = st(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]]);
        let cfg = DistillConfig::new(5.0, 0.0).unwrap();
        let g = student_loss_grad(&z, &[3, 1], &teacher, &cfg).unwrap();
        let ce = cross_entropy_grad(&z, &[3, 1]).unwrap();
        for (a, b) in g.values().iter().zip(ce.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn rel_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
        let diff = (a - b).abs();
        diff <= abs_floor || diff <= rel * a.abs().max(b.abs())
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_instances() {
        let mut rng = derive_stream(2024, 0);
        let mut checked = 0;
        for instance in 0..120 {
            let b = 1 + rng.below(8) as usize;
            let m = [2usize, 3, 5][rng.below(3) as usize];
            let t = [1.0, 5.0, 15.0][rng.below(3) as usize];
            let alpha = rng.next_f64();
            let cfg = DistillConfig::new(t, alpha).unwrap();
            let z: Vec<f64> = (0..b * m).map(|_| 3.0 * rng.standard_normal()).collect();
            let tz: Vec<f64> = (0..b * m).map(|_| 3.0 * rng.standard_normal()).collect();
            let labels: Vec<usize> = (0..b).map(|_| 1 + rng.below(m as u64) as usize).collect();
            let teacher = softmax_t(&Tensor::new(vec![b, m], tz).unwrap(), t).unwrap();
            let z = Tensor::new(vec![b, m], z).unwrap();
            let analytic = student_loss_grad(&z, &labels, &teacher, &cfg).unwrap();
            let numeric = finite_diff_gradient(
                |v| {
                    let zz = Tensor::new(vec![b, m], v.to_vec()).unwrap();
                    student_loss(&zz, &labels, &teacher, &cfg).unwrap()
                },
                &z,
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.values().iter().zip(numeric.values()) {
                assert!(
                    rel_close(*a, *n, 1e-6, 1e-9),
                    "instance {instance}: analytic {a} vs numeric {n}"
                );
            }
            checked += 1;
        }
        assert!(checked >= 100);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 2..6),
            shift in -100.0f64..100.0,
            t in 0.1f64..50.0,
        ) {
            let z = logits(std::slice::from_ref(&row));
            let zs = logits(&[row.iter().map(|v| v + shift).collect()]);
            let p = softmax_t(&z, t).unwrap();
            let q = softmax_t(&zs, t).unwrap();
            proptest::prop_assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in p.row(0).iter().zip(q.row(0)) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn kl_nonnegative(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let p = softmax_t(&logits(&[a]), 1.0).unwrap();
            let q = softmax_t(&logits(&[b]), 1.0).unwrap();
            proptest::prop_assert!(kl_divergence(&p, &q, Reduction::Sum).unwrap() >= 0.0);
        }

        #[test]
        fn student_loss_shift_invariant(
            row in proptest::collection::vec(-5.0f64..5.0, 3),
            shift in -20.0f64..20.0,
            label in 1usize..=3,
        ) {
            let teacher = st(&[vec![0.2, 0.5, 0.3]]);
            let cfg = DistillConfig::default();
            let a = student_loss(&logits(std::slice::from_ref(&row)), &[label], &teacher, &cfg).unwrap();
            let b = student_loss(&logits(&[row.iter().map(|v| v + shift).collect()]), &[label], &teacher, &cfg).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
