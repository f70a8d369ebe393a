//! Teacher credibility estimation and distillation / regularization losses.
//!
//! The selective loss weights the logit-matching term per class channel and
//! per sample: the class weight combines the teacher's recall on a class with
//! one minus the worst confusion into it, the sample weight maps the teacher's
//! probability for the true label into [0, 1], and the product passes through
//! a fixed 0.1 dead-zone before scaling by the configured upper bound.
//! Constant-coefficient KL and MSE distillation and the proximal term are the
//! ablation baselines.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{CoreError, Result};
use crate::metrics;
use crate::nn::{self, ModelParams};

/// Dead-zone threshold inside the weight bracket. Fixed; overriding it is
/// experimental (see [`weight_vector_with_threshold`]).
pub const DEAD_ZONE: f64 = 0.1;

/// Empirical confusion of the teacher on the auxiliary set: row `k1` holds the
/// probability that a sample of true class `k1` is predicted as each class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CredibilityMatrix {
    /// Row-major `K x K` row-stochastic matrix.
    pub rows: Vec<Vec<f64>>,
    /// Communication round the matrix was evaluated at.
    pub round: usize,
    /// Number of auxiliary samples per true class.
    pub support: Vec<usize>,
}

impl CredibilityMatrix {
    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, row) in self.rows.iter().enumerate() {
            if row.len() != self.rows.len() {
                return Err(CoreError::ShapeMismatch(format!(
                    "credibility row {k} has {} entries for {} classes",
                    row.len(),
                    self.rows.len()
                )));
            }
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(CoreError::InvalidArgument(format!(
                    "credibility row {k} has entries outside [0, 1]"
                )));
            }
            if self.support[k] > 0 {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(CoreError::InvalidArgument(format!(
                        "credibility row {k} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-round distillation weights: the configured upper bound, the class
/// weight vector derived from the credibility matrix, and per-sample vectors
/// built on demand.
#[derive(Debug, Clone)]
pub struct DistillWeights {
    pub m_max: f64,
    pub m_class: Vec<f64>,
}

impl DistillWeights {
    pub fn from_matrix(matrix: &CredibilityMatrix, m_max: f64) -> Self {
        DistillWeights {
            m_max,
            m_class: class_weights(matrix),
        }
    }

    /// Weight vector for one sample given the teacher's probability for its
    /// true label.
    pub fn for_sample(&self, p_true: f64) -> Result<Vec<f64>> {
        let m_sample = sample_weight(p_true)?;
        Ok(weight_vector(&self.m_class, m_sample, self.m_max))
    }
}

/// Which loss terms are active during a client run, besides cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub enum LossMode {
    CeOnly,
    /// Selective self-distillation with the per-round class weights.
    Ssd { m_max: f64, m_class: Vec<f64> },
    /// Constant-coefficient KL distillation at temperature `tau`.
    KlConst { alpha: f64, tau: f64 },
    /// Constant-coefficient logit MSE distillation.
    MseConst { alpha: f64 },
    /// FedProx proximal term, `(mu/2)*||w - w_global||^2`.
    Prox { mu: f64 },
}

/// Composite loss description handed to `nn::backward`. The teacher reference
/// is the frozen global model (also the anchor for the proximal term).
#[derive(Debug, Clone)]
pub struct CompositeLossSpec<'a> {
    pub mode: LossMode,
    pub teacher: Option<&'a ModelParams>,
}

impl<'a> CompositeLossSpec<'a> {
    pub fn ce_only() -> Self {
        CompositeLossSpec {
            mode: LossMode::CeOnly,
            teacher: None,
        }
    }
}

/// Evaluates the teacher's confusion on the auxiliary set: row `k1` is the
/// normalized histogram of argmax predictions over samples of true class `k1`.
/// Argmax ties break toward the lowest class index.
pub fn credibility_matrix(
    teacher: &ModelParams,
    aux: &LabeledDataset,
    round: usize,
) -> Result<CredibilityMatrix> {
    let counts = metrics::confusion_counts(teacher, aux)?;
    let classes = aux.classes;
    let mut support = vec![0usize; classes];
    let mut rows = vec![vec![0.0; classes]; classes];
    for k1 in 0..classes {
        let total: usize = counts[k1].iter().sum();
        support[k1] = total;
        if total == 0 {
            return Err(CoreError::InsufficientClassSamples {
                class: k1,
                available: 0,
                needed: 1,
            });
        }
        for k2 in 0..classes {
            rows[k1][k2] = counts[k1][k2] as f64 / total as f64;
        }
    }
    Ok(CredibilityMatrix {
        rows,
        round,
        support,
    })
}

/// `M_class[k1] = A[k1][k1] * (1 - max over k != k1 of A[k][k1])`.
pub fn class_weights(matrix: &CredibilityMatrix) -> Vec<f64> {
    let classes = matrix.classes();
    (0..classes)
        .map(|k1| {
            let recall = matrix.rows[k1][k1];
            let worst_confusion = (0..classes)
                .filter(|&k| k != k1)
                .map(|k| matrix.rows[k][k1])
                .fold(0.0f64, f64::max);
            recall * (1.0 - worst_confusion)
        })
        .collect()
}

/// `M_sample = 1 - sqrt(1 - p_true)`; monotone increasing on [0, 1].
pub fn sample_weight(p_true: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_true) {
        return Err(CoreError::InvalidArgument(format!(
            "p_true {p_true} outside [0, 1]"
        )));
    }
    Ok(1.0 - (1.0 - p_true).sqrt())
}

/// Per-channel `M_max * max(0, M_class[k] * M_sample - 0.1)`.
pub fn weight_vector(m_class: &[f64], m_sample: f64, m_max: f64) -> Vec<f64> {
    weight_vector_with_threshold(m_class, m_sample, m_max, DEAD_ZONE)
}

/// Experimental variant with a configurable dead-zone threshold.
pub fn weight_vector_with_threshold(
    m_class: &[f64],
    m_sample: f64,
    m_max: f64,
    threshold: f64,
) -> Vec<f64> {
    m_class
        .iter()
        .map(|&mc| m_max * (mc * m_sample - threshold).max(0.0))
        .collect()
}

fn check_logit_shapes(z_teacher: &[Vec<f64>], z_student: &[Vec<f64>]) -> Result<()> {
    if z_teacher.len() != z_student.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} teacher rows vs {} student rows",
            z_teacher.len(),
            z_student.len()
        )));
    }
    for (t, s) in z_teacher.iter().zip(z_student) {
        if t.len() != s.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "teacher row width {} vs student row width {}",
                t.len(),
                s.len()
            )));
        }
    }
    Ok(())
}

/// Selective distillation loss `(1/b) * sum ||M (.) (z_teacher - z_student)||^2`
/// with its gradient w.r.t. the student logits. Teacher logits are constants.
pub fn ssd_loss(
    z_teacher: &[Vec<f64>],
    z_student: &[Vec<f64>],
    weights: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_logit_shapes(z_teacher, z_student)?;
    if weights.len() != z_student.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} weight vectors vs {} logit rows",
            weights.len(),
            z_student.len()
        )));
    }
    let b = z_student.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z_student.len());
    for ((zt, zs), m) in z_teacher.iter().zip(z_student).zip(weights) {
        if m.len() != zs.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "weight vector width {} vs logit width {}",
                m.len(),
                zs.len()
            )));
        }
        let mut g = Vec::with_capacity(zs.len());
        for ((&t, &s), &w) in zt.iter().zip(zs).zip(m) {
            let wd = w * (t - s);
            loss += wd * wd;
            g.push(2.0 * w * w * (s - t) / b);
        }
        grad.push(g);
    }
    Ok((loss / b, grad))
}

/// `alpha * tau^2 * mean KL(softmax(z_teacher/tau) || softmax(z_student/tau))`
/// with its exact gradient w.r.t. the student logits.
pub fn kl_distill_loss(
    z_teacher: &[Vec<f64>],
    z_student: &[Vec<f64>],
    tau: f64,
    alpha: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_logit_shapes(z_teacher, z_student)?;
    if tau <= 0.0 {
        return Err(CoreError::InvalidArgument("tau must be positive".into()));
    }
    if alpha < 0.0 {
        return Err(CoreError::InvalidArgument(
            "alpha must be non-negative".into(),
        ));
    }
    let b = z_student.len().max(1) as f64;
    let scaled: Vec<Vec<f64>> = z_teacher
        .iter()
        .map(|r| r.iter().map(|&v| v / tau).collect())
        .collect();
    let p_teacher = nn::softmax_probs(&scaled)?;
    let scaled: Vec<Vec<f64>> = z_student
        .iter()
        .map(|r| r.iter().map(|&v| v / tau).collect())
        .collect();
    let p_student = nn::softmax_probs(&scaled)?;

    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z_student.len());
    for (pt, ps) in p_teacher.iter().zip(&p_student) {
        let mut kl = 0.0;
        for (&t, &s) in pt.iter().zip(ps) {
            if t > 0.0 {
                kl += t * (t.ln() - s.max(nn::LOG_CLAMP).ln());
            }
        }
        loss += kl;
        // d/dz_s of tau^2 * KL is tau * (p_s - p_t); alpha and 1/b fold in.
        grad.push(
            pt.iter()
                .zip(ps)
                .map(|(&t, &s)| alpha * tau * (s - t) / b)
                .collect(),
        );
    }
    Ok((alpha * tau * tau * loss / b, grad))
}

/// `alpha * (1/b) * sum ||z_teacher - z_student||^2` with its gradient.
/// Equals [`ssd_loss`] with a constant weight of `sqrt(alpha)` per channel.
pub fn mse_distill_loss(
    z_teacher: &[Vec<f64>],
    z_student: &[Vec<f64>],
    alpha: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_logit_shapes(z_teacher, z_student)?;
    if alpha < 0.0 {
        return Err(CoreError::InvalidArgument(
            "alpha must be non-negative".into(),
        ));
    }
    let b = z_student.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z_student.len());
    for (zt, zs) in z_teacher.iter().zip(z_student) {
        let mut g = Vec::with_capacity(zs.len());
        for (&t, &s) in zt.iter().zip(zs) {
            let d = t - s;
            loss += d * d;
            g.push(2.0 * alpha * (s - t) / b);
        }
        grad.push(g);
    }
    Ok((alpha * loss / b, grad))
}

/// FedProx term `(mu/2) * ||w - w_global||^2` and its parameter-space gradient
/// `mu * (w - w_global)`.
pub fn prox_term(
    params: &ModelParams,
    global: &ModelParams,
    mu: f64,
) -> Result<(f64, ModelParams)> {
    if !params.same_shape(global) {
        return Err(CoreError::ShapeMismatch(
            "prox term requires matching parameter shapes".into(),
        ));
    }
    let mut grad = params.zeros_like();
    let mut sq = 0.0;
    for ((g, w), wg) in grad
        .iter_flat_mut()
        .zip(params.iter_flat())
        .zip(global.iter_flat())
    {
        let d = w - wg;
        sq += d * d;
        *g = mu * d;
    }
    Ok((0.5 * mu * sq, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledDataset;
    use crate::nn::{Batch, Layer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: Vec<Vec<f64>>) -> CredibilityMatrix {
        let support = vec![10; rows.len()];
        CredibilityMatrix {
            rows,
            round: 0,
            support,
        }
    }

    #[test]
    fn identity_matrix_gives_all_one_class_weights() {
        let a = matrix(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert_eq!(class_weights(&a), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn class_weight_formula_arithmetic() {
        let a = matrix(vec![vec![0.8, 0.2], vec![0.2, 0.8]]);
        let m = class_weights(&a);
        assert!((m[1] - 0.8 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn class_weights_match_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let k = 5;
        let mut rows = Vec::new();
        for _ in 0..k {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let sum: f64 = raw.iter().sum();
            rows.push(raw.iter().map(|v| v / sum).collect::<Vec<_>>());
        }
        let a = matrix(rows.clone());
        let got = class_weights(&a);
        for k1 in 0..k {
            let mut worst = 0.0f64;
            for k2 in 0..k {
                if k2 != k1 && rows[k2][k1] > worst {
                    worst = rows[k2][k1];
                }
            }
            let expect = rows[k1][k1] * (1.0 - worst);
            assert!((got[k1] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_weight_endpoints_and_midpoint() {
        assert_eq!(sample_weight(0.0).unwrap(), 0.0);
        assert_eq!(sample_weight(1.0).unwrap(), 1.0);
        assert!((sample_weight(0.75).unwrap() - 0.5).abs() < 1e-15);
        assert!(sample_weight(1.5).is_err());
        assert!(sample_weight(-0.1).is_err());
    }

    #[test]
    fn sample_weight_is_monotone() {
        let mut prev = -1.0;
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            let w = sample_weight(p).unwrap();
            assert!(w > prev);
            prev = w;
        }
    }

    #[test]
    fn weight_vector_dead_zone_and_scaling() {
        // Hopeless sample: bracket is -0.1, clipped to zero.
        assert_eq!(weight_vector(&[1.0, 0.5], 0.0, 0.1), vec![0.0, 0.0]);
        // Full credibility at the published upper bound 0.01.
        let m = weight_vector(&[1.0], 1.0, 0.01);
        assert!((m[0] - 0.009).abs() < 1e-15);
    }

    #[test]
    fn weight_vector_matches_elementwise_oracle() {
        let m_class = [0.9, 0.05, 0.4, 1.0];
        let m = weight_vector(&m_class, 0.6, 0.2);
        for (k, &mc) in m_class.iter().enumerate() {
            let bracket = mc * 0.6 - 0.1;
            let expect = 0.2 * if bracket > 0.0 { bracket } else { 0.0 };
            assert!((m[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn ssd_loss_zero_cases() {
        let z = vec![vec![1.0, -2.0]];
        let m = vec![vec![0.3, 0.7]];
        let (loss, grad) = ssd_loss(&z, &z, &m).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad[0].iter().all(|&g| g == 0.0));

        let zt = vec![vec![5.0, 5.0]];
        let zs = vec![vec![-5.0, 0.0]];
        let zero_m = vec![vec![0.0, 0.0]];
        let (loss, _) = ssd_loss(&zt, &zs, &zero_m).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ssd_loss_hand_case() {
        // K=2, b=1, M=(0.5, 0), z_t=(2,7), z_s=(0,3):
        // loss = (0.5*2)^2 = 1.0; grad = 2*0.25*(0-2) = -1.0 on channel 0.
        let (loss, grad) = ssd_loss(
            &[vec![2.0, 7.0]],
            &[vec![0.0, 3.0]],
            &[vec![0.5, 0.0]],
        )
        .unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
        assert!((grad[0][0] - (-1.0)).abs() < 1e-15);
        assert_eq!(grad[0][1], 0.0);
    }

    #[test]
    fn mse_equals_ssd_with_constant_sqrt_alpha_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zt: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let zs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let alpha = 0.7;
        let (mse, mse_grad) = mse_distill_loss(&zt, &zs, alpha).unwrap();
        let w = vec![vec![alpha.sqrt(); 3]; 4];
        let (ssd, ssd_grad) = ssd_loss(&zt, &zs, &w).unwrap();
        assert!((mse - ssd).abs() < 1e-12);
        for (a, b) in mse_grad.iter().flatten().zip(ssd_grad.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_hand_sum() {
        let zt = vec![vec![1.0, 2.0], vec![0.0, -1.0]];
        let zs = vec![vec![0.5, 2.5], vec![1.0, -3.0]];
        let expect = (0.25 + 0.25 + 1.0 + 4.0) / 2.0;
        let (loss, _) = mse_distill_loss(&zt, &zs, 1.0).unwrap();
        assert!((loss - expect).abs() < 1e-15);
    }

    #[test]
    fn kl_loss_zero_cases() {
        let z = vec![vec![1.0, 2.0, 3.0]];
        let (loss, grad) = kl_distill_loss(&z, &z, 2.0, 0.5).unwrap();
        assert!(loss.abs() < 1e-14);
        assert!(grad[0].iter().all(|&g| g.abs() < 1e-14));

        let zt = vec![vec![4.0, 0.0, -1.0]];
        let (loss, grad) = kl_distill_loss(&zt, &z, 1.0, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let zt = vec![vec![1.5, -0.5]];
        let mut zs = vec![vec![0.2, 0.8]];
        let (tau, alpha) = (2.0, 0.6);
        let (_, grad) = kl_distill_loss(&zt, &zs, tau, alpha).unwrap();
        let eps = 1e-6;
        for k in 0..2 {
            let orig = zs[0][k];
            zs[0][k] = orig + eps;
            let (lp, _) = kl_distill_loss(&zt, &zs, tau, alpha).unwrap();
            zs[0][k] = orig - eps;
            let (lm, _) = kl_distill_loss(&zt, &zs, tau, alpha).unwrap();
            zs[0][k] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((grad[0][k] - fd).abs() < 1e-7, "channel {k}");
        }
    }

    #[test]
    fn prox_term_cases() {
        let w = ModelParams {
            layers: vec![Layer {
                weights: vec![3.0],
                bias: vec![],
                fan_in: 1,
                fan_out: 1,
            }],
        };
        let mut wg = w.clone();
        let (v, g) = prox_term(&w, &wg, 0.5).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.layers[0].weights[0], 0.0);

        wg.layers[0].weights[0] = 1.0;
        let (v, _) = prox_term(&w, &wg, 0.0).unwrap();
        assert_eq!(v, 0.0);

        let (v, g) = prox_term(&w, &wg, 0.01).unwrap();
        assert!((v - 0.02).abs() < 1e-15);
        assert!((g.layers[0].weights[0] - 0.02).abs() < 1e-15);
    }

    fn perfect_teacher_dataset() -> (ModelParams, LabeledDataset) {
        // Two orthogonal features; the identity layer predicts each class from
        // its own feature.
        let teacher = ModelParams {
            layers: vec![Layer {
                weights: vec![1.0, 0.0, 0.0, 1.0],
                bias: vec![0.0, 0.0],
                fan_in: 2,
                fan_out: 2,
            }],
        };
        let ds = LabeledDataset {
            features: vec![
                vec![2.0, 0.0],
                vec![3.0, 1.0],
                vec![0.0, 2.0],
                vec![1.0, 3.0],
            ],
            labels: vec![0, 0, 1, 1],
            classes: 2,
            name: "fixture".into(),
        };
        (teacher, ds)
    }

    #[test]
    fn perfect_teacher_gives_identity_credibility() {
        let (teacher, ds) = perfect_teacher_dataset();
        let a = credibility_matrix(&teacher, &ds, 0).unwrap();
        assert_eq!(a.rows, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(a.support, vec![2, 2]);
        a.validate().unwrap();
    }

    #[test]
    fn constant_logits_tie_break_to_class_zero() {
        let teacher = ModelParams {
            layers: vec![Layer {
                weights: vec![0.0, 0.0, 0.0, 0.0],
                bias: vec![0.0, 0.0],
                fan_in: 2,
                fan_out: 2,
            }],
        };
        let (_, ds) = perfect_teacher_dataset();
        let a = credibility_matrix(&teacher, &ds, 0).unwrap();
        assert_eq!(a.rows, vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn three_class_hand_counted_confusion() {
        // Teacher passes feature 0 through; argmax picks the largest of three
        // copies of scaled features, checked against a manual count.
        let teacher = ModelParams {
            layers: vec![Layer {
                weights: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                bias: vec![0.0, 0.0, 0.0],
                fan_in: 3,
                fan_out: 3,
            }],
        };
        let ds = LabeledDataset {
            features: vec![
                vec![5.0, 1.0, 0.0], // true 0 -> pred 0
                vec![0.0, 4.0, 1.0], // true 0 -> pred 1
                vec![3.0, 0.0, 1.0], // true 0 -> pred 0
                vec![1.0, 6.0, 0.0], // true 1 -> pred 1
                vec![0.0, 2.0, 5.0], // true 1 -> pred 2
                vec![2.0, 9.0, 1.0], // true 1 -> pred 1
                vec![0.0, 0.0, 7.0], // true 2 -> pred 2
                vec![8.0, 1.0, 2.0], // true 2 -> pred 0
                vec![1.0, 1.0, 9.0], // true 2 -> pred 2
            ],
            labels: vec![0, 0, 0, 1, 1, 1, 2, 2, 2],
            classes: 3,
            name: "fixture".into(),
        };
        let a = credibility_matrix(&teacher, &ds, 4).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(a.round, 4);
        assert!((a.rows[0][0] - 2.0 * third).abs() < 1e-15);
        assert!((a.rows[0][1] - third).abs() < 1e-15);
        assert!((a.rows[1][1] - 2.0 * third).abs() < 1e-15);
        assert!((a.rows[1][2] - third).abs() < 1e-15);
        assert!((a.rows[2][2] - 2.0 * third).abs() < 1e-15);
        assert!((a.rows[2][0] - third).abs() < 1e-15);
    }

    #[test]
    fn ssd_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let zt: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let mut zs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let m: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() * 0.5).collect())
            .collect();
        let (_, grad) = ssd_loss(&zt, &zs, &m).unwrap();
        let eps = 1e-5;
        for r in 0..3 {
            for k in 0..4 {
                let orig = zs[r][k];
                zs[r][k] = orig + eps;
                let (lp, _) = ssd_loss(&zt, &zs, &m).unwrap();
                zs[r][k] = orig - eps;
                let (lm, _) = ssd_loss(&zt, &zs, &m).unwrap();
                zs[r][k] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let denom = grad[r][k].abs().max(fd.abs()).max(1e-8);
                assert!((grad[r][k] - fd).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn spec_batch_used_in_backward_composite() {
        // Full composite (CE + SSD) backward vs finite differences on a tiny net.
        let params = ModelParams::init(&[2, 3, 2], 21).unwrap();
        let teacher = ModelParams::init(&[2, 3, 2], 22).unwrap();
        let batch = Batch::new(vec![vec![0.4, -1.1], vec![1.3, 0.2]], vec![1, 0], 2).unwrap();
        let spec = CompositeLossSpec {
            mode: LossMode::Ssd {
                m_max: 0.5,
                m_class: vec![0.9, 0.8],
            },
            teacher: Some(&teacher),
        };
        let (_, grads) = nn::backward(&params, &batch, &spec).unwrap();
        let mut p = params.clone();
        let eps = 1e-5;
        let flat_grads: Vec<f64> = grads.iter_flat().collect();
        for idx in 0..p.num_params() {
            let orig = *p.iter_flat_mut().nth(idx).unwrap();
            *p.iter_flat_mut().nth(idx).unwrap() = orig + eps;
            let lp = nn::composite_loss(&p, &batch, &spec).unwrap().total;
            *p.iter_flat_mut().nth(idx).unwrap() = orig - eps;
            let lm = nn::composite_loss(&p, &batch, &spec).unwrap().total;
            *p.iter_flat_mut().nth(idx).unwrap() = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let denom = flat_grads[idx].abs().max(fd.abs()).max(1e-8);
            assert!(
                (flat_grads[idx] - fd).abs() / denom < 1e-4,
                "coordinate {idx}: analytic {} vs fd {fd}",
                flat_grads[idx]
            );
        }
    }
}
