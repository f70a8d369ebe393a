//! Minimal multilayer perceptron with exact analytic gradients.
//!
//! Hidden layers use ReLU, the output layer is linear (logits); softmax is
//! applied separately. All operations are pure functions of their inputs, so
//! values can be shared freely across threads. Gradients are averaged (not
//! summed) over the batch, keeping the learning rate batch-size-robust.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{self, CompositeLossSpec, LossMode};
use crate::error::{CoreError, Result};

pub const LOG_CLAMP: f64 = 1e-12;

/// One dense layer: weights are `fan_out x fan_in` row-major plus a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
            fan_in,
            fan_out,
        }
    }

    fn w(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.fan_in + inp]
    }
}

/// Dense-layer weights and biases of the classifier; hidden activation is
/// ReLU, the output layer is identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// Seeded initialization, uniform in `[-s, s]` with
    /// `s = sqrt(6 / (fan_in + fan_out))` per layer.
    ///
    /// `dims` chains input dimension, hidden widths and class count, e.g.
    /// `[20, 64, 32, 10]`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CoreError::InvalidArgument(
                "need at least input and output dimensions".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(CoreError::InvalidArgument(
                "layer dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut layer = Layer::zeros(fan_in, fan_out);
            for w in layer.weights.iter_mut() {
                *w = rng.gen::<f64>() * 2.0 * s - s;
            }
            for b in layer.bias.iter_mut() {
                *b = rng.gen::<f64>() * 2.0 * s - s;
            }
            layers.push(layer);
        }
        Ok(ModelParams { layers })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in, l.fan_out))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.fan_in).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.fan_in == b.fan_in && a.fan_out == b.fan_out)
    }

    /// Iterates all parameters in a fixed order (layer by layer, weights
    /// row-major, then bias).
    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn iter_flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CoreError::InvalidArgument("model has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[1].fan_in != pair[0].fan_out {
                return Err(CoreError::LayerDimMismatch {
                    layer: i + 1,
                    expected: pair[0].fan_out,
                    actual: pair[1].fan_in,
                });
            }
        }
        if self.iter_flat().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

/// SGD-with-momentum state. The velocity buffer has exactly the shape of the
/// parameters it updates.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub velocity: ModelParams,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(CoreError::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(CoreError::InvalidArgument(
                "momentum must be in [0, 1)".into(),
            ));
        }
        Ok(OptimizerState {
            velocity: params.zeros_like(),
            learning_rate,
            momentum,
        })
    }
}

/// A minibatch: feature rows plus integer labels in `[0, K)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} input rows vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(CoreError::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct ForwardCache {
    /// activations[l] is the input to layer l (activations[0] = batch inputs).
    activations: Vec<Vec<Vec<f64>>>,
    /// pre_activations[l] is the affine output of layer l before ReLU.
    pre_activations: Vec<Vec<Vec<f64>>>,
}

fn forward_cached(params: &ModelParams, batch: &Batch) -> Result<ForwardCache> {
    params.validate()?;
    let n_layers = params.layers.len();
    let mut activations: Vec<Vec<Vec<f64>>> = vec![batch.inputs.clone()];
    let mut pre_activations: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let input = &activations[l];
        let mut pre = Vec::with_capacity(input.len());
        for (row_idx, row) in input.iter().enumerate() {
            if row.len() != layer.fan_in {
                return Err(CoreError::LayerDimMismatch {
                    layer: l,
                    expected: layer.fan_in,
                    actual: input[row_idx].len(),
                });
            }
            let mut out = Vec::with_capacity(layer.fan_out);
            for o in 0..layer.fan_out {
                let mut acc = layer.bias[o];
                for (i, &x) in row.iter().enumerate() {
                    acc += layer.w(o, i) * x;
                }
                out.push(acc);
            }
            pre.push(out);
        }
        let is_last = l == n_layers - 1;
        let act: Vec<Vec<f64>> = if is_last {
            pre.clone()
        } else {
            pre.iter()
                .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
                .collect()
        };
        pre_activations.push(pre);
        activations.push(act);
    }
    Ok(ForwardCache {
        activations,
        pre_activations,
    })
}

/// Computes the logit matrix `[b x K]` for a batch. Purely functional and
/// deterministic.
pub fn forward_logits(params: &ModelParams, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let cache = forward_cached(params, batch)?;
    Ok(cache.activations.last().unwrap().clone())
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_probs(logits: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits {
        if row.iter().any(|v| v.is_nan()) {
            return Err(CoreError::NonFinite("logits".into()));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        probs.push(exps.iter().map(|&e| e / sum).collect());
    }
    Ok(probs)
}

/// Mean over the batch of `-log p_true`, with `p_true` clamped at 1e-12
/// before the log.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &label) in probs.iter().zip(labels) {
        if label >= row.len() {
            return Err(CoreError::LabelOutOfRange {
                label,
                classes: row.len(),
            });
        }
        total += -row[label].max(LOG_CLAMP).ln();
    }
    Ok(total / probs.len().max(1) as f64)
}

/// Scalar values of the composite loss, split by term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    /// Value of the active distillation / regularization term (0 for CE-only).
    pub distill: f64,
}

/// Exact analytic gradient of the composite scalar loss averaged over the
/// batch. Returns the loss breakdown and a `ModelParams`-shaped gradient.
pub fn backward(
    params: &ModelParams,
    batch: &Batch,
    spec: &CompositeLossSpec,
) -> Result<(LossValues, ModelParams)> {
    let cache = forward_cached(params, batch)?;
    let logits = cache.activations.last().unwrap();
    let probs = softmax_probs(logits)?;
    let ce = cross_entropy(&probs, &batch.labels)?;

    let b = batch.len() as f64;
    let classes = params.output_dim();
    // dL/dz for the CE term: (softmax - onehot) / b.
    let mut dz: Vec<Vec<f64>> = probs
        .iter()
        .zip(&batch.labels)
        .map(|(row, &label)| {
            let mut g: Vec<f64> = row.iter().map(|&p| p / b).collect();
            g[label] -= 1.0 / b;
            g
        })
        .collect();

    let mut distill_value = 0.0;
    let mut prox: Option<(f64, f64)> = None; // (mu, value placeholder filled below)
    match &spec.mode {
        LossMode::CeOnly => {}
        LossMode::Ssd { m_max, m_class } => {
            let teacher = spec.teacher.ok_or(CoreError::MissingTeacher)?;
            if m_class.len() != classes {
                return Err(CoreError::ShapeMismatch(format!(
                    "m_class has {} entries for {} classes",
                    m_class.len(),
                    classes
                )));
            }
            let teacher_logits = forward_logits(teacher, batch)?;
            let teacher_probs = softmax_probs(&teacher_logits)?;
            let weights: Vec<Vec<f64>> = teacher_probs
                .iter()
                .zip(&batch.labels)
                .map(|(row, &label)| {
                    let m_sample = distill::sample_weight(row[label])?;
                    Ok(distill::weight_vector(m_class, m_sample, *m_max))
                })
                .collect::<Result<_>>()?;
            let (value, grad) = distill::ssd_loss(&teacher_logits, logits, &weights)?;
            distill_value = value;
            add_rows(&mut dz, &grad);
        }
        LossMode::KlConst { alpha, tau } => {
            let teacher = spec.teacher.ok_or(CoreError::MissingTeacher)?;
            let teacher_logits = forward_logits(teacher, batch)?;
            let (value, grad) = distill::kl_distill_loss(&teacher_logits, logits, *tau, *alpha)?;
            distill_value = value;
            add_rows(&mut dz, &grad);
        }
        LossMode::MseConst { alpha } => {
            let teacher = spec.teacher.ok_or(CoreError::MissingTeacher)?;
            let teacher_logits = forward_logits(teacher, batch)?;
            let (value, grad) = distill::mse_distill_loss(&teacher_logits, logits, *alpha)?;
            distill_value = value;
            add_rows(&mut dz, &grad);
        }
        LossMode::Prox { mu } => {
            prox = Some((*mu, 0.0));
        }
    }

    // Backpropagate dz through the layers.
    let mut grads = params.zeros_like();
    let mut delta = dz;
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input = &cache.activations[l];
        let grad_layer = &mut grads.layers[l];
        for (row, d) in input.iter().zip(&delta) {
            for o in 0..layer.fan_out {
                let dv = d[o];
                grad_layer.bias[o] += dv;
                for (i, &x) in row.iter().enumerate() {
                    grad_layer.weights[o * layer.fan_in + i] += dv * x;
                }
            }
        }
        if l > 0 {
            let pre_prev = &cache.pre_activations[l - 1];
            let mut next_delta = Vec::with_capacity(delta.len());
            for (d, pre) in delta.iter().zip(pre_prev) {
                let mut nd = vec![0.0; layer.fan_in];
                for (i, nd_i) in nd.iter_mut().enumerate() {
                    if pre[i] > 0.0 {
                        let mut acc = 0.0;
                        for (o, &dv) in d.iter().enumerate() {
                            acc += layer.w(o, i) * dv;
                        }
                        *nd_i = acc;
                    }
                }
                next_delta.push(nd);
            }
            delta = next_delta;
        }
    }

    // Proximal term acts in parameter space, added after backprop.
    if let Some((mu, _)) = prox {
        let global = spec.teacher.ok_or(CoreError::MissingTeacher)?;
        let (value, prox_grad) = distill::prox_term(params, global, mu)?;
        distill_value = value;
        for (g, pg) in grads.iter_flat_mut().zip(prox_grad.iter_flat()) {
            *g += pg;
        }
    }

    Ok((
        LossValues {
            total: ce + distill_value,
            ce,
            distill: distill_value,
        },
        grads,
    ))
}

fn add_rows(dst: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (dv, &sv) in d.iter_mut().zip(s) {
            *dv += sv;
        }
    }
}

/// One SGD-with-momentum step: `v' = momentum*v + g`, `w' = w - eta*v'`.
/// Pure function of its inputs.
pub fn sgd_step(
    params: &ModelParams,
    grads: &ModelParams,
    state: &OptimizerState,
) -> Result<(ModelParams, OptimizerState)> {
    if !params.same_shape(grads) || !params.same_shape(&state.velocity) {
        return Err(CoreError::ShapeMismatch(
            "params, grads and velocity shapes must match".into(),
        ));
    }
    let mut new_params = params.clone();
    let mut new_velocity = state.velocity.clone();
    for ((w, v), g) in new_params
        .iter_flat_mut()
        .zip(new_velocity.iter_flat_mut())
        .zip(grads.iter_flat())
    {
        *v = state.momentum * *v + g;
        *w -= state.learning_rate * *v;
    }
    Ok((
        new_params,
        OptimizerState {
            velocity: new_velocity,
            learning_rate: state.learning_rate,
            momentum: state.momentum,
        },
    ))
}

/// Total composite loss on a batch without gradients; used by finite-difference
/// checks and per-client loss reporting.
pub fn composite_loss(params: &ModelParams, batch: &Batch, spec: &CompositeLossSpec) -> Result<LossValues> {
    // Shares the backward path's forward computation; the gradient half is
    // discarded by callers that only need the scalar.
    let (values, _) = backward(params, batch, spec)?;
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_2x2() -> ModelParams {
        ModelParams {
            layers: vec![Layer {
                weights: vec![1.0, 0.0, 0.0, 1.0],
                bias: vec![0.0, 0.0],
                fan_in: 2,
                fan_out: 2,
            }],
        }
    }

    #[test]
    fn forward_identity_layer() {
        let params = identity_2x2();
        let batch = Batch::new(vec![vec![3.0, -1.0]], vec![0], 2).unwrap();
        let logits = forward_logits(&params, &batch).unwrap();
        assert_eq!(logits, vec![vec![3.0, -1.0]]);
    }

    #[test]
    fn relu_kills_negative_hidden_signal() {
        // Hidden layer drives all pre-activations negative; output is the
        // output layer's bias.
        let params = ModelParams {
            layers: vec![
                Layer {
                    weights: vec![-1.0, -1.0, -1.0, -1.0],
                    bias: vec![-5.0, -5.0],
                    fan_in: 2,
                    fan_out: 2,
                },
                Layer {
                    weights: vec![1.0, 2.0, 3.0, 4.0],
                    bias: vec![0.25, -0.75],
                    fan_in: 2,
                    fan_out: 2,
                },
            ],
        };
        let batch = Batch::new(vec![vec![1.0, 2.0]], vec![0], 2).unwrap();
        let logits = forward_logits(&params, &batch).unwrap();
        assert_eq!(logits, vec![vec![0.25, -0.75]]);
    }

    #[test]
    fn forward_matches_naive_loop_oracle() {
        // Straight-line reimplementation with naive loops, checked to 1e-10.
        let params = ModelParams::init(&[3, 4, 2], 7).unwrap();
        let batch = Batch::new(
            vec![vec![0.5, -1.2, 2.0], vec![1.0, 0.0, -0.5]],
            vec![0, 1],
            2,
        )
        .unwrap();
        let logits = forward_logits(&params, &batch).unwrap();

        for (row, expect) in batch.inputs.iter().zip(&logits) {
            let l0 = &params.layers[0];
            let mut hidden = [0.0; 4];
            for o in 0..4 {
                let mut acc = l0.bias[o];
                for i in 0..3 {
                    acc += l0.weights[o * 3 + i] * row[i];
                }
                hidden[o] = if acc > 0.0 { acc } else { 0.0 };
            }
            let l1 = &params.layers[1];
            for o in 0..2 {
                let mut acc = l1.bias[o];
                for i in 0..4 {
                    acc += l1.weights[o * 4 + i] * hidden[i];
                }
                assert!((acc - expect[o]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_dim_mismatch_names_layer() {
        let params = identity_2x2();
        let batch = Batch::new(vec![vec![1.0, 2.0, 3.0]], vec![0], 2).unwrap();
        match forward_logits(&params, &batch) {
            Err(CoreError::LayerDimMismatch { layer: 0, .. }) => {}
            other => panic!("expected layer dim mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let probs = softmax_probs(&[vec![0.0, 0.0]]).unwrap();
        assert!((probs[0][0] - 0.5).abs() < 1e-15);
        assert!((probs[0][1] - 0.5).abs() < 1e-15);

        let probs = softmax_probs(&[vec![1000.0, 0.0]]).unwrap();
        assert!(probs[0][0] > 1.0 - 1e-12);
        assert!(probs[0][1] < 1e-12);
        assert!(probs[0].iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let probs = softmax_probs(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let sum: f64 = probs[0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // exp-normalize reference values
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, p) in probs[0].iter().enumerate() {
            assert!((p - ((k + 1) as f64).exp() / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax_probs(&[vec![f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let ce = cross_entropy(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]).unwrap();
        assert_eq!(ce, 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let ce = cross_entropy(&[vec![0.25; 4]], &[2]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_sample_oracle() {
        let probs = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
        ];
        let labels = [0, 1, 2];
        let expected = (-(0.7f64.ln()) - 0.8f64.ln() - 0.4f64.ln()) / 3.0;
        let ce = cross_entropy(&probs, &labels).unwrap();
        assert!((ce - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(cross_entropy(&[vec![0.5, 0.5]], &[2]).is_err());
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let params = ModelParams::init(&[2, 3, 2], 1).unwrap();
        let state = OptimizerState::new(&params, 0.1, 0.9).unwrap();
        let grads = params.zeros_like();
        let (next, _) = sgd_step(&params, &grads, &state).unwrap();
        assert_eq!(next, params);
    }

    #[test]
    fn sgd_plain_step_arithmetic() {
        let params = ModelParams {
            layers: vec![Layer {
                weights: vec![1.0],
                bias: vec![0.0],
                fan_in: 1,
                fan_out: 1,
            }],
        };
        let mut grads = params.zeros_like();
        grads.layers[0].weights[0] = 1.0;
        let state = OptimizerState::new(&params, 0.1, 0.0).unwrap();
        let (next, _) = sgd_step(&params, &grads, &state).unwrap();
        assert!((next.layers[0].weights[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_step_unroll() {
        // v1 = g, w1 = w0 - eta*g; v2 = 0.9*g + g, w2 = w1 - eta*v2
        let params = ModelParams {
            layers: vec![Layer {
                weights: vec![2.0],
                bias: vec![0.0],
                fan_in: 1,
                fan_out: 1,
            }],
        };
        let mut grads = params.zeros_like();
        grads.layers[0].weights[0] = 0.5;
        let state = OptimizerState::new(&params, 0.1, 0.9).unwrap();
        let (p1, s1) = sgd_step(&params, &grads, &state).unwrap();
        let (p2, _) = sgd_step(&p1, &grads, &s1).unwrap();
        let w1 = 2.0 - 0.1 * 0.5;
        let v2 = 0.9 * 0.5 + 0.5;
        let w2 = w1 - 0.1 * v2;
        assert!((p1.layers[0].weights[0] - w1).abs() < 1e-15);
        assert!((p2.layers[0].weights[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch_rejected() {
        let params = ModelParams::init(&[2, 2], 0).unwrap();
        let other = ModelParams::init(&[3, 2], 0).unwrap();
        let state = OptimizerState::new(&params, 0.1, 0.0).unwrap();
        assert!(sgd_step(&params, &other.zeros_like(), &state).is_err());
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let params = ModelParams::init(&[3, 5, 2], 11).unwrap();
        let rows = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0], vec![0.1, 0.2, 0.3]];
        let batch = Batch::new(rows.clone(), vec![0, 1, 0], 2).unwrap();
        let swapped = Batch::new(
            vec![rows[2].clone(), rows[0].clone(), rows[1].clone()],
            vec![0, 0, 1],
            2,
        )
        .unwrap();
        let z = forward_logits(&params, &batch).unwrap();
        let zs = forward_logits(&params, &swapped).unwrap();
        assert_eq!(z[0], zs[1]);
        assert_eq!(z[1], zs[2]);
        assert_eq!(z[2], zs[0]);
    }

    #[test]
    fn backward_zero_weight_distill_equals_ce_only() {
        let params = ModelParams::init(&[3, 4, 3], 5).unwrap();
        let teacher = ModelParams::init(&[3, 4, 3], 6).unwrap();
        let batch = Batch::new(
            vec![vec![0.5, -0.3, 1.0], vec![0.1, 0.9, -0.2]],
            vec![2, 0],
            3,
        )
        .unwrap();
        let (_, g_ce) = backward(&params, &batch, &CompositeLossSpec::ce_only()).unwrap();
        let spec = CompositeLossSpec {
            mode: LossMode::Ssd {
                m_max: 0.0,
                m_class: vec![1.0, 1.0, 1.0],
            },
            teacher: Some(&teacher),
        };
        let (values, g_ssd) = backward(&params, &batch, &spec).unwrap();
        assert_eq!(values.distill, 0.0);
        assert_eq!(g_ce, g_ssd);
    }

    #[test]
    fn backward_missing_teacher_rejected() {
        let params = ModelParams::init(&[2, 2], 0).unwrap();
        let batch = Batch::new(vec![vec![1.0, 0.0]], vec![0], 2).unwrap();
        let spec = CompositeLossSpec {
            mode: LossMode::MseConst { alpha: 1.0 },
            teacher: None,
        };
        assert!(matches!(
            backward(&params, &batch, &spec),
            Err(CoreError::MissingTeacher)
        ));
    }
}
