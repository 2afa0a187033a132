//! Small differentiable classifiers over flat parameter vectors.
//!
//! Two model kinds are supported: plain softmax regression and a
//! one-hidden-layer MLP with tanh activation. Both expose the same flat
//! parameter representation so the federated algorithms can treat models as
//! opaque vectors. All math runs in `f64` with analytic backprop; the test
//! suite checks every gradient against central finite differences.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    MlpOneHidden,
}

/// Architecture description. `hidden_dim` is only meaningful for
/// [`ModelKind::MlpOneHidden`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.01
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

impl ModelSpec {
    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            num_classes,
            hidden_dim: None,
            init_scale: default_init_scale(),
        }
    }

    pub fn mlp_one_hidden(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::MlpOneHidden,
            input_dim,
            num_classes,
            hidden_dim: Some(hidden_dim),
            init_scale: default_init_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be >= 2".into()));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(Error::InvalidSpec(
                "init_scale must be finite and nonnegative".into(),
            ));
        }
        if self.kind == ModelKind::MlpOneHidden && self.hidden_dim.unwrap_or(0) < 1 {
            return Err(Error::InvalidSpec(
                "hidden_dim must be >= 1 for mlp_one_hidden".into(),
            ));
        }
        Ok(())
    }

    /// Ordered tensor layout; sizes sum to [`ModelSpec::param_count`].
    pub fn layout(&self) -> Vec<TensorInfo> {
        let d = self.input_dim;
        let c = self.num_classes;
        match self.kind {
            ModelKind::SoftmaxRegression => vec![
                TensorInfo { name: "weight", shape: vec![c, d] },
                TensorInfo { name: "bias", shape: vec![c] },
            ],
            ModelKind::MlpOneHidden => {
                let h = self.hidden_dim.unwrap_or(0);
                vec![
                    TensorInfo { name: "hidden_weight", shape: vec![h, d] },
                    TensorInfo { name: "hidden_bias", shape: vec![h] },
                    TensorInfo { name: "output_weight", shape: vec![c, h] },
                    TensorInfo { name: "output_bias", shape: vec![c] },
                ]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(TensorInfo::size).sum()
    }
}

/// Flat trainable parameters plus their tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub layout: Vec<TensorInfo>,
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A training batch: `n` feature rows with one label each.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("batch".into()));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-parameter diagonal of the empirical Fisher information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    pub values: Vec<f64>,
    pub sample_count: usize,
}

/// Draws initial parameters: weights uniform in `[-init_scale, init_scale]`,
/// biases zero. Deterministic for a fixed `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for tensor in &layout {
        let is_bias = tensor.shape.len() == 1;
        for _ in 0..tensor.size() {
            if is_bias || spec.init_scale == 0.0 {
                values.push(0.0);
            } else {
                values.push(rng.random_range(-spec.init_scale..spec.init_scale));
            }
        }
    }
    Ok(ModelParams { values, layout })
}

fn check_dims(spec: &ModelSpec, params: &ModelParams, features: &Matrix) -> Result<()> {
    spec.validate()?;
    let d = spec.param_count();
    if params.values.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "params hold {} values, spec wants {}",
            params.values.len(),
            d
        )));
    }
    if features.cols() != spec.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "features have {} columns, spec wants {}",
            features.cols(),
            spec.input_dim
        )));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features".into()));
    }
    Ok(())
}

fn check_labels(spec: &ModelSpec, labels: &[usize]) -> Result<()> {
    for &label in labels {
        if label >= spec.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: spec.num_classes,
            });
        }
    }
    Ok(())
}

/// Parameter slices for softmax regression: logits = W x + b.
struct SoftmaxView<'a> {
    w: &'a [f64],
    b: &'a [f64],
}

/// Parameter slices for the MLP: h = tanh(W1 x + b1), logits = W2 h + b2.
struct MlpView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn softmax_view<'a>(spec: &ModelSpec, values: &'a [f64]) -> SoftmaxView<'a> {
    let (d, c) = (spec.input_dim, spec.num_classes);
    SoftmaxView {
        w: &values[0..c * d],
        b: &values[c * d..c * d + c],
    }
}

fn mlp_view<'a>(spec: &ModelSpec, values: &'a [f64]) -> MlpView<'a> {
    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim.unwrap());
    let mut off = 0;
    let w1 = &values[off..off + h * d];
    off += h * d;
    let b1 = &values[off..off + h];
    off += h;
    let w2 = &values[off..off + c * h];
    off += c * h;
    let b2 = &values[off..off + c];
    MlpView { w1, b1, w2, b2 }
}

/// Forward pass producing logits, plus hidden activations for the MLP.
fn forward_raw(spec: &ModelSpec, params: &ModelParams, features: &Matrix) -> (Matrix, Option<Matrix>) {
    let n = features.rows();
    let c = spec.num_classes;
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let view = softmax_view(spec, &params.values);
            let d = spec.input_dim;
            let mut logits = Matrix::zeros(n, c);
            for s in 0..n {
                let x = features.row(s);
                let out = logits.row_mut(s);
                for k in 0..c {
                    let row = &view.w[k * d..(k + 1) * d];
                    let mut z = view.b[k];
                    for j in 0..d {
                        z += row[j] * x[j];
                    }
                    out[k] = z;
                }
            }
            (logits, None)
        }
        ModelKind::MlpOneHidden => {
            let view = mlp_view(spec, &params.values);
            let d = spec.input_dim;
            let h = spec.hidden_dim.unwrap();
            let mut hidden = Matrix::zeros(n, h);
            let mut logits = Matrix::zeros(n, c);
            for s in 0..n {
                let x = features.row(s);
                let hrow = hidden.row_mut(s);
                for i in 0..h {
                    let row = &view.w1[i * d..(i + 1) * d];
                    let mut z = view.b1[i];
                    for j in 0..d {
                        z += row[j] * x[j];
                    }
                    hrow[i] = z.tanh();
                }
                let out = logits.row_mut(s);
                for k in 0..c {
                    let row = &view.w2[k * h..(k + 1) * h];
                    let mut z = view.b2[k];
                    for i in 0..h {
                        z += row[i] * hrow[i];
                    }
                    out[k] = z;
                }
            }
            (logits, Some(hidden))
        }
    }
}

/// Row-wise stabilized softmax (max subtraction before exponentiation).
fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut probs = logits.clone();
    for s in 0..probs.rows() {
        let row = probs.row_mut(s);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Mean cross-entropy loss and the per-sample class probabilities.
pub fn forward_loss(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Batch,
) -> Result<(f64, Matrix)> {
    check_dims(spec, params, &batch.features)?;
    check_labels(spec, &batch.labels)?;
    let (logits, _) = forward_raw(spec, params, &batch.features);
    let n = batch.len();
    let mut loss = 0.0;
    for s in 0..n {
        let row = logits.row(s);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        loss -= row[batch.labels[s]] - max - log_sum;
    }
    Ok((loss / n as f64, softmax_rows(&logits)))
}

/// Gradient of the mean cross-entropy over the batch, as a flat vector.
pub fn gradient(spec: &ModelSpec, params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    check_dims(spec, params, &batch.features)?;
    check_labels(spec, &batch.labels)?;
    let mut grad = vec![0.0; params.values.len()];
    accumulate_gradient(spec, params, batch, 1.0 / batch.len() as f64, &mut grad);
    Ok(grad)
}

/// Adds `scale * dCE_sum/dtheta` over the batch into `out`.
///
/// With `scale = 1/n` this is the gradient of the mean cross-entropy; with
/// `scale = 1` and a single-sample batch it is minus the gradient of that
/// sample's log-likelihood.
fn accumulate_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Batch,
    scale: f64,
    out: &mut [f64],
) {
    let (logits, hidden) = forward_raw(spec, params, &batch.features);
    let probs = softmax_rows(&logits);
    let n = batch.len();
    let d = spec.input_dim;
    let c = spec.num_classes;
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let (gw, gb) = out.split_at_mut(c * d);
            for s in 0..n {
                let x = batch.features.row(s);
                let p = probs.row(s);
                for k in 0..c {
                    let delta = (p[k] - if k == batch.labels[s] { 1.0 } else { 0.0 }) * scale;
                    let wrow = &mut gw[k * d..(k + 1) * d];
                    for j in 0..d {
                        wrow[j] += delta * x[j];
                    }
                    gb[k] += delta;
                }
            }
        }
        ModelKind::MlpOneHidden => {
            let h = spec.hidden_dim.unwrap();
            let view = mlp_view(spec, &params.values);
            let hid = hidden.unwrap();
            let (gw1, rest) = out.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            let mut delta2 = vec![0.0; c];
            let mut delta1 = vec![0.0; h];
            for s in 0..n {
                let x = batch.features.row(s);
                let hrow = hid.row(s);
                let p = probs.row(s);
                for k in 0..c {
                    delta2[k] = (p[k] - if k == batch.labels[s] { 1.0 } else { 0.0 }) * scale;
                }
                for k in 0..c {
                    let wrow = &mut gw2[k * h..(k + 1) * h];
                    for i in 0..h {
                        wrow[i] += delta2[k] * hrow[i];
                    }
                    gb2[k] += delta2[k];
                }
                for i in 0..h {
                    let mut back = 0.0;
                    for k in 0..c {
                        back += view.w2[k * h + i] * delta2[k];
                    }
                    delta1[i] = back * (1.0 - hrow[i] * hrow[i]);
                }
                for i in 0..h {
                    let wrow = &mut gw1[i * d..(i + 1) * d];
                    for j in 0..d {
                        wrow[j] += delta1[i] * x[j];
                    }
                    gb1[i] += delta1[i];
                }
            }
        }
    }
}

/// Empirical Fisher diagonal at `params`: the per-parameter mean of squared
/// log-likelihood gradients over the observed labels.
pub fn fisher_diagonal(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Batch,
) -> Result<FisherDiagonal> {
    check_dims(spec, params, &data.features)?;
    check_labels(spec, &data.labels)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("fisher data".into()));
    }
    let dim = params.values.len();
    let n = data.len();
    let mut fisher = vec![0.0; dim];
    let mut sample_grad = vec![0.0; dim];
    for s in 0..n {
        sample_grad.fill(0.0);
        let single = Batch {
            features: data.features.gather_rows(&[s]),
            labels: vec![data.labels[s]],
        };
        accumulate_gradient(spec, params, &single, 1.0, &mut sample_grad);
        for (f, g) in fisher.iter_mut().zip(&sample_grad) {
            *f += g * g;
        }
    }
    for f in fisher.iter_mut() {
        *f /= n as f64;
    }
    Ok(FisherDiagonal {
        values: fisher,
        sample_count: n,
    })
}

/// Fraction of rows whose argmax class equals the label. Ties break toward
/// the lowest class index, which keeps the metric deterministic.
pub fn top1_accuracy(
    spec: &ModelSpec,
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    check_dims(spec, params, features)?;
    check_labels(spec, labels)?;
    if labels.is_empty() || features.rows() != labels.len() {
        return Err(Error::EmptyInput("evaluation set".into()));
    }
    let (logits, _) = forward_raw(spec, params, features);
    let mut correct = 0usize;
    for s in 0..labels.len() {
        let row = logits.row(s);
        let mut best = 0usize;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best == labels[s] {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state owned by one client between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn sgd(lr: f64, dim: usize) -> Self {
        OptimizerState {
            kind: OptimizerKind::Sgd,
            lr,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step_count: 0,
        }
    }

    pub fn adam(lr: f64, dim: usize) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam,
            ..OptimizerState::sgd(lr, dim)
        }
    }

    /// One parameter update in place. Adam uses the standard bias-corrected
    /// moment estimates.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.first_moment.len() {
            return Err(Error::DimensionMismatch(format!(
                "gradient length {} does not match parameter length {}",
                grad.len(),
                params.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.step_count += 1;
                let bc1 = 1.0 - self.adam_beta1.powi(self.step_count as i32);
                let bc2 = 1.0 - self.adam_beta2.powi(self.step_count as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first_moment[i] =
                        self.adam_beta1 * self.first_moment[i] + (1.0 - self.adam_beta1) * g;
                    self.second_moment[i] =
                        self.adam_beta2 * self.second_moment[i] + (1.0 - self.adam_beta2) * g * g;
                    let m_hat = self.first_moment[i] / bc1;
                    let v_hat = self.second_moment[i] / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.adam_eps);
                }
            }
        }
        if self.kind == OptimizerKind::Sgd {
            self.step_count += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, spec: &ModelSpec) -> Batch {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            rows.push(
                (0..spec.input_dim)
                    .map(|_| rng.random_range(-1.5..1.5))
                    .collect::<Vec<f64>>(),
            );
            labels.push(rng.random_range(0..spec.num_classes));
        }
        Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> ModelParams {
        let mut params = init_params(spec, 0).unwrap();
        for v in params.values.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        params
    }

    /// Central finite difference of the mean CE loss, the independent oracle
    /// for every analytic gradient.
    fn fd_gradient(spec: &ModelSpec, params: &ModelParams, batch: &Batch, h: f64) -> Vec<f64> {
        let mut out = vec![0.0; params.values.len()];
        let mut probe = params.clone();
        for i in 0..out.len() {
            let orig = probe.values[i];
            probe.values[i] = orig + h;
            let (lp, _) = forward_loss(spec, &probe, batch).unwrap();
            probe.values[i] = orig - h;
            let (lm, _) = forward_loss(spec, &probe, batch).unwrap();
            probe.values[i] = orig;
            out[i] = (lp - lm) / (2.0 * h);
        }
        out
    }

    fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn softmax_layout_is_dense_weight_plus_bias() {
        let spec = ModelSpec::softmax_regression(4, 3);
        assert_eq!(spec.param_count(), 15);
        let params = init_params(&spec, 7).unwrap();
        assert_eq!(params.values.len(), 15);
        let sizes: Vec<usize> = params.layout.iter().map(TensorInfo::size).collect();
        assert_eq!(sizes, vec![12, 3]);
    }

    #[test]
    fn mlp_layout_matches_hand_count() {
        let spec = ModelSpec::mlp_one_hidden(8, 16, 10);
        assert_eq!(spec.param_count(), 8 * 16 + 16 + 16 * 10 + 10);
        assert_eq!(spec.param_count(), 314);
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let spec = ModelSpec::mlp_one_hidden(5, 4, 3);
        let a = init_params(&spec, 99).unwrap();
        let b = init_params(&spec, 99).unwrap();
        assert_eq!(a.values, b.values);
        // bias blocks sit after each weight block
        let h = 4;
        let d = 5;
        assert!(a.values[h * d..h * d + h].iter().all(|&v| v == 0.0));
        assert!(a.values.iter().all(|v| v.abs() <= 0.01));
        let c = init_params(&spec, 100).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::softmax_regression(0, 3).validate().is_err());
        assert!(ModelSpec::softmax_regression(4, 1).validate().is_err());
        let mut spec = ModelSpec::mlp_one_hidden(4, 1, 3);
        spec.hidden_dim = None;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_params_give_uniform_probs_and_ln_c_loss() {
        let spec = ModelSpec::softmax_regression(6, 10);
        let params = ModelParams {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 4, &spec);
        let (loss, probs) = forward_loss(&spec, &params, &batch).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
        for s in 0..probs.rows() {
            for k in 0..probs.cols() {
                assert!((probs.get(s, k) - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let spec = ModelSpec::softmax_regression(2, 3);
        // weight rows pick out feature 0; +30 logit margin on the true class
        let mut params = ModelParams {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        };
        params.values[0] = 30.0; // class 0 reacts to feature 0
        let batch = Batch::new(
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            vec![0],
        )
        .unwrap();
        let (loss, _) = forward_loss(&spec, &params, &batch).unwrap();
        assert!(loss < 1e-9, "saturated loss was {loss}");
    }

    #[test]
    fn forward_loss_matches_scalar_log_sum_exp_oracle() {
        let spec = ModelSpec::softmax_regression(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_params(&mut rng, &spec);
        let batch = random_batch(&mut rng, 3, &spec);
        // brute-force reimplementation with scalar ops
        let view_w = &params.values[0..12];
        let view_b = &params.values[12..16];
        let mut oracle = 0.0;
        for s in 0..3 {
            let x = batch.features.row(s);
            let logits: Vec<f64> = (0..4)
                .map(|k| view_b[k] + (0..3).map(|j| view_w[k * 3 + j] * x[j]).sum::<f64>())
                .collect();
            let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            oracle -= logits[batch.labels[s]] - lse;
        }
        oracle /= 3.0;
        let (loss, _) = forward_loss(&spec, &params, &batch).unwrap();
        assert!((loss - oracle).abs() < 1e-10);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let spec = ModelSpec::softmax_regression(2, 3);
        let params = init_params(&spec, 0).unwrap();
        let batch = Batch {
            features: Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            labels: vec![3],
        };
        assert!(matches!(
            forward_loss(&spec, &params, &batch),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn non_finite_feature_rejected() {
        let spec = ModelSpec::softmax_regression(2, 3);
        let params = init_params(&spec, 0).unwrap();
        let batch = Batch {
            features: Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap(),
            labels: vec![0],
        };
        assert!(matches!(
            gradient(&spec, &params, &batch),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_both_kinds() {
        let specs = [
            ModelSpec::softmax_regression(5, 4),
            ModelSpec::mlp_one_hidden(4, 6, 3),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for spec in &specs {
            for _ in 0..5 {
                let params = random_params(&mut rng, spec);
                let batch = random_batch(&mut rng, 4, spec);
                let analytic = gradient(spec, &params, &batch).unwrap();
                let numeric = fd_gradient(spec, &params, &batch, 1e-5);
                let err = max_rel_error(&analytic, &numeric);
                assert!(err <= 1e-4, "relative error {err} for {:?}", spec.kind);
            }
        }
    }

    #[test]
    fn zero_input_batch_kills_softmax_weight_gradient() {
        let spec = ModelSpec::softmax_regression(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = random_params(&mut rng, &spec);
        let batch = Batch::new(
            Matrix::from_rows(&[vec![0.0; 3], vec![0.0; 3]]).unwrap(),
            vec![1, 2],
        )
        .unwrap();
        let grad = gradient(&spec, &params, &batch).unwrap();
        assert!(grad[0..12].iter().all(|&g| g == 0.0));
        // bias gradient = mean(probs - onehot)
        let (_, probs) = forward_loss(&spec, &params, &batch).unwrap();
        for k in 0..4 {
            let mut expect = 0.0;
            for s in 0..2 {
                expect += probs.get(s, k) - if batch.labels[s] == k { 1.0 } else { 0.0 };
            }
            expect /= 2.0;
            assert!((grad[12 + k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_sample_leaves_mean_gradient_unchanged() {
        let spec = ModelSpec::mlp_one_hidden(3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = random_params(&mut rng, &spec);
        let row: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let single = Batch::new(Matrix::from_rows(&[row.clone()]).unwrap(), vec![2]).unwrap();
        let double =
            Batch::new(Matrix::from_rows(&[row.clone(), row]).unwrap(), vec![2, 2]).unwrap();
        let g1 = gradient(&spec, &params, &single).unwrap();
        let g2 = gradient(&spec, &params, &double).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_matches_hand_example() {
        let mut state = OptimizerState::sgd(0.1, 2);
        let mut params = vec![1.0, 2.0];
        state.step(&mut params, &[10.0, -10.0]).unwrap();
        assert_eq!(params, vec![0.0, 3.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_sign() {
        let lr = 0.05;
        let mut state = OptimizerState::adam(lr, 3);
        let mut params = vec![0.3, -0.2, 1.0];
        let before = params.clone();
        state.step(&mut params, &[2.0, -0.5, 1.0]).unwrap();
        for (i, sign) in [1.0, -1.0, 1.0].iter().enumerate() {
            let delta: f64 = params[i] - before[i];
            assert!((delta.abs() - lr).abs() < 1e-6 * lr.max(1.0));
            assert!(delta.signum() == -sign);
        }
    }

    #[test]
    fn optimizer_steps_are_deterministic() {
        let grad = [0.4, -0.7];
        let mut s1 = OptimizerState::adam(0.01, 2);
        let mut s2 = OptimizerState::adam(0.01, 2);
        let mut p1 = vec![1.0, -1.0];
        let mut p2 = vec![1.0, -1.0];
        for _ in 0..5 {
            s1.step(&mut p1, &grad).unwrap();
            s2.step(&mut p2, &grad).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut state = OptimizerState::sgd(0.1, 1);
        let mut params = vec![0.0];
        assert!(matches!(
            state.step(&mut params, &[f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn fisher_single_sample_is_squared_gradient() {
        let spec = ModelSpec::softmax_regression(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_params(&mut rng, &spec);
        let batch = random_batch(&mut rng, 1, &spec);
        let fisher = fisher_diagonal(&spec, &params, &batch).unwrap();
        let grad = gradient(&spec, &params, &batch).unwrap();
        for (f, g) in fisher.values.iter().zip(&grad) {
            assert!((f - g * g).abs() < 1e-12);
        }
        assert_eq!(fisher.sample_count, 1);
    }

    #[test]
    fn fisher_matches_finite_difference_loop_oracle() {
        let spec = ModelSpec::softmax_regression(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = random_params(&mut rng, &spec);
        let data = random_batch(&mut rng, 5, &spec);
        let fisher = fisher_diagonal(&spec, &params, &data).unwrap();

        // independent oracle: finite differences of each sample's
        // log-likelihood, squared, averaged
        let h = 1e-6;
        let dim = params.values.len();
        let mut oracle = vec![0.0; dim];
        for s in 0..5 {
            let single = Batch::new(data.features.gather_rows(&[s]), vec![data.labels[s]]).unwrap();
            let mut probe = params.clone();
            for i in 0..dim {
                let orig = probe.values[i];
                probe.values[i] = orig + h;
                let (lp, _) = forward_loss(&spec, &probe, &single).unwrap();
                probe.values[i] = orig - h;
                let (lm, _) = forward_loss(&spec, &probe, &single).unwrap();
                probe.values[i] = orig;
                // log-likelihood = -CE for a single sample
                let g = -(lp - lm) / (2.0 * h);
                oracle[i] += g * g / 5.0;
            }
        }
        for (f, o) in fisher.values.iter().zip(&oracle) {
            assert!((f - o).abs() <= 1e-10 + 1e-4 * o.abs(), "{f} vs {o}");
        }
    }

    #[test]
    fn fisher_nonnegative_and_permutation_equivariant() {
        let spec = ModelSpec::mlp_one_hidden(3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = random_params(&mut rng, &spec);
        let data = random_batch(&mut rng, 6, &spec);
        let f1 = fisher_diagonal(&spec, &params, &data).unwrap();
        assert!(f1.values.iter().all(|&v| v >= 0.0));
        let perm = [5, 3, 1, 0, 4, 2];
        let permuted = Batch::new(
            data.features.gather_rows(&perm),
            perm.iter().map(|&i| data.labels[i]).collect(),
        )
        .unwrap();
        let f2 = fisher_diagonal(&spec, &params, &permuted).unwrap();
        for (a, b) in f1.values.iter().zip(&f2.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_fisher_data_rejected() {
        let spec = ModelSpec::softmax_regression(2, 2);
        let params = init_params(&spec, 0).unwrap();
        let empty = Batch {
            features: Matrix::zeros(0, 2),
            labels: vec![],
        };
        assert!(fisher_diagonal(&spec, &params, &empty).is_err());
    }

    #[test]
    fn accuracy_ties_break_to_lowest_class() {
        let spec = ModelSpec::softmax_regression(2, 10);
        let params = ModelParams {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        };
        // uniform logits: argmax is class 0 everywhere
        let features = Matrix::from_rows(&vec![vec![1.0, 2.0]; 20]).unwrap();
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let acc = top1_accuracy(&spec, &params, &features, &labels).unwrap();
        assert!((acc - 0.1).abs() < 1e-12); // class 0 frequency
    }

    #[test]
    fn handcrafted_three_of_four_correct() {
        let spec = ModelSpec::softmax_regression(2, 2);
        let mut params = ModelParams {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        };
        // class 1 fires on feature 0
        params.values[2] = 5.0;
        let features =
            Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]])
                .unwrap();
        // last label contradicts the model
        let labels = vec![1, 1, 0, 0];
        let acc = top1_accuracy(&spec, &params, &features, &labels).unwrap();
        assert!((acc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn full_batch_sgd_strictly_decreases_separable_loss() {
        let spec = ModelSpec::softmax_regression(1, 2);
        let mut params = init_params(&spec, 42).unwrap();
        let features = Matrix::from_rows(&[vec![-1.0], vec![-0.7], vec![0.8], vec![1.0]]).unwrap();
        let labels = vec![0, 0, 1, 1];
        let batch = Batch::new(features, labels).unwrap();
        let mut opt = OptimizerState::sgd(0.2, spec.param_count());
        let (mut last, _) = forward_loss(&spec, &params, &batch).unwrap();
        for step in 0..100 {
            let g = gradient(&spec, &params, &batch).unwrap();
            opt.step(&mut params.values, &g).unwrap();
            let (loss, _) = forward_loss(&spec, &params, &batch).unwrap();
            assert!(loss < last, "loss rose at step {step}: {loss} >= {last}");
            last = loss;
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..30.0) {
                let spec = ModelSpec::softmax_regression(4, 5);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut params = init_params(&spec, seed).unwrap();
                for v in params.values.iter_mut() {
                    *v = rng.random_range(-scale..scale);
                }
                let batch = random_batch(&mut rng, 3, &spec);
                let (_, probs) = forward_loss(&spec, &params, &batch).unwrap();
                for s in 0..probs.rows() {
                    let sum: f64 = probs.row(s).iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
}
