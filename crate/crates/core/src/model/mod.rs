//! Source model: an MLP encoder feeding a weight-normalized linear classifier.
//!
//! The encoder applies `activation(W h + b)` per hidden layer and a final
//! linear layer without activation; its output is the feature (bottleneck)
//! vector that the uncertainty analysis perturbs. The classifier scores class
//! `k` as `scale[k] * dot(direction[k], z) / norm(direction[k])`, so the
//! direction rows only contribute their orientation.

pub mod grad;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{real, Scalar};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use grad::{ce_ls_value_grad, Sgd};

/// Floor applied inside every logarithm of a probability, so that entropy and
/// cross-entropy terms stay finite; `0 * log 0` evaluates to 0 by convention.
pub const LOG_FLOOR: f64 = 1e-12;

/// `ln(max(p, LOG_FLOOR))`; NaN inputs propagate instead of being swallowed,
/// so a diverged model cannot masquerade as a finite loss.
pub(crate) fn ln_clamped<F: Scalar>(p: F) -> F {
    if p < real(LOG_FLOOR) {
        real::<F>(LOG_FLOOR).ln()
    } else {
        p.ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Shape of the model: encoder widths plus classifier head size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.bottleneck_dim < 1 {
            return Err(Error::InvalidConfig("bottleneck_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.hidden_dims.iter().any(|&h| h < 1) {
            return Err(Error::InvalidConfig("hidden_dims entries must be >= 1".into()));
        }
        Ok(())
    }

    /// `(out, in)` shape of every encoder layer, hidden layers first, the
    /// bottleneck layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.bottleneck_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// One affine encoder layer; `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

/// Full parameter set of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub arch: ArchitectureSpec,
    pub encoder_layers: Vec<EncoderLayer<F>>,
    /// `num_classes x bottleneck_dim`; only the direction of each row matters.
    pub classifier_direction: Array2<F>,
    /// Per-class magnitude applied after direction normalization.
    pub classifier_scale: Array1<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// Checks shapes against the stored architecture, finiteness of every
    /// value, and that no classifier direction row is identically zero.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.layer_shapes();
        if self.encoder_layers.len() != shapes.len() {
            return Err(Error::dims(
                "encoder layer count",
                shapes.len(),
                self.encoder_layers.len(),
            ));
        }
        for (idx, (layer, (out, inp))) in self.encoder_layers.iter().zip(&shapes).enumerate() {
            if layer.weight.dim() != (*out, *inp) {
                return Err(Error::dims(
                    "encoder weight",
                    format!("layer {idx}: {out}x{inp}"),
                    format!("{}x{}", layer.weight.nrows(), layer.weight.ncols()),
                ));
            }
            if layer.bias.len() != *out {
                return Err(Error::dims("encoder bias", out, layer.bias.len()));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite value in encoder layer {idx}"
                )));
            }
        }
        let (k, d) = (self.arch.num_classes, self.arch.bottleneck_dim);
        if self.classifier_direction.dim() != (k, d) {
            return Err(Error::dims(
                "classifier_direction",
                format!("{k}x{d}"),
                format!(
                    "{}x{}",
                    self.classifier_direction.nrows(),
                    self.classifier_direction.ncols()
                ),
            ));
        }
        if self.classifier_scale.len() != k {
            return Err(Error::dims("classifier_scale", k, self.classifier_scale.len()));
        }
        if self
            .classifier_direction
            .iter()
            .chain(self.classifier_scale.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter("non-finite classifier value".into()));
        }
        for row in 0..k {
            if row_norm(&self.classifier_direction, row) == F::zero() {
                return Err(Error::InvalidParameter(format!(
                    "classifier direction row {row} has zero norm"
                )));
            }
        }
        Ok(())
    }

    /// Visits every trainable entry in a fixed order: encoder layers in
    /// sequence (weight entries row-major, then bias), then classifier
    /// direction (row-major), then classifier scale. Gradient buffers flatten
    /// in the same order, which is what finite-difference checks rely on.
    pub fn visit_entries_mut(&mut self, mut f: impl FnMut(&mut F)) {
        for layer in &mut self.encoder_layers {
            for v in layer.weight.iter_mut() {
                f(v);
            }
            for v in layer.bias.iter_mut() {
                f(v);
            }
        }
        for v in self.classifier_direction.iter_mut() {
            f(v);
        }
        for v in self.classifier_scale.iter_mut() {
            f(v);
        }
    }

    /// Number of trainable entries.
    pub fn entry_count(&self) -> usize {
        let mut count = 0;
        for layer in &self.encoder_layers {
            count += layer.weight.len() + layer.bias.len();
        }
        count + self.classifier_direction.len() + self.classifier_scale.len()
    }

    /// Short hex digest of the serialized parameters; stable across runs and
    /// platforms, used to tag derived artifacts with their producing model.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for layer in &self.encoder_layers {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                hasher.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        for v in self
            .classifier_direction
            .iter()
            .chain(self.classifier_scale.iter())
        {
            hasher.update(v.to_f64_lossy().to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn row_norm<F: Scalar>(m: &Array2<F>, row: usize) -> F {
    m.row(row).iter().map(|&v| v * v).sum::<F>().sqrt()
}

/// A feature matrix with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    pub features: Array2<F>,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(features: Array2<F>, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyInput("dataset features"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite feature value".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.nrows() {
                return Err(Error::dims("dataset labels", features.nrows(), labels.len()));
            }
        }
        Ok(Dataset {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels, or an error naming the dataset when they are absent.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter(format!("dataset '{}' has no labels", self.name)))
    }
}

/// Hyperparameters for plain supervised SGD training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            epochs: 50,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Seeded parameter initialization: uniform in `+-1/sqrt(fan_in)` per layer
/// (and per classifier row), classifier scales starting at the direction row
/// norms so the head initially acts as a plain linear layer.
pub fn init_params<F: Scalar>(arch: &ArchitectureSpec, seed: u64) -> Result<ModelParams<F>> {
    arch.validate()?;
    let mut rng = rng::stream(seed, "model-init", 0);
    let mut encoder_layers = Vec::new();
    for (out, inp) in arch.layer_shapes() {
        let bound = 1.0 / (inp as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let weight = Array2::from_shape_fn((out, inp), |_| real::<F>(dist.sample(&mut rng)));
        let bias = Array1::from_shape_fn(out, |_| real::<F>(dist.sample(&mut rng)));
        encoder_layers.push(EncoderLayer { weight, bias });
    }
    let (k, d) = (arch.num_classes, arch.bottleneck_dim);
    let bound = 1.0 / (d as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let classifier_direction = Array2::from_shape_fn((k, d), |_| real::<F>(dist.sample(&mut rng)));
    let classifier_scale =
        Array1::from_shape_fn(k, |row| row_norm(&classifier_direction, row));
    let params = ModelParams {
        arch: arch.clone(),
        encoder_layers,
        classifier_direction,
        classifier_scale,
    };
    params.validate()?;
    Ok(params)
}

pub(crate) fn apply_activation<F: Scalar>(a: Activation, h: &mut Array2<F>) {
    match a {
        Activation::Relu => h.mapv_inplace(|v| v.max(F::zero())),
        Activation::Tanh => h.mapv_inplace(|v| v.tanh()),
    }
}

/// Maps inputs (`n x input_dim`) to bottleneck features (`n x bottleneck_dim`).
pub fn encode<F: Scalar>(params: &ModelParams<F>, x: ArrayView2<'_, F>) -> Result<Array2<F>> {
    Ok(forward_encoder(params, x)?.pop().expect("at least one layer"))
}

/// Output of every encoder layer in order; the last entry is the feature
/// matrix. Hidden outputs are post-activation.
pub(crate) fn forward_encoder<F: Scalar>(
    params: &ModelParams<F>,
    x: ArrayView2<'_, F>,
) -> Result<Vec<Array2<F>>> {
    if x.ncols() != params.arch.input_dim {
        return Err(Error::dims("encode input", params.arch.input_dim, x.ncols()));
    }
    let last = params.encoder_layers.len() - 1;
    let mut outputs = Vec::with_capacity(params.encoder_layers.len());
    let mut h = x.to_owned();
    for (idx, layer) in params.encoder_layers.iter().enumerate() {
        let mut out = h.dot(&layer.weight.t());
        out += &layer.bias;
        if idx < last {
            apply_activation(params.arch.activation, &mut out);
        }
        outputs.push(out);
        h = outputs.last().expect("pushed").clone();
    }
    Ok(outputs)
}

/// Weight-normalized logits: `scale[k] * dot(direction[k], z) / norm(direction[k])`.
pub fn classify<F: Scalar>(params: &ModelParams<F>, z: ArrayView2<'_, F>) -> Result<Array2<F>> {
    let (k, d) = (params.arch.num_classes, params.arch.bottleneck_dim);
    if z.ncols() != d {
        return Err(Error::dims("classify input", d, z.ncols()));
    }
    let mut unit = Array2::<F>::zeros((k, d));
    for row in 0..k {
        let norm = row_norm(&params.classifier_direction, row);
        if norm == F::zero() {
            return Err(Error::InvalidParameter(format!(
                "classifier direction row {row} has zero norm"
            )));
        }
        let g = params.classifier_scale[row];
        for col in 0..d {
            unit[[row, col]] = params.classifier_direction[[row, col]] / norm * g;
        }
    }
    Ok(z.dot(&unit.t()))
}

/// Row-wise softmax with max-shift stabilization.
pub fn softmax<F: Scalar>(logits: ArrayView2<'_, F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().sum::<F>();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Softmax probabilities of the full model on raw inputs.
pub fn predict_probs<F: Scalar>(params: &ModelParams<F>, x: ArrayView2<'_, F>) -> Result<Array2<F>> {
    let z = encode(params, x)?;
    Ok(softmax(classify(params, z.view())?.view()))
}

/// First index achieving the row maximum, so exact ties resolve to the
/// lowest class. Accepts any stride so selected or transposed rows work.
pub(crate) fn argmax_row<F: Scalar>(row: ndarray::ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    let mut best_value = F::neg_infinity();
    for (idx, &v) in row.iter().enumerate() {
        if idx == 0 || v > best_value {
            best = idx;
            best_value = v;
        }
    }
    best
}

/// Hard predictions of the full model.
pub fn predict_labels<F: Scalar>(params: &ModelParams<F>, x: ArrayView2<'_, F>) -> Result<Vec<usize>> {
    let probs = predict_probs(params, x)?;
    Ok(probs.rows().into_iter().map(argmax_row).collect())
}

/// Smoothed one-hot targets: `1 - eps + eps/K` on the label, `eps/K` elsewhere.
pub(crate) fn smoothed_targets<F: Scalar>(
    labels: &[usize],
    num_classes: usize,
    epsilon: f64,
) -> Result<Array2<F>> {
    let off = real::<F>(epsilon / num_classes as f64);
    let on = real::<F>(1.0 - epsilon) + off;
    let mut t = Array2::from_elem((labels.len(), num_classes), off);
    for (row, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes,
                row,
            });
        }
        t[[row, label]] = on;
    }
    Ok(t)
}

/// Mean label-smoothed cross-entropy of predicted probabilities.
pub fn cross_entropy_ls<F: Scalar>(
    probs: ArrayView2<'_, F>,
    labels: &[usize],
    epsilon: f64,
) -> Result<F> {
    if probs.nrows() == 0 {
        return Err(Error::EmptyInput("cross_entropy_ls probs"));
    }
    if labels.len() != probs.nrows() {
        return Err(Error::dims("cross_entropy_ls labels", probs.nrows(), labels.len()));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidParameter("label smoothing must lie in [0, 1)".into()));
    }
    let targets = smoothed_targets::<F>(labels, probs.ncols(), epsilon)?;
    let mut total = F::zero();
    for (p_row, t_row) in probs.rows().into_iter().zip(targets.rows()) {
        for (&p, &t) in p_row.iter().zip(t_row) {
            total = total - t * ln_clamped(p);
        }
    }
    Ok(total / real(probs.nrows() as f64))
}

/// How perturbation noise is shared across encoder parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One multiplier `(1 + r)` for the whole encoder.
    Scalar,
    /// An independent multiplier per encoder weight and bias entry.
    PerParameter,
}

/// Returns a copy of `params` whose encoder entries are scaled by `(1 + r)`
/// with `r` uniform on `[low, high]`; the classifier head is untouched.
///
/// Draw order is fixed: layers in order, weight entries row-major, then bias
/// entries. `low == high` forces a deterministic draw.
pub fn perturb_params<F: Scalar>(
    params: &ModelParams<F>,
    mode: NoiseMode,
    low: f64,
    high: f64,
    rng: &mut impl Rng,
) -> Result<ModelParams<F>> {
    if !(low.is_finite() && high.is_finite() && low <= high) {
        return Err(Error::InvalidParameter(format!(
            "perturbation range [{low}, {high}] is not a valid interval"
        )));
    }
    let dist = Uniform::new_inclusive(low, high);
    let mut out = params.clone();
    match mode {
        NoiseMode::Scalar => {
            let factor = real::<F>(1.0 + dist.sample(rng));
            for layer in &mut out.encoder_layers {
                layer.weight.mapv_inplace(|v| v * factor);
                layer.bias.mapv_inplace(|v| v * factor);
            }
        }
        NoiseMode::PerParameter => {
            for layer in &mut out.encoder_layers {
                for v in layer.weight.iter_mut() {
                    *v = *v * real::<F>(1.0 + dist.sample(rng));
                }
                for v in layer.bias.iter_mut() {
                    *v = *v * real::<F>(1.0 + dist.sample(rng));
                }
            }
        }
    }
    Ok(out)
}

/// Trains a fresh model on labeled data with mini-batch SGD plus momentum on
/// the label-smoothed cross-entropy. `epochs == 0` returns the seeded
/// initialization unchanged.
pub fn train_source<F: Scalar>(
    data: &Dataset<F>,
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
) -> Result<ModelParams<F>> {
    arch.validate()?;
    cfg.validate()?;
    let labels = data.require_labels()?;
    if data.features.ncols() != arch.input_dim {
        return Err(Error::dims("train_source features", arch.input_dim, data.features.ncols()));
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= arch.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: arch.num_classes,
                row,
            });
        }
    }

    let mut params = init_params::<F>(arch, cfg.seed)?;
    let mut opt = Sgd::new(&params, cfg.learning_rate, cfg.momentum);
    let n = data.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "source-shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let x = data.features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = ce_ls_value_grad(&params, x.view(), &y, cfg.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    learning_rate: cfg.learning_rate,
                    detail: "non-finite training loss".into(),
                });
            }
            opt.step(&mut params, &grads, false);
        }
    }
    Ok(params)
}
