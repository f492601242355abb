//! Hand-derived backpropagation for the encoder/classifier stack, plus the
//! SGD-with-momentum update shared by source training and adaptation.

use super::{
    classify, cross_entropy_ls, forward_encoder, smoothed_targets, softmax, Activation, ModelParams,
    LOG_FLOOR,
};
use crate::error::Result;
use crate::scalar::{real, Scalar};
use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Gradient (or momentum velocity) buffers shaped like [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamGrads<F> {
    pub encoder: Vec<(Array2<F>, Array1<F>)>,
    pub classifier_direction: Array2<F>,
    pub classifier_scale: Array1<F>,
}

impl<F: Scalar> ParamGrads<F> {
    pub fn zeros_like(params: &ModelParams<F>) -> Self {
        ParamGrads {
            encoder: params
                .encoder_layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect(),
            classifier_direction: Array2::zeros(params.classifier_direction.dim()),
            classifier_scale: Array1::zeros(params.classifier_scale.len()),
        }
    }

    /// `self += other * factor`.
    pub fn add_scaled(&mut self, other: &ParamGrads<F>, factor: F) {
        for ((w, b), (ow, ob)) in self.encoder.iter_mut().zip(&other.encoder) {
            w.zip_mut_with(ow, |a, &o| *a = *a + o * factor);
            b.zip_mut_with(ob, |a, &o| *a = *a + o * factor);
        }
        self.classifier_direction
            .zip_mut_with(&other.classifier_direction, |a, &o| *a = *a + o * factor);
        self.classifier_scale
            .zip_mut_with(&other.classifier_scale, |a, &o| *a = *a + o * factor);
    }

    /// Entries in the same fixed order as
    /// [`ModelParams::visit_entries_mut`](super::ModelParams::visit_entries_mut);
    /// pairs analytic gradients with finite-difference probes.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        for (w, b) in &self.encoder {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out.extend(self.classifier_direction.iter().copied());
        out.extend(self.classifier_scale.iter().copied());
        out
    }
}

/// Cached forward pass: every encoder layer output, the logits, and the
/// softmax probabilities for one input batch.
pub struct ForwardPass<F> {
    pub layer_outputs: Vec<Array2<F>>,
    pub logits: Array2<F>,
    pub probs: Array2<F>,
}

impl<F: Scalar> ForwardPass<F> {
    pub fn features(&self) -> &Array2<F> {
        self.layer_outputs.last().expect("encoder has layers")
    }
}

/// Runs the full model forward, retaining everything backprop needs.
pub fn forward_pass<F: Scalar>(params: &ModelParams<F>, x: ArrayView2<'_, F>) -> Result<ForwardPass<F>> {
    let layer_outputs = forward_encoder(params, x)?;
    let logits = classify(params, layer_outputs.last().expect("layers").view())?;
    let probs = softmax(logits.view());
    Ok(ForwardPass {
        layer_outputs,
        logits,
        probs,
    })
}

/// Backpropagates `d_logits` (gradient at the logits) and/or `d_features`
/// (gradient injected directly at the bottleneck features) into parameter
/// space.
pub fn backward_pass<F: Scalar>(
    params: &ModelParams<F>,
    x: ArrayView2<'_, F>,
    fwd: &ForwardPass<F>,
    d_logits: Option<&Array2<F>>,
    d_features: Option<&Array2<F>>,
) -> ParamGrads<F> {
    let mut grads = ParamGrads::zeros_like(params);
    let features = fwd.features();
    let mut delta = d_features
        .cloned()
        .unwrap_or_else(|| Array2::zeros(features.dim()));

    if let Some(dl) = d_logits {
        let (k, d) = (params.arch.num_classes, params.arch.bottleneck_dim);
        for class in 0..k {
            let v = params.classifier_direction.row(class);
            let norm = v.iter().map(|&e| e * e).sum::<F>().sqrt();
            let g = params.classifier_scale[class];
            let unit: Array1<F> = v.map(|&e| e / norm);
            // a_i = dot(unit, z_i)
            let a = features.dot(&unit);
            let dcol = dl.column(class);
            let mut dg = F::zero();
            let mut weighted_rows = Array1::<F>::zeros(d);
            let mut da_sum = F::zero();
            for (i, &dv) in dcol.iter().enumerate() {
                dg = dg + dv * a[i];
                da_sum = da_sum + dv * a[i];
                for col in 0..d {
                    weighted_rows[col] = weighted_rows[col] + dv * features[[i, col]];
                    delta[[i, col]] = delta[[i, col]] + dv * g * unit[col];
                }
            }
            grads.classifier_scale[class] = dg;
            for col in 0..d {
                grads.classifier_direction[[class, col]] =
                    g / norm * (weighted_rows[col] - da_sum * unit[col]);
            }
        }
    }

    // Encoder layers, last (no activation) back to first.
    for layer_idx in (0..params.encoder_layers.len()).rev() {
        let input = if layer_idx == 0 {
            x.to_owned()
        } else {
            fwd.layer_outputs[layer_idx - 1].clone()
        };
        let (dw, db) = &mut grads.encoder[layer_idx];
        *dw = delta.t().dot(&input);
        *db = delta.sum_axis(Axis(0));
        if layer_idx > 0 {
            let mut d_input = delta.dot(&params.encoder_layers[layer_idx].weight);
            let prev_out = &fwd.layer_outputs[layer_idx - 1];
            match params.arch.activation {
                Activation::Relu => d_input.zip_mut_with(prev_out, |d, &o| {
                    if o <= F::zero() {
                        *d = F::zero();
                    }
                }),
                Activation::Tanh => d_input.zip_mut_with(prev_out, |d, &o| {
                    *d = *d * (F::one() - o * o);
                }),
            }
            delta = d_input;
        }
    }
    grads
}

/// Converts a gradient w.r.t. softmax probabilities into one w.r.t. logits:
/// `dL/dlogit_k = p_k (dL/dp_k - sum_j dL/dp_j p_j)` per row.
pub fn dprobs_to_dlogits<F: Scalar>(probs: &Array2<F>, dprobs: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(probs.dim());
    for i in 0..probs.nrows() {
        let mut inner = F::zero();
        for j in 0..probs.ncols() {
            inner = inner + dprobs[[i, j]] * probs[[i, j]];
        }
        for k in 0..probs.ncols() {
            out[[i, k]] = probs[[i, k]] * (dprobs[[i, k]] - inner);
        }
    }
    out
}

/// Label-smoothed cross-entropy and its parameter gradient for one batch.
pub fn ce_ls_value_grad<F: Scalar>(
    params: &ModelParams<F>,
    x: ArrayView2<'_, F>,
    labels: &[usize],
    epsilon: f64,
) -> Result<(F, ParamGrads<F>)> {
    let fwd = forward_pass(params, x)?;
    let loss = cross_entropy_ls(fwd.probs.view(), labels, epsilon)?;
    let targets = smoothed_targets::<F>(labels, params.arch.num_classes, epsilon)?;
    // Differentiate through the clamped logarithm exactly: below the floor the
    // loss is locally constant in p, so that entry contributes nothing. With
    // no clamping active this reduces to the usual (p - t) / n at the logits.
    let floor = real::<F>(LOG_FLOOR);
    let inv_n = F::one() / real::<F>(x.nrows() as f64);
    let mut d_probs = Array2::<F>::zeros(fwd.probs.dim());
    for i in 0..d_probs.nrows() {
        for k in 0..d_probs.ncols() {
            let (p, t) = (fwd.probs[[i, k]], targets[[i, k]]);
            if t != F::zero() && p > floor {
                d_probs[[i, k]] = -t / p * inv_n;
            }
        }
    }
    let d_logits = dprobs_to_dlogits(&fwd.probs, &d_probs);
    let grads = backward_pass(params, x, &fwd, Some(&d_logits), None);
    Ok((loss, grads))
}

/// Plain SGD with classical momentum: `v <- m v + g`, `theta <- theta - lr v`.
pub struct Sgd<F> {
    learning_rate: F,
    momentum: F,
    velocity: ParamGrads<F>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(params: &ModelParams<F>, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate: real(learning_rate),
            momentum: real(momentum),
            velocity: ParamGrads::zeros_like(params),
        }
    }

    /// Applies one update. With `freeze_classifier` the head's parameters and
    /// velocities are left untouched.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ParamGrads<F>, freeze_classifier: bool) {
        let (lr, m) = (self.learning_rate, self.momentum);
        for ((w, b), ((vw, vb), layer)) in grads
            .encoder
            .iter()
            .zip(self.velocity.encoder.iter_mut().zip(&mut params.encoder_layers))
        {
            vw.zip_mut_with(w, |v, &g| *v = m * *v + g);
            vb.zip_mut_with(b, |v, &g| *v = m * *v + g);
            layer.weight.zip_mut_with(vw, |p, &v| *p = *p - lr * v);
            layer.bias.zip_mut_with(vb, |p, &v| *p = *p - lr * v);
        }
        if !freeze_classifier {
            self.velocity
                .classifier_direction
                .zip_mut_with(&grads.classifier_direction, |v, &g| *v = m * *v + g);
            self.velocity
                .classifier_scale
                .zip_mut_with(&grads.classifier_scale, |v, &g| *v = m * *v + g);
            params
                .classifier_direction
                .zip_mut_with(&self.velocity.classifier_direction, |p, &v| *p = *p - lr * v);
            params
                .classifier_scale
                .zip_mut_with(&self.velocity.classifier_scale, |p, &v| *p = *p - lr * v);
        }
    }
}

