//! Calibrated adaptation of a source model to unlabeled target data.
//!
//! The run alternates two kinds of epochs. Calibration epochs (even) train
//! the target model on `lambda * L_kd + gamma * L_f + L_d (+ w * L_div)`:
//! a channel-uncertainty-weighted distillation toward the source features, a
//! forgetting term that pushes risky instances away from their currently
//! inferred labels, and an entropy (discovery) term pulling every prediction
//! toward a confident class. Adaptation epochs (odd) train on plain
//! cross-entropy against centroid-based pseudo-labels, optionally with mixup.
//!
//! Risky instances are those whose instance-level uncertainty exceeds a
//! threshold; their semantics and uncertainty are inferred with the source
//! model in the first epoch and with the current target model afterwards.

use crate::error::{Error, Result};
use crate::model::grad::{backward_pass, dprobs_to_dlogits, forward_pass, ParamGrads, Sgd};
use crate::model::{
    argmax_row, encode, ln_clamped, predict_probs, smoothed_targets, softmax, classify,
    Dataset, ModelParams, TrainConfig, LOG_FLOOR,
};
use crate::rng;
use crate::scalar::{real, Scalar};
use crate::utr::{
    channel_ud, select_risk, utr_domain, utr_instance, PerturbationConfig, RiskThreshold,
    UtrDomain,
};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

/// All knobs of an adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CafConfig {
    pub perturb: PerturbationConfig,
    pub thr: RiskThreshold,
    /// Distillation weight before the cutoff epoch.
    pub lambda0: f64,
    /// Global epoch at which the distillation weight drops to zero.
    pub lambda_cutoff_epoch: usize,
    /// Forgetting-loss weight.
    pub gamma: f64,
    /// Diversity-loss weight; zero leaves the term out entirely.
    pub div_weight: f64,
    /// Discovery (entropy) loss weight; zero disables calibration training
    /// when the other weights are also zero, which is the adaptation-only
    /// ablation baseline.
    pub discover_weight: f64,
    /// Beta parameter of mixup in adaptation epochs; zero disables mixup.
    pub mixup_alpha: f64,
    pub freeze_classifier: bool,
    pub train: TrainConfig,
    pub max_epochs: usize,
}

impl Default for CafConfig {
    fn default() -> Self {
        CafConfig {
            perturb: PerturbationConfig::default(),
            thr: RiskThreshold::default(),
            lambda0: 10.0,
            lambda_cutoff_epoch: 10,
            gamma: 0.9,
            div_weight: 0.0,
            discover_weight: 1.0,
            mixup_alpha: 0.3,
            freeze_classifier: true,
            train: TrainConfig::default(),
            max_epochs: 20,
        }
    }
}

impl CafConfig {
    pub fn validate(&self) -> Result<()> {
        self.perturb.validate()?;
        self.thr.validate()?;
        self.train.validate()?;
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("gamma", self.gamma),
            ("div_weight", self.div_weight),
            ("discover_weight", self.discover_weight),
            ("mixup_alpha", self.mixup_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be nonnegative and finite"
                )));
            }
        }
        if self.max_epochs < 2 {
            return Err(Error::InvalidConfig("max_epochs must be >= 2".into()));
        }
        if self.lambda_cutoff_epoch > self.max_epochs {
            return Err(Error::InvalidConfig(
                "lambda_cutoff_epoch must be <= max_epochs".into(),
            ));
        }
        Ok(())
    }
}

/// Which half of the alternating schedule produced a loss record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Calibration,
    Adaptation,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Calibration => "calibration",
            Phase::Adaptation => "adaptation",
        }
    }
}

/// One aggregated loss value: the mean over an epoch's batches.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_name: &'static str,
    pub value: f64,
}

/// Evolving state of an adaptation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationState<F> {
    pub target_params: ModelParams<F>,
    /// Next global epoch to run.
    pub epoch: usize,
    /// Channel uncertainty of the source model on the target set, fixed for
    /// the whole run; its sigmoid weights steer the distillation loss.
    pub utr_d_source: UtrDomain<F>,
    /// Most recently inferred semantics (calibration) or pseudo-labels
    /// (adaptation) for every target instance.
    pub pseudo_labels: Vec<usize>,
    /// Instances whose uncertainty exceeded the risk threshold at the last
    /// calibration epoch.
    pub risk_set: Vec<usize>,
    pub loss_history: Vec<LossRecord>,
}

/// Summary persisted next to the adapted checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateSidecar {
    pub epoch: usize,
    pub risk_set: Vec<usize>,
    pub config: CafConfig,
}

impl<F: Scalar> AdaptationState<F> {
    pub fn sidecar(&self, cfg: &CafConfig) -> StateSidecar {
        StateSidecar {
            epoch: self.epoch,
            risk_set: self.risk_set.clone(),
            config: cfg.clone(),
        }
    }
}

/// Sigmoid-of-negative weights: `1 / (1 + exp(x))`, strictly decreasing, in
/// (0, 1). Low-uncertainty channels get weights near 1 and dominate the
/// distillation loss.
pub fn q_weight<F: Scalar>(utr_d: &UtrDomain<F>) -> Array1<F> {
    utr_d.values.mapv(|x| F::one() / (F::one() + x.exp()))
}

/// Mean over instances of the squared Euclidean norm of the channel-weighted
/// feature difference.
pub fn loss_kd<F: Scalar>(
    source_feats: ArrayView2<'_, F>,
    target_feats: ArrayView2<'_, F>,
    weights: ArrayView1<'_, F>,
) -> Result<F> {
    if source_feats.dim() != target_feats.dim() {
        return Err(Error::dims(
            "loss_kd features",
            format!("{:?}", source_feats.dim()),
            format!("{:?}", target_feats.dim()),
        ));
    }
    if weights.len() != source_feats.ncols() {
        return Err(Error::dims("loss_kd weights", source_feats.ncols(), weights.len()));
    }
    if source_feats.nrows() == 0 {
        return Err(Error::EmptyInput("loss_kd features"));
    }
    let mut total = F::zero();
    for (s_row, t_row) in source_feats.rows().into_iter().zip(target_feats.rows()) {
        for ((&s, &t), &w) in s_row.iter().zip(t_row).zip(weights) {
            let d = w * (s - t);
            total = total + d * d;
        }
    }
    Ok(total / real(source_feats.nrows() as f64))
}

/// Mean log-probability of the current labels over the risk set. Minimizing
/// it drives the model away from those predictions; an empty risk set
/// contributes exactly zero.
pub fn loss_forget<F: Scalar>(
    probs: ArrayView2<'_, F>,
    labels: &[usize],
    risk_set: &[usize],
) -> Result<F> {
    if risk_set.is_empty() {
        return Ok(F::zero());
    }
    if labels.len() != probs.nrows() {
        return Err(Error::dims("loss_forget labels", probs.nrows(), labels.len()));
    }
    let mut total = F::zero();
    for &i in risk_set {
        if i >= probs.nrows() {
            return Err(Error::IndexOutOfBounds {
                index: i,
                len: probs.nrows(),
                context: "loss_forget risk_set",
            });
        }
        let label = labels[i];
        if label >= probs.ncols() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: probs.ncols(),
                row: i,
            });
        }
        total = total + ln_clamped(probs[[i, label]]);
    }
    Ok(total / real(risk_set.len() as f64))
}

/// Mean prediction entropy; in `[0, ln K]`.
pub fn loss_discover<F: Scalar>(probs: ArrayView2<'_, F>) -> F {
    if probs.nrows() == 0 {
        return F::zero();
    }
    let mut total = F::zero();
    for row in probs.rows() {
        for &p in row {
            // 0 * log 0 = 0 holds because the clamped log is finite at zero;
            // NaN entries propagate so divergence stays visible.
            total = total - p * ln_clamped(p);
        }
    }
    total / real(probs.nrows() as f64)
}

/// KL divergence of the mean prediction from the uniform distribution;
/// nonnegative, and zero exactly when predictions average out uniform.
pub fn loss_div<F: Scalar>(probs: ArrayView2<'_, F>) -> F {
    if probs.nrows() == 0 {
        return F::zero();
    }
    let k = probs.ncols();
    let mean = probs.mean_axis(Axis(0)).expect("nonempty");
    let ln_k = real::<F>(k as f64).ln();
    let mut total = F::zero();
    for &m in mean.iter() {
        total = total + m * (ln_clamped(m) + ln_k);
    }
    if total.is_nan() {
        total
    } else {
        total.max(F::zero())
    }
}

/// Mean cross-entropy against hard pseudo-labels, no smoothing.
pub fn loss_adapt<F: Scalar>(probs: ArrayView2<'_, F>, pseudo: &[usize]) -> Result<F> {
    if probs.nrows() == 0 {
        return Err(Error::EmptyInput("loss_adapt probs"));
    }
    if pseudo.len() != probs.nrows() {
        return Err(Error::dims("loss_adapt pseudo", probs.nrows(), pseudo.len()));
    }
    let mut total = F::zero();
    for (i, (&label, row)) in pseudo.iter().zip(probs.rows()).enumerate() {
        if label >= probs.ncols() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: probs.ncols(),
                row: i,
            });
        }
        total = total - ln_clamped(row[label]);
    }
    Ok(total / real(probs.nrows() as f64))
}

/// Mean cross-entropy against soft target rows (each summing to one).
pub fn cross_entropy_soft<F: Scalar>(probs: ArrayView2<'_, F>, targets: ArrayView2<'_, F>) -> Result<F> {
    if probs.dim() != targets.dim() {
        return Err(Error::dims(
            "cross_entropy_soft",
            format!("{:?}", probs.dim()),
            format!("{:?}", targets.dim()),
        ));
    }
    if probs.nrows() == 0 {
        return Err(Error::EmptyInput("cross_entropy_soft probs"));
    }
    let mut total = F::zero();
    for (p_row, t_row) in probs.rows().into_iter().zip(targets.rows()) {
        for (&p, &t) in p_row.iter().zip(t_row) {
            if t != F::zero() {
                total = total - t * ln_clamped(p);
            }
        }
    }
    Ok(total / real(probs.nrows() as f64))
}

/// Centroid-based pseudo-labels in the SHOT style.
///
/// Initial centroids are probability-weighted feature means; instances are
/// assigned to the nearest centroid by cosine distance in the feature space
/// extended with a constant 1 coordinate, centroids are recomputed from the
/// hard assignment, and instances reassigned once more. Classes that end up
/// empty keep their previous centroid; rows or centroids with zero norm fall
/// back to Euclidean distance.
///
/// Returns the final labels and the model's softmax probabilities.
pub fn pseudo_label<F: Scalar>(
    params: &ModelParams<F>,
    x: ArrayView2<'_, F>,
) -> Result<(Vec<usize>, Array2<F>)> {
    let z = encode(params, x)?;
    let probs = softmax(classify(params, z.view())?.view());
    let (n, d) = z.dim();
    let k = probs.ncols();

    // Work in the extended space (z, 1).
    let mut ext = Array2::<F>::ones((n, d + 1));
    ext.slice_mut(ndarray::s![.., ..d]).assign(&z);

    let mut centroids = Array2::<F>::zeros((k, d + 1));
    for class in 0..k {
        let weight_sum = probs.column(class).sum();
        if weight_sum > F::zero() {
            for i in 0..n {
                let w = probs[[i, class]] / weight_sum;
                for j in 0..=d {
                    centroids[[class, j]] = centroids[[class, j]] + w * ext[[i, j]];
                }
            }
        }
    }

    let assign = |centroids: &Array2<F>| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let row = ext.row(i);
                let mut best = 0;
                let mut best_dist = F::infinity();
                for class in 0..k {
                    let c = centroids.row(class);
                    let dist = distance(row, c);
                    if dist < best_dist {
                        best_dist = dist;
                        best = class;
                    }
                }
                best
            })
            .collect()
    };

    let first = assign(&centroids);
    for class in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| first[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let count = real::<F>(members.len() as f64);
        for j in 0..=d {
            centroids[[class, j]] =
                members.iter().map(|&i| ext[[i, j]]).sum::<F>() / count;
        }
    }
    let labels = assign(&centroids);
    Ok((labels, probs))
}

/// Cosine distance, falling back to Euclidean when either vector has zero
/// norm (cosine is undefined there).
fn distance<F: Scalar>(a: ndarray::ArrayView1<'_, F>, b: ndarray::ArrayView1<'_, F>) -> F {
    let norm_a = a.iter().map(|&v| v * v).sum::<F>().sqrt();
    let norm_b = b.iter().map(|&v| v * v).sum::<F>().sqrt();
    if norm_a == F::zero() || norm_b == F::zero() {
        return a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<F>()
            .sqrt();
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<F>();
    F::one() - dot / (norm_a * norm_b)
}

/// Applies mixup with an explicit coefficient and permutation:
/// `X' = lam * X + (1 - lam) * X[perm]`, targets combined identically.
pub fn mixup_apply<F: Scalar>(
    x: ArrayView2<'_, F>,
    targets: ArrayView2<'_, F>,
    lam: f64,
    perm: &[usize],
) -> Result<(Array2<F>, Array2<F>)> {
    let b = x.nrows();
    if targets.nrows() != b {
        return Err(Error::dims("mixup targets", b, targets.nrows()));
    }
    if perm.len() != b {
        return Err(Error::dims("mixup permutation", b, perm.len()));
    }
    if let Some(&bad) = perm.iter().find(|&&i| i >= b) {
        return Err(Error::IndexOutOfBounds {
            index: bad,
            len: b,
            context: "mixup permutation",
        });
    }
    let lam_f = real::<F>(lam);
    let co = F::one() - lam_f;
    let mut x_out = Array2::zeros(x.raw_dim());
    let mut t_out = Array2::zeros(targets.raw_dim());
    for i in 0..b {
        let j = perm[i];
        for col in 0..x.ncols() {
            x_out[[i, col]] = lam_f * x[[i, col]] + co * x[[j, col]];
        }
        for col in 0..targets.ncols() {
            t_out[[i, col]] = lam_f * targets[[i, col]] + co * targets[[j, col]];
        }
    }
    Ok((x_out, t_out))
}

/// Draws a Beta(alpha, alpha) coefficient and a row permutation from the
/// stream, then mixes inputs and one-hot targets.
pub fn mixup_batch<F: Scalar>(
    x: ArrayView2<'_, F>,
    targets: ArrayView2<'_, F>,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(Array2<F>, Array2<F>)> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidParameter("mixup alpha must be positive".into()));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidParameter("mixup needs at least two rows".into()));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidParameter(format!("mixup beta parameter: {e}")))?;
    let lam = beta.sample(rng);
    let mut perm: Vec<usize> = (0..x.nrows()).collect();
    perm.shuffle(rng);
    mixup_apply(x, targets, lam, &perm)
}

/// Distillation weight at a global epoch: `lambda0` strictly before the
/// cutoff, zero at and after it.
pub fn lambda_schedule(epoch: usize, cfg: &CafConfig) -> f64 {
    if epoch < cfg.lambda_cutoff_epoch {
        cfg.lambda0
    } else {
        0.0
    }
}

/// Weights combining the calibration losses into one objective.
#[derive(Clone, Copy, Debug)]
pub struct CalibrationWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub discover: f64,
    pub div: f64,
}

/// Calibration loss values from a single forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CalibrationLosses<F> {
    pub kd: F,
    pub forget: F,
    pub discover: F,
    pub div: F,
    pub total: F,
}

/// Evaluates the combined calibration objective on one batch and returns both
/// the component values and the gradient with respect to the target
/// parameters. `risk_rows` are batch-local row indices; `semantics` are the
/// inferred labels for the batch rows.
pub fn calibration_value_grad<F: Scalar>(
    params: &ModelParams<F>,
    x: ArrayView2<'_, F>,
    source_feats: ArrayView2<'_, F>,
    kd_weights: ArrayView1<'_, F>,
    semantics: &[usize],
    risk_rows: &[usize],
    w: &CalibrationWeights,
) -> Result<(CalibrationLosses<F>, ParamGrads<F>)> {
    let fwd = forward_pass(params, x)?;
    let features = fwd.features();
    let probs = &fwd.probs;
    let b = x.nrows();
    let (bf, floor) = (real::<F>(b as f64), real::<F>(LOG_FLOOR));

    let kd = loss_kd(source_feats, features.view(), kd_weights)?;
    let forget = loss_forget(probs.view(), semantics, risk_rows)?;
    let discover = loss_discover(probs.view());
    let div = loss_div(probs.view());
    let total = real::<F>(w.lambda) * kd
        + real::<F>(w.gamma) * forget
        + real::<F>(w.discover) * discover
        + real::<F>(w.div) * div;

    // Gradient injected at the bottleneck features (distillation term).
    let mut d_features = Array2::<F>::zeros(features.raw_dim());
    if w.lambda != 0.0 {
        let scale = real::<F>(2.0 * w.lambda) / bf;
        for i in 0..b {
            for j in 0..features.ncols() {
                let wj = kd_weights[j];
                d_features[[i, j]] =
                    scale * wj * wj * (features[[i, j]] - source_feats[[i, j]]);
            }
        }
    }

    // Gradient at the probabilities (forget + discover + div terms), then
    // mapped through the softmax Jacobian. Each term's derivative mirrors its
    // clamped forward value exactly.
    let mut d_probs = Array2::<F>::zeros(probs.raw_dim());
    if w.gamma != 0.0 && !risk_rows.is_empty() {
        let scale = real::<F>(w.gamma) / real::<F>(risk_rows.len() as f64);
        for &row in risk_rows {
            let p = probs[[row, semantics[row]]];
            if p > floor {
                d_probs[[row, semantics[row]]] =
                    d_probs[[row, semantics[row]]] + scale / p;
            }
        }
    }
    if w.discover != 0.0 {
        let scale = real::<F>(w.discover) / bf;
        for i in 0..b {
            for k in 0..probs.ncols() {
                let p = probs[[i, k]];
                let indicator = if p > floor { F::one() } else { F::zero() };
                d_probs[[i, k]] = d_probs[[i, k]] - scale * (ln_clamped(p) + indicator);
            }
        }
    }
    if w.div != 0.0 {
        let k_count = probs.ncols();
        let ln_k = real::<F>(k_count as f64).ln();
        let mean = probs.mean_axis(Axis(0)).expect("nonempty batch");
        let scale = real::<F>(w.div) / bf;
        for i in 0..b {
            for k in 0..k_count {
                let m = mean[k];
                let indicator = if m > floor { F::one() } else { F::zero() };
                d_probs[[i, k]] =
                    d_probs[[i, k]] + scale * (ln_clamped(m) + ln_k + indicator);
            }
        }
    }

    let d_logits = dprobs_to_dlogits(probs, &d_probs);
    let grads = backward_pass(params, x, &fwd, Some(&d_logits), Some(&d_features));
    Ok((
        CalibrationLosses {
            kd,
            forget,
            discover,
            div,
            total,
        },
        grads,
    ))
}

/// Targets for the adaptation loss: hard pseudo-labels, or soft rows after
/// mixup.
pub enum AdaptTargets<'a, F> {
    Hard(&'a [usize]),
    Soft(ArrayView2<'a, F>),
}

/// Adaptation cross-entropy and its parameter gradient on one batch.
pub fn adapt_value_grad<F: Scalar>(
    params: &ModelParams<F>,
    x: ArrayView2<'_, F>,
    targets: &AdaptTargets<'_, F>,
) -> Result<(F, ParamGrads<F>)> {
    let fwd = forward_pass(params, x)?;
    let probs = &fwd.probs;
    let (loss, target_rows): (F, Array2<F>) = match targets {
        AdaptTargets::Hard(pseudo) => {
            let loss = loss_adapt(probs.view(), pseudo)?;
            (loss, smoothed_targets::<F>(pseudo, probs.ncols(), 0.0)?)
        }
        AdaptTargets::Soft(t) => (cross_entropy_soft(probs.view(), *t)?, t.to_owned()),
    };

    let floor = real::<F>(LOG_FLOOR);
    let inv_b = F::one() / real::<F>(x.nrows() as f64);
    let mut d_probs = Array2::<F>::zeros(probs.raw_dim());
    for i in 0..probs.nrows() {
        for k in 0..probs.ncols() {
            let t = target_rows[[i, k]];
            let p = probs[[i, k]];
            if t != F::zero() && p > floor {
                d_probs[[i, k]] = -t / p * inv_b;
            }
        }
    }
    let d_logits = dprobs_to_dlogits(probs, &d_probs);
    let grads = backward_pass(params, x, &fwd, Some(&d_logits), None);
    Ok((loss, grads))
}

/// Builds the starting state of a run: target parameters cloned from the
/// source, the source model's channel uncertainty on the full target set, and
/// source-model predictions as the initial semantics.
pub fn init_state<F: Scalar>(
    source_params: &ModelParams<F>,
    target_data: &Dataset<F>,
    cfg: &CafConfig,
) -> Result<AdaptationState<F>> {
    cfg.validate()?;
    source_params.validate()?;
    let x = target_data.features.view();
    let spectrum = channel_ud(source_params, x, &cfg.perturb)?;
    let utr_d_source = utr_domain(&spectrum)?;
    let probs = predict_probs(source_params, x)?;
    let pseudo_labels = probs.rows().into_iter().map(argmax_row).collect();
    Ok(AdaptationState {
        target_params: source_params.clone(),
        epoch: 0,
        utr_d_source,
        pseudo_labels,
        risk_set: Vec::new(),
        loss_history: Vec::new(),
    })
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "caf-shuffle", epoch as u64));
    order
}

/// One calibration epoch. Semantics, instance uncertainty, and the risk set
/// are computed once at epoch start with the inference model (the source
/// model at global epoch 0, the current target model afterwards); every batch
/// then takes one SGD step on the combined calibration objective.
pub fn calibration_epoch<F: Scalar>(
    mut state: AdaptationState<F>,
    source_params: &ModelParams<F>,
    target_data: &Dataset<F>,
    cfg: &CafConfig,
) -> Result<AdaptationState<F>> {
    let x = target_data.features.view();
    let n = x.nrows();

    let (semantics, utr_i) = {
        let inference = if state.epoch == 0 {
            source_params
        } else {
            &state.target_params
        };
        let probs = predict_probs(inference, x)?;
        let semantics: Vec<usize> = probs.rows().into_iter().map(argmax_row).collect();
        let spectrum = channel_ud(inference, x, &cfg.perturb)?;
        (semantics, utr_instance(&spectrum)?)
    };
    state.risk_set = select_risk(&utr_i, &cfg.thr)?;
    state.pseudo_labels = semantics.clone();
    let mut in_risk = vec![false; n];
    for &i in &state.risk_set {
        in_risk[i] = true;
    }

    let weights = CalibrationWeights {
        lambda: lambda_schedule(state.epoch, cfg),
        gamma: cfg.gamma,
        discover: cfg.discover_weight,
        div: cfg.div_weight,
    };
    let kd_weights = q_weight(&state.utr_d_source);
    let source_feats = encode(source_params, x)?;

    let order = shuffled_indices(n, cfg.train.seed, state.epoch);
    let mut opt = Sgd::new(&state.target_params, cfg.train.learning_rate, cfg.train.momentum);
    let mut sums = [0.0f64; 5];
    let mut batches = 0usize;
    for (batch_idx, rows) in order.chunks(cfg.train.batch_size).enumerate() {
        let xb = target_data.features.select(Axis(0), rows);
        let sb = source_feats.select(Axis(0), rows);
        let sem_b: Vec<usize> = rows.iter().map(|&i| semantics[i]).collect();
        let risk_rows: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, &i)| in_risk[i])
            .map(|(local, _)| local)
            .collect();
        let (losses, grads) = calibration_value_grad(
            &state.target_params,
            xb.view(),
            sb.view(),
            kd_weights.view(),
            &sem_b,
            &risk_rows,
            &weights,
        )?;
        if !losses.total.is_finite() {
            return Err(Error::Divergence {
                epoch: state.epoch,
                learning_rate: cfg.train.learning_rate,
                detail: format!("non-finite calibration objective in batch {batch_idx}"),
            });
        }
        opt.step(&mut state.target_params, &grads, cfg.freeze_classifier);
        for (slot, v) in sums.iter_mut().zip([
            losses.kd.to_f64_lossy(),
            losses.forget.to_f64_lossy(),
            losses.discover.to_f64_lossy(),
            losses.div.to_f64_lossy(),
            losses.total.to_f64_lossy(),
        ]) {
            *slot += v;
        }
        batches += 1;
    }

    let denom = batches.max(1) as f64;
    for (name, sum) in ["kd", "forget", "discover", "div", "total"].into_iter().zip(sums) {
        state.loss_history.push(LossRecord {
            epoch: state.epoch,
            phase: Phase::Calibration,
            loss_name: name,
            value: sum / denom,
        });
    }
    state.loss_history.push(LossRecord {
        epoch: state.epoch,
        phase: Phase::Calibration,
        loss_name: "lambda",
        value: weights.lambda,
    });
    state.epoch += 1;
    Ok(state)
}

/// One adaptation epoch: pseudo-labels recomputed once with the current
/// target model, then per batch an optional mixup and one SGD step on the
/// adaptation cross-entropy.
pub fn adaptation_epoch<F: Scalar>(
    mut state: AdaptationState<F>,
    target_data: &Dataset<F>,
    cfg: &CafConfig,
) -> Result<AdaptationState<F>> {
    let x = target_data.features.view();
    let n = x.nrows();
    let k = state.target_params.arch.num_classes;

    let (pseudo, _probs) = pseudo_label(&state.target_params, x)?;
    state.pseudo_labels = pseudo;
    let one_hot = smoothed_targets::<F>(&state.pseudo_labels, k, 0.0)?;

    let order = shuffled_indices(n, cfg.train.seed, state.epoch);
    let mut mixup_rng = rng::stream(cfg.train.seed, "caf-mixup", state.epoch as u64);
    let mut opt = Sgd::new(&state.target_params, cfg.train.learning_rate, cfg.train.momentum);
    let mut sum = 0.0f64;
    let mut batches = 0usize;
    for (batch_idx, rows) in order.chunks(cfg.train.batch_size).enumerate() {
        let xb = target_data.features.select(Axis(0), rows);
        let tb = one_hot.select(Axis(0), rows);
        let use_mixup = cfg.mixup_alpha > 0.0 && rows.len() >= 2;
        let (loss, grads) = if use_mixup {
            let (x_mix, t_mix) = mixup_batch(xb.view(), tb.view(), cfg.mixup_alpha, &mut mixup_rng)?;
            adapt_value_grad(
                &state.target_params,
                x_mix.view(),
                &AdaptTargets::Soft(t_mix.view()),
            )?
        } else {
            let pseudo_b: Vec<usize> = rows.iter().map(|&i| state.pseudo_labels[i]).collect();
            adapt_value_grad(&state.target_params, xb.view(), &AdaptTargets::Hard(&pseudo_b))?
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: state.epoch,
                learning_rate: cfg.train.learning_rate,
                detail: format!("non-finite adaptation loss in batch {batch_idx}"),
            });
        }
        opt.step(&mut state.target_params, &grads, cfg.freeze_classifier);
        sum += loss.to_f64_lossy();
        batches += 1;
    }

    state.loss_history.push(LossRecord {
        epoch: state.epoch,
        phase: Phase::Adaptation,
        loss_name: "adapt",
        value: sum / batches.max(1) as f64,
    });
    state.epoch += 1;
    Ok(state)
}

/// Runs the full alternating schedule: the source model's channel
/// uncertainty is computed once up front, then calibration epochs at even
/// global epochs and adaptation epochs at odd ones, `cfg.max_epochs` in
/// total.
pub fn run_caf<F: Scalar>(
    source_params: &ModelParams<F>,
    target_data: &Dataset<F>,
    cfg: &CafConfig,
) -> Result<AdaptationState<F>> {
    let mut state = init_state(source_params, target_data, cfg)?;
    for epoch in 0..cfg.max_epochs {
        debug_assert_eq!(state.epoch, epoch);
        state = if epoch % 2 == 0 {
            calibration_epoch(state, source_params, target_data, cfg)?
        } else {
            adaptation_epoch(state, target_data, cfg)?
        };
    }
    Ok(state)
}
