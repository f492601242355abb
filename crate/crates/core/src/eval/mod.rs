//! Transferability evaluation: channel splitting by domain uncertainty,
//! masked-channel accuracy, six classical transfer measurements, and the
//! accuracy-versus-instance-uncertainty curve.
//!
//! Target labels enter only through this module; the adaptation code never
//! sees them.

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::model::{argmax_row, classify, encode, ln_clamped, Dataset, ModelParams};
use crate::scalar::{real, Scalar};
use crate::utr::{UtrDomain, UtrInstance};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Channel indices partitioned into a low-uncertainty and a high-uncertainty
/// half.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSplit {
    pub low_idx: Vec<usize>,
    pub high_idx: Vec<usize>,
}

/// Splits `[0, d)` into the `m` channels with the smallest domain scores
/// (ties broken by ascending index) and the rest.
pub fn split_channels<F: Scalar>(utr_d: &UtrDomain<F>, m: usize) -> Result<ChannelSplit> {
    let d = utr_d.values.len();
    if m == 0 || m >= d {
        return Err(Error::InvalidConfig(format!(
            "channel split size must satisfy 1 <= m < {d}, got {m}"
        )));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        utr_d.values[a]
            .partial_cmp(&utr_d.values[b])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut low_idx: Vec<usize> = order[..m].to_vec();
    let mut high_idx: Vec<usize> = order[m..].to_vec();
    low_idx.sort_unstable();
    high_idx.sort_unstable();
    Ok(ChannelSplit { low_idx, high_idx })
}

/// Column projection onto `idx`, in the given order.
pub fn project<F: Scalar>(x: ArrayView2<'_, F>, idx: &[usize]) -> Result<Array2<F>> {
    if idx.is_empty() {
        return Err(Error::EmptyInput("projection index set"));
    }
    if let Some(&bad) = idx.iter().find(|&&j| j >= x.ncols()) {
        return Err(Error::IndexOutOfBounds {
            index: bad,
            len: x.ncols(),
            context: "column projection",
        });
    }
    Ok(x.select(Axis(1), idx))
}

/// Fraction of positions where prediction and label agree.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("accuracy predictions"));
    }
    if pred.len() != labels.len() {
        return Err(Error::dims("accuracy labels", pred.len(), labels.len()));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Top-1 accuracy when only the channels in `keep_idx` survive: the encoded
/// features have every other channel zeroed before classification. With all
/// channels masked the weight-normalized logits are identically zero and the
/// first-index argmax predicts class 0 everywhere.
pub fn masked_accuracy<F: Scalar>(
    params: &ModelParams<F>,
    data: &Dataset<F>,
    keep_idx: &[usize],
) -> Result<f64> {
    let labels = data.require_labels()?;
    let mut z = encode(params, data.features.view())?;
    if let Some(&bad) = keep_idx.iter().find(|&&j| j >= z.ncols()) {
        return Err(Error::IndexOutOfBounds {
            index: bad,
            len: z.ncols(),
            context: "masked_accuracy keep_idx",
        });
    }
    let mut keep = vec![false; z.ncols()];
    for &j in keep_idx {
        keep[j] = true;
    }
    for mut row in z.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            if !keep[j] {
                *v = F::zero();
            }
        }
    }
    let logits = classify(params, z.view())?;
    let pred: Vec<usize> = logits.rows().into_iter().map(argmax_row).collect();
    accuracy(&pred, labels)
}

fn euclidean<F: Scalar>(a: ndarray::ArrayView1<'_, F>, b: ndarray::ArrayView1<'_, F>) -> F {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<F>()
        .sqrt()
}

/// Median of a slice; for even lengths, the mean of the two central values.
fn median<F: Scalar>(values: &mut [F]) -> F {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / real(2.0)
    }
}

/// Maximum mean discrepancy with a Gaussian kernel (biased estimator).
///
/// The bandwidth is the median pairwise Euclidean distance over the pooled
/// rows of both inputs; if every pairwise distance is zero the bandwidth
/// falls back to 1. The squared estimate is clamped at zero before the root.
pub fn mmd<F: Scalar>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Result<F> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyInput("mmd inputs"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::dims("mmd columns", a.ncols(), b.ncols()));
    }
    let pooled: Vec<ndarray::ArrayView1<'_, F>> =
        a.rows().into_iter().chain(b.rows()).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(euclidean(pooled[i], pooled[j]));
        }
    }
    let sigma = if dists.is_empty() {
        F::one()
    } else {
        let med = median(&mut dists);
        if med > F::zero() {
            med
        } else {
            F::one()
        }
    };
    let denom = real::<F>(2.0) * sigma * sigma;
    let kernel = |x: ndarray::ArrayView1<'_, F>, y: ndarray::ArrayView1<'_, F>| {
        let d = euclidean(x, y);
        (-(d * d) / denom).exp()
    };

    let mean_kernel = |p: ArrayView2<'_, F>, q: ArrayView2<'_, F>| {
        let mut total = F::zero();
        for pi in p.rows() {
            for qj in q.rows() {
                total = total + kernel(pi, qj);
            }
        }
        total / real::<F>((p.nrows() * q.nrows()) as f64)
    };

    let squared = mean_kernel(a, a) + mean_kernel(b, b)
        - real::<F>(2.0) * mean_kernel(a, b);
    Ok(squared.max(F::zero()).sqrt())
}

/// Proxy A-distance: trains a logistic linear classifier to separate the two
/// samples and maps its held-out error `e` to `clamp(2 (1 - 2 e), 0, 2)`.
///
/// Each domain is shuffled with the given stream and split half for training
/// (the larger half on odd sizes), half for testing. Features are
/// standardized with the training split's statistics. The classifier is
/// trained by full-batch gradient descent: 200 epochs at learning rate 0.1.
pub fn proxy_a_distance<F: Scalar>(
    a: ArrayView2<'_, F>,
    b: ArrayView2<'_, F>,
    rng: &mut impl Rng,
) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidParameter(
            "proxy A-distance needs at least two instances per domain".into(),
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::dims("proxy A-distance columns", a.ncols(), b.ncols()));
    }
    let q = a.ncols();

    // Per-domain shuffled half/half split keeps the train and test sets
    // balanced across domains.
    let mut split = |rows: ArrayView2<'_, F>| {
        let n = rows.nrows();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let cut = n.div_ceil(2);
        (idx[..cut].to_vec(), idx[cut..].to_vec())
    };
    let (a_train, a_test) = split(a);
    let (b_train, b_test) = split(b);

    let collect = |rows: ArrayView2<'_, F>, idx: &[usize], label: f64| -> Vec<(Vec<f64>, f64)> {
        idx.iter()
            .map(|&i| {
                (
                    rows.row(i).iter().map(|v| v.to_f64_lossy()).collect(),
                    label,
                )
            })
            .collect()
    };
    let mut train = collect(a, &a_train, 0.0);
    train.extend(collect(b, &b_train, 1.0));
    let mut test = collect(a, &a_test, 0.0);
    test.extend(collect(b, &b_test, 1.0));
    if test.is_empty() {
        return Err(Error::InvalidParameter(
            "proxy A-distance test split is empty".into(),
        ));
    }

    // Standardize with training statistics; constant columns pass through.
    let n_train = train.len() as f64;
    let mut mean = vec![0.0; q];
    for (x, _) in &train {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n_train;
        }
    }
    let mut std = vec![0.0; q];
    for (x, _) in &train {
        for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n_train;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standardize = |set: &mut Vec<(Vec<f64>, f64)>| {
        for (x, _) in set {
            for ((v, m), s) in x.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
    };
    standardize(&mut train);
    standardize(&mut test);

    let mut w = vec![0.0; q];
    let mut bias = 0.0;
    let lr = 0.1;
    for _ in 0..200 {
        let mut gw = vec![0.0; q];
        let mut gb = 0.0;
        for (x, y) in &train {
            let logit: f64 = bias + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
            let p = 1.0 / (1.0 + (-logit).exp());
            let err = p - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi / n_train;
            }
            gb += err / n_train;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g;
        }
        bias -= lr * gb;
    }

    let mut errors = 0usize;
    for (x, y) in &test {
        let logit: f64 = bias + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
        let pred = if logit > 0.0 { 1.0 } else { 0.0 };
        if pred != *y {
            errors += 1;
        }
    }
    let eps = errors as f64 / test.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0))
}

/// Right singular vectors of the mean-centered matrix, as columns ordered by
/// descending singular value, with the effective rank (eigenvalues above a
/// relative floor).
fn right_singular_vectors<F: Scalar>(x: ArrayView2<'_, F>) -> Result<(Array2<F>, usize)> {
    let centered = {
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let mut c = x.to_owned();
        for mut row in c.rows_mut() {
            row.zip_mut_with(&mean, |v, &m| *v = *v - m);
        }
        c
    };
    let gram = centered.t().dot(&centered);
    let eig = sym_eigen(&gram)?;
    let top = eig.values[0].max(F::zero());
    let tol = top * real::<F>(1e-10);
    let rank = eig
        .values
        .iter()
        .filter(|&&v| v > tol && v > F::zero())
        .count();
    Ok((eig.vectors, rank))
}

/// Mean absolute cosine between corresponding right singular vectors of the
/// mean-centered inputs (sign-aligned per pair, since singular vectors carry
/// arbitrary sign), over the first `k` directions. If either matrix has rank
/// below `k`, only the available pairs are averaged; rank zero on either
/// side yields 0.
pub fn corresponding_angle<F: Scalar>(
    a: ArrayView2<'_, F>,
    b: ArrayView2<'_, F>,
    k: usize,
) -> Result<F> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyInput("corresponding_angle inputs"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::dims("corresponding_angle columns", a.ncols(), b.ncols()));
    }
    let bound = a.nrows().min(b.nrows()).min(a.ncols());
    if k == 0 || k > bound {
        return Err(Error::InvalidParameter(format!(
            "corresponding_angle k must satisfy 1 <= k <= {bound}, got {k}"
        )));
    }
    let (va, rank_a) = right_singular_vectors(a)?;
    let (vb, rank_b) = right_singular_vectors(b)?;
    let avail = k.min(rank_a).min(rank_b);
    if avail == 0 {
        return Ok(F::zero());
    }
    let mut total = F::zero();
    for i in 0..avail {
        let dot = va
            .column(i)
            .iter()
            .zip(vb.column(i))
            .map(|(&x, &y)| x * y)
            .sum::<F>();
        total = total + dot.abs();
    }
    Ok(total / real(avail as f64))
}

/// Log expected empirical prediction: builds the empirical joint of (target
/// label, source prediction) from the soft source outputs and scores the mean
/// log of the composed predictor. Always nonpositive.
pub fn leep<F: Scalar>(source_probs: ArrayView2<'_, F>, target_labels: &[usize]) -> Result<F> {
    let n = source_probs.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("leep source probabilities"));
    }
    if target_labels.len() != n {
        return Err(Error::dims("leep labels", n, target_labels.len()));
    }
    let tol = real::<F>(1e-6);
    for (i, row) in source_probs.rows().into_iter().enumerate() {
        if (row.sum() - F::one()).abs() > tol {
            return Err(Error::InvalidParameter(format!(
                "leep probability row {i} does not sum to 1"
            )));
        }
    }
    let k_s = source_probs.ncols();
    let k_t = target_labels.iter().max().copied().unwrap_or(0) + 1;
    let inv_n = F::one() / real::<F>(n as f64);

    let mut joint = Array2::<F>::zeros((k_t, k_s));
    for (i, &y) in target_labels.iter().enumerate() {
        for z in 0..k_s {
            joint[[y, z]] = joint[[y, z]] + source_probs[[i, z]] * inv_n;
        }
    }
    let marginal_z = joint.sum_axis(Axis(0));
    // Conditional P(y|z): each column of the joint divided by the z-marginal;
    // unobserved z-columns stay zero.
    let mut cond = Array2::<F>::zeros((k_t, k_s));
    for z in 0..k_s {
        if marginal_z[z] > F::zero() {
            for y in 0..k_t {
                cond[[y, z]] = joint[[y, z]] / marginal_z[z];
            }
        }
    }

    let mut total = F::zero();
    for (i, &y) in target_labels.iter().enumerate() {
        let mut p = F::zero();
        for z in 0..k_s {
            p = p + cond[[y, z]] * source_probs[[i, z]];
        }
        total = total + ln_clamped(p);
    }
    Ok(total * inv_n)
}

/// Negative conditional entropy of target labels given hard source
/// predictions, from the empirical joint (`0 log 0 = 0`). Zero exactly when
/// the source predictions determine the labels.
pub fn nce(source_hard: &[usize], target_labels: &[usize]) -> Result<f64> {
    if source_hard.is_empty() {
        return Err(Error::EmptyInput("nce predictions"));
    }
    if source_hard.len() != target_labels.len() {
        return Err(Error::dims("nce labels", source_hard.len(), target_labels.len()));
    }
    let n = source_hard.len() as f64;
    let k_z = source_hard.iter().max().copied().unwrap_or(0) + 1;
    let k_y = target_labels.iter().max().copied().unwrap_or(0) + 1;
    let mut counts = vec![vec![0usize; k_y]; k_z];
    for (&z, &y) in source_hard.iter().zip(target_labels) {
        counts[z][y] += 1;
    }
    let mut total = 0.0;
    for row in &counts {
        let n_z: usize = row.iter().sum();
        if n_z == 0 {
            continue;
        }
        for &c in row {
            if c > 0 {
                let p_joint = c as f64 / n;
                let p_cond = c as f64 / n_z as f64;
                total += p_joint * p_cond.ln();
            }
        }
    }
    Ok(total.min(0.0))
}

/// Outcome of the log-maximum-evidence computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogMe {
    pub value: f64,
    pub converged: bool,
}

/// Log maximum evidence of a Bayesian linear model fitted one-vs-all per
/// class, averaged over classes and normalized by the instance count.
///
/// The evidence is maximized by the classical fixed-point iteration on the
/// precision pair (alpha, beta), run on the eigendecomposition of the feature
/// Gram matrix; iteration stops when `|d alpha| + |d beta| < tol` or after
/// `max_iter` rounds (then `converged` is false).
pub fn logme<F: Scalar>(
    features: ArrayView2<'_, F>,
    labels: &[usize],
    max_iter: usize,
    tol: f64,
) -> Result<LogMe> {
    let (n, d) = features.dim();
    if n == 0 || d == 0 {
        return Err(Error::EmptyInput("logme features"));
    }
    if labels.len() != n {
        return Err(Error::dims("logme labels", n, labels.len()));
    }
    if max_iter == 0 || !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParameter(
            "logme needs max_iter >= 1 and a positive tolerance".into(),
        ));
    }
    let k = labels.iter().max().copied().unwrap_or(0) + 1;

    let f64_features =
        Array2::from_shape_fn((n, d), |(i, j)| features[[i, j]].to_f64_lossy());
    let gram = f64_features.t().dot(&f64_features);
    let eig = sym_eigen(&gram)?;
    let lambda: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();

    let nf = n as f64;
    let mut value_sum = 0.0;
    let mut all_converged = true;
    for class in 0..k {
        let y = Array1::from_shape_fn(n, |i| if labels[i] == class { 1.0 } else { 0.0 });
        let y_sq = y.dot(&y);
        // Coordinates of F^T y in the eigenbasis.
        let fty = f64_features.t().dot(&y);
        let w = eig.vectors.t().dot(&fty);

        let (mut alpha, mut beta) = (1.0f64, 1.0f64);
        let mut converged = false;
        for _ in 0..max_iter {
            let mut gamma = 0.0;
            let mut m_sq = 0.0;
            let mut fm_term = 0.0; // m^T F^T y
            let mut quad = 0.0; // m^T F^T F m
            for (l, wj) in lambda.iter().zip(w.iter()) {
                let denom = alpha + beta * l;
                let c = beta * wj / denom;
                gamma += beta * l / denom;
                m_sq += c * c;
                fm_term += c * wj;
                quad += l * c * c;
            }
            let residual = (y_sq - 2.0 * fm_term + quad).max(1e-300);
            let new_alpha = (gamma / m_sq.max(1e-300)).clamp(1e-12, 1e12);
            let new_beta = (((nf - gamma) / residual).max(1e-300)).clamp(1e-12, 1e12);
            let delta = (new_alpha - alpha).abs() + (new_beta - beta).abs();
            alpha = new_alpha;
            beta = new_beta;
            if delta < tol {
                converged = true;
                break;
            }
        }
        all_converged &= converged;
        value_sum += class_evidence(&lambda, w.as_slice().expect("contiguous"), y_sq, n, alpha, beta) / nf;
    }

    Ok(LogMe {
        value: value_sum / k as f64,
        converged: all_converged,
    })
}

/// Log evidence of one binary regression at fixed precisions, expressed
/// through the Gram spectrum `lambda` and the eigenbasis coordinates `w` of
/// `F^T y`. Equals the log density of `y` under `N(0, I/beta + F F^T/alpha)`.
fn class_evidence(
    lambda: &[f64],
    w: &[f64],
    y_sq: f64,
    n: usize,
    alpha: f64,
    beta: f64,
) -> f64 {
    let d = lambda.len();
    let mut m_sq = 0.0;
    let mut fm_term = 0.0;
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for (l, wj) in lambda.iter().zip(w) {
        let denom = alpha + beta * l;
        let c = beta * wj / denom;
        m_sq += c * c;
        fm_term += c * wj;
        quad += l * c * c;
        log_det += denom.max(1e-300).ln();
    }
    let residual = (y_sq - 2.0 * fm_term + quad).max(0.0);
    0.5 * (d as f64 * alpha.ln() + (n as f64) * beta.ln()
        - beta * residual
        - alpha * m_sq
        - log_det
        - (n as f64) * (2.0 * std::f64::consts::PI).ln())
}

/// One point of the accuracy-versus-uncertainty curve: the mean correctness
/// over instances whose score strictly exceeds the threshold. `accuracy` is
/// `None` when no instance qualifies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub accuracy: Option<f64>,
    pub count: usize,
}

/// Evaluates the curve on an ascending threshold list.
pub fn accuracy_utr_curve<F: Scalar>(
    utr_i: &UtrInstance<F>,
    correct: &[bool],
    thresholds: &[f64],
) -> Result<Vec<CurvePoint>> {
    let n = utr_i.values.len();
    if correct.len() != n {
        return Err(Error::dims("curve correctness flags", n, correct.len()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter(
            "curve thresholds must be ascending".into(),
        ));
    }
    Ok(thresholds
        .iter()
        .map(|&thr| {
            let thr_f = real::<F>(thr);
            let selected: Vec<usize> = (0..n).filter(|&i| utr_i.values[i] > thr_f).collect();
            let count = selected.len();
            let accuracy = if count == 0 {
                None
            } else {
                Some(
                    selected.iter().filter(|&&i| correct[i]).count() as f64 / count as f64,
                )
            };
            CurvePoint {
                threshold: thr,
                accuracy,
                count,
            }
        })
        .collect())
}

/// Whether smaller or larger values indicate better transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::LowerBetter => "lower_better",
            Direction::HigherBetter => "higher_better",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lower_better" => Ok(Direction::LowerBetter),
            "higher_better" => Ok(Direction::HigherBetter),
            other => Err(Error::InvalidParameter(format!(
                "unknown direction '{other}'"
            ))),
        }
    }
}

/// One measurement evaluated on both channel halves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementEntry {
    pub z_low: f64,
    pub z_high: f64,
    pub direction: Direction,
}

impl MeasurementEntry {
    /// True when the low-uncertainty half scores strictly better.
    pub fn favors_low(&self) -> bool {
        match self.direction {
            Direction::LowerBetter => self.z_low < self.z_high,
            Direction::HigherBetter => self.z_low > self.z_high,
        }
    }
}

/// All seven measurements, keyed by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementReport {
    pub entries: BTreeMap<String, MeasurementEntry>,
}

impl MeasurementReport {
    pub fn favoring_low(&self) -> usize {
        self.entries.values().filter(|e| e.favors_low()).count()
    }
}

/// Names of the measurements a full report must contain.
pub const MEASUREMENT_NAMES: [&str; 7] = [
    "accuracy",
    "a_distance",
    "corresponding_angle",
    "leep",
    "logme",
    "mmd",
    "nce",
];

/// Evaluates every measurement on the low and high channel halves.
///
/// Accuracy, LEEP, and NCE read the classifier through zero-masked features
/// (the head's shape forces masking); the distribution and regression
/// measurements project features onto the half's columns. The seed feeds one
/// named stream per randomized measurement, so report content is independent
/// of evaluation order.
pub fn build_report<F: Scalar>(
    source_params: &ModelParams<F>,
    source_data: &Dataset<F>,
    target_data: &Dataset<F>,
    split: &ChannelSplit,
    seed: u64,
) -> Result<MeasurementReport> {
    let target_labels = target_data.require_labels()?;
    let z_source = encode(source_params, source_data.features.view())?;
    let z_target = encode(source_params, target_data.features.view())?;

    let mut entries = BTreeMap::new();
    let mut sides: BTreeMap<&str, [f64; 2]> = BTreeMap::new();
    for (side, idx) in [(0usize, &split.low_idx), (1, &split.high_idx)] {
        let zs = project(z_source.view(), idx)?;
        let zt = project(z_target.view(), idx)?;

        let acc = masked_accuracy(source_params, target_data, idx)?;

        let masked_probs = {
            let mut z = z_target.clone();
            let mut keep = vec![false; z.ncols()];
            for &j in idx {
                keep[j] = true;
            }
            for mut row in z.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    if !keep[j] {
                        *v = F::zero();
                    }
                }
            }
            crate::model::softmax(classify(source_params, z.view())?.view())
        };
        let hard: Vec<usize> = masked_probs.rows().into_iter().map(argmax_row).collect();

        let mmd_v = mmd(zs.view(), zt.view())?.to_f64_lossy();
        let mut a_rng = crate::rng::stream(seed, "eval-a-distance", side as u64);
        let a_dist = proxy_a_distance(zs.view(), zt.view(), &mut a_rng)?;
        let k = 10
            .min(zs.nrows().min(zt.nrows()).min(zs.ncols()))
            .max(1);
        let angle = corresponding_angle(zs.view(), zt.view(), k)?.to_f64_lossy();
        let leep_v = leep(masked_probs.view(), target_labels)?.to_f64_lossy();
        let nce_v = nce(&hard, target_labels)?;
        let logme_v = logme(zt.view(), target_labels, 200, 1e-9)?.value;

        for (name, value) in [
            ("accuracy", acc),
            ("mmd", mmd_v),
            ("a_distance", a_dist),
            ("corresponding_angle", angle),
            ("leep", leep_v),
            ("nce", nce_v),
            ("logme", logme_v),
        ] {
            sides.entry(name).or_insert([0.0; 2])[side] = value;
        }
    }

    for name in MEASUREMENT_NAMES {
        let [z_low, z_high] = sides[name];
        let direction = match name {
            "mmd" | "a_distance" => Direction::LowerBetter,
            _ => Direction::HigherBetter,
        };
        entries.insert(
            name.to_string(),
            MeasurementEntry {
                z_low,
                z_high,
                direction,
            },
        );
    }
    Ok(MeasurementReport { entries })
}
