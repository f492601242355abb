//! Uncertainty spectrum of an encoder on a dataset.
//!
//! The encoder's parameters are multiplied by `(1 + r)` with small uniform
//! `r`, several times; the per-channel population variance of the resulting
//! feature matrices is the uncertainty distance (UD) of each channel on each
//! instance. Averaging the spectrum down columns scores channels for the whole
//! domain (higher = less transferable); averaging across rows scores
//! individual instances (higher = riskier semantics).

use crate::error::{Error, Result};
use crate::model::{encode, perturb_params, ModelParams, NoiseMode};
use crate::rng;
use crate::scalar::{real, Scalar};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Sensitivity-analysis settings: how many perturbed encoders to draw and
/// from which multiplier range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    pub t: usize,
    pub low: f64,
    pub high: f64,
    pub noise_mode: NoiseMode,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            t: 2,
            low: -0.05,
            high: 0.05,
            noise_mode: NoiseMode::PerParameter,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(Error::InvalidConfig(
                "perturbation count t must be >= 2 (variance needs at least two draws)".into(),
            ));
        }
        if !(self.low.is_finite() && self.high.is_finite() && self.low <= self.high) {
            return Err(Error::InvalidConfig(format!(
                "perturbation range [{}, {}] is not a valid interval",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Instance-by-channel matrix of uncertainty distances.
#[derive(Clone, Debug, PartialEq)]
pub struct UtrSpectrum<F> {
    values: Array2<F>,
    model_tag: String,
}

impl<F: Scalar> UtrSpectrum<F> {
    /// Wraps a precomputed spectrum; entries must be finite and nonnegative.
    pub fn new(values: Array2<F>, model_tag: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < F::zero()) {
            return Err(Error::InvalidParameter(
                "spectrum entries must be finite and nonnegative".into(),
            ));
        }
        Ok(UtrSpectrum {
            values,
            model_tag: model_tag.into(),
        })
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    /// Identifies the parameters that produced this spectrum.
    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn num_instances(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-channel (domain-level) uncertainty scores.
#[derive(Clone, Debug, PartialEq)]
pub struct UtrDomain<F> {
    pub values: Array1<F>,
}

/// Per-instance uncertainty scores.
#[derive(Clone, Debug, PartialEq)]
pub struct UtrInstance<F> {
    pub values: Array1<F>,
}

/// Rule mapping instance scores to the risky subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskThreshold {
    pub mode: ThresholdMode,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Compare scores against `value` directly.
    Absolute,
    /// Compare scores against `value` times the mean score.
    MeanMultiple,
}

impl Default for RiskThreshold {
    fn default() -> Self {
        RiskThreshold {
            mode: ThresholdMode::MeanMultiple,
            value: 3.0,
        }
    }
}

impl RiskThreshold {
    pub fn validate(&self) -> Result<()> {
        if !(self.value.is_finite() && self.value > 0.0) {
            return Err(Error::InvalidConfig(
                "risk threshold value must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Uncertainty spectrum of `params` on `x`: draws `cfg.t` perturbed encoders
/// (each from its own named stream, so instance order cannot influence the
/// draws) and takes the per-entry population variance of their features.
pub fn channel_ud<F: Scalar>(
    params: &ModelParams<F>,
    x: ArrayView2<'_, F>,
    cfg: &PerturbationConfig,
) -> Result<UtrSpectrum<F>> {
    cfg.validate()?;
    let mut models = Vec::with_capacity(cfg.t);
    for t in 0..cfg.t {
        let mut stream = rng::stream(cfg.seed, "utr-perturb", t as u64);
        models.push(perturb_params(
            params,
            cfg.noise_mode,
            cfg.low,
            cfg.high,
            &mut stream,
        )?);
    }
    spectrum_from_encoders(&models, x, params.fingerprint())
}

/// Variance spectrum over an explicit family of (already perturbed) models;
/// the closed-form oracle path behind [`channel_ud`].
pub fn spectrum_from_encoders<F: Scalar>(
    models: &[ModelParams<F>],
    x: ArrayView2<'_, F>,
    model_tag: impl Into<String>,
) -> Result<UtrSpectrum<F>> {
    if models.len() < 2 {
        return Err(Error::InvalidParameter(
            "variance spectrum needs at least two models".into(),
        ));
    }
    let outputs: Vec<Array2<F>> = models
        .iter()
        .map(|m| encode(m, x))
        .collect::<Result<_>>()?;
    let (n, d) = outputs[0].dim();
    let t_count = real::<F>(models.len() as f64);
    let mut values = Array2::<F>::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            let mean = outputs.iter().map(|o| o[[i, j]]).sum::<F>() / t_count;
            let var = outputs
                .iter()
                .map(|o| {
                    let dev = o[[i, j]] - mean;
                    dev * dev
                })
                .sum::<F>()
                / t_count;
            values[[i, j]] = var;
        }
    }
    UtrSpectrum::new(values, model_tag)
}

/// Column means of the spectrum: one score per channel.
pub fn utr_domain<F: Scalar>(spectrum: &UtrSpectrum<F>) -> Result<UtrDomain<F>> {
    if spectrum.num_instances() == 0 {
        return Err(Error::EmptyInput("utr_domain spectrum"));
    }
    Ok(UtrDomain {
        values: spectrum
            .values
            .mean_axis(Axis(0))
            .expect("nonempty spectrum"),
    })
}

/// Exponential moving average of domain scores across batches:
/// `(1 - momentum) * previous + momentum * batch_mean`. With no previous
/// value the batch mean is taken as-is.
pub fn utr_domain_online<F: Scalar>(
    previous: Option<&UtrDomain<F>>,
    batch: &UtrSpectrum<F>,
    momentum: f64,
) -> Result<UtrDomain<F>> {
    if !(momentum.is_finite() && momentum > 0.0 && momentum <= 1.0) {
        return Err(Error::InvalidParameter(
            "online momentum must lie in (0, 1]".into(),
        ));
    }
    let batch_mean = utr_domain(batch)?;
    match previous {
        None => Ok(batch_mean),
        Some(prev) => {
            if prev.values.len() != batch_mean.values.len() {
                return Err(Error::dims(
                    "utr_domain_online",
                    prev.values.len(),
                    batch_mean.values.len(),
                ));
            }
            let m = real::<F>(momentum);
            let keep = F::one() - m;
            let values = ndarray::Zip::from(&prev.values)
                .and(&batch_mean.values)
                .map_collect(|&p, &b| keep * p + m * b);
            Ok(UtrDomain { values })
        }
    }
}

/// Row means of the spectrum: one score per instance.
pub fn utr_instance<F: Scalar>(spectrum: &UtrSpectrum<F>) -> Result<UtrInstance<F>> {
    if spectrum.num_channels() == 0 {
        return Err(Error::EmptyInput("utr_instance spectrum"));
    }
    Ok(UtrInstance {
        values: spectrum
            .values
            .mean_axis(Axis(1))
            .expect("nonempty channels"),
    })
}

/// Ascending indices of instances whose score strictly exceeds the threshold.
/// Instances exactly at the threshold are kept out of the risk set.
pub fn select_risk<F: Scalar>(scores: &UtrInstance<F>, thr: &RiskThreshold) -> Result<Vec<usize>> {
    thr.validate()?;
    if scores.values.is_empty() {
        return Err(Error::EmptyInput("select_risk scores"));
    }
    let cut = match thr.mode {
        ThresholdMode::Absolute => real::<F>(thr.value),
        ThresholdMode::MeanMultiple => {
            let mean = scores.values.iter().copied().sum::<F>()
                / real::<F>(scores.values.len() as f64);
            real::<F>(thr.value) * mean
        }
    };
    Ok(scores
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > cut)
        .map(|(i, _)| i)
        .collect())
}
