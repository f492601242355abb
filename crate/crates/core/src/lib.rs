//! Uncertainty-induced transferability representation (UTR) and a calibrated
//! adaptation framework (CAF) for source-free domain adaptation, together with
//! a transferability evaluation harness and synthetic shift generators.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`model`] — a multilayer-perceptron encoder with a weight-normalized
//!   classifier head, trained on labeled source data.
//! * [`utr`] — per-channel uncertainty distances obtained by sensitivity
//!   analysis of the encoder, aggregated into domain-level and instance-level
//!   transferability scores.
//! * [`caf`] — source-free adaptation that alternates calibration epochs
//!   (uncertainty-weighted distillation, forgetting, discovery) with
//!   pseudo-label adaptation epochs.
//! * [`eval`] — classical transferability measurements (MMD, proxy
//!   A-distance, corresponding angle, LEEP, NCE, LogME, masked accuracy) used
//!   to validate the uncertainty scores.
//! * [`synth`] — seeded synthetic datasets with planted distribution shift.
//!
//! All numeric code is generic over a floating-point [`Scalar`]; the aliases
//! below pin the common instantiations.

pub mod caf;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod utr;

pub use error::{Error, Result};
pub use scalar::{real, Scalar};

/// f64 instantiations, the default working precision.
pub type Dataset64 = model::Dataset<f64>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type UtrSpectrum64 = utr::UtrSpectrum<f64>;
pub type UtrDomain64 = utr::UtrDomain<f64>;
pub type UtrInstance64 = utr::UtrInstance<f64>;
pub type AdaptationState64 = caf::AdaptationState<f64>;

/// f32 instantiations for callers trading precision for footprint.
pub type Dataset32 = model::Dataset<f32>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type UtrSpectrum32 = utr::UtrSpectrum<f32>;
pub type UtrDomain32 = utr::UtrDomain<f32>;
pub type UtrInstance32 = utr::UtrInstance<f32>;
pub type AdaptationState32 = caf::AdaptationState<f32>;
