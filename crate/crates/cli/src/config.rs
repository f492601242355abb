//! One JSON run configuration covering every pipeline stage.
//!
//! Sections map one-to-one onto the typed configs of the library: `arch` and
//! `train` drive source training, `perturb` drives standalone uncertainty
//! computation (and evaluation), `caf` is the full adaptation config with its
//! own embedded training and perturbation settings, `data` is the
//! planted-shift recipe, `eval` holds the channel-split size and curve
//! sampling, and `paths` fixes where outputs land. Unknown keys anywhere are
//! rejected so a typo cannot silently fall back to a default.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use utrcaf_core::caf::CafConfig;
use utrcaf_core::model::{Activation, ArchitectureSpec, TrainConfig};
use utrcaf_core::synth::PlantedShiftSpec;
use utrcaf_core::utr::PerturbationConfig;
use utrcaf_core::{Error, Result};

/// Transferability-evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of channels in the low-uncertainty half.
    pub split_m: usize,
    /// Number of evenly spaced thresholds on the accuracy curve.
    pub curve_points: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split_m: 8,
            curve_points: 20,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split_m < 1 {
            return Err(Error::InvalidConfig("eval.split_m must be >= 1".into()));
        }
        if self.curve_points < 2 {
            return Err(Error::InvalidConfig("eval.curve_points must be >= 2".into()));
        }
        Ok(())
    }
}

/// Where outputs are written. Every produced file has a fixed name under
/// `out_dir`; command flags can redirect individual inputs or the directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Fixed output file names, resolved against a directory.
pub mod files {
    use std::path::{Path, PathBuf};

    pub fn source_data(dir: &Path) -> PathBuf {
        dir.join("source.csv")
    }
    pub fn target_data(dir: &Path) -> PathBuf {
        dir.join("target.csv")
    }
    pub fn manifest(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }
    pub fn source_model(dir: &Path) -> PathBuf {
        dir.join("source_model.json")
    }
    pub fn spectrum(dir: &Path) -> PathBuf {
        dir.join("spectrum.csv")
    }
    pub fn utr_d(dir: &Path) -> PathBuf {
        dir.join("utr_d.csv")
    }
    pub fn utr_i(dir: &Path) -> PathBuf {
        dir.join("utr_i.csv")
    }
    pub fn adapted_model(dir: &Path) -> PathBuf {
        dir.join("adapted_model.json")
    }
    pub fn adapted_state(dir: &Path) -> PathBuf {
        dir.join("adapted_state.json")
    }
    pub fn loss_history(dir: &Path) -> PathBuf {
        dir.join("loss_history.csv")
    }
    pub fn report_json(dir: &Path) -> PathBuf {
        dir.join("report.json")
    }
    pub fn report_csv(dir: &Path) -> PathBuf {
        dir.join("report.csv")
    }
    pub fn curve(dir: &Path) -> PathBuf {
        dir.join("curve.csv")
    }
}

/// The whole run configuration. Defaults run the standard planted-shift
/// pipeline end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchitectureSpec,
    pub train: TrainConfig,
    pub perturb: PerturbationConfig,
    pub caf: CafConfig,
    pub eval: EvalConfig,
    pub data: PlantedShiftSpec,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchitectureSpec {
                input_dim: 16,
                hidden_dims: vec![],
                bottleneck_dim: 16,
                num_classes: 4,
                activation: Activation::Relu,
            },
            train: TrainConfig::default(),
            perturb: PerturbationConfig::default(),
            caf: CafConfig::default(),
            eval: EvalConfig::default(),
            data: PlantedShiftSpec::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Validates every section and the couplings between them, so a config
    /// that passes here cannot hit shape errors later in the pipeline.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.perturb.validate()?;
        self.caf.validate()?;
        self.eval.validate()?;
        self.data.validate()?;
        if self.data.input_dim != self.arch.input_dim {
            return Err(Error::InvalidConfig(format!(
                "data.input_dim {} does not match arch.input_dim {}",
                self.data.input_dim, self.arch.input_dim
            )));
        }
        if self.data.num_classes != self.arch.num_classes {
            return Err(Error::InvalidConfig(format!(
                "data.num_classes {} does not match arch.num_classes {}",
                self.data.num_classes, self.arch.num_classes
            )));
        }
        if self.eval.split_m >= self.arch.bottleneck_dim {
            return Err(Error::InvalidConfig(format!(
                "eval.split_m {} must be below arch.bottleneck_dim {}",
                self.eval.split_m, self.arch.bottleneck_dim
            )));
        }
        Ok(())
    }

    /// Forces one seed into every seeded section, as the `UTRCAF_SEED`
    /// environment variable demands.
    pub fn override_seeds(&mut self, seed: u64) {
        self.train.seed = seed;
        self.perturb.seed = seed;
        self.caf.train.seed = seed;
        self.caf.perturb.seed = seed;
        self.data.seed = seed;
        self.eval.seed = seed;
    }
}

/// Reads a run configuration, applies `UTRCAF_SEED` if set, and validates.
pub fn load(path: &Path) -> Result<RunConfig> {
    let mut cfg: RunConfig = utrcaf_core::io::load_json(path)?;
    if let Ok(raw) = std::env::var("UTRCAF_SEED") {
        let seed: u64 = raw.trim().parse().map_err(|_| {
            Error::InvalidConfig(format!(
                "UTRCAF_SEED must be an unsigned integer, got '{raw}'"
            ))
        })?;
        cfg.override_seeds(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}
