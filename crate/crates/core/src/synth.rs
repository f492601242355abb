//! Seeded synthetic domain pairs with known ground truth.
//!
//! The planted-shift construction makes transferability checkable: a chosen
//! subset of input dimensions carries class information that is consistent
//! within each domain but misleading across domains (the target's class
//! means there are permuted across classes and shifted, and the target's
//! noise there widens with the shift), while the remaining dimensions look
//! identical in both domains. Any channel ranking worth its salt should
//! prefer what the clean dimensions feed.

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::rng;
use crate::scalar::{real, Scalar};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Recipe for a planted-shift domain pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedShiftSpec {
    pub n_per_domain: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Fraction of input dimensions that mislead across domains.
    pub frac_corrupt: f64,
    /// Additive offset applied to the target's corrupt-dimension class
    /// means. Also widens the target-side noise on those dimensions (see
    /// `SHIFT_NOISE_COUPLING`), so a stronger shift makes them noisier too.
    pub shift_strength: f64,
    /// Standard deviation of the isotropic class-conditional noise.
    pub noise: f64,
    pub seed: u64,
}

/// Coupling between shift severity and target-side noise on the corrupt
/// dimensions: their class-conditional noise is scaled by
/// `1 + SHIFT_NOISE_COUPLING * shift_strength` in the target domain only.
/// Permuting the class means alone would re-map the corrupt dimensions
/// without making them less informative; widening their spread with the
/// shift makes what they carry genuinely unreliable cross-domain while
/// leaving the source domain and the clean dimensions untouched. At zero
/// shift the multiplier is 1 and the two domains match exactly.
pub const SHIFT_NOISE_COUPLING: f64 = 1.0;

impl Default for PlantedShiftSpec {
    fn default() -> Self {
        PlantedShiftSpec {
            n_per_domain: 1000,
            input_dim: 16,
            num_classes: 4,
            frac_corrupt: 0.5,
            shift_strength: 2.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl PlantedShiftSpec {
    pub fn num_corrupt(&self) -> usize {
        (self.frac_corrupt * self.input_dim as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_domain == 0 {
            return Err(Error::InvalidConfig("n_per_domain must be positive".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        if !(self.frac_corrupt.is_finite() && (0.0..1.0).contains(&self.frac_corrupt) && self.frac_corrupt > 0.0) {
            return Err(Error::InvalidConfig("frac_corrupt must lie in (0, 1)".into()));
        }
        let m = self.num_corrupt();
        if m < 1 || m > self.input_dim - 1 {
            return Err(Error::InvalidConfig(format!(
                "frac_corrupt {} leaves {} corrupt dimensions; need between 1 and {}",
                self.frac_corrupt,
                m,
                self.input_dim - 1
            )));
        }
        if !(self.shift_strength.is_finite() && self.shift_strength >= 0.0) {
            return Err(Error::InvalidConfig(
                "shift_strength must be nonnegative and finite".into(),
            ));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::InvalidConfig("noise must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Where a generated pair lives on disk, plus the ground truth needed to
/// score channel rankings. Paths are filled in by whoever saves the files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub source_path: String,
    pub target_path: String,
    pub ground_truth_corrupt_dims: Option<Vec<usize>>,
    pub spec: PlantedShiftSpec,
}

/// Class means for both domains and the corrupt-dimension subset, all
/// deterministic functions of the spec. Clean columns are exactly equal
/// across domains; corrupt columns of the target take the permuted class's
/// mean plus the shift.
fn planted_means(
    spec: &PlantedShiftSpec,
    permutation: &[usize],
) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
    let (k, p) = (spec.num_classes, spec.input_dim);
    let mut mean_rng = rng::stream(spec.seed, "synth-planted-means", 0);
    let source_means = Array2::from_shape_fn((k, p), |_| mean_rng.gen_range(-1.5..1.5));

    let mut dims: Vec<usize> = (0..p).collect();
    dims.shuffle(&mut rng::stream(spec.seed, "synth-corrupt-dims", 0));
    let mut corrupt: Vec<usize> = dims[..spec.num_corrupt()].to_vec();
    corrupt.sort_unstable();

    let mut target_means = source_means.clone();
    for class in 0..k {
        for &j in &corrupt {
            target_means[[class, j]] =
                source_means[[permutation[class], j]] + spec.shift_strength;
        }
    }
    (source_means, target_means, corrupt)
}

/// Draws one domain. `corrupt_noise_mult` scales the noise on the corrupt
/// dimensions only; the source passes 1.0, the target passes the
/// severity-coupled multiplier. One normal draw is consumed per entry either
/// way, so the clean columns of a domain do not depend on the multiplier.
fn sample_domain<F: Scalar>(
    spec: &PlantedShiftSpec,
    means: &Array2<f64>,
    corrupt: &[usize],
    corrupt_noise_mult: f64,
    stream_counter: u64,
    name: &str,
) -> Result<Dataset<F>> {
    let (n, p, k) = (spec.n_per_domain, spec.input_dim, spec.num_classes);
    let mut noise_rng = rng::stream(spec.seed, "synth-planted-noise", stream_counter);
    let normal = Normal::new(0.0, spec.noise).expect("validated noise");
    let mut noise_mult = vec![1.0f64; p];
    for &j in corrupt {
        noise_mult[j] = corrupt_noise_mult;
    }
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut x = Array2::<F>::zeros((n, p));
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..p {
            x[[i, j]] = real(means[[label, j]] + noise_mult[j] * normal.sample(&mut noise_rng));
        }
    }
    Dataset::new(x, Some(labels), name)
}

/// Planted-shift pair with an explicit class permutation for the corrupt
/// dimensions (`permutation[k]` names the source class whose mean class `k`
/// inherits in the target domain).
pub fn gen_planted_shift_with_permutation<F: Scalar>(
    spec: &PlantedShiftSpec,
    permutation: &[usize],
) -> Result<(Dataset<F>, Dataset<F>, DatasetManifest)> {
    spec.validate()?;
    if permutation.len() != spec.num_classes {
        return Err(Error::dims(
            "class permutation",
            spec.num_classes,
            permutation.len(),
        ));
    }
    let mut seen = vec![false; spec.num_classes];
    for &c in permutation {
        if c >= spec.num_classes || seen[c] {
            return Err(Error::InvalidParameter(
                "class permutation must be a bijection on [0, K)".into(),
            ));
        }
        seen[c] = true;
    }

    let (source_means, target_means, corrupt) = planted_means(spec, permutation);
    let dispersion = 1.0 + SHIFT_NOISE_COUPLING * spec.shift_strength;
    let source = sample_domain(spec, &source_means, &corrupt, 1.0, 0, "planted-source")?;
    let target = sample_domain(spec, &target_means, &corrupt, dispersion, 1, "planted-target")?;
    let manifest = DatasetManifest {
        source_path: String::new(),
        target_path: String::new(),
        ground_truth_corrupt_dims: Some(corrupt),
        spec: spec.clone(),
    };
    Ok((source, target, manifest))
}

/// Planted-shift pair with the default cyclic permutation (class `k` takes
/// class `k+1 mod K`'s corrupt-dimension mean), so every class is misled.
pub fn gen_planted_shift<F: Scalar>(
    spec: &PlantedShiftSpec,
) -> Result<(Dataset<F>, Dataset<F>, DatasetManifest)> {
    let cyclic: Vec<usize> = (0..spec.num_classes)
        .map(|k| (k + 1) % spec.num_classes)
        .collect();
    gen_planted_shift_with_permutation(spec, &cyclic)
}

/// Two interleaved half-circles with Gaussian jitter; the target domain is
/// the same generator (fresh draws) rotated about the origin.
pub fn gen_two_moons_rotated<F: Scalar>(
    n: usize,
    angle_degrees: f64,
    noise: f64,
    seed: u64,
) -> Result<(Dataset<F>, Dataset<F>)> {
    if n < 4 {
        return Err(Error::InvalidConfig("two moons needs n >= 4".into()));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidConfig("noise must be nonnegative and finite".into()));
    }
    if !angle_degrees.is_finite() {
        return Err(Error::InvalidConfig("angle must be finite".into()));
    }

    let sample = |counter: u64, rotation: f64, name: &str| -> Result<Dataset<F>> {
        let mut r = rng::stream(seed, "synth-moons", counter);
        let normal = Normal::new(0.0, noise).expect("validated noise");
        let (cos_a, sin_a) = (rotation.cos(), rotation.sin());
        let mut x = Array2::<F>::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let t: f64 = r.gen_range(0.0..std::f64::consts::PI);
            let (mut px, mut py) = if label == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            px += normal.sample(&mut r);
            py += normal.sample(&mut r);
            let rx = cos_a * px - sin_a * py;
            let ry = sin_a * px + cos_a * py;
            x[[i, 0]] = real(rx);
            x[[i, 1]] = real(ry);
            labels.push(label);
        }
        Dataset::new(x, Some(labels), name)
    };

    let source = sample(0, 0.0, "moons-source")?;
    let target = sample(1, angle_degrees.to_radians(), "moons-target")?;
    Ok((source, target))
}
