//! Synthetic imbalanced sparse binary data.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, LabeledInstance, SparseVector};
use crate::error::{arg, Result};
use crate::rng::seeded;

/// Positive rate of the protein-interaction corpus the defaults imitate.
pub const DEFAULT_POSITIVE_RATE: f64 = 0.176;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub dim: usize,
    pub positive_rate: f64,
    /// How far the two classes' feature probabilities are pushed apart;
    /// 0 makes the classes indistinguishable.
    pub class_separation: f64,
    /// Mean probability that a feature is present.
    pub feature_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            dim: 100,
            positive_rate: DEFAULT_POSITIVE_RATE,
            class_separation: 0.8,
            feature_density: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return arg(format!("n must be at least 10, got {}", self.n));
        }
        if self.dim < 2 {
            return arg(format!("dim must be at least 2, got {}", self.dim));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return arg(format!(
                "positive_rate must be in (0, 1), got {}",
                self.positive_rate
            ));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return arg(format!(
                "class_separation must be non-negative, got {}",
                self.class_separation
            ));
        }
        if !(self.feature_density > 0.0 && self.feature_density <= 1.0) {
            return arg(format!(
                "feature_density must be in (0, 1], got {}",
                self.feature_density
            ));
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        (self.n as f64 * self.positive_rate).round() as usize
    }
}

/// Per-feature presence probabilities for the positive and negative class.
///
/// Feature `f` has a base rate `q_f` around `feature_density` and a direction
/// `δ_f ∈ [−1, 1]`; the classes use `q_f·e^{±s·δ_f}` with `s` the separation.
fn feature_profiles(config: &SynthConfig) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seeded(config.seed, 1);
    let clamp = |p: f64| p.clamp(1e-3, 1.0 - 1e-3);
    (0..config.dim)
        .map(|_| {
            let base = config.feature_density * rng.gen_range(0.5..1.5);
            let direction: f64 = rng.gen_range(-1.0..1.0);
            let shift = (config.class_separation * direction).exp();
            (clamp(base * shift), clamp(base / shift))
        })
        .unzip()
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (pos_profile, neg_profile) = feature_profiles(config);
    let mut labels = vec![Label::Negative; config.n];
    labels[..config.positives()].fill(Label::Positive);
    let mut rng = seeded(config.seed, 2);
    labels.shuffle(&mut rng);

    let instances = labels
        .into_iter()
        .map(|label| {
            let profile = if label.is_positive() {
                &pos_profile
            } else {
                &neg_profile
            };
            let present = profile
                .iter()
                .enumerate()
                .filter(|&(_, &p)| rng.gen_bool(p))
                .map(|(f, _)| f);
            LabeledInstance::new(SparseVector::binary(present), label)
        })
        .collect();
    Dataset::with_dimension(instances, config.dim)
}
