//! Synthetic bags with a planted per-class signal.
//!
//! Every class owns a signature direction; the directions are pairwise
//! orthogonal. A `witness_rate` share of each bag's instances are drawn around
//! its class signature, the rest from a background shared by all classes.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bag::{BagMeta, FeatureBag};
use super::manifest::{Dataset, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};

pub const MAX_INSTANCES: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub class_count: usize,
    pub bags_per_class: usize,
    /// Inclusive range of instances per bag.
    pub n_range: (usize, usize),
    pub feature_width: usize,
    pub witness_rate: f64,
    /// Standard deviation of the isotropic Gaussian noise on every instance.
    pub noise_scale: f64,
    /// Euclidean norm of each class signature.
    pub signature_norm: f64,
    pub bags_per_patient: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            class_count: 3,
            bags_per_class: 50,
            n_range: (50, 200),
            feature_width: 32,
            witness_rate: 0.3,
            noise_scale: 0.5,
            signature_norm: 2.0,
            bags_per_patient: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.class_count < 2 {
            return fail(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.bags_per_class == 0 {
            return fail("bags_per_class must be positive".into());
        }
        let (lo, hi) = self.n_range;
        if lo < 1 || hi < lo || hi > MAX_INSTANCES {
            return fail(format!("n_range ({lo}, {hi}) must lie within [1, {MAX_INSTANCES}]"));
        }
        if self.feature_width < self.class_count {
            return fail(format!(
                "feature_width {} cannot hold {} orthogonal signatures",
                self.feature_width, self.class_count
            ));
        }
        if !(0.0..=1.0).contains(&self.witness_rate) {
            return fail(format!("witness_rate {} outside [0, 1]", self.witness_rate));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise_scale {} must be finite and >= 0", self.noise_scale));
        }
        if !(self.signature_norm > 0.0 && self.signature_norm.is_finite()) {
            return fail("signature_norm must be positive".into());
        }
        if self.bags_per_patient == 0 {
            return fail("bags_per_patient must be positive".into());
        }
        Ok(())
    }
}

/// A generated dataset plus the ground truth used to plant it.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// One signature per row.
    pub signatures: Array2<f64>,
    /// Per bag, which instances were drawn around the class signature.
    pub witnesses: Vec<Vec<bool>>,
}

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signatures = orthogonal_signatures(
        config.class_count,
        config.feature_width,
        config.signature_norm,
        &mut rng,
    );
    let noise = Normal::new(0.0, config.noise_scale).expect("validated noise scale");

    let mut entries = Vec::new();
    let mut bags = Vec::new();
    let mut witnesses = Vec::new();
    for class in 0..config.class_count {
        for index in 0..config.bags_per_class {
            let n = rng.random_range(config.n_range.0..=config.n_range.1);
            let witness_count = ((config.witness_rate * n as f64).round() as usize)
                .clamp(usize::from(config.witness_rate > 0.0), n);
            let mut is_witness: Vec<bool> = (0..n).map(|i| i < witness_count).collect();
            is_witness.shuffle(&mut rng);

            let mut features = Array2::<f32>::zeros((n, config.feature_width));
            for (mut row, &witness) in features.rows_mut().into_iter().zip(&is_witness) {
                for (j, value) in row.iter_mut().enumerate() {
                    let center = if witness { signatures[[class, j]] } else { 0.0 };
                    *value = (center + noise.sample(&mut rng)) as f32;
                }
            }

            let bag_id = format!("bag-{class}-{index:04}");
            let meta = BagMeta {
                bag_id: bag_id.clone(),
                patient_id: format!("patient-{class}-{:04}", index / config.bags_per_patient),
                label: class,
            };
            entries.push(ManifestEntry {
                bag_id: bag_id.clone(),
                patient_id: meta.patient_id.clone(),
                label: class,
                path: format!("bags/{bag_id}.milb"),
                instance_count: Some(n),
            });
            bags.push(FeatureBag::new(meta, features)?);
            witnesses.push(is_witness);
        }
    }

    Ok(SyntheticDataset {
        dataset: Dataset {
            manifest: DatasetManifest {
                class_count: config.class_count,
                feature_width: config.feature_width,
                entries,
            },
            bags,
        },
        signatures,
        witnesses,
    })
}

/// Gram–Schmidt over Gaussian draws, each row rescaled to `norm`.
fn orthogonal_signatures(count: usize, width: usize, norm: f64, rng: &mut impl Rng) -> Array2<f64> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Array1<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        for u in &basis {
            let proj = v.dot(u);
            v.scaled_add(-proj, u);
        }
        let len = v.dot(&v).sqrt();
        if len > 1e-6 {
            basis.push(v / len);
        }
    }
    let mut out = Array2::zeros((count, width));
    for (mut row, u) in out.rows_mut().into_iter().zip(basis) {
        row.assign(&(u * norm));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bag::encode_features;

    #[test]
    fn same_seed_same_bytes() {
        let config = SynthConfig {
            bags_per_class: 4,
            n_range: (3, 9),
            ..SynthConfig::default()
        };
        let a = synth_generate(&config, 11).unwrap();
        let b = synth_generate(&config, 11).unwrap();
        assert_eq!(a.dataset.manifest, b.dataset.manifest);
        for (x, y) in a.dataset.bags.iter().zip(&b.dataset.bags) {
            assert_eq!(
                encode_features(&x.features).unwrap(),
                encode_features(&y.features).unwrap()
            );
        }
        let c = synth_generate(&config, 12).unwrap();
        assert_ne!(a.dataset.bags[0].features, c.dataset.bags[0].features);
    }

    #[test]
    fn counts_per_class() {
        let config = SynthConfig {
            class_count: 3,
            bags_per_class: 50,
            n_range: (1, 4),
            ..SynthConfig::default()
        };
        let out = synth_generate(&config, 0).unwrap();
        let entries = &out.dataset.manifest.entries;
        assert_eq!(entries.len(), 150);
        for class in 0..3 {
            assert_eq!(entries.iter().filter(|e| e.label == class).count(), 50);
        }
    }

    #[test]
    fn signatures_are_orthogonal() {
        let out = synth_generate(&SynthConfig::default(), 3).unwrap();
        let gram = out.signatures.dot(&out.signatures.t());
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 4.0 } else { 0.0 };
                assert!((gram[[i, j]] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let bad = [
            SynthConfig { class_count: 1, ..SynthConfig::default() },
            SynthConfig { n_range: (0, 5), ..SynthConfig::default() },
            SynthConfig { n_range: (10, 5), ..SynthConfig::default() },
            SynthConfig { n_range: (1, MAX_INSTANCES + 1), ..SynthConfig::default() },
            SynthConfig { feature_width: 2, ..SynthConfig::default() },
        ];
        for config in bad {
            assert!(synth_generate(&config, 0).is_err(), "{config:?}");
        }
    }

    #[test]
    fn witness_instances_are_separable() {
        // Nearest-signature oracle over every generated witness instance.
        let config = SynthConfig {
            witness_rate: 0.3,
            noise_scale: 0.5,
            bags_per_class: 20,
            ..SynthConfig::default()
        };
        let out = synth_generate(&config, 5).unwrap();
        let (mut correct, mut total) = (0usize, 0usize);
        for (bag, witness) in out.dataset.bags.iter().zip(&out.witnesses) {
            for (row, _) in bag.features.rows().into_iter().zip(witness).filter(|(_, w)| **w) {
                let nearest = (0..config.class_count)
                    .map(|c| {
                        let d: f64 = row
                            .iter()
                            .zip(out.signatures.row(c))
                            .map(|(&x, &s)| (f64::from(x) - s).powi(2))
                            .sum();
                        (c, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                correct += usize::from(nearest == bag.label);
                total += 1;
            }
        }
        assert!(total > 0);
        let accuracy = correct as f64 / total as f64;
        assert!(accuracy >= 0.9, "witness accuracy {accuracy}");
    }
}
