//! Synthetic classification with a short informative prefix followed by a
//! long stretch of pure noise.
//!
//! Each class owns a fixed random prototype of `content_len × input_dim`
//! values. A sample copies its class prototype, perturbed by Gaussian
//! jitter, into the first `content_len` steps; the remaining `pad_len` steps
//! are `U(0, 1)` noise carrying no information about the label.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SequenceDataset, Split, TargetSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoisePaddedConfig {
    pub n_samples: usize,
    pub content_len: usize,
    pub pad_len: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    /// Standard deviation of the jitter added to the prototypes.
    pub content_noise: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for NoisePaddedConfig {
    fn default() -> Self {
        Self {
            n_samples: 4000,
            content_len: 32,
            pad_len: 968,
            n_classes: 4,
            input_dim: 8,
            content_noise: 0.5,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl NoisePaddedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.content_len == 0 || self.input_dim == 0 {
            return Err(Error::Config(
                "sample count, content length and input width must be positive".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes, got {}",
                self.n_classes
            )));
        }
        if !(self.content_noise >= 0.0 && self.content_noise.is_finite()) {
            return Err(Error::Config(format!(
                "content noise must be non-negative, got {}",
                self.content_noise
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.content_len + self.pad_len
    }
}

/// Generates the dataset with labels balanced round-robin and seeded
/// split tags.
pub fn noise_padded_task(cfg: &NoisePaddedConfig) -> Result<SequenceDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Matrix> = (0..cfg.n_classes)
        .map(|_| Matrix::from_fn(cfg.content_len, cfg.input_dim, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let len = cfg.seq_len();
    let mut inputs = Vec::with_capacity(cfg.n_samples);
    let mut labels = Vec::with_capacity(cfg.n_samples);
    for s in 0..cfg.n_samples {
        let label = s % cfg.n_classes;
        let proto = &prototypes[label];
        let x = Matrix::from_fn(len, cfg.input_dim, |n, k| {
            if n < cfg.content_len {
                proto.get(n, k) + cfg.content_noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                rng.gen::<f64>()
            }
        });
        inputs.push(x);
        labels.push(label);
    }
    let mut ds = SequenceDataset::new(
        inputs,
        TargetSet::Classes {
            labels,
            n_classes: cfg.n_classes,
        },
        vec![Split::Train; cfg.n_samples],
    )?;
    ds.resplit(cfg.valid_fraction, cfg.test_fraction, cfg.seed ^ 0x5eed)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(pad_len: usize) -> NoisePaddedConfig {
        NoisePaddedConfig {
            n_samples: 40,
            content_len: 5,
            pad_len,
            n_classes: 4,
            input_dim: 3,
            ..Default::default()
        }
    }

    #[test]
    fn geometry_and_balance() {
        let ds = noise_padded_task(&small(20)).unwrap();
        assert_eq!(ds.len(), 40);
        assert!(ds.inputs.iter().all(|x| x.shape() == (25, 3)));
        let TargetSet::Classes { labels, .. } = &ds.targets else {
            panic!()
        };
        for c in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert_eq!(ds.split_counts(), [32, 4, 4]);
    }

    #[test]
    fn padding_is_unit_uniform_noise() {
        let ds = noise_padded_task(&small(200)).unwrap();
        let pad: Vec<f64> = ds
            .inputs
            .iter()
            .flat_map(|x| (5..205).flat_map(move |n| x.row(n).to_vec()))
            .collect();
        assert!(pad.iter().all(|v| (0.0..1.0).contains(v)));
        let mean = pad.iter().sum::<f64>() / pad.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn padding_is_independent_of_the_label() {
        // Class-conditional means of the padding agree to sampling accuracy,
        // while those of the content differ.
        let ds = noise_padded_task(&NoisePaddedConfig {
            n_samples: 400,
            ..small(50)
        })
        .unwrap();
        let TargetSet::Classes { labels, .. } = &ds.targets else {
            panic!()
        };
        let mean_over = |rows: std::ops::Range<usize>, c: usize| {
            let mut s = 0.0;
            let mut k = 0;
            for (x, &l) in ds.inputs.iter().zip(labels) {
                if l == c {
                    for n in rows.clone() {
                        s += x.get(n, 0);
                        k += 1;
                    }
                }
            }
            s / k as f64
        };
        let pad: Vec<f64> = (0..4).map(|c| mean_over(5..55, c)).collect();
        let spread = pad.iter().cloned().fold(f64::MIN, f64::max) - pad.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.03, "{pad:?}");
        let content: Vec<f64> = (0..4).map(|c| mean_over(0..1, c)).collect();
        let spread =
            content.iter().cloned().fold(f64::MIN, f64::max) - content.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.1, "{content:?}");
    }

    #[test]
    fn zero_padding_gives_plain_classification() {
        let ds = noise_padded_task(&small(0)).unwrap();
        assert!(ds.inputs.iter().all(|x| x.rows() == 5));
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            noise_padded_task(&small(7)).unwrap(),
            noise_padded_task(&small(7)).unwrap()
        );
    }
}
