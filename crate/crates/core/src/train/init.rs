//! Random parameter initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::{Model, ModelConfig};

/// Negative slope used for the Kaiming-uniform bound of input weights.
pub const KAIMING_SLOPE: f64 = 8.0;

/// Half-width `sqrt(6 / ((1 + a²)·fan_in))` of the Kaiming-uniform range.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / ((1.0 + KAIMING_SLOPE * KAIMING_SLOPE) * fan_in as f64)).sqrt()
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, r: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-r..r))
}

/// Draws a model from the standard initialization:
///
/// * `w ~ U(0, 1)`, `b = 0`, `c ~ U(−0.1, 0.1)`;
/// * input and residual weights Kaiming-uniform over their fan-in;
/// * readout weights and bias `~ U(−1/√m, 1/√m)`.
///
/// The same seed always yields bit-identical parameters.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::zeros(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = config.hidden;
    for (l, p) in model.layers.iter_mut().enumerate() {
        p.w.iter_mut().for_each(|w| *w = rng.gen_range(0.0..1.0));
        p.c.iter_mut().for_each(|c| *c = rng.gen_range(-0.1..0.1));
        let fan_in = config.layer_input_dim(l);
        p.v = uniform_matrix(&mut rng, m, fan_in, kaiming_bound(fan_in));
        if let Some(lam) = p.lambda.as_mut() {
            *lam = uniform_matrix(&mut rng, m, m, kaiming_bound(m));
        }
    }
    if let Some(r) = model.readout.as_mut() {
        let bound = 1.0 / (m as f64).sqrt();
        r.w = uniform_matrix(&mut rng, r.w.rows(), r.w.cols(), bound);
        r.b.iter_mut().for_each(|b| *b = rng.gen_range(-bound..bound));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReadoutSite;

    fn config() -> ModelConfig {
        ModelConfig::new(4, 12, 5, 3, 0.1, 1.0, ReadoutSite::PerStep).with_skip(2)
    }

    #[test]
    fn kaiming_bound_for_fan_in_100() {
        // sqrt(6 / 6500)
        assert!((kaiming_bound(100) - 0.030_382_181_012_51).abs() < 1e-15);
    }

    #[test]
    fn ranges_hold() {
        for seed in 0..5 {
            let model = init_params(&config(), seed).unwrap();
            for (l, p) in model.layers.iter().enumerate() {
                assert!(p.w.iter().all(|w| (0.0..1.0).contains(w)));
                assert!(p.c.iter().all(|c| (-0.1..0.1).contains(c)));
                assert!(p.b.iter().all(|&b| b == 0.0));
                let r = kaiming_bound(config().layer_input_dim(l));
                assert!(p.v.max_abs() < r);
                if let Some(lam) = &p.lambda {
                    assert!(lam.max_abs() < kaiming_bound(12));
                }
            }
            let r = model.readout.as_ref().unwrap();
            assert!(r.w.max_abs() < 1.0 / 12f64.sqrt());
            model.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_same_model() {
        assert_eq!(init_params(&config(), 3).unwrap(), init_params(&config(), 3).unwrap());
        assert_ne!(init_params(&config(), 3).unwrap(), init_params(&config(), 4).unwrap());
    }

    #[test]
    fn input_weights_fill_their_range() {
        let cfg = ModelConfig::new(1, 64, 100, 1, 0.1, 1.0, ReadoutSite::Final);
        let model = init_params(&cfg, 0).unwrap();
        let v = &model.layers[0].v;
        let r = kaiming_bound(100);
        assert!(v.max_abs() > 0.99 * r);
        let mean = v.data().iter().sum::<f64>() / v.data().len() as f64;
        let var = v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.data().len() as f64;
        // Uniform on (−r, r) has variance r²/3.
        assert!((var / (r * r / 3.0) - 1.0).abs() < 0.05);
    }
}
