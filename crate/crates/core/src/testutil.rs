//! Random instances shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::Matrix;
use crate::recurrence::{LayerParams, LayerState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params(r: &mut impl Rng, m: usize, d: usize, residual: bool) -> LayerParams {
    LayerParams {
        w: (0..m).map(|_| r.gen_range(-1.0..1.0)).collect(),
        v: Matrix::from_fn(m, d, |_, _| r.gen_range(-0.8..0.8)),
        b: (0..m).map(|_| r.gen_range(-0.5..0.5)).collect(),
        c: (0..m).map(|_| r.gen_range(-1.0..1.0)).collect(),
        lambda: residual.then(|| Matrix::from_fn(m, m, |_, _| r.gen_range(-0.5..0.5))),
    }
}

pub fn random_state(r: &mut impl Rng, m: usize, scale: f64) -> LayerState {
    LayerState {
        y: (0..m).map(|_| r.gen_range(-scale..scale)).collect(),
        z: (0..m).map(|_| r.gen_range(-scale..scale)).collect(),
    }
}

/// Model with every parameter drawn uniformly; `c` and `w` get wider ranges.
pub fn random_model(r: &mut impl Rng, config: crate::model::ModelConfig) -> crate::model::Model {
    let mut model = crate::model::Model::zeros(config).expect("valid test config");
    for (name, t) in model.tensors_mut() {
        let s = if name.ends_with(".c") || name.ends_with(".w") {
            1.0
        } else {
            0.6
        };
        t.iter_mut().for_each(|v| *v = r.gen_range(-s..s));
    }
    model
}

pub fn random_batch(r: &mut impl Rng, steps: usize, batch: usize, width: usize) -> crate::model::SeqBatch {
    let mut x = crate::model::SeqBatch::zeros(steps, batch, width);
    x.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    x
}
