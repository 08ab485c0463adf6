//! Lorenz 96 trajectories for one-step-ahead forecasting.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SequenceDataset, Split, TargetSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lorenz96Config {
    /// Forcing constant `F`.
    pub forcing: f64,
    /// Number of cyclically coupled components.
    pub dim: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Recorded steps per sequence.
    pub seq_len: usize,
    pub seed: u64,
    /// Internal integration step.
    pub step: f64,
    /// Internal steps between recorded states.
    pub stride: usize,
    /// Internal steps discarded before recording starts.
    pub burn_in: usize,
    /// Recorded steps between an input and its target.
    pub horizon: usize,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            forcing: 0.9,
            dim: 5,
            n_train: 128,
            n_valid: 128,
            n_test: 128,
            seq_len: 2000,
            seed: 0,
            step: 0.01,
            stride: 5,
            burn_in: 1000,
            horizon: 1,
        }
    }
}

impl Lorenz96Config {
    pub fn validate(&self) -> Result<()> {
        if !self.forcing.is_finite() {
            return Err(Error::Config(format!("forcing must be finite, got {}", self.forcing)));
        }
        if self.dim < 4 {
            return Err(Error::Config(format!(
                "Lorenz 96 needs at least 4 components, got {}",
                self.dim
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!(
                "sequence length must be at least 2, got {}",
                self.seq_len
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) || self.stride == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "integration step, stride and horizon must be positive".into(),
            ));
        }
        if self.n_train + self.n_valid + self.n_test == 0 {
            return Err(Error::Config("at least one sequence must be requested".into()));
        }
        Ok(())
    }
}

/// Right-hand side `x'_i = (x_{i+1} − x_{i−2}) x_{i−1} − x_i + F`, indices
/// taken cyclically.
pub fn lorenz96_rhs(x: &[f64], forcing: f64, out: &mut [f64]) {
    let k = x.len();
    for i in 0..k {
        let next = x[(i + 1) % k];
        let prev = x[(i + k - 1) % k];
        let prev2 = x[(i + k - 2) % k];
        out[i] = (next - prev2) * prev - x[i] + forcing;
    }
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step(x: &mut [f64], forcing: f64, h: f64) {
    let k = x.len();
    let mut k1 = vec![0.0; k];
    let mut k2 = vec![0.0; k];
    let mut k3 = vec![0.0; k];
    let mut k4 = vec![0.0; k];
    let mut tmp = vec![0.0; k];
    lorenz96_rhs(x, forcing, &mut k1);
    for i in 0..k {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    lorenz96_rhs(&tmp, forcing, &mut k2);
    for i in 0..k {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    lorenz96_rhs(&tmp, forcing, &mut k3);
    for i in 0..k {
        tmp[i] = x[i] + h * k3[i];
    }
    lorenz96_rhs(&tmp, forcing, &mut k4);
    for i in 0..k {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Records `len` states, `stride` internal steps apart, starting from `x`
/// (which is advanced in place). Row 0 is one stride past the start.
pub fn integrate(x: &mut [f64], forcing: f64, h: f64, stride: usize, len: usize) -> Matrix {
    let mut out = Matrix::zeros(len, x.len());
    for n in 0..len {
        for _ in 0..stride {
            rk4_step(x, forcing, h);
        }
        out.row_mut(n).copy_from_slice(x);
    }
    out
}

/// Random initial condition near the equilibrium `x_i = F`, burned in.
fn initial_state(cfg: &Lorenz96Config, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let mut x: Vec<f64> = (0..cfg.dim).map(|_| cfg.forcing + rng.gen_range(-0.5..0.5)).collect();
    for _ in 0..cfg.burn_in {
        rk4_step(&mut x, cfg.forcing, cfg.step);
    }
    x
}

/// Generates train, validation and test sequences. Inputs are recorded
/// states `x_n`, targets are `x_{n + horizon}`.
pub fn lorenz96_generate(cfg: &Lorenz96Config) -> Result<SequenceDataset> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_valid + cfg.n_test;
    let pairs: Vec<(Matrix, Matrix)> = (0..total)
        .into_par_iter()
        .map(|s| {
            let mut x = initial_state(cfg, s as u64);
            let traj = integrate(&mut x, cfg.forcing, cfg.step, cfg.stride, cfg.seq_len + cfg.horizon);
            let input = Matrix::from_fn(cfg.seq_len, cfg.dim, |n, i| traj.get(n, i));
            let target = Matrix::from_fn(cfg.seq_len, cfg.dim, |n, i| traj.get(n + cfg.horizon, i));
            (input, target)
        })
        .collect();
    let splits = std::iter::repeat_n(Split::Train, cfg.n_train)
        .chain(std::iter::repeat_n(Split::Valid, cfg.n_valid))
        .chain(std::iter::repeat_n(Split::Test, cfg.n_test))
        .collect();
    let (inputs, targets) = pairs.into_iter().unzip();
    SequenceDataset::new(inputs, TargetSet::Sequences(targets), splits)
}
