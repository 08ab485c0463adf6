//! First-order optimizers over named parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Which tensors the optimizer may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    All,
    /// Only the affine readout; the recurrent layers stay frozen.
    ReadoutOnly,
}

impl Trainable {
    pub fn admits(self, tensor: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::ReadoutOnly => tensor.starts_with("readout."),
        }
    }
}

/// Optimizer hyperparameters, moment buffers and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moments, one buffer per tensor.
    pub m: Vec<Vec<f64>>,
    /// Second moments, one buffer per tensor.
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    /// Zeroed buffers for tensors of the given lengths.
    pub fn for_shapes(kind: OptimizerKind, lr: f64, lens: &[usize]) -> Self {
        let bufs = || match kind {
            OptimizerKind::Adam => lens.iter().map(|&n| vec![0.0; n]).collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: bufs(),
            v: bufs(),
        }
    }

    /// Zeroed buffers mirroring the model's parameters.
    pub fn new(kind: OptimizerKind, lr: f64, model: &Model) -> Self {
        let lens: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
        Self::for_shapes(kind, lr, &lens)
    }

    /// Applies one update to named tensors. `params` and `grads` must list
    /// the same tensors in the same order. Tensors not admitted by
    /// `trainable` are left as they are.
    pub fn update(
        &mut self,
        params: Vec<(String, &mut [f64])>,
        grads: Vec<(String, &[f64])>,
        trainable: Trainable,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        if self.kind == OptimizerKind::Adam && self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        for ((name, p), (gname, g)) in params.iter().zip(&grads) {
            if name != gname || p.len() != g.len() {
                return Err(Error::Contract(format!(
                    "gradient tensor {gname} does not match parameter {name}"
                )));
            }
            if !trainable.admits(name) {
                continue;
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient {} in {name}[{i}]", g[i])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, ((name, p), (_, g))) in params.into_iter().zip(grads).enumerate() {
            if !trainable.admits(&name) {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => p.iter_mut().zip(g).for_each(|(p, g)| *p -= self.lr * g),
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
            }
            if let Some(i) = p.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("update made {name}[{i}] non-finite")));
            }
        }
        Ok(())
    }

    /// One update of every admitted model tensor.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, trainable: Trainable) -> Result<()> {
        self.update(model.tensors_mut(), grads.tensors(), trainable)
    }
}

/// Rescales the admitted gradients so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelGrads, max_norm: f64, trainable: Trainable) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .filter(|(n, _)| trainable.admits(n))
        .flat_map(|(_, t)| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (n, t) in grads.tensors_mut() {
            if trainable.admits(&n) {
                t.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
