//! Step-by-step forward runs that keep every state and input transform.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::recurrence::{step_lane, LayerState};

/// Everything one layer did over a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `states[n]` for `n = 0..=N`; `states[0]` is the initial state.
    pub states: Vec<LayerState>,
    /// Input transform consumed by step `n` in row `n − 1`, `N × m`.
    pub drive: Matrix,
    /// Effective per-neuron steps `dt·σ̂(c_i)`.
    pub h: Vec<f64>,
}

impl LayerTrace {
    pub fn steps(&self) -> usize {
        self.drive.rows()
    }

    /// Pre-activation `w ⊙ y_{n−1} + drive_n + b` used by step `n ≥ 1`.
    pub fn preactivation(&self, w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let y = &self.states[n - 1].y;
        let d = self.drive.row(n - 1);
        (0..w.len()).map(|i| w[i] * y[i] + d[i] + b[i]).collect()
    }
}

/// Runs `model` (evaluation mode, no dropout) over one input sequence,
/// starting from `initial` states or zeros.
pub fn trace_model(model: &Model, input: &Matrix, initial: Option<&[LayerState]>) -> Result<Vec<LayerTrace>> {
    model.validate()?;
    let cfg = &model.config;
    let m = cfg.hidden;
    if input.rows() == 0 || input.cols() != cfg.input_dim {
        return Err(Error::Contract(format!(
            "input must be a non-empty N x {} array, got {}x{}",
            cfg.input_dim,
            input.rows(),
            input.cols()
        )));
    }
    let start: Vec<LayerState> = match initial {
        Some(s) if s.len() == cfg.layers && s.iter().all(|st| st.hidden() == m) => s.to_vec(),
        Some(_) => {
            return Err(Error::Contract(
                "one initial state of the hidden size is needed per layer".into(),
            ))
        }
        None => vec![LayerState::zeros(m); cfg.layers],
    };
    let steps = input.rows();
    let mut traces: Vec<LayerTrace> = model
        .layers
        .iter()
        .zip(&cfg.dt)
        .zip(start)
        .map(|((p, &dt), s)| {
            let mut states = Vec::with_capacity(steps + 1);
            states.push(s);
            LayerTrace {
                states,
                drive: Matrix::zeros(steps, m),
                h: p.effective_steps(dt),
            }
        })
        .collect();
    for n in 1..=steps {
        for (l, p) in model.layers.iter().enumerate() {
            let mut drive = if l == 0 {
                p.v.matvec(input.row(n - 1))
            } else {
                p.v.matvec(&traces[l - 1].states[n].y)
            };
            if let (Some(src), Some(lam)) = (cfg.skip_source(l), &p.lambda) {
                let r = lam.matvec(&traces[src].states[n].y);
                drive.iter_mut().zip(r).for_each(|(d, v)| *d += v);
            }
            let t = &mut traces[l];
            let prev = &t.states[n - 1];
            let mut next = LayerState::zeros(m);
            for i in 0..m {
                let (y, z) = step_lane(prev.y[i], prev.z[i], drive[i], p.w[i], p.b[i], t.h[i], cfg.alpha);
                next.y[i] = y;
                next.z[i] = z;
            }
            t.drive.row_mut(n - 1).copy_from_slice(&drive);
            t.states.push(next);
        }
    }
    Ok(traces)
}
