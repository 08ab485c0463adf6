//! Closed-form bounds on gradients and hidden states.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, ReadoutKind};

use super::trace::LayerTrace;

/// `β = max(1 + 2α, 4α²)`.
pub fn beta(alpha: f64) -> f64 {
    (1.0 + 2.0 * alpha).max(4.0 * alpha * alpha)
}

/// Constants and value of the gradient bound for one model and horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub gamma: f64,
    pub beta: f64,
    pub f: f64,
    pub delta: f64,
    pub vbar: f64,
    pub ybar: f64,
    /// Horizon `N·dt`.
    pub t: f64,
    pub dt: f64,
    pub bound: f64,
    /// Largest absolute gradient entry, once supplied.
    pub observed_max_grad: Option<f64>,
    pub satisfied: Option<bool>,
}

impl BoundReport {
    pub fn with_observed(mut self, max_abs_grad: f64) -> Self {
        self.observed_max_grad = Some(max_abs_grad);
        self.satisfied = Some(max_abs_grad <= self.bound);
        self
    }
}

/// Bound on `|∂E/∂θ|` for every parameter of a fully connected stack with an
/// identity readout trained with the sequence MSE over `n_steps` steps
/// against targets with `max |ȳ| ≤ ybar`.
///
/// Layers with different time steps are bounded with the largest one.
pub fn gradient_bound(model: &Model, ybar: f64, n_steps: usize) -> Result<BoundReport> {
    model.validate()?;
    let cfg = &model.config;
    let alpha = cfg.alpha;
    if alpha <= 0.0 {
        return Err(Error::Domain("the gradient bound needs alpha > 0".into()));
    }
    if cfg.skip.is_some() {
        return Err(Error::Domain(
            "the gradient bound covers fully connected stacks only".into(),
        ));
    }
    if cfg.readout != ReadoutKind::Identity {
        return Err(Error::Domain("the gradient bound needs the identity readout".into()));
    }
    if !(ybar >= 0.0 && ybar.is_finite()) || n_steps == 0 {
        return Err(Error::Contract(
            "target bound must be finite and non-negative, horizon positive".into(),
        ));
    }
    let dt = cfg.max_dt();
    let t = n_steps as f64 * dt;
    let top = model.layers.last().expect("validated model has layers");
    let w_top = top.w.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let g = 2.0_f64.max(w_top + alpha);
    let gamma = g + g * g / 2.0;
    let beta = beta(alpha);
    let vbar = model.layers.iter().map(|p| p.v.inf_norm().max(1.0)).product::<f64>();
    let growth = 1.0 + 2.0 * beta * t;
    let f = (2.0 / alpha * growth).sqrt();
    let delta = 2.0 + growth.sqrt() + (2.0 + alpha) * f;
    let layers_factor = (1.0 - dt.powi(cfg.layers as i32)) / (1.0 - dt);
    let bound = layers_factor * t * (1.0 + 2.0 * gamma * t) * vbar * (ybar + f) * delta;
    Ok(BoundReport {
        gamma,
        beta,
        f,
        delta,
        vbar,
        ybar,
        t,
        dt,
        bound,
        observed_max_grad: None,
        satisfied: None,
    })
}

/// `(|y| bound, |z| bound)` at time `t` from a zero initial state.
pub fn state_bounds(alpha: f64, t: f64) -> Result<(f64, f64)> {
    if alpha <= 0.0 {
        return Err(Error::Domain("state bounds need alpha > 0".into()));
    }
    let growth = 1.0 + 2.0 * beta(alpha) * t;
    Ok(((2.0 / alpha * growth).sqrt(), (2.0 * growth).sqrt()))
}

/// Smallest slack between the state bounds and a set of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateBoundReport {
    /// `min over (ℓ, n)` of `bound_y(t_n) − max_i |y_i|`.
    pub min_margin_y: f64,
    pub min_margin_z: f64,
    /// `(layer, step)` of the smallest margin, 0-based layer.
    pub worst_y: (usize, usize),
    pub worst_z: (usize, usize),
    pub steps_checked: usize,
}

impl StateBoundReport {
    pub fn holds(&self) -> bool {
        self.min_margin_y >= 0.0 && self.min_margin_z >= 0.0
    }
}

/// Checks every state of every layer against the bounds, with layer `ℓ`
/// at time `t_n = n·dts[ℓ]`.
pub fn state_bound_check(traces: &[LayerTrace], alpha: f64, dts: &[f64]) -> Result<StateBoundReport> {
    if traces.len() != dts.len() {
        return Err(Error::Contract(format!(
            "{} traces but {} time steps",
            traces.len(),
            dts.len()
        )));
    }
    let mut report = StateBoundReport {
        min_margin_y: f64::INFINITY,
        min_margin_z: f64::INFINITY,
        worst_y: (0, 0),
        worst_z: (0, 0),
        steps_checked: 0,
    };
    let extent = |v: &[f64]| {
        if v.iter().all(|x| x.is_finite()) {
            v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
        } else {
            f64::INFINITY
        }
    };
    for (l, (trace, &dt)) in traces.iter().zip(dts).enumerate() {
        for (n, s) in trace.states.iter().enumerate() {
            let (by, bz) = state_bounds(alpha, n as f64 * dt)?;
            let my = by - extent(&s.y);
            let mz = bz - extent(&s.z);
            if my < report.min_margin_y {
                report.min_margin_y = my;
                report.worst_y = (l, n);
            }
            if mz < report.min_margin_z {
                report.min_margin_z = mz;
                report.worst_z = (l, n);
            }
            report.steps_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::trace::trace_model;
    use crate::linalg::Matrix;
    use crate::model::{GradMode, Mode, ModelConfig, ReadoutSite, SeqBatch, Targets};
    use crate::recurrence::LayerState;
    use crate::testutil::rng;
    use crate::train::init_params;
    use rand::Rng;

    fn one_neuron(w: f64, v: f64, alpha: f64, dt: f64) -> Model {
        let cfg = ModelConfig::new(1, 1, 1, 1, dt, alpha, ReadoutSite::PerStep).identity_readout();
        let mut m = Model::zeros(cfg).unwrap();
        m.layers[0].w[0] = w;
        m.layers[0].v.set(0, 0, v);
        m
    }

    #[test]
    fn beta_and_gamma_examples() {
        assert_eq!(beta(1.0), 4.0);
        assert_eq!(beta(0.1), 1.2);
        let r = gradient_bound(&one_neuron(0.5, 2.0, 1.0, 0.01), 1.0, 100).unwrap();
        assert_eq!(r.gamma, 4.0);
        assert_eq!(r.vbar, 2.0);
    }

    #[test]
    fn bound_matches_independent_evaluation() {
        // Reference values evaluated separately in double precision.
        let r = gradient_bound(&one_neuron(0.5, 2.0, 1.0, 0.01), 1.0, 100).unwrap();
        assert!((r.t - 1.0).abs() < 1e-15);
        assert!((r.bound - 1672.940258945177).abs() < 1e-9, "{}", r.bound);

        let cfg = ModelConfig::new(2, 2, 1, 2, 0.1, 0.5, ReadoutSite::PerStep).identity_readout();
        let mut m = Model::zeros(cfg).unwrap();
        m.layers[1].w = vec![-1.8, 0.3];
        m.layers[0].v = Matrix::from_rows(&[vec![0.7], vec![-0.2]]).unwrap();
        m.layers[1].v = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.5]]).unwrap();
        let r = gradient_bound(&m, 0.5, 50).unwrap();
        assert_eq!(r.beta, 2.0);
        assert!((r.gamma - 4.945).abs() < 1e-12);
        assert!((r.f - 9.16515138991168).abs() < 1e-12);
        assert!((r.delta - 29.495454169735037).abs() < 1e-12);
        assert!((r.bound / 237306.07901011518 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn inapplicable_settings_are_domain_errors() {
        assert!(matches!(
            gradient_bound(&one_neuron(0.5, 1.0, 0.0, 0.01), 1.0, 10),
            Err(Error::Domain(_))
        ));
        let affine = init_params(&ModelConfig::new(1, 2, 1, 1, 0.01, 1.0, ReadoutSite::PerStep), 0).unwrap();
        assert!(matches!(gradient_bound(&affine, 1.0, 10), Err(Error::Domain(_))));
        let cfg = ModelConfig::new(3, 2, 1, 2, 0.01, 1.0, ReadoutSite::PerStep)
            .with_skip(2)
            .identity_readout();
        assert!(matches!(
            gradient_bound(&init_params(&cfg, 0).unwrap(), 1.0, 10),
            Err(Error::Domain(_))
        ));
        assert!(matches!(state_bounds(0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_gradients_respect_the_bound() {
        let mut r = rng(11);
        let cfg = ModelConfig::new(2, 8, 3, 8, 0.01, 1.0, ReadoutSite::PerStep).identity_readout();
        let model = init_params(&cfg, 3).unwrap();
        let n = 100;
        let x = Matrix::from_fn(n, 3, |_, _| r.gen_range(-1.0..1.0));
        let y = Matrix::from_fn(n, 8, |_, _| r.gen_range(-1.0..1.0));
        let ybar = y.max_abs();
        let res = model
            .loss_and_grad(
                &SeqBatch::from_sequences(&[x]).unwrap(),
                &Targets::Sequence(SeqBatch::from_sequences(&[y]).unwrap()),
                Mode::Eval,
                None,
                GradMode::Stored,
            )
            .unwrap();
        let report = gradient_bound(&model, ybar, n)
            .unwrap()
            .with_observed(res.grads.max_abs());
        assert_eq!(report.satisfied, Some(true));
        assert!(report.observed_max_grad.unwrap() > 0.0);
    }

    #[test]
    fn zero_trajectory_has_full_margin() {
        let t = LayerTrace {
            states: vec![LayerState::zeros(3); 11],
            drive: Matrix::zeros(10, 3),
            h: vec![0.05; 3],
        };
        let r = state_bound_check(&[t], 1.0, &[0.1]).unwrap();
        assert!((r.min_margin_y - 2.0_f64.sqrt()).abs() < 1e-15);
        assert!((r.min_margin_z - 2.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.worst_y, (0, 0));
        assert!(r.holds());
        assert_eq!(state_bounds(1.0, 0.0).unwrap(), (2.0_f64.sqrt(), 2.0_f64.sqrt()));
    }

    #[test]
    fn non_finite_states_fail() {
        let mut s = LayerState::zeros(2);
        s.y[1] = f64::NAN;
        let t = LayerTrace {
            states: vec![LayerState::zeros(2), s],
            drive: Matrix::zeros(1, 2),
            h: vec![0.05; 2],
        };
        let r = state_bound_check(&[t], 1.0, &[0.1]).unwrap();
        assert!(!r.holds());
        assert_eq!(r.worst_y, (0, 1));
    }

    #[test]
    fn initialised_model_stays_inside_the_bounds() {
        let mut r = rng(12);
        let cfg = ModelConfig::new(2, 8, 2, 1, 0.01, 1.0, ReadoutSite::PerStep);
        let model = init_params(&cfg, 5).unwrap();
        let x = Matrix::from_fn(10_000, 2, |_, _| r.gen_range(-1.0..1.0));
        let traces = trace_model(&model, &x, None).unwrap();
        let rep = state_bound_check(&traces, 1.0, &cfg.dt).unwrap();
        assert!(rep.holds(), "{rep:?}");
        assert_eq!(rep.steps_checked, 2 * 10_001);
    }
}
