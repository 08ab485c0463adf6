//! Gradient-magnitude probes for single layers and deep stacks.
//!
//! The single-layer probe isolates the contribution of one neuron's `w` at
//! step `k` to the per-step loss `E_n = ½‖y_n − ȳ_n‖²`:
//!
//! ```text
//! ∂E_n/∂X_n · ∂X_n/∂X_k · ∂⁺X_k/∂w_p
//! ```
//!
//! where `∂⁺` differentiates only the explicit dependence of step `k`. Its
//! leading-order value is `−h_p²·n·tanh'(A_{k−1})·y_{k−1}·(y_n − ȳ_n)_p`.
//!
//! The deep-stack probe replaces `∂E_n/∂X_n` by the same-step path from the
//! first to the last layer, whose length in layer hops sets the power of the
//! time step at which the contribution decays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Model, ModelConfig, ReadoutSite};
use crate::recurrence::{sigma_hat, LayerParams, LayerState};

use super::jacobian::jacobian_chain;
use super::trace::{trace_model, LayerTrace};

fn tanh_prime(a: f64) -> f64 {
    let t = a.tanh();
    1.0 - t * t
}

/// Input, per-step targets and initial states for a probe run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub input: Matrix,
    pub target: Matrix,
    pub initial: Vec<LayerState>,
}

/// `∂⁺X_k/∂w_p` on neuron `p`: `(∂⁺y, ∂⁺z)`.
fn explicit_w_derivative(params: &LayerParams, trace: &LayerTrace, p: usize, k: usize) -> [f64; 2] {
    let a = trace.preactivation(&params.w, &params.b, k)[p];
    let h = trace.h[p];
    let dz = -h * tanh_prime(a) * trace.states[k - 1].y[p];
    [h * dz, dz]
}

/// Exact contribution of `w_p` at step `k` to `E_n` of a single layer,
/// through the dense Jacobian chain.
pub fn gradient_contribution(
    params: &LayerParams,
    trace: &LayerTrace,
    alpha: f64,
    target_n: &[f64],
    p: usize,
    k: usize,
    n: usize,
) -> Result<f64> {
    let m = params.hidden();
    if p >= m || target_n.len() != m {
        return Err(Error::Contract(format!(
            "neuron {p} or target width {} does not fit m = {m}",
            target_n.len()
        )));
    }
    if k == 0 {
        return Err(Error::Contract("step k counts from 1".into()));
    }
    let chain = jacobian_chain(params, trace, alpha, k, n)?;
    let [dy, dz] = explicit_w_derivative(params, trace, p, k);
    let y_n = &trace.states[n].y;
    Ok((0..m)
        .map(|i| (y_n[i] - target_n[i]) * (chain.get(2 * i, 2 * p) * dy + chain.get(2 * i, 2 * p + 1) * dz))
        .sum())
}

/// Leading-order value `−h_p²·n·tanh'(A_{k−1})·y_{k−1}·(y_n − ȳ_n)_p`.
pub fn leading_term(params: &LayerParams, trace: &LayerTrace, target_n: &[f64], p: usize, k: usize, n: usize) -> f64 {
    let a = trace.preactivation(&params.w, &params.b, k)[p];
    let h = trace.h[p];
    -h * h * n as f64 * tanh_prime(a) * trace.states[k - 1].y[p] * (trace.states[n].y[p] - target_n[p])
}

/// Least-squares slope of `ln |y|` against `ln x`.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract(
            "a power-law fit needs at least two paired points".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite() || *v == 0.0) || xs.iter().any(|&x| x <= 0.0) {
        return Err(Error::Numerical(
            "power-law fit needs positive abscissae and finite nonzero values".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.abs().ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("power-law fit needs distinct abscissae".into()));
    }
    Ok(sxy / sxx)
}

/// Single-layer instance resting at the equilibrium `y = 1, z = 0` of its
/// unforced dynamics, driven by a small deterministic input with target 0.
pub fn reference_instance(hidden: usize, steps: usize) -> Result<(Model, ProbeTask)> {
    if hidden == 0 || hidden > 8 || steps == 0 {
        return Err(Error::Contract(
            "reference instance needs 1 <= m <= 8 and at least one step".into(),
        ));
    }
    let (alpha, w, d) = (0.01, 0.01, 2);
    let cfg = ModelConfig::new(1, hidden, d, hidden, 0.1, alpha, ReadoutSite::PerStep).identity_readout();
    let mut model = Model::zeros(cfg)?;
    let p = &mut model.layers[0];
    p.w = vec![w; hidden];
    p.b = vec![(-alpha).atanh() - w; hidden];
    p.v = Matrix::from_fn(hidden, d, |i, j| 0.05 * if (i + j) % 2 == 0 { 1.0 } else { -0.5 });
    let input = Matrix::from_fn(steps, d, |n, j| (0.3 * (n + 1) as f64 + 1.1 * j as f64).sin());
    let task = ProbeTask {
        input,
        target: Matrix::zeros(steps, hidden),
        initial: vec![LayerState::new(vec![1.0; hidden], vec![0.0; hidden])?],
    };
    Ok((model, task))
}

fn single_layer(model: &Model) -> Result<&LayerParams> {
    if model.config.layers != 1 {
        return Err(Error::Contract(format!(
            "the vanishing-gradient probe takes a single layer, got {}; use the multi-layer scaling probe",
            model.config.layers
        )));
    }
    Ok(&model.layers[0])
}

fn with_dt(model: &Model, dt: f64) -> Result<Model> {
    let mut m = model.clone();
    m.config.dt = vec![dt; m.config.layers];
    m.validate()?;
    Ok(m)
}

/// Indices and time steps for the order fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VanishingProbe {
    pub neuron: usize,
    pub k: usize,
    pub n: usize,
    pub dts: Vec<f64>,
}

impl Default for VanishingProbe {
    fn default() -> Self {
        Self {
            neuron: 0,
            k: 10,
            n: 40,
            dts: vec![0.1, 0.05, 0.025, 0.0125],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VanishingReport {
    pub dts: Vec<f64>,
    pub contributions: Vec<f64>,
    pub leading: Vec<f64>,
    /// `|contribution − leading|` per time step.
    pub remainders: Vec<f64>,
    pub fitted_order: f64,
}

/// Measures the contribution at each time step, subtracts the leading term
/// and fits the order at which the remainder vanishes.
pub fn vanishing_gradient_probe(model: &Model, task: &ProbeTask, probe: &VanishingProbe) -> Result<VanishingReport> {
    single_layer(model)?;
    let VanishingProbe { neuron: p, k, n, .. } = *probe;
    if k == 0 || 4 * k > n {
        return Err(Error::Contract(format!(
            "the probe needs 1 <= k <= n/4, got k = {k}, n = {n}"
        )));
    }
    if n > task.input.rows() {
        return Err(Error::Contract(format!(
            "n = {n} exceeds the task length {}",
            task.input.rows()
        )));
    }
    if probe.dts.len() < 4 {
        return Err(Error::Contract("the order fit needs at least four time steps".into()));
    }
    let mut report = VanishingReport {
        dts: probe.dts.clone(),
        contributions: Vec::new(),
        leading: Vec::new(),
        remainders: Vec::new(),
        fitted_order: f64::NAN,
    };
    for &dt in &probe.dts {
        let m = with_dt(model, dt)?;
        let trace = trace_model(&m, &task.input, Some(&task.initial))?.remove(0);
        let target = task.target.row(n - 1);
        let c = gradient_contribution(&m.layers[0], &trace, m.config.alpha, target, p, k, n)?;
        let lead = leading_term(&m.layers[0], &trace, target, p, k, n);
        report.contributions.push(c);
        report.leading.push(lead);
        report.remainders.push((c - lead).abs());
    }
    report.fitted_order = fit_power_law(&report.dts, &report.remainders)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KProfile {
    pub n: usize,
    pub ks: Vec<usize>,
    /// `|contribution|` for each `k`.
    pub values: Vec<f64>,
    /// `max / min` over the profile.
    pub ratio: f64,
}

/// `|contribution|` of neuron `p` to `E_n` for every `k` in `ks`, at the
/// model's own time step.
pub fn contribution_k_profile(model: &Model, task: &ProbeTask, p: usize, n: usize, ks: &[usize]) -> Result<KProfile> {
    let params = single_layer(model)?;
    if ks.is_empty() || n > task.input.rows() {
        return Err(Error::Contract(
            "profile needs at least one k and n within the task".into(),
        ));
    }
    let trace = trace_model(model, &task.input, Some(&task.initial))?.remove(0);
    let target = task.target.row(n - 1);
    let values = ks
        .iter()
        .map(|&k| gradient_contribution(params, &trace, model.config.alpha, target, p, k, n).map(f64::abs))
        .collect::<Result<Vec<f64>>>()?;
    let max = values.iter().copied().fold(0.0, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(KProfile {
        n,
        ks: ks.to_vec(),
        values,
        ratio: max / min,
    })
}

/// `ν`: the fewest residual hops from the first to the last of `L` layers
/// with span `S`, `⌊L/S⌋` when `S ∤ L` and `L/S − 1` otherwise.
pub fn residual_hops(layers: usize, span: usize) -> usize {
    if !layers.is_multiple_of(span) {
        layers / span
    } else {
        layers / span - 1
    }
}

/// Predicted time-step exponent: `2L − 1` for a fully connected stack and
/// `2ν + 2L − 2νS − 1` with residual span `S`.
pub fn predicted_exponent(layers: usize, span: Option<usize>) -> f64 {
    let l = layers as f64;
    match span {
        None => 2.0 * l - 1.0,
        Some(s) => {
            let nu = residual_hops(layers, s) as f64;
            2.0 * nu + 2.0 * l - 2.0 * nu * s as f64 - 1.0
        }
    }
}

/// Settings of the deep-stack probe. Every time step runs to the same
/// horizon, with `n = horizon/dt` and `k = n/4`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingProbe {
    pub layers: usize,
    pub skip: Option<usize>,
    pub hidden: usize,
    pub alpha: f64,
    pub horizon: f64,
    pub dts: Vec<f64>,
    pub seed: u64,
}

impl ScalingProbe {
    pub fn new(layers: usize, skip: Option<usize>) -> Self {
        Self {
            layers,
            skip,
            hidden: 4,
            alpha: 1.0,
            horizon: 0.64,
            dts: vec![0.032, 0.016, 0.008, 0.004],
            seed: 0,
        }
    }

    fn config(&self, dt: f64) -> ModelConfig {
        let cfg = ModelConfig::new(
            self.layers,
            self.hidden,
            2,
            self.hidden,
            dt,
            self.alpha,
            ReadoutSite::PerStep,
        )
        .identity_readout();
        match self.skip {
            Some(s) => cfg.with_skip(s),
            None => cfg,
        }
    }

    /// Seeded model with order-one weights, shared by every time step.
    pub fn model(&self, dt: f64) -> Result<Model> {
        let cfg = self.config(dt);
        cfg.validate()?;
        let mut model = Model::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for p in &mut model.layers {
            p.w.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
            p.b.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            p.c.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            p.v.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            if let Some(lam) = &mut p.lambda {
                lam.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
        }
        Ok(model)
    }

    /// Smooth two-channel input sampled at `t_n = n·dt`.
    pub fn input(&self, dt: f64, steps: usize) -> Matrix {
        Matrix::from_fn(steps, 2, |n, j| {
            let t = (n + 1) as f64 * dt;
            (if j == 0 { 3.0 * t + 0.4 } else { 5.0 * t - 1.0 }).sin()
        })
    }

    fn steps(&self, dt: f64) -> Result<usize> {
        let n = (self.horizon / dt).round();
        if n < 4.0 || ((n * dt) - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(Error::Config(format!(
                "horizon {} is not a multiple of dt = {dt} with at least 4 steps",
                self.horizon
            )));
        }
        Ok(n as usize)
    }
}

/// `∂y^L_n/∂y^1_n` through same-step connections, `m × m`.
///
/// A same-step hop from layer `src` into layer `ℓ` with weights `M` is
/// `diag(−h_i²·tanh'(A^ℓ_i)) · M`; paths are summed over the layer graph.
pub fn same_step_jacobian(model: &Model, traces: &[LayerTrace], n: usize) -> Result<Matrix> {
    let cfg = &model.config;
    if traces.len() != cfg.layers || n == 0 || n > traces[0].steps() {
        return Err(Error::Contract("traces must cover every layer and step n".into()));
    }
    let m = cfg.hidden;
    let mut acc: Vec<Matrix> = vec![Matrix::identity(m)];
    for l in 1..cfg.layers {
        let p = &model.layers[l];
        let a = traces[l].preactivation(&p.w, &p.b, n);
        let scale: Vec<f64> = (0..m).map(|i| -traces[l].h[i].powi(2) * tanh_prime(a[i])).collect();
        let mut sources = vec![(&p.v, l - 1)];
        if let (Some(src), Some(lam)) = (cfg.skip_source(l), &p.lambda) {
            sources.push((lam, src));
        }
        let mut j = Matrix::zeros(m, m);
        for (weights, src) in sources {
            let hop = weights.matmul(&acc[src]);
            for (o, v) in j.data_mut().iter_mut().zip(hop.data()) {
                *o += v;
            }
        }
        for i in 0..m {
            j.row_mut(i).iter_mut().for_each(|v| *v *= scale[i]);
        }
        acc.push(j);
    }
    Ok(acc.pop().expect("at least one layer"))
}

/// Contribution of `w_p` of the first layer at step `k` to `E_n` measured on
/// the last layer: `(y^L_n − ȳ)ᵀ · J · [∂y^1_n/∂X^1_k · ∂⁺X^1_k/∂w_p]`.
pub fn deep_contribution(
    model: &Model,
    traces: &[LayerTrace],
    target_n: &[f64],
    p: usize,
    k: usize,
    n: usize,
) -> Result<f64> {
    let first = &model.layers[0];
    let chain = jacobian_chain(first, &traces[0], model.config.alpha, k, n)?;
    let [dy, dz] = explicit_w_derivative(first, &traces[0], p, k);
    let dy_n = chain.get(2 * p, 2 * p) * dy + chain.get(2 * p, 2 * p + 1) * dz;
    let j = same_step_jacobian(model, traces, n)?;
    let top = &traces[traces.len() - 1].states[n].y;
    Ok((0..model.config.hidden)
        .map(|i| (top[i] - target_n[i]) * j.get(i, p) * dy_n)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub layers: usize,
    pub skip: Option<usize>,
    pub dts: Vec<f64>,
    pub contributions: Vec<f64>,
    pub fitted_exponent: f64,
    pub predicted_exponent: f64,
}

/// Fits the time-step exponent of the deep contribution over the probe's
/// time steps, with target 1 on every output and a zero initial state.
pub fn multilayer_scaling_probe(probe: &ScalingProbe) -> Result<ScalingReport> {
    if probe.layers < 2 {
        return Err(Error::Contract("the scaling probe needs at least two layers".into()));
    }
    if probe.dts.len() < 4 {
        return Err(Error::Contract(
            "the exponent fit needs at least four time steps".into(),
        ));
    }
    let mut contributions = Vec::with_capacity(probe.dts.len());
    for &dt in &probe.dts {
        let n = probe.steps(dt)?;
        let k = n / 4;
        let model = probe.model(dt)?;
        let traces = trace_model(&model, &probe.input(dt, n), None)?;
        contributions.push(deep_contribution(&model, &traces, &vec![1.0; probe.hidden], 0, k, n)?);
    }
    Ok(ScalingReport {
        layers: probe.layers,
        skip: probe.skip,
        fitted_exponent: fit_power_law(&probe.dts, &contributions)?,
        predicted_exponent: predicted_exponent(probe.layers, probe.skip),
        dts: probe.dts.clone(),
        contributions,
    })
}

/// Effective steps `dt_ℓ·σ̂(c_ℓi)`, one row per layer.
pub fn effective_timesteps(model: &Model) -> Matrix {
    let m = model.config.hidden;
    Matrix::from_fn(model.config.layers, m, |l, i| {
        model.config.dt[l] * sigma_hat(model.layers[l].c[i])
    })
}
