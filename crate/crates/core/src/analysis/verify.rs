//! Self-contained numerical checks of the model's guarantees.
//!
//! Every check builds its own seeded instances and reports a scalar that
//! must not exceed a threshold.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backward::reconstruct_states;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{DropoutMask, GradMode, Mode, Model, ModelConfig, ReadoutSite, SeqBatch, Targets};
use crate::recurrence::{layer_forward, LayerParams, LayerState};
use crate::train::init_params;

use super::bounds::{gradient_bound, state_bound_check};
use super::fd::{compare_gradients, finite_difference_gradients, FdScheme};
use super::jacobian::{jacobian_chain, step_jacobian};
use super::probes::{
    contribution_k_profile, multilayer_scaling_probe, reference_instance, vanishing_gradient_probe, ScalingProbe,
    VanishingProbe,
};
use super::trace::trace_model;

/// Outcome of one check: passed when `value <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckRecord {
    pub fn new(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            value,
            threshold,
            passed: value <= threshold,
            detail,
        }
    }
}

/// Group of checks selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Suite {
    Inversion,
    Volume,
    StateBounds,
    GradBound,
    FdMatch,
    VanishingProbe,
    ScalingProbe,
    All,
}

impl Suite {
    pub const EACH: [Suite; 7] = [
        Suite::Inversion,
        Suite::Volume,
        Suite::StateBounds,
        Suite::GradBound,
        Suite::FdMatch,
        Suite::VanishingProbe,
        Suite::ScalingProbe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Inversion => "inversion",
            Suite::Volume => "volume",
            Suite::StateBounds => "state-bounds",
            Suite::GradBound => "grad-bound",
            Suite::FdMatch => "fd-match",
            Suite::VanishingProbe => "vanishing-probe",
            Suite::ScalingProbe => "scaling-probe",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown verification suite '{s}'")))
    }
}

/// Deliberate corruption used to confirm that a check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Fault {
    /// Scales one analytic gradient entry by 1.01 before the comparison.
    CorruptBackward,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

/// Runs every check of `suite`.
pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckRecord>> {
    let seed = opts.seed;
    Ok(match suite {
        Suite::All => {
            let mut out = Vec::new();
            for s in Suite::EACH {
                out.extend(run_suite(s, opts)?);
            }
            out
        }
        Suite::Inversion => check_inversion(seed)?,
        Suite::Volume => check_volume(seed, 10_000)?,
        Suite::StateBounds => vec![check_state_bounds(seed, 10, 10_000)?],
        Suite::GradBound => vec![check_gradient_bound(seed, 10)?],
        Suite::FdMatch => vec![check_fd_match(seed, 20, opts.fault)?],
        Suite::VanishingProbe => check_vanishing()?,
        Suite::ScalingProbe => check_scaling()?,
    })
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn uniform_input(r: &mut impl Rng, steps: usize, width: usize) -> Matrix {
    Matrix::from_fn(steps, width, |_, _| r.gen_range(-1.0..1.0))
}

/// Initialized model with every parameter jittered by `U(−0.3, 0.3)`.
pub fn random_instance(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = init_params(config, seed)?;
    let mut r = rng(seed, 1);
    for (_, t) in model.tensors_mut() {
        t.iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
    }
    Ok(model)
}

/// Reconstructed states against the stored trajectory, and reconstructing
/// gradients against stored gradients.
pub fn check_inversion(seed: u64) -> Result<Vec<CheckRecord>> {
    let (steps, m, dt) = (1000, 16, 0.1);
    let mut r = rng(seed, 2);
    let mut params = LayerParams::zeros(m, 3);
    params.w.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    params.b.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
    params.c.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    params.v = Matrix::from_fn(m, 3, |_, _| r.gen_range(-1.0..1.0));
    let x = uniform_input(&mut r, steps, 3);
    let run = layer_forward(&LayerState::zeros(m), &x, &params, dt, 1.0, true)?;
    let stored = run.trajectory.expect("stored run keeps its trajectory");
    let rebuilt = reconstruct_states(&run.final_state, &x, &params, dt, 1.0)?;
    let mut err = 0.0_f64;
    for (n, s) in rebuilt.iter().enumerate() {
        err = err.max(s.max_abs_diff(stored.state(n)));
    }
    let states = CheckRecord::new(
        "inversion/states",
        err,
        1e-9,
        format!("max |reconstructed − stored| over {steps} steps, m = {m}, dt = {dt}"),
    );

    let cfg = ModelConfig::new(2, m, 3, 2, dt, 1.0, ReadoutSite::PerStep);
    let model = random_instance(&cfg, seed)?;
    let xb = SeqBatch::from_sequences(&[uniform_input(&mut r, steps, 3), uniform_input(&mut r, steps, 3)])?;
    let tb = SeqBatch::from_sequences(&[uniform_input(&mut r, steps, 2), uniform_input(&mut r, steps, 2)])?;
    let targets = Targets::Sequence(tb);
    let a = model.loss_and_grad(&xb, &targets, Mode::Eval, None, GradMode::Stored)?;
    let b = model.loss_and_grad(&xb, &targets, Mode::Eval, None, GradMode::Reconstructing)?;
    let scale = a.grads.max_abs();
    let mut rel = 0.0_f64;
    for ((_, ga), (_, gb)) in a.grads.tensors().iter().zip(b.grads.tensors()) {
        for (u, v) in ga.iter().zip(gb) {
            rel = rel.max((u - v).abs() / scale);
        }
    }
    let grads = CheckRecord::new(
        "inversion/gradients",
        rel,
        1e-7,
        format!("max |stored − reconstructing| / max |stored| over a 2-layer model, N = {steps}"),
    );
    Ok(vec![states, grads])
}

/// Determinants of random step blocks and of a 100-step chain.
pub fn check_volume(seed: u64, draws: usize) -> Result<Vec<CheckRecord>> {
    let mut r = rng(seed, 3);
    let mut worst = 0.0_f64;
    let mut count = 0;
    while count < draws {
        let m = 4;
        let mut p = LayerParams::zeros(m, 2);
        p.w.iter_mut().for_each(|v| *v = r.gen_range(-3.0..3.0));
        p.b.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        p.c.iter_mut().for_each(|v| *v = r.gen_range(-4.0..4.0));
        p.v = Matrix::from_fn(m, 2, |_, _| r.gen_range(-2.0..2.0));
        let s = LayerState::new(
            (0..m).map(|_| r.gen_range(-3.0..3.0)).collect(),
            (0..m).map(|_| r.gen_range(-3.0..3.0)).collect(),
        )?;
        let x = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let blocks = step_jacobian(&p, &s, &x, r.gen_range(0.001..0.999), r.gen_range(0.0..5.0))?;
        for b in blocks.iter().take(draws - count) {
            worst = worst.max((b.det() - 1.0).abs());
            count += 1;
        }
    }
    let blocks = CheckRecord::new(
        "volume/step-blocks",
        worst,
        1e-12,
        format!("max |det − 1| over {draws} random 2x2 step blocks"),
    );

    let cfg = ModelConfig::new(1, 6, 2, 6, 0.1, 1.0, ReadoutSite::PerStep).identity_readout();
    let model = random_instance(&cfg, seed)?;
    let trace = trace_model(&model, &uniform_input(&mut r, 100, 2), None)?.remove(0);
    let det = jacobian_chain(&model.layers[0], &trace, 1.0, 0, 100)?.determinant()?;
    let chain = CheckRecord::new(
        "volume/100-step-chain",
        (det - 1.0).abs(),
        1e-8,
        format!("|det − 1| of the 12x12 chain product, det = {det:.15}"),
    );
    Ok(vec![blocks, chain])
}

/// Largest `|state| / bound` over `seeds` initialized 3-layer models run for
/// `steps` steps with `α = 1`, `dt = 0.01`.
pub fn check_state_bounds(seed: u64, seeds: u64, steps: usize) -> Result<CheckRecord> {
    let cfg = ModelConfig::new(3, 16, 2, 1, 0.01, 1.0, ReadoutSite::PerStep);
    let mut worst = 0.0_f64;
    let mut worst_margin = f64::INFINITY;
    for s in 0..seeds {
        let model = init_params(&cfg, seed + s)?;
        let mut r = rng(seed + s, 4);
        let traces = trace_model(&model, &uniform_input(&mut r, steps, 2), None)?;
        let report = state_bound_check(&traces, cfg.alpha, &cfg.dt)?;
        worst_margin = worst_margin.min(report.min_margin_y.min(report.min_margin_z));
        for (t, &dt) in traces.iter().zip(&cfg.dt) {
            for (n, st) in t.states.iter().enumerate() {
                let (by, bz) = super::bounds::state_bounds(cfg.alpha, n as f64 * dt)?;
                for (y, z) in st.y.iter().zip(&st.z) {
                    worst = worst.max(y.abs() / by).max(z.abs() / bz);
                }
            }
        }
        if !report.holds() {
            worst = worst.max(f64::INFINITY);
        }
    }
    Ok(CheckRecord::new(
        "state-bounds",
        worst,
        1.0,
        format!(
            "max |state| / bound over {seeds} seeds x 3 layers x {steps} steps; smallest margin {worst_margin:.3e}"
        ),
    ))
}

/// Largest `max |∂E/∂θ| / bound` over random identity-readout models.
pub fn check_gradient_bound(seed: u64, configs: usize) -> Result<CheckRecord> {
    let mut r = rng(seed, 5);
    let mut worst = 0.0_f64;
    let steps = 100;
    for i in 0..configs {
        let layers = 1 + i % 2;
        let m = r.gen_range(2..=8);
        let d = r.gen_range(1..=4);
        let alpha = r.gen_range(0.25..2.0);
        let cfg = ModelConfig::new(layers, m, d, m, 0.01, alpha, ReadoutSite::PerStep).identity_readout();
        let model = random_instance(&cfg, seed + i as u64)?;
        let x = SeqBatch::from_sequences(&[uniform_input(&mut r, steps, d)])?;
        let y = uniform_input(&mut r, steps, m);
        let ybar = y.max_abs();
        let res = model.loss_and_grad(
            &x,
            &Targets::Sequence(SeqBatch::from_sequences(&[y])?),
            Mode::Eval,
            None,
            GradMode::Stored,
        )?;
        let report = gradient_bound(&model, ybar, steps)?.with_observed(res.grads.max_abs());
        worst = worst.max(res.grads.max_abs() / report.bound);
    }
    Ok(CheckRecord::new(
        "grad-bound",
        worst,
        1.0,
        format!("max over {configs} models of max |dE/dθ| / bound (dt = 0.01, N = {steps})"),
    ))
}

/// Analytic against finite-difference gradients on random instances that
/// vary depth, width, loss type, residual connections and dropout masks.
pub fn check_fd_match(seed: u64, instances: usize, fault: Option<Fault>) -> Result<CheckRecord> {
    let mut r = rng(seed, 6);
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    for i in 0..instances {
        let layers = 1 + i % 3;
        let m = r.gen_range(2..=8);
        let d = r.gen_range(1..=4);
        let steps = r.gen_range(5..=25);
        let classify = i % 2 == 1;
        let site = if classify {
            ReadoutSite::Final
        } else {
            ReadoutSite::PerStep
        };
        let out = if classify { 3 } else { r.gen_range(1..=3) };
        let mut cfg = ModelConfig::new(layers, m, d, out, r.gen_range(0.05..0.6), r.gen_range(0.0..2.0), site);
        if layers == 3 && i % 4 < 2 {
            cfg = cfg.with_skip(2);
        }
        if layers > 1 && i % 5 == 0 {
            cfg = cfg.with_dropout(0.3);
        }
        let model = random_instance(&cfg, seed + 100 + i as u64)?;
        let batch = 2;
        let x = SeqBatch::from_sequences(&(0..batch).map(|_| uniform_input(&mut r, steps, d)).collect::<Vec<_>>())?;
        let targets = if classify {
            Targets::Classes((0..batch).map(|_| r.gen_range(0..out)).collect())
        } else {
            Targets::Sequence(SeqBatch::from_sequences(
                &(0..batch)
                    .map(|_| uniform_input(&mut r, steps, out))
                    .collect::<Vec<_>>(),
            )?)
        };
        let masks: Vec<DropoutMask> = (0..batch).map(|_| DropoutMask::sample(&cfg, &mut r)).collect();
        let mode = if cfg.dropout > 0.0 { Mode::Train } else { Mode::Eval };
        let mut res = model.loss_and_grad(&x, &targets, mode, Some(&masks), GradMode::Reconstructing)?;
        if fault == Some(Fault::CorruptBackward) {
            if let Some((_, t)) = res.grads.tensors_mut().into_iter().next() {
                t[0] *= 1.01;
            }
        }
        let fd = finite_difference_gradients(
            &model,
            |m| m.loss(&x, &targets, mode, Some(&masks)),
            FdScheme::Extrapolated { rel_step: 0.1 },
        )?;
        let cmp = compare_gradients(&res.grads, &fd)?;
        if cmp.max_rel_err >= worst {
            worst = cmp.max_rel_err;
            worst_at = format!(
                "instance {i} (L = {layers}, skip = {:?}, {}): {} analytic {:.6e} vs numeric {:.6e}",
                cfg.skip,
                if classify { "cross-entropy" } else { "mse" },
                cmp.worst,
                cmp.analytic,
                cmp.numeric
            );
        }
    }
    Ok(CheckRecord::new(
        "fd-match",
        worst,
        1e-6,
        format!("max relative error over {instances} instances; worst {worst_at}"),
    ))
}

/// Remainder order of the single-layer representation and flatness of the
/// contribution in `k`.
pub fn check_vanishing() -> Result<Vec<CheckRecord>> {
    let (model, task) = reference_instance(4, 100)?;
    let probe = VanishingProbe::default();
    let report = vanishing_gradient_probe(&model, &task, &probe)?;
    let order = CheckRecord::new(
        "vanishing-probe/remainder-order",
        (report.fitted_order - 2.0).abs(),
        0.3,
        format!(
            "fitted order {:.4} (target 2) for k = {}, n = {} over dt = {:?}",
            report.fitted_order, probe.k, probe.n, probe.dts
        ),
    );
    let ks: Vec<usize> = (1..=75).collect();
    let prof = contribution_k_profile(&model, &task, 0, 100, &ks)?;
    let profile = CheckRecord::new(
        "vanishing-probe/k-profile",
        prof.ratio,
        100.0,
        format!(
            "max/min |contribution| over k in [1, 75], n = 100, dt = {}",
            model.config.dt[0]
        ),
    );
    Ok(vec![order, profile])
}

/// Fitted time-step exponents of deep stacks against their predictions.
pub fn check_scaling() -> Result<Vec<CheckRecord>> {
    [(3, None), (7, Some(3))]
        .into_iter()
        .map(|(layers, skip)| {
            let report = multilayer_scaling_probe(&ScalingProbe::new(layers, skip))?;
            let name = match skip {
                None => format!("scaling-probe/L{layers}"),
                Some(s) => format!("scaling-probe/L{layers}-S{s}"),
            };
            Ok(CheckRecord::new(
                &name,
                (report.fitted_exponent - report.predicted_exponent).abs(),
                0.5,
                format!(
                    "fitted exponent {:.4}, predicted {}",
                    report.fitted_exponent, report.predicted_exponent
                ),
            ))
        })
        .collect()
}

/// Plain-text table of check records.
pub fn format_table(records: &[CheckRecord]) -> String {
    let width = records.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
    let mut out = format!("{:<width$}  {:>12}  {:>10}  result\n", "check", "value", "threshold");
    for r in records {
        out.push_str(&format!(
            "{:<width$}  {:>12.4e}  {:>10.1e}  {}\n",
            r.name,
            r.value,
            r.threshold,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}
