//! Measures a trained-from-scratch network against its analytic guarantees:
//! hidden states stay inside their energy bounds, gradients stay below the
//! exploding-gradient bound, and the gradient probes fit their predicted
//! orders.
//!
//! ```text
//! cargo run --release --example theory_checks
//! ```

use unicornn::analysis::{
    format_table, gradient_bound, run_suite, state_bound_check, state_bounds, trace_model, Suite, VerifyOptions,
};
use unicornn::linalg::Matrix;
use unicornn::model::{GradMode, Mode, ModelConfig, ReadoutSite, SeqBatch, Targets};
use unicornn::train::init_params;

fn main() -> unicornn::Result<()> {
    let (steps, dt, alpha) = (5000, 0.02, 1.0);
    let cfg = ModelConfig::new(3, 16, 2, 1, dt, alpha, ReadoutSite::PerStep);
    let model = init_params(&cfg, 5)?;
    let input = Matrix::from_fn(steps, 2, |n, k| if (n / 50 + k) % 2 == 0 { 1.0 } else { -1.0 });
    let traces = trace_model(&model, &input, None)?;
    let report = state_bound_check(&traces, alpha, &model.config.dt)?;
    let (y_bound, z_bound) = state_bounds(alpha, steps as f64 * dt)?;
    println!(
        "state bounds at t = {}: |y| <= {y_bound:.3}, |z| <= {z_bound:.3}",
        steps as f64 * dt
    );
    let mut worst = 0.0_f64;
    for trace in &traces {
        for (n, s) in trace.states.iter().enumerate().skip(1) {
            let (by, bz) = state_bounds(alpha, n as f64 * dt)?;
            let y = s.y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let z = s.z.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            worst = worst.max(y / by).max(z / bz);
        }
    }
    println!(
        "bounds hold on all {} states: {}; largest |state| / bound {worst:.4}",
        report.steps_checked,
        report.holds()
    );

    let cfg = ModelConfig::new(2, 8, 2, 8, dt, alpha, ReadoutSite::PerStep).identity_readout();
    let model = init_params(&cfg, 6)?;
    let n = 200;
    let x = SeqBatch::from_sequences(&[Matrix::from_fn(n, 2, |i, k| ((i + k) as f64 * 0.1).sin())])?;
    let target = Matrix::from_fn(n, 8, |i, j| 0.5 * ((i * j) as f64 * 0.01).cos());
    let t = Targets::Sequence(SeqBatch::from_sequences(&[target])?);
    let grads = model.loss_and_grad(&x, &t, Mode::Eval, None, GradMode::Stored)?.grads;
    let bound = gradient_bound(&model, 0.5, n)?.with_observed(grads.max_abs());
    println!(
        "largest gradient entry {:.3e} against the bound {:.3e} over {n} steps",
        grads.max_abs(),
        bound.bound
    );

    let opts = VerifyOptions { seed: 0, fault: None };
    let mut records = run_suite(Suite::VanishingProbe, &opts)?;
    records.extend(run_suite(Suite::ScalingProbe, &opts)?);
    print!("{}", format_table(&records));
    Ok(())
}
