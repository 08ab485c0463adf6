//! Runs one oscillator layer forward for a thousand steps, then walks back to
//! the initial state with the exact inverse step and reports the drift.
//!
//! ```text
//! cargo run --release --example forward_inverse
//! ```

use unicornn::analysis::step_jacobian;
use unicornn::linalg::Matrix;
use unicornn::model::{ModelConfig, ReadoutSite};
use unicornn::recurrence::{forward_step, hamiltonian, inverse_step, LayerState};
use unicornn::train::init_params;

fn main() -> unicornn::Result<()> {
    let (steps, hidden, input_dim, dt, alpha) = (1000, 16, 3, 0.1, 1.0);
    let cfg = ModelConfig::new(1, hidden, input_dim, 1, dt, alpha, ReadoutSite::Final);
    let params = init_params(&cfg, 7)?.layers.remove(0);
    let inputs = Matrix::from_fn(steps, input_dim, |n, k| (0.05 * n as f64 + k as f64).sin());

    let start = LayerState::new((0..hidden).map(|i| 0.1 * i as f64).collect(), vec![0.0; hidden])?;
    let mut state = start.clone();
    let mut worst_det = 0.0_f64;
    for n in 0..steps {
        for block in step_jacobian(&params, &state, inputs.row(n), dt, alpha)? {
            worst_det = worst_det.max((block.det() - 1.0).abs());
        }
        state = forward_step(&state, &params, inputs.row(n), dt, alpha)?;
    }
    let energy = hamiltonian(&state, &params, inputs.row(steps - 1), alpha)?;
    println!(
        "after {steps} steps: max |y| = {:.4}, energy = {energy:.4}",
        max_abs(&state.y)
    );

    for n in (0..steps).rev() {
        state = inverse_step(&state, &params, inputs.row(n), dt, alpha)?;
    }
    println!(
        "reconstruction error of the initial state: {:.3e}",
        state.max_abs_diff(&start)
    );
    println!("largest |det J - 1| over all steps and neurons: {worst_det:.3e}");
    Ok(())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
