//! Compares gradients from stored trajectories with gradients from the
//! reconstructing backward sweep, which recovers past states by running the
//! recurrence in reverse, and prints how much hidden state each one holds.
//!
//! ```text
//! cargo run --release --example memory_efficient_backward
//! ```

use unicornn::linalg::Matrix;
use unicornn::model::{GradMode, Mode, ModelConfig, ReadoutSite, SeqBatch, Targets};
use unicornn::train::init_params;

fn main() -> unicornn::Result<()> {
    let cfg = ModelConfig::new(3, 32, 2, 1, 0.05, 1.0, ReadoutSite::PerStep);
    let model = init_params(&cfg, 3)?;
    println!(
        "{:>6} {:>14} {:>16} {:>14}",
        "steps", "stored floats", "rebuilt floats", "max grad diff"
    );
    for steps in [100, 1000, 4000] {
        let seqs: Vec<Matrix> = (0..4)
            .map(|b| Matrix::from_fn(steps, 2, |n, k| ((n + 13 * b) as f64 * 0.02 + k as f64).cos()))
            .collect();
        let targets: Vec<Matrix> = (0..4)
            .map(|b| Matrix::from_fn(steps, 1, |n, _| ((n + b) as f64 * 0.01).sin()))
            .collect();
        let x = SeqBatch::from_sequences(&seqs)?;
        let t = Targets::Sequence(SeqBatch::from_sequences(&targets)?);

        let stored = model.loss_and_grad(&x, &t, Mode::Eval, None, GradMode::Stored)?;
        let rebuilt = model.loss_and_grad(&x, &t, Mode::Eval, None, GradMode::Reconstructing)?;
        let diff = stored
            .grads
            .tensors()
            .iter()
            .zip(rebuilt.grads.tensors())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        println!(
            "{steps:>6} {:>14} {:>16} {diff:>14.3e}",
            stored.peak_state_floats, rebuilt.peak_state_floats
        );
    }
    Ok(())
}
