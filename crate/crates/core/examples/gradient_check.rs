//! Checks the hand-derived gradients of a small residual stack against
//! extrapolated central differences, tensor by tensor.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use unicornn::analysis::{compare_gradients, finite_difference_gradients, FdScheme};
use unicornn::linalg::Matrix;
use unicornn::model::{GradMode, Mode, ModelConfig, ReadoutSite, SeqBatch, Targets};
use unicornn::train::init_params;

fn main() -> unicornn::Result<()> {
    let cfg = ModelConfig::new(3, 4, 2, 3, 0.4, 0.8, ReadoutSite::Final).with_skip(2);
    let model = init_params(&cfg, 11)?;
    let seqs: Vec<Matrix> = (0..2)
        .map(|b| Matrix::from_fn(20, 2, |n, k| ((n * 3 + k + 5 * b) as f64 * 0.3).sin()))
        .collect();
    let x = SeqBatch::from_sequences(&seqs)?;
    let t = Targets::Classes(vec![2, 0]);

    let analytic = model.loss_and_grad(&x, &t, Mode::Eval, None, GradMode::Reconstructing)?;
    let numeric = finite_difference_gradients(
        &model,
        |m| m.loss(&x, &t, Mode::Eval, None),
        FdScheme::Extrapolated { rel_step: 1e-2 },
    )?;
    for ((name, a), (_, n)) in analytic.grads.tensors().iter().zip(&numeric) {
        let worst = a
            .iter()
            .zip(n)
            .map(|(p, q)| unicornn::analysis::relative_error(*p, *q))
            .fold(0.0, f64::max);
        println!("{name:<16} {:>4} entries  max relative error {worst:.2e}", a.len());
    }
    let cmp = compare_gradients(&analytic.grads, &numeric)?;
    println!(
        "overall: {:.2e} at {} over {} entries",
        cmp.max_rel_err, cmp.worst, cmp.entries
    );
    Ok(())
}
