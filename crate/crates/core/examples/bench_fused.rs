//! Times one training pass (forward, loss and backward) of the fused kernel,
//! the reconstructing kernel and the step-by-step reference, and prints the
//! results as CSV.
//!
//! ```text
//! cargo run --release --example bench_fused -- [steps] [repeats]
//! ```

use unicornn::bench::{bench_csv, run_bench, BenchConfig, BenchImpl};

fn main() -> unicornn::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args
        .next()
        .map_or(Ok(250), |a| a.parse())
        .expect("steps must be an integer");
    let repeats: usize = args
        .next()
        .map_or(Ok(3), |a| a.parse())
        .expect("repeats must be an integer");
    let cfg = BenchConfig {
        steps,
        repeats,
        impls: BenchImpl::ALL.to_vec(),
        ..Default::default()
    };
    let rows = run_bench(&cfg)?;
    print!("{}", bench_csv(&rows));
    let naive = rows
        .iter()
        .find(|r| r.implementation == BenchImpl::Naive)
        .map(|r| r.mean_seconds);
    for row in &rows {
        if let Some(naive) = naive {
            println!(
                "{:<15} {:.2}x the reference",
                row.implementation.as_str(),
                naive / row.mean_seconds
            );
        }
    }
    Ok(())
}
