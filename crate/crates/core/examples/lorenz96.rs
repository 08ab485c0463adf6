//! Trains the two-layer regression model on Lorenz 96 trajectories and prints
//! validation NRMSE per epoch and the final test NRMSE.
//!
//! ```text
//! cargo run --release --example lorenz96 -- [forcing] [epochs]
//! ```
//!
//! The defaults (`0.9 10`) take about a quarter of a minute; the `lorenz-f09`
//! preset trains for 60 epochs.

use unicornn::config::{Override, RunConfig};
use unicornn::train::{evaluate, fit_with, init_params};

fn main() -> unicornn::Result<()> {
    let mut args = std::env::args().skip(1);
    let forcing: f64 = args
        .next()
        .map_or(Ok(0.9), |a| a.parse())
        .expect("forcing must be a number");
    let epochs: usize = args
        .next()
        .map_or(Ok(10), |a| a.parse())
        .expect("epochs must be an integer");

    let overrides = [
        Override::new("task.forcing", forcing),
        Override::new("train.epochs", epochs as i64),
    ];
    let cfg = RunConfig::layered(Some("lorenz-f09"), None, &overrides)?;
    let [train, valid, test] = cfg.load_splits()?;
    let model = init_params(&cfg.model_config()?, cfg.model.init_seed)?;
    println!(
        "F = {forcing}, {} parameters, {} training sequences",
        model.param_count(),
        train.len()
    );

    let out = fit_with(model, &train, &valid, &cfg.train, |r| {
        println!(
            "epoch {:>3}  train loss {:.4e}  valid nrmse {:.4e}  {:.1} s",
            r.epoch,
            r.train_loss,
            r.valid.nrmse.unwrap_or(f64::NAN),
            r.wall_time
        );
    })?;
    let test_eval = evaluate(&out.best, &test, cfg.train.shard_size)?;
    let best = out.best_epoch.map_or("none".to_string(), |e| e.to_string());
    println!(
        "best epoch {best}: test nrmse {:.4e}",
        test_eval.nrmse.unwrap_or(f64::NAN)
    );
    Ok(())
}
