//! Acceptance criteria, one pass/fail line each.
//!
//! Runs without the libtest harness so that every line is printed. Any
//! argument that is not a flag selects criteria by number or by a substring
//! of their slug, e.g. `cargo test --test acceptance -- 3 lorenz`.

use std::time::Instant;

use unicornn::analysis::{
    check_fd_match, check_gradient_bound, check_inversion, check_scaling, check_state_bounds, check_vanishing,
    check_volume, CheckRecord,
};
use unicornn::bench::{bench_csv, run_bench, BenchConfig, BenchImpl, BENCH_HEADER};
use unicornn::config::{RunConfig, TaskConfig};
use unicornn::linalg::Matrix;
use unicornn::model::{GradMode, Mode, ModelConfig, ReadoutSite, SeqBatch, Targets};
use unicornn::train::{evaluate, fit, init_params, Evaluation};
use unicornn::Result;

struct Verdict {
    passed: bool,
    summary: String,
}

impl Verdict {
    fn new(passed: bool, summary: impl Into<String>) -> Self {
        Self {
            passed,
            summary: summary.into(),
        }
    }
}

/// Strict `value < threshold` for every record.
fn all_below(records: &[CheckRecord]) -> Verdict {
    let passed = records.iter().all(|r| r.value < r.threshold);
    let parts: Vec<String> = records
        .iter()
        .map(|r| format!("{} {:.3e} (< {:.0e})", r.name, r.value, r.threshold))
        .collect();
    Verdict::new(passed, parts.join("; "))
}

fn gradient_correctness() -> Result<Verdict> {
    let start = Instant::now();
    let rec = check_fd_match(0, 20, None)?;
    let secs = start.elapsed().as_secs_f64();
    let passed = rec.value < 1e-6 && secs < 120.0;
    Ok(Verdict::new(
        passed,
        format!(
            "max relative error {:.3e} (< 1e-6) over 20 instances in {secs:.1} s (< 120 s); {}",
            rec.value, rec.detail
        ),
    ))
}

fn invertibility() -> Result<Verdict> {
    let recs = check_inversion(0)?;
    Ok(all_below(&recs))
}

fn memory_contract() -> Result<Verdict> {
    let cfg = ModelConfig::new(3, 16, 2, 2, 0.1, 1.0, ReadoutSite::PerStep);
    let model = init_params(&cfg, 0)?;
    let batch = 4;
    let peak = |steps: usize, mode: GradMode| -> Result<usize> {
        let seqs: Vec<Matrix> = (0..batch)
            .map(|b| Matrix::from_fn(steps, 2, |n, k| ((n * 7 + k * 3 + b) as f64 * 0.37).sin()))
            .collect();
        let targets: Vec<Matrix> = (0..batch).map(|_| Matrix::zeros(steps, 2)).collect();
        let x = SeqBatch::from_sequences(&seqs)?;
        let t = Targets::Sequence(SeqBatch::from_sequences(&targets)?);
        Ok(model.loss_and_grad(&x, &t, Mode::Eval, None, mode)?.peak_state_floats)
    };
    let (short, long) = (
        peak(100, GradMode::Reconstructing)?,
        peak(1000, GradMode::Reconstructing)?,
    );
    let (stored_short, stored_long) = (peak(100, GradMode::Stored)?, peak(1000, GradMode::Stored)?);
    Ok(Verdict::new(
        short == long && short > 0,
        format!(
            "reconstructing peak hidden floats {short} at N=100 and {long} at N=1000 (L=3, m=16, batch={batch}); stored mode {stored_short} and {stored_long}"
        ),
    ))
}

fn volume_preservation() -> Result<Verdict> {
    Ok(all_below(&check_volume(0, 10_000)?))
}

fn state_bounds() -> Result<Verdict> {
    let rec = check_state_bounds(0, 10, 10_000)?;
    Ok(Verdict::new(
        rec.value <= 1.0,
        format!("{:.4} (<= 1); {}", rec.value, rec.detail),
    ))
}

fn exploding_gradient_bound() -> Result<Verdict> {
    let rec = check_gradient_bound(0, 10)?;
    Ok(Verdict::new(
        rec.value <= 1.0,
        format!("{:.3e} (<= 1); {}", rec.value, rec.detail),
    ))
}

fn vanishing_gradient_representation() -> Result<Verdict> {
    let recs = check_vanishing()?;
    let order = &recs[0];
    let profile = &recs[1];
    Ok(Verdict::new(
        order.value <= 0.3 && profile.value <= 100.0,
        format!("{}; k-profile ratio {:.3} (<= 1e2)", order.detail, profile.value),
    ))
}

fn deep_stack_scaling() -> Result<Verdict> {
    let recs = check_scaling()?;
    Ok(Verdict::new(
        recs.iter().all(|r| r.value <= 0.5),
        recs.iter()
            .map(|r| format!("{}: {}", r.name, r.detail))
            .collect::<Vec<_>>()
            .join("; "),
    ))
}

/// Trains a preset and scores its best model on the test split.
fn train_preset(name: &str) -> Result<(RunConfig, Evaluation, f64)> {
    let cfg = RunConfig::layered(Some(name), None, &[])?;
    let start = Instant::now();
    let [train, valid, test] = cfg.load_splits()?;
    let model = init_params(&cfg.model_config()?, cfg.model.init_seed)?;
    let out = fit(model, &train, &valid, &cfg.train)?;
    if let Some(msg) = out.diverged {
        return Err(unicornn::Error::Numerical(msg));
    }
    let eval = evaluate(&out.best, &test, cfg.train.shard_size)?;
    Ok((cfg, eval, start.elapsed().as_secs_f64()))
}

fn lorenz_budget(cfg: &RunConfig) -> bool {
    let TaskConfig::Lorenz96(task) = &cfg.task else {
        return false;
    };
    cfg.model.layers == 2
        && cfg.model.hidden == 32
        && cfg.train.epochs <= 60
        && task.n_train == 128
        && task.n_valid == 128
        && task.n_test == 128
}

fn lorenz_smooth(f09: &mut Option<f64>) -> Result<Verdict> {
    let (cfg, eval, secs) = train_preset("lorenz-f09")?;
    let nrmse = eval.nrmse.unwrap_or(f64::INFINITY);
    *f09 = Some(nrmse);
    Ok(Verdict::new(
        lorenz_budget(&cfg) && nrmse <= 5e-2 && secs <= 1200.0,
        format!(
            "F=0.9 test NRMSE {nrmse:.4e} (<= 5e-2) with 2x32 units, {} epochs, 128/128/128 sequences in {secs:.0} s (<= 1200 s)",
            cfg.train.epochs
        ),
    ))
}

fn lorenz_chaotic(f09: Option<f64>) -> Result<Verdict> {
    let (cfg, eval, secs) = train_preset("lorenz-f8")?;
    let nrmse = eval.nrmse.unwrap_or(f64::INFINITY);
    let smooth = match f09 {
        Some(v) => v,
        None => train_preset("lorenz-f09")?.1.nrmse.unwrap_or(f64::INFINITY),
    };
    let ratio = nrmse / smooth;
    Ok(Verdict::new(
        lorenz_budget(&cfg) && ratio >= 3.0 && secs <= 1200.0,
        format!("F=8 test NRMSE {nrmse:.4e} is {ratio:.1}x the F=0.9 value {smooth:.4e} (>= 3x), {secs:.0} s"),
    ))
}

fn noise_padded() -> Result<Verdict> {
    let (cfg, eval, secs) = train_preset("noise-padded-desk")?;
    let TaskConfig::NoisePadded(task) = &cfg.task else {
        return Ok(Verdict::new(false, "preset does not select the noise-padded task"));
    };
    let geometry = task.content_len == 32
        && task.seq_len() == 1000
        && task.n_classes == 4
        && task.n_samples == 4000
        && cfg.model.layers == 3
        && cfg.model.hidden == 64;
    let acc = eval.accuracy.unwrap_or(0.0);
    Ok(Verdict::new(
        geometry && acc >= 0.9 && secs <= 1800.0,
        format!(
            "test accuracy {acc:.4} (>= 0.90) after {} epochs, content 32 + {} noise steps, L=3, m=64, in {secs:.0} s (<= 1800 s)",
            cfg.train.epochs, task.pad_len
        ),
    ))
}

fn performance() -> Result<Verdict> {
    let cfg = BenchConfig {
        impls: vec![BenchImpl::Fused, BenchImpl::Naive],
        ..Default::default()
    };
    let rows = run_bench(&cfg)?;
    let csv = bench_csv(&rows);
    let dir = std::env::temp_dir().join("unicornn-acceptance");
    std::fs::create_dir_all(&dir).map_err(|e| unicornn::Error::Config(e.to_string()))?;
    let path = dir.join("bench.csv");
    std::fs::write(&path, &csv).map_err(|e| unicornn::Error::Config(e.to_string()))?;
    let fused = &rows[0];
    let naive = &rows[1];
    let csv_ok = csv.starts_with(BENCH_HEADER) && csv.lines().count() == 3;
    Ok(Verdict::new(
        fused.mean_seconds <= naive.mean_seconds && csv_ok && cfg.repeats >= 20,
        format!(
            "N={}, m={}, L={}, batch={}: fused {:.3} s vs naive {:.3} s per pass ({:.2}x), {} repeats; CSV at {}",
            cfg.steps,
            cfg.hidden,
            cfg.layers,
            cfg.batch,
            fused.mean_seconds,
            naive.mean_seconds,
            naive.mean_seconds / fused.mean_seconds,
            cfg.repeats,
            path.display()
        ),
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(usize, &str); 12] = [
        (1, "gradient-correctness"),
        (2, "invertibility"),
        (3, "memory-contract"),
        (4, "volume-preservation"),
        (5, "state-bounds"),
        (6, "exploding-gradient-bound"),
        (7, "vanishing-gradient-representation"),
        (8, "deep-stack-scaling"),
        (9, "lorenz96-f0.9"),
        (10, "lorenz96-f8"),
        (11, "noise-padded"),
        (12, "performance"),
    ];
    let selected = |n: usize, slug: &str| {
        filters.is_empty()
            || filters
                .iter()
                .any(|f| f.parse::<usize>().ok() == Some(n) || slug.contains(f.as_str()))
    };

    let mut f09 = None;
    let (mut ran, mut failed) = (0, 0);
    for (n, slug) in criteria {
        if !selected(n, slug) {
            continue;
        }
        let start = Instant::now();
        let verdict = match n {
            1 => gradient_correctness(),
            2 => invertibility(),
            3 => memory_contract(),
            4 => volume_preservation(),
            5 => state_bounds(),
            6 => exploding_gradient_bound(),
            7 => vanishing_gradient_representation(),
            8 => deep_stack_scaling(),
            9 => lorenz_smooth(&mut f09),
            10 => lorenz_chaotic(f09),
            11 => noise_padded(),
            12 => performance(),
            _ => unreachable!(),
        }
        .unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        ran += 1;
        if !verdict.passed {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {slug:<34} {}  {} [{:.1} s]",
            if verdict.passed { "PASS" } else { "FAIL" },
            verdict.summary,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
