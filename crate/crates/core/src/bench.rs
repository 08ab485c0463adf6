//! Wall-clock timing of one combined forward and backward pass.
//!
//! Every implementation sees the same model, inputs and labels. Repeats are
//! interleaved across implementations so that slow drift of the machine
//! affects all of them alike.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{naive, GradMode, Mode, ModelConfig, ReadoutSite, SeqBatch, Targets};
use crate::train::init_params;

/// A forward+backward implementation under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchImpl {
    /// Whole-sequence input transform, lane-wise recurrence, stored states.
    Fused,
    /// As `Fused`, but states are rebuilt by the inverse map.
    Reconstructing,
    /// One sequence and one step at a time.
    Naive,
}

impl BenchImpl {
    pub const ALL: [BenchImpl; 3] = [BenchImpl::Fused, BenchImpl::Reconstructing, BenchImpl::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchImpl::Fused => "fused",
            BenchImpl::Reconstructing => "reconstructing",
            BenchImpl::Naive => "naive",
        }
    }
}

impl fmt::Display for BenchImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchImpl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchImpl::ALL.into_iter().find(|i| i.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown implementation '{s}'; expected fused, reconstructing or naive"
            ))
        })
    }
}

/// Problem size and repetition settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub steps: usize,
    pub hidden: usize,
    pub layers: usize,
    pub batch: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    /// Timed passes per implementation.
    pub repeats: usize,
    /// Untimed passes per implementation before timing starts.
    pub warmup: usize,
    pub seed: u64,
    pub impls: Vec<BenchImpl>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            hidden: 128,
            layers: 2,
            batch: 128,
            input_dim: 1,
            n_classes: 10,
            repeats: 20,
            warmup: 1,
            seed: 0,
            impls: vec![BenchImpl::Fused, BenchImpl::Naive],
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.steps,
            self.hidden,
            self.layers,
            self.batch,
            self.input_dim,
            self.repeats,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(
                "steps, hidden, layers, batch, input width and repeats must be positive".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes, got {}",
                self.n_classes
            )));
        }
        if self.impls.is_empty() {
            return Err(Error::Config("no implementation selected".into()));
        }
        Ok(())
    }
}

/// Timing summary of one implementation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub implementation: BenchImpl,
    pub steps: usize,
    pub hidden: usize,
    pub layers: usize,
    pub batch: usize,
    pub repeats: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub min_seconds: f64,
    /// Loss of the last timed pass; equal across implementations up to
    /// rounding.
    pub loss: f64,
}

/// Column names of [`bench_csv`].
pub const BENCH_HEADER: &str =
    "implementation,steps,hidden,layers,batch,repeats,mean_seconds,std_seconds,min_seconds,loss";

/// Times every selected implementation on one random classification batch.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let model_cfg = ModelConfig::new(
        cfg.layers,
        cfg.hidden,
        cfg.input_dim,
        cfg.n_classes,
        0.1,
        1.0,
        ReadoutSite::Final,
    );
    let model = init_params(&model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input = SeqBatch::zeros(cfg.steps, cfg.batch, cfg.input_dim);
    input.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let targets = Targets::Classes((0..cfg.batch).map(|_| rng.gen_range(0..cfg.n_classes)).collect());

    let pass = |which: BenchImpl| -> Result<f64> {
        Ok(match which {
            BenchImpl::Fused => {
                model
                    .loss_and_grad(&input, &targets, Mode::Eval, None, GradMode::Stored)?
                    .loss
            }
            BenchImpl::Reconstructing => {
                model
                    .loss_and_grad(&input, &targets, Mode::Eval, None, GradMode::Reconstructing)?
                    .loss
            }
            BenchImpl::Naive => naive::loss_and_grad(&model, &input, &targets, None)?.0,
        })
    };

    for _ in 0..cfg.warmup {
        for &which in &cfg.impls {
            pass(which)?;
        }
    }
    let mut times = vec![Vec::with_capacity(cfg.repeats); cfg.impls.len()];
    let mut losses = vec![0.0; cfg.impls.len()];
    for r in 0..cfg.repeats {
        // Alternate the order so neither implementation always runs first.
        let order: Vec<usize> = if r % 2 == 0 {
            (0..cfg.impls.len()).collect()
        } else {
            (0..cfg.impls.len()).rev().collect()
        };
        for k in order {
            let start = Instant::now();
            losses[k] = std::hint::black_box(pass(cfg.impls[k])?);
            times[k].push(start.elapsed().as_secs_f64());
        }
    }
    Ok(cfg
        .impls
        .iter()
        .zip(times)
        .zip(losses)
        .map(|((&implementation, t), loss)| {
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            let var = if t.len() > 1 {
                t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            BenchRow {
                implementation,
                steps: cfg.steps,
                hidden: cfg.hidden,
                layers: cfg.layers,
                batch: cfg.batch,
                repeats: cfg.repeats,
                mean_seconds: mean,
                std_seconds: var.sqrt(),
                min_seconds: t.iter().copied().fold(f64::INFINITY, f64::min),
                loss,
            }
        })
        .collect())
}

/// Rows as CSV text with [`BENCH_HEADER`] first.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:e},{:e},{:e},{:?}\n",
            r.implementation,
            r.steps,
            r.hidden,
            r.layers,
            r.batch,
            r.repeats,
            r.mean_seconds,
            r.std_seconds,
            r.min_seconds,
            r.loss
        ));
    }
    out
}
