//! Writes a generated dataset to CSV, reads it back, trains briefly, saves a
//! checkpoint and confirms the reloaded model reproduces the same outputs.
//!
//! ```text
//! cargo run --release --example checkpoint_csv -- [dir]
//! ```

use std::path::PathBuf;

use unicornn::model::{Mode, ModelConfig, ReadoutSite};
use unicornn::tasks::{
    load_checkpoint, load_csv_sequences, lorenz96_generate, save_checkpoint, write_csv_sequences, Checkpoint,
    CsvSchema, Lorenz96Config, Split,
};
use unicornn::train::{fit, init_params, TrainConfig};

fn main() -> unicornn::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("unicornn-checkpoint-csv"));
    std::fs::create_dir_all(&dir).map_err(|e| unicornn::Error::Config(format!("{}: {e}", dir.display())))?;

    let task = Lorenz96Config {
        n_train: 24,
        n_valid: 8,
        n_test: 8,
        seq_len: 200,
        ..Default::default()
    };
    let data = lorenz96_generate(&task)?;
    let csv_path = dir.join("lorenz.csv");
    write_csv_sequences(&data, &csv_path)?;
    let loaded = load_csv_sequences(&csv_path, &CsvSchema::of(&data))?;
    println!(
        "{}: {} sequences, {:?} per split, identical after reload: {}",
        csv_path.display(),
        loaded.len(),
        loaded.split_counts(),
        loaded == data
    );

    let train = loaded.select(Split::Train)?;
    let valid = loaded.select(Split::Valid)?;
    let cfg = ModelConfig::new(
        2,
        16,
        train.input_dim(),
        train.out_dim(),
        0.1,
        1.0,
        ReadoutSite::PerStep,
    );
    let train_cfg = TrainConfig {
        epochs: 3,
        lr: 0.02,
        batch_size: 8,
        ..Default::default()
    };
    let out = fit(init_params(&cfg, 0)?, &train, &valid, &train_cfg)?;

    let mut ckpt = Checkpoint::new(out.last);
    ckpt.optimizer = Some(out.optimizer);
    ckpt.meta.task = "lorenz96".into();
    ckpt.meta.epoch = out.epochs_run;
    let ckpt_path = dir.join("model.ckpt.json");
    save_checkpoint(&ckpt, &ckpt_path)?;
    let restored = load_checkpoint(&ckpt_path)?;
    restored.check_against(&cfg)?;

    let (x, _) = valid.batch(&[0, 1])?;
    let before = ckpt.model.forward(&x, Mode::Eval, None)?;
    let after = restored.model.forward(&x, Mode::Eval, None)?;
    println!(
        "{}: epoch {}, outputs bit-identical after reload: {}",
        ckpt_path.display(),
        restored.meta.epoch,
        before == after
    );
    Ok(())
}
