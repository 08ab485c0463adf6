//! Data generation, sequence files, checkpoints and metric logs.

mod checkpoint;
mod csv_io;
mod dataset;
mod lorenz;
mod metrics;
mod noise_padded;

pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
    CHECKPOINT_FORMAT,
};
pub use csv_io::{load_csv_sequences, write_csv_sequences, CsvSchema, CsvTarget};
pub use dataset::{SequenceDataset, Split, TargetSet};
pub use lorenz::{integrate, lorenz96_generate, lorenz96_rhs, rk4_step, Lorenz96Config};
pub use metrics::{metric_series, read_metrics, write_metrics, METRICS_HEADER};
pub use noise_padded::{noise_padded_task, NoisePaddedConfig};
