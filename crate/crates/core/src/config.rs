//! Run configuration: TOML files, named presets and command-line overrides.
//!
//! A run is one TOML document with four sections:
//!
//! ```toml
//! [task]
//! kind = "lorenz96"        # or "noise-padded", "csv"
//! forcing = 0.9            # remaining keys belong to the chosen task
//!
//! [model]
//! layers = 2
//! hidden = 32
//! dt = 0.1
//! alpha = 1.0
//!
//! [train]
//! epochs = 60
//! lr = 0.01
//!
//! [output]
//! dir = "runs/lorenz"
//! ```
//!
//! Documents are layered: a preset first, then a file, then individual
//! `section.key=value` overrides. Later layers replace single keys, except
//! that choosing a different `task.kind` discards the earlier task keys.
//! Unknown keys are rejected and the merged result is validated before any
//! data is generated or loaded.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ReadoutKind, ReadoutSite};
use crate::tasks::{
    load_csv_sequences, lorenz96_generate, noise_padded_task, CsvSchema, CsvTarget, Lorenz96Config, NoisePaddedConfig,
    SequenceDataset, Split,
};
use crate::train::TrainConfig;

/// Layout of the target columns of a CSV task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsvTargetKind {
    Sequence,
    Label,
}

/// A dataset read from a sequence file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTaskConfig {
    pub path: PathBuf,
    pub input_dim: usize,
    pub target: CsvTargetKind,
    /// Target columns per step; required for sequence targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Required for label targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    /// Used only when the file carries no validation or test sequences.
    #[serde(default = "default_fraction")]
    pub valid_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_id_column() -> String {
    "seq_id".into()
}

fn default_fraction() -> f64 {
    0.1
}

impl CsvTaskConfig {
    pub fn schema(&self) -> Result<CsvSchema> {
        let target = match (self.target, self.width, self.n_classes) {
            (CsvTargetKind::Sequence, Some(width), None) if width > 0 => CsvTarget::Sequence { width },
            (CsvTargetKind::Label, None, Some(n)) if n >= 2 => CsvTarget::Label { n_classes: Some(n) },
            (CsvTargetKind::Sequence, _, _) => {
                return Err(Error::Config(
                    "csv sequence targets need a positive task.width and no task.n_classes".into(),
                ))
            }
            (CsvTargetKind::Label, _, _) => {
                return Err(Error::Config(
                    "csv label targets need task.n_classes >= 2 and no task.width".into(),
                ))
            }
        };
        if self.input_dim == 0 {
            return Err(Error::Config("csv task needs a positive task.input_dim".into()));
        }
        let (v, t) = (self.valid_fraction, self.test_fraction);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum below 1, got {v} and {t}"
            )));
        }
        Ok(CsvSchema {
            input_dim: self.input_dim,
            target,
            id_column: self.id_column.clone(),
        })
    }
}

/// Where the data of a run comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskConfig {
    Lorenz96(Lorenz96Config),
    NoisePadded(NoisePaddedConfig),
    Csv(CsvTaskConfig),
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Lorenz96(Lorenz96Config::default())
    }
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Lorenz96(_) => "lorenz96",
            TaskConfig::NoisePadded(_) => "noise-padded",
            TaskConfig::Csv(_) => "csv",
        }
    }

    /// `(input_dim, out_dim, readout site)` implied by the task.
    pub fn shape(&self) -> Result<(usize, usize, ReadoutSite)> {
        Ok(match self {
            TaskConfig::Lorenz96(c) => (c.dim, c.dim, ReadoutSite::PerStep),
            TaskConfig::NoisePadded(c) => (c.input_dim, c.n_classes, ReadoutSite::Final),
            TaskConfig::Csv(c) => match c.schema()?.target {
                CsvTarget::Sequence { width } => (c.input_dim, width, ReadoutSite::PerStep),
                CsvTarget::Label { n_classes } => (c.input_dim, n_classes.unwrap_or(0), ReadoutSite::Final),
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskConfig::Lorenz96(c) => c.validate(),
            TaskConfig::NoisePadded(c) => c.validate(),
            TaskConfig::Csv(c) => c.schema().map(|_| ()),
        }
    }

    /// Generates or reads the dataset with train, validation and test tags.
    pub fn load(&self) -> Result<SequenceDataset> {
        match self {
            TaskConfig::Lorenz96(c) => lorenz96_generate(c),
            TaskConfig::NoisePadded(c) => noise_padded_task(c),
            TaskConfig::Csv(c) => {
                let mut ds = load_csv_sequences(&c.path, &c.schema()?)?;
                let [_, valid, test] = ds.split_counts();
                if valid == 0 || test == 0 {
                    ds.resplit(c.valid_fraction, c.test_fraction, c.split_seed)?;
                }
                Ok(ds)
            }
        }
    }
}

/// Architecture keys of a run. Input and output widths come from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    /// Time step shared by all layers.
    pub dt: f64,
    /// Time step of the first layer when it differs from the rest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_first: Option<f64>,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip: Option<usize>,
    pub dropout: f64,
    pub readout: ReadoutKind,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            dt: 0.1,
            dt_first: None,
            alpha: 1.0,
            skip: None,
            dropout: 0.0,
            readout: ReadoutKind::Affine,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Run directory receiving the echoed configuration, metrics and
    /// checkpoint.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
        }
    }
}

/// The merged configuration of one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses one complete document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Merges `preset`, the file at `file` and `overrides`, in that order.
    pub fn layered(preset: Option<&str>, file: Option<&Path>, overrides: &[Override]) -> Result<Self> {
        let mut table = Table::new();
        if let Some(name) = preset {
            merge(&mut table, preset_table(name)?);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let doc: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::parse(path, line_of(&text, e.span()), e.message()))?;
            merge(&mut table, doc);
        }
        for o in overrides {
            merge(&mut table, o.as_table());
        }
        Self::from_table(table)
    }

    /// The model architecture for this task.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let (input_dim, out_dim, site) = self.task.shape()?;
        let m = &self.model;
        let mut cfg =
            ModelConfig::new(m.layers, m.hidden, input_dim, out_dim, m.dt, m.alpha, site).with_dropout(m.dropout);
        if let Some(dt) = m.dt_first {
            cfg = cfg.with_first_dt(dt);
        }
        if let Some(s) = m.skip {
            cfg = cfg.with_skip(s);
        }
        if m.readout == ReadoutKind::Identity {
            cfg = cfg.identity_readout();
            if cfg.out_dim != out_dim {
                return Err(Error::Config(format!(
                    "identity readout emits {} values but the task needs {out_dim}",
                    cfg.out_dim
                )));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model_config()?.validate()?;
        self.train.validate()
    }

    /// The effective configuration as a TOML document.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    /// Loads the data and returns the train, validation and test parts.
    pub fn load_splits(&self) -> Result<[SequenceDataset; 3]> {
        let ds = self.task.load()?;
        Ok([
            ds.select(Split::Train)?,
            ds.select(Split::Valid)?,
            ds.select(Split::Test)?,
        ])
    }
}

fn line_of(text: &str, span: Option<std::ops::Range<usize>>) -> Option<usize> {
    span.map(|s| text[..s.start.min(text.len())].lines().count().max(1))
}

/// Recursively copies `src` into `dst`. A task table naming a different
/// kind replaces the existing one wholesale.
fn merge(dst: &mut Table, src: Table) {
    for (key, value) in src {
        match (dst.get_mut(&key), value) {
            (Some(Value::Table(old)), Value::Table(new)) => {
                let switches_kind =
                    key == "task" && new.get("kind").is_some_and(|k| old.get("kind").is_some_and(|o| o != k));
                if switches_kind {
                    *old = new;
                } else {
                    merge(old, new);
                }
            }
            (_, value) => {
                dst.insert(key, value);
            }
        }
    }
}

/// One `section.key=value` assignment from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn new(path: &str, value: impl Into<Value>) -> Self {
        Self {
            path: path.split('.').map(str::to_string).collect(),
            value: value.into(),
        }
    }

    fn as_table(&self) -> Table {
        let mut value = self.value.clone();
        for key in self.path.iter().rev() {
            let mut t = Table::new();
            t.insert(key.clone(), value);
            value = Value::Table(t);
        }
        match value {
            Value::Table(t) => t,
            _ => unreachable!("an override path has at least one key"),
        }
    }
}

impl std::str::FromStr for Override {
    type Err = Error;

    /// Parses `a.b=value`. The value is read as a TOML value when possible
    /// and as a bare string otherwise.
    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{s}' is not of the form section.key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("override '{s}' has an empty key")));
        }
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Override::new(key, value))
    }
}

/// A named starting point for a run.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub toml: &'static str,
}

/// Built-in presets. The benchmark rows carry only the learning rate,
/// dropout, batch size, time steps and α of the published best
/// configurations; every other key keeps its default.
pub const PRESETS: &[Preset] = &[
    Preset {
        name: "lorenz-f09",
        summary: "Lorenz 96 with F = 0.9, 2 x 32 units, 60 epochs",
        toml: r#"
[task]
kind = "lorenz96"
forcing = 0.9

[model]
layers = 2
hidden = 32
dt = 0.1
alpha = 1.0

[train]
epochs = 60
lr = 0.02
batch_size = 8
"#,
    },
    Preset {
        name: "lorenz-f8",
        summary: "Lorenz 96 with F = 8 (chaotic), same budget as lorenz-f09",
        toml: r#"
[task]
kind = "lorenz96"
forcing = 8.0

[model]
layers = 2
hidden = 32
dt = 0.1
alpha = 1.0

[train]
epochs = 60
lr = 0.02
batch_size = 8
"#,
    },
    Preset {
        name: "noise-padded-desk",
        summary: "synthetic noise-padded classification, 3 x 64 units",
        toml: r#"
[task]
kind = "noise-padded"

[model]
layers = 3
hidden = 64
dt = 0.126
alpha = 13.0

[train]
epochs = 6
lr = 0.01
batch_size = 30
"#,
    },
    Preset {
        name: "noise-padded-cifar10",
        summary: "published best configuration for noise-padded CIFAR-10",
        toml: r#"
[model]
dropout = 0.1
dt = 0.126
alpha = 13.0

[train]
lr = 3.14e-2
batch_size = 30
"#,
    },
    Preset {
        name: "psmnist-128",
        summary: "published best configuration for psMNIST with 128 units",
        toml: r#"
[model]
hidden = 128
dropout = 0.1
dt = 0.482
alpha = 12.53

[train]
lr = 1.14e-3
batch_size = 64
"#,
    },
    Preset {
        name: "psmnist-256",
        summary: "published best configuration for psMNIST with 256 units",
        toml: r#"
[model]
hidden = 256
dropout = 0.1
dt = 0.19
alpha = 30.65

[train]
lr = 2.51e-3
batch_size = 32
"#,
    },
    Preset {
        name: "imdb",
        summary: "published best configuration for IMDB",
        toml: r#"
[model]
dropout = 0.61
dt = 0.205
dt_first = 6.6e-3
alpha = 0.0

[train]
lr = 1.67e-4
batch_size = 32
"#,
    },
    Preset {
        name: "eigenworms",
        summary: "published best configuration for EigenWorms",
        toml: r#"
[model]
dropout = 0.0
dt = 3.43e-2
dt_first = 2.81e-5
alpha = 0.0

[train]
lr = 8.59e-3
batch_size = 8
"#,
    },
    Preset {
        name: "healthcare-rr",
        summary: "published best configuration for respiratory-rate prediction",
        toml: r#"
[model]
dropout = 0.1
dt = 1.1e-2
alpha = 9.0

[train]
lr = 3.98e-3
batch_size = 32
"#,
    },
    Preset {
        name: "healthcare-hr",
        summary: "published best configuration for heart-rate prediction",
        toml: r#"
[model]
dropout = 0.1
dt = 4.6e-2
alpha = 10.0

[train]
lr = 2.88e-3
batch_size = 32
"#,
    },
];

/// The preset called `name`.
pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        Error::Config(format!("unknown preset '{name}'; available: {}", names.join(", ")))
    })
}

fn preset_table(name: &str) -> Result<Table> {
    let p = preset(name)?;
    p.toml
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("preset {name}: {}", e.message())))
}
