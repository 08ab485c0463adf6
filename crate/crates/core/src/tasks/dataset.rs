//! In-memory sequence datasets tagged by split.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{SeqBatch, Targets};

/// Which partition a sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split '{other}'"))),
        }
    }
}

/// Supervision for every sequence of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSet {
    /// One `N × out_dim` array per sequence.
    Sequences(Vec<Matrix>),
    /// One class index per sequence.
    Classes { labels: Vec<usize>, n_classes: usize },
}

/// Input sequences with their targets and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    /// One `N × d` array per sequence.
    pub inputs: Vec<Matrix>,
    pub targets: TargetSet,
    pub splits: Vec<Split>,
}

impl SequenceDataset {
    /// Builds and validates a dataset.
    pub fn new(inputs: Vec<Matrix>, targets: TargetSet, splits: Vec<Split>) -> Result<Self> {
        let ds = Self {
            inputs,
            targets,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::cols)
    }

    /// Target width for regression, number of classes for classification.
    pub fn out_dim(&self) -> usize {
        match &self.targets {
            TargetSet::Sequences(t) => t.first().map_or(0, Matrix::cols),
            TargetSet::Classes { n_classes, .. } => *n_classes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.targets, TargetSet::Classes { .. })
    }

    /// Length of sequence `i`.
    pub fn steps(&self, i: usize) -> usize {
        self.inputs[i].rows()
    }

    /// Checks that every sequence agrees on widths and carries a target and
    /// a split tag.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Dataset("dataset contains no sequences".into()));
        }
        if self.splits.len() != self.len() {
            return Err(Error::Dataset(format!(
                "{} split tags for {} sequences",
                self.splits.len(),
                self.len()
            )));
        }
        let d = self.input_dim();
        for (i, x) in self.inputs.iter().enumerate() {
            if x.cols() != d {
                return Err(Error::Dataset(format!(
                    "sequence {i} has {} input columns, expected {d}",
                    x.cols()
                )));
            }
            if x.rows() == 0 {
                return Err(Error::Dataset(format!("sequence {i} is empty")));
            }
        }
        match &self.targets {
            TargetSet::Sequences(t) => {
                if t.len() != self.len() {
                    return Err(Error::Dataset(format!(
                        "{} target arrays for {} sequences",
                        t.len(),
                        self.len()
                    )));
                }
                let k = self.out_dim();
                for (i, (x, y)) in self.inputs.iter().zip(t).enumerate() {
                    if y.rows() != x.rows() || y.cols() != k {
                        return Err(Error::Dataset(format!(
                            "sequence {i}: target is {}x{}, expected {}x{k}",
                            y.rows(),
                            y.cols(),
                            x.rows()
                        )));
                    }
                }
            }
            TargetSet::Classes { labels, n_classes } => {
                if labels.len() != self.len() {
                    return Err(Error::Dataset(format!(
                        "{} labels for {} sequences",
                        labels.len(),
                        self.len()
                    )));
                }
                if *n_classes < 2 {
                    return Err(Error::Dataset("classification needs at least two classes".into()));
                }
                if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= *n_classes) {
                    return Err(Error::Dataset(format!(
                        "sequence {i}: label {l} outside 0..{n_classes}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of sequences in each split, in `Split::ALL` order.
    pub fn split_counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for s in &self.splits {
            out[*s as usize] += 1;
        }
        out
    }

    /// The sequences with the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> SequenceDataset {
        let targets = match &self.targets {
            TargetSet::Sequences(t) => TargetSet::Sequences(idx.iter().map(|&i| t[i].clone()).collect()),
            TargetSet::Classes { labels, n_classes } => TargetSet::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        };
        SequenceDataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets,
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    /// All sequences tagged `split`.
    pub fn select(&self, split: Split) -> Result<SequenceDataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        if idx.is_empty() {
            return Err(Error::Dataset(format!("the {split} split is empty")));
        }
        Ok(self.subset(&idx))
    }

    /// Concatenates datasets with matching shapes.
    pub fn concat(parts: &[SequenceDataset]) -> Result<SequenceDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dataset("nothing to concatenate".into()))?;
        let mut inputs = Vec::new();
        let mut splits = Vec::new();
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.is_classification() != first.is_classification() || p.out_dim() != first.out_dim() {
                return Err(Error::Dataset("datasets disagree on their targets".into()));
            }
            inputs.extend(p.inputs.iter().cloned());
            splits.extend_from_slice(&p.splits);
            match &p.targets {
                TargetSet::Sequences(t) => seqs.extend(t.iter().cloned()),
                TargetSet::Classes { labels: l, .. } => labels.extend_from_slice(l),
            }
        }
        let targets = match first.targets {
            TargetSet::Sequences(_) => TargetSet::Sequences(seqs),
            TargetSet::Classes { n_classes, .. } => TargetSet::Classes { labels, n_classes },
        };
        SequenceDataset::new(inputs, targets, splits)
    }

    /// Re-tags the sequences: a seeded shuffle, then the first `valid`
    /// fraction becomes validation, the next `test` fraction test, and the
    /// rest training.
    pub fn resplit(&mut self, valid: f64, test: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&valid) || !(0.0..1.0).contains(&test) || valid + test >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum below 1, got {valid} and {test}"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_valid = (valid * n as f64).round() as usize;
        let n_test = (test * n as f64).round() as usize;
        for (rank, &i) in order.iter().enumerate() {
            self.splits[i] = if rank < n_valid {
                Split::Valid
            } else if rank < n_valid + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
        Ok(())
    }

    /// Inputs and targets of the given sequences as one batch. All of them
    /// must have the same length.
    pub fn batch(&self, idx: &[usize]) -> Result<(SeqBatch, Targets)> {
        let seqs: Vec<&Matrix> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let input = SeqBatch::from_sequences(&seqs)
            .map_err(|e| Error::Dataset(format!("sequences in a batch must share one length: {e}")))?;
        let targets = match &self.targets {
            TargetSet::Sequences(t) => {
                let ts: Vec<&Matrix> = idx.iter().map(|&i| &t[i]).collect();
                Targets::Sequence(SeqBatch::from_sequences(&ts)?)
            }
            TargetSet::Classes { labels, .. } => Targets::Classes(idx.iter().map(|&i| labels[i]).collect()),
        };
        Ok((input, targets))
    }

    /// Randomly permutes the class labels across sequences (control
    /// experiments). Regression targets are left untouched.
    pub fn shuffle_labels(&mut self, seed: u64) {
        if let TargetSet::Classes { labels, .. } = &mut self.targets {
            labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
    }
}
