//! Delimited-text sequence files.
//!
//! One row per time step. Columns, in this order:
//!
//! ```text
//! seq_id,split,step,x_1,...,x_d,y_1,...,y_k     (sequence targets)
//! seq_id,split,step,x_1,...,x_d,label           (class targets)
//! ```
//!
//! The `split` column is optional on input (missing means `train`). Rows of
//! one sequence must be contiguous with steps `1, 2, …`; sequences keep the
//! order of their first row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SequenceDataset, Split, TargetSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// What the target columns hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsvTarget {
    /// `y_1..y_k` on every row.
    Sequence { width: usize },
    /// A `label` column, constant within a sequence. The class count is
    /// inferred from the largest label when not given.
    Label { n_classes: Option<usize> },
}

/// Expected layout of a sequence file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub input_dim: usize,
    pub target: CsvTarget,
    /// Name of the sequence-identifier column.
    pub id_column: String,
}

impl CsvSchema {
    pub fn sequence(input_dim: usize, width: usize) -> Self {
        Self {
            input_dim,
            target: CsvTarget::Sequence { width },
            id_column: "seq_id".into(),
        }
    }

    pub fn labels(input_dim: usize, n_classes: Option<usize>) -> Self {
        Self {
            input_dim,
            target: CsvTarget::Label { n_classes },
            id_column: "seq_id".into(),
        }
    }

    /// The schema that [`write_csv_sequences`] uses for `ds`.
    pub fn of(ds: &SequenceDataset) -> Self {
        match &ds.targets {
            TargetSet::Sequences(_) => Self::sequence(ds.input_dim(), ds.out_dim()),
            TargetSet::Classes { n_classes, .. } => Self::labels(ds.input_dim(), Some(*n_classes)),
        }
    }

    fn header(&self, with_split: bool) -> Vec<String> {
        let mut h = vec![self.id_column.clone()];
        if with_split {
            h.push("split".into());
        }
        h.push("step".into());
        h.extend((1..=self.input_dim).map(|i| format!("x_{i}")));
        match self.target {
            CsvTarget::Sequence { width } => h.extend((1..=width).map(|i| format!("y_{i}"))),
            CsvTarget::Label { .. } => h.push("label".into()),
        }
        h
    }
}

struct Pending {
    id: String,
    split: Split,
    x: Vec<f64>,
    y: Vec<f64>,
    label: Option<usize>,
    steps: usize,
}

/// Reads a sequence file laid out as described by `schema`.
pub fn load_csv_sequences(path: &Path, schema: &CsvSchema) -> Result<SequenceDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, Some(1), e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Dataset(format!("{} is empty", path.display())));
    }
    let with_split = header.get(1).map(String::as_str) == Some("split");
    let expected = schema.header(with_split);
    if header != expected {
        return Err(Error::Dataset(format!(
            "{}: columns {:?} do not match the schema, expected {:?}",
            path.display(),
            header,
            expected
        )));
    }
    let d = schema.input_dim;
    let x0 = if with_split { 3 } else { 2 };
    let mut done: Vec<Pending> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut cur: Option<Pending> = None;

    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize);
        let bad = |msg: String| Error::parse(path, line, msg);
        if rec.len() != expected.len() {
            return Err(bad(format!("expected {} fields, found {}", expected.len(), rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("column {} holds '{}', not a number", expected[i], &rec[i])))
        };
        let id = rec[0].to_string();
        let split = if with_split {
            rec[1].parse::<Split>().map_err(|e| bad(e.to_string()))?
        } else {
            Split::Train
        };
        let step: usize = rec[x0 - 1]
            .parse()
            .map_err(|_| bad(format!("step '{}' is not a positive integer", &rec[x0 - 1])))?;
        let starts_new = cur.as_ref().is_none_or(|p| p.id != id);
        if starts_new {
            if let Some(p) = cur.take() {
                done.push(p);
            }
            if !seen.insert(id.clone()) {
                return Err(bad(format!("rows of sequence '{id}' are not contiguous")));
            }
            cur = Some(Pending {
                id: id.clone(),
                split,
                x: Vec::new(),
                y: Vec::new(),
                label: None,
                steps: 0,
            });
        }
        let p = cur.as_mut().expect("current sequence exists");
        if step != p.steps + 1 {
            return Err(bad(format!(
                "sequence '{id}': expected step {}, found {step}",
                p.steps + 1
            )));
        }
        if split != p.split {
            return Err(bad(format!("sequence '{id}' changes split mid-sequence")));
        }
        for i in 0..d {
            p.x.push(num(x0 + i)?);
        }
        match schema.target {
            CsvTarget::Sequence { width } => {
                for i in 0..width {
                    p.y.push(num(x0 + d + i)?);
                }
            }
            CsvTarget::Label { n_classes } => {
                let raw = &rec[x0 + d];
                let label: usize = raw
                    .parse()
                    .map_err(|_| bad(format!("label '{raw}' is not a class index")))?;
                if let Some(k) = n_classes {
                    if label >= k {
                        return Err(bad(format!("label {label} outside 0..{k}")));
                    }
                }
                if p.label.is_some_and(|l| l != label) {
                    return Err(bad(format!("sequence '{id}' changes label mid-sequence")));
                }
                p.label = Some(label);
            }
        }
        p.steps += 1;
    }
    if let Some(p) = cur {
        done.push(p);
    }
    if done.is_empty() {
        return Err(Error::Dataset(format!("{} contains no sequences", path.display())));
    }

    let splits = done.iter().map(|p| p.split).collect();
    let targets = match schema.target {
        CsvTarget::Sequence { width } => TargetSet::Sequences(
            done.iter()
                .map(|p| Matrix::from_vec(p.steps, width, p.y.clone()))
                .collect::<Result<_>>()?,
        ),
        CsvTarget::Label { n_classes } => {
            let labels: Vec<usize> = done.iter().map(|p| p.label.expect("at least one row")).collect();
            let inferred = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
            TargetSet::Classes {
                labels,
                n_classes: n_classes.unwrap_or(inferred),
            }
        }
    };
    let inputs = done
        .into_iter()
        .map(|p| Matrix::from_vec(p.steps, d, p.x))
        .collect::<Result<_>>()?;
    SequenceDataset::new(inputs, targets, splits)
}

/// Writes `ds` in the format read by [`load_csv_sequences`], split column
/// included. Sequence ids are the 0-based positions in the dataset.
pub fn write_csv_sequences(ds: &SequenceDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let schema = CsvSchema::of(ds);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", schema.header(true).join(",")).map_err(io)?;
    let mut line = String::new();
    for (s, x) in ds.inputs.iter().enumerate() {
        for n in 0..x.rows() {
            line.clear();
            line.push_str(&format!("{s},{},{}", ds.splits[s], n + 1));
            for v in x.row(n) {
                line.push_str(&format!(",{v:?}"));
            }
            match &ds.targets {
                TargetSet::Sequences(t) => {
                    for v in t[s].row(n) {
                        line.push_str(&format!(",{v:?}"));
                    }
                }
                TargetSet::Classes { labels, .. } => line.push_str(&format!(",{}", labels[s])),
            }
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
