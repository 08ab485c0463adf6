//! Metric-history files.
//!
//! Columns: `epoch,split,metric,value,wall_time`. Writing to an existing
//! file appends rows after checking its header.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::MetricRow;

pub const METRICS_HEADER: &str = "epoch,split,metric,value,wall_time";

/// Appends `rows` to `path`, writing the header first if the file is new or
/// empty.
pub fn write_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Contract("no metric rows to write".into()));
    }
    let fresh = match fs::read_to_string(path) {
        Ok(text) if text.is_empty() => true,
        Ok(text) => {
            if text.lines().next() != Some(METRICS_HEADER) {
                return Err(Error::parse(
                    path,
                    Some(1),
                    format!("existing header is not '{METRICS_HEADER}'"),
                ));
            }
            false
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => true,
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = String::new();
    if fresh {
        out.push_str(METRICS_HEADER);
        out.push('\n');
    }
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{:?}\n",
            r.epoch, r.split, r.metric, r.value, r.wall_time
        ));
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => {
            return Err(Error::parse(
                path,
                Some(1),
                format!("expected header '{METRICS_HEADER}'"),
            ))
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |msg: &str| Error::parse(path, Some(i + 1), msg.to_string());
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            Ok(MetricRow {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                split: f[1].parse().map_err(|_| bad("bad split"))?,
                metric: f[2].to_string(),
                value: f[3].parse().map_err(|_| bad("bad value"))?,
                wall_time: f[4].parse().map_err(|_| bad("bad wall time"))?,
            })
        })
        .collect()
}

/// `(epoch, value)` pairs of one metric on one split, in file order.
pub fn metric_series(rows: &[MetricRow], split: crate::tasks::Split, metric: &str) -> Vec<(usize, f64)> {
    rows.iter()
        .filter(|r| r.split == split && r.metric == metric)
        .map(|r| (r.epoch, r.value))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Split;

    fn rows(epoch: usize) -> Vec<MetricRow> {
        [
            (Split::Train, "loss", 0.125 + epoch as f64),
            (Split::Valid, "nrmse", 1.0 / 3.0),
        ]
        .into_iter()
        .map(|(split, metric, value)| MetricRow {
            epoch,
            split,
            metric: metric.into(),
            value,
            wall_time: 0.1 * epoch as f64,
        })
        .collect()
    }

    #[test]
    fn one_epoch_writes_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&rows(1), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "1,train,loss,1.125,0.1");
    }

    #[test]
    fn appends_and_reads_back_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&rows(1), &p).unwrap();
        write_metrics(&rows(2), &p).unwrap();
        let back = read_metrics(&p).unwrap();
        let mut want = rows(1);
        want.extend(rows(2));
        assert_eq!(back, want);
        assert_eq!(fs::read_to_string(&p).unwrap().matches("epoch").count(), 1);
        assert_eq!(metric_series(&back, Split::Train, "loss"), vec![(1, 1.125), (2, 2.125)]);
    }

    #[test]
    fn foreign_file_is_not_appended_to() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(write_metrics(&rows(1), &p).is_err());
        assert!(write_metrics(&[], &dir.path().join("n.csv")).is_err());
    }
}
