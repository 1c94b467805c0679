//! The shared metrics table: `run_id,metric,value,seed,config_hash`.
//!
//! A `run_id` of the form `series@x` places the row at position `x` of the
//! named series when plotted.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricRow {
    /// Series name and x position; rows without `@x` get `None`.
    pub fn series(&self) -> (&str, Option<f64>) {
        match self.run_id.rsplit_once('@') {
            Some((name, x)) => match x.parse() {
                Ok(x) => (name, Some(x)),
                Err(_) => (&self.run_id, None),
            },
            None => (&self.run_id, None),
        }
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
    let fresh = file.metadata().map_err(|e| CliError::io(path, e))?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::io(path, source),
        other => CliError::Csv(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::Csv(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run_id: &str, value: f64) -> MetricRow {
        MetricRow { run_id: run_id.into(), metric: "loss".into(), value, seed: 3, config_hash: "ab".into() }
    }

    #[test]
    fn append_then_read_round_trips() {
        let dir = std::env::temp_dir().join(format!("smdm-metrics-{}", std::process::id()));
        let path = dir.join("m.csv");
        let _ = std::fs::remove_file(&path);
        append(&path, &[row("train@1", 0.5)]).unwrap();
        append(&path, &[row("train@2", 0.25), row("eval", 1.0)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("run_id,metric,value,seed,config_hash"));
        assert_eq!(read(&path).unwrap(), vec![row("train@1", 0.5), row("train@2", 0.25), row("eval", 1.0)]);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn series_split() {
        assert_eq!(row("sparse@50", 0.0).series(), ("sparse", Some(50.0)));
        assert_eq!(row("eval", 0.0).series(), ("eval", None));
        assert_eq!(row("a@b", 0.0).series(), ("a@b", None));
    }
}
