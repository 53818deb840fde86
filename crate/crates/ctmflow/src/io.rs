//! CSV ingestion and emission.
//!
//! Input files have a header row, comma separators and `.` decimals. Rows
//! with an empty or `NA` cell in any used column are dropped and counted.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ctmflow_core::Dataset;

use crate::error::{CliError, Result};

/// Numeric columns read from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub path: PathBuf,
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    /// Rows discarded because a used cell was missing.
    pub dropped: usize,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

impl Table {
    /// Reads `path`, keeping only `keep` columns when given.
    pub fn read(path: impl AsRef<Path>, keep: Option<&[String]>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
        let all: Vec<String> = reader
            .headers()
            .map_err(|e| csv_err(&path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let selected: Vec<usize> = match keep {
            None => (0..all.len()).collect(),
            Some(names) => {
                let missing: Vec<&String> = names.iter().filter(|n| !all.contains(n)).collect();
                if !missing.is_empty() {
                    return Err(CliError::Schema { path, expected: names.to_vec(), found: all });
                }
                names.iter().map(|n| all.iter().position(|h| h == n).unwrap()).collect()
            }
        };
        let headers: Vec<String> = selected.iter().map(|&j| all[j].clone()).collect();
        let mut columns = vec![Vec::new(); selected.len()];
        let mut dropped = 0;
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_err(&path, e))?;
            let cells: Vec<&str> = selected.iter().map(|&j| record.get(j).unwrap_or("")).collect();
            if cells.iter().any(|c| is_missing(c)) {
                dropped += 1;
                continue;
            }
            for (k, cell) in cells.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| {
                    CliError::parse(&path, format!("row {}: column `{}` is not numeric: `{cell}`", line + 2, headers[k]))
                })?;
                columns[k].push(v);
            }
        }
        Ok(Self { path, headers, columns, dropped })
    }

    pub fn n(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.headers.iter().position(|h| h == name).map(|j| self.columns[j].as_slice())
    }

    /// Dataset with `outcome` and the listed features.
    pub fn dataset(&self, outcome: &str, features: &[String]) -> Result<Dataset> {
        let mut expected = vec![outcome.to_string()];
        expected.extend(features.iter().cloned());
        if expected.iter().any(|c| self.column(c).is_none()) {
            return Err(CliError::Schema { path: self.path.clone(), expected, found: self.headers.clone() });
        }
        let y = self.column(outcome).unwrap().to_vec();
        let cols = features.iter().map(|f| self.column(f).unwrap().to_vec()).collect();
        Ok(Dataset::new(outcome, y, features.to_vec(), cols)?)
    }

    /// Feature-only dataset for prediction; the outcome is attached when present.
    pub fn prediction_dataset(&self, outcome: &str, features: &[String]) -> Result<Dataset> {
        if self.column(outcome).is_some() {
            return self.dataset(outcome, features);
        }
        let missing: Vec<&String> = features.iter().filter(|f| self.column(f).is_none()).collect();
        if !missing.is_empty() {
            return Err(CliError::Schema { path: self.path.clone(), expected: features.to_vec(), found: self.headers.clone() });
        }
        let cols = features.iter().map(|f| self.column(f).unwrap().to_vec()).collect();
        Ok(Dataset::features(self.n(), features.to_vec(), cols)?)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::parse(path, format!("{other:?}")),
    }
}

/// Writes a header and rows of numbers, shortest round-trip formatting.
pub fn write_csv(path: impl AsRef<Path>, headers: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(BufWriter::new(create(path)?));
    w.write_record(headers).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes string records.
pub fn write_records(path: impl AsRef<Path>, headers: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(BufWriter::new(create(path)?));
    w.write_record(headers).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::parse(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn drops_rows_with_missing_cells() {
        let f = tmp_csv("y,x1,x2\n1.0,2.0,3.0\n2.0,,1.0\nNA,1,1\n3.5,0.5,-1e-3\n");
        let t = Table::read(f.path(), None).unwrap();
        assert_eq!(t.n(), 2);
        assert_eq!(t.dropped, 2);
        assert_eq!(t.column("x2").unwrap(), &[3.0, -1e-3]);
    }

    #[test]
    fn unused_missing_cells_are_kept() {
        let f = tmp_csv("y,x1,junk\n1.0,2.0,\n2.0,3.0,\n");
        let keep = vec!["y".to_string(), "x1".to_string()];
        let t = Table::read(f.path(), Some(&keep)).unwrap();
        assert_eq!((t.n(), t.dropped), (2, 0));
    }

    #[test]
    fn schema_mismatch_lists_columns() {
        let f = tmp_csv("y,a\n1,2\n");
        let t = Table::read(f.path(), None).unwrap();
        match t.dataset("y", &["b".to_string()]) {
            Err(CliError::Schema { expected, found, .. }) => {
                assert_eq!(expected, vec!["y", "b"]);
                assert_eq!(found, vec!["y", "a"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_a_parse_error() {
        let f = tmp_csv("y,x\n1,abc\n");
        let err = Table::read(f.path(), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("abc"));
    }

    #[test]
    fn missing_file_is_io() {
        let err = Table::read("/nonexistent/file.csv", None).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        let v = [0.1 + 0.2, 1.0 / 3.0, -2.5e-300];
        write_csv(&p, &["a".into(), "b".into(), "c".into()], &[v.to_vec()]).unwrap();
        let t = Table::read(&p, None).unwrap();
        for (j, x) in v.iter().enumerate() {
            assert_eq!(t.columns[j][0].to_bits(), x.to_bits());
        }
    }
}
