//! JSON and CSV files. Every file starts with the config hash and master seed.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Provenance written into every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub master_seed: u64,
}

impl Stamp {
    fn csv_comment(&self) -> String {
        format!("# config_hash={} master_seed={}\n", self.config_hash, self.master_seed)
    }
}

/// Row-major dense matrix with its dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for DenseMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl DenseMatrix {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(CliError::Data(format!("matrix has {} entries, expected {}x{}", self.data.len(), self.rows, self.cols)));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// A table with a header row; the first line is the stamp comment.
pub fn write_table(path: &Path, stamp: &Stamp, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut text = stamp.csv_comment();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_f64).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Observed data: header of variable names, one sample per row.
pub fn write_data(path: &Path, stamp: &Stamp, names: &[String], data: &DMatrix<f64>) -> Result<()> {
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    write_table(path, stamp, &header, (0..data.nrows()).map(|i| data.row(i).iter().copied().collect()))
}

/// Reads an `n × p` data CSV. Lines starting with `#` are ignored.
pub fn read_data(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let names: Vec<String> = reader.headers().map_err(|e| CliError::io(path, e))?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(CliError::Data(format!("{}: missing header row", path.display())));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| CliError::io(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() {
            return Err(CliError::Data(format!(
                "{}: line {line}: {} fields, header has {}",
                path.display(),
                record.len(),
                names.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CliError::Data(format!("{}: line {line}, column {}: '{cell}' is not a finite number", path.display(), col + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows < 2 {
        return Err(CliError::Data(format!("{}: insufficient data: {rows} samples, need at least 2", path.display())));
    }
    Ok((names, DMatrix::from_row_slice(rows, values.len() / rows, &values)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stamp() -> Stamp {
        Stamp { config_hash: "abc".into(), master_seed: 3 }
    }

    #[test]
    fn data_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let m = DMatrix::from_row_slice(3, 2, &[0.1, -1e-300, 1.0 / 3.0, 2.5e17, -0.0, 7.0]);
        let names = vec!["a".to_string(), "b".to_string()];
        write_data(&path, &stamp(), &names, &m).unwrap();
        let (n2, m2) = read_data(&path).unwrap();
        assert_eq!(n2, names);
        assert_eq!(m2, m);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_hash=abc master_seed=3\n"));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "x,y\n1,2\n3,oops\n").unwrap();
        let err = read_data(&path).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("column 2"), "{err}");
        fs::write(&path, "x,y\n1,2\n").unwrap();
        assert!(read_data(&path).unwrap_err().to_string().contains("insufficient"));
    }

    #[test]
    fn matrices_serialize_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = DenseMatrix::from(&m);
        assert_eq!(d.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back: DenseMatrix = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back.to_matrix().unwrap(), m);
    }
}
