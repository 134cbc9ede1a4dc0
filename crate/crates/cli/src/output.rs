use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::CliError;

/// Write `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// RFC 4180 CSV from a header and string rows.
pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let err = |e: csv::Error| CliError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

/// Shortest round-trip representation; empty for NaN.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:?}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Dated matrix with labelled columns.
pub fn write_dated_matrix(
    path: &Path,
    columns: &[String],
    dates: &[NaiveDate],
    values: &DMatrix<f64>,
) -> Result<(), CliError> {
    let mut header = vec!["date".to_string()];
    header.extend(columns.iter().cloned());
    let rows: Vec<Vec<String>> = dates
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut row = vec![d.to_string()];
            row.extend(values.row(i).iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Square or rectangular matrix with row labels in the first column.
pub fn write_labelled_matrix(
    path: &Path,
    row_names: &[String],
    col_names: &[String],
    values: &DMatrix<f64>,
) -> Result<(), CliError> {
    let mut header = vec![String::new()];
    header.extend(col_names.iter().cloned());
    let rows: Vec<Vec<String>> = row_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut row = vec![name.clone()];
            row.extend(values.row(i).iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_fields() {
        let bytes = csv_bytes(
            &["a".into(), "b,c".into()],
            &[vec!["x\"y".into(), "1".into()]],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "a,\"b,c\"\n\"x\"\"y\",1\n"
        );
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, -1e-300, 123456.789, 1.0 / 3.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(f64::NAN), "");
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
