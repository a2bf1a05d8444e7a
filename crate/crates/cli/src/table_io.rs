//! CSV files holding a matrix with a leading index column.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! value reads back bit-identical.

use std::path::Path;

use nalgebra::DMatrix;

use crate::failure::{CliResult, Failure};

/// A matrix read from CSV together with its header and index column.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    /// Column names, excluding the index column.
    pub columns: Vec<String>,
    pub index: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_matrix(path: &Path) -> CliResult<LabeledMatrix> {
    let shown = path.display();
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| Failure::input(format!("cannot read {shown}: {}", io_reason(&e))))?;
    let header = reader
        .headers()
        .map_err(|e| Failure::input(format!("{shown}: {}", csv_reason(&e))))?
        .clone();
    if header.len() < 2 {
        return Err(Failure::input(format!(
            "{shown}: line 1: expected an index column and at least one value column"
        )));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut index = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Failure::input(format!("{shown}: {}", csv_reason(&e))))?;
        let line = record.position().map_or(0, |p| p.line());
        index.push(record[0].to_string());
        for (k, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Failure::input(format!(
                    "{shown}: line {line}, column `{}`: `{field}` is not a number",
                    header.get(k).unwrap_or("?")
                ))
            })?;
            if !v.is_finite() {
                return Err(Failure::input(format!(
                    "{shown}: line {line}: non-finite value `{field}`"
                )));
            }
            data.push(v);
        }
    }
    if index.is_empty() {
        return Err(Failure::input(format!("{shown}: no data rows")));
    }
    let values = DMatrix::from_row_slice(index.len(), columns.len(), &data);
    Ok(LabeledMatrix {
        columns,
        index,
        values,
    })
}

fn io_reason(e: &csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::Io(io) => io.to_string(),
        _ => e.to_string(),
    }
}

fn csv_reason(e: &csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::UnequalLengths {
            pos,
            expected_len,
            len,
        } => format!(
            "line {}: {len} fields where the header has {expected_len}",
            pos.as_ref().map_or(0, |p| p.line())
        ),
        csv::ErrorKind::Utf8 { pos, .. } => {
            format!(
                "line {}: invalid UTF-8",
                pos.as_ref().map_or(0, |p| p.line())
            )
        }
        _ => e.to_string(),
    }
}

/// Writes `values` with `index_name` heading the index column.
pub fn write_matrix(
    path: &Path,
    index_name: &str,
    index: &[String],
    columns: &[String],
    values: &DMatrix<f64>,
) -> CliResult<()> {
    debug_assert_eq!(values.shape(), (index.len(), columns.len()));
    let mut out = String::new();
    out.push_str(index_name);
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, label) in index.iter().enumerate() {
        out.push_str(label);
        for v in values.row(i).iter() {
            out.push(',');
            out.push_str(&format_number(*v));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn format_number(v: f64) -> String {
    format!("{v}")
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

/// `1..=n` as strings, the one-based index used for periods and series.
pub fn one_based(n: usize) -> Vec<String> {
    (1..=n).map(|k| k.to_string()).collect()
}

/// `prefix_1 .. prefix_n`.
pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("{prefix}_{k}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let values = DMatrix::from_row_slice(
            2,
            3,
            &[0.1, -1e-300, 1.0 / 3.0, 2.5e17, f64::MIN_POSITIVE, -7.0],
        );
        write_matrix(&path, "t", &one_based(2), &numbered("series", 3), &values).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.values, values);
        assert_eq!(back.columns, numbered("series", 3));
        assert_eq!(back.index, ["1", "2"]);
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,a,b\n1,0.5,1\n2,0.5\n").unwrap();
        let err = read_matrix(&path).unwrap_err();
        assert!(err.message.contains("line 3"), "{}", err.message);

        std::fs::write(&path, "t,a,b\n1,0.5,1\n2,0.5,x\n").unwrap();
        let err = read_matrix(&path).unwrap_err();
        assert!(
            err.message.contains("line 3") && err.message.contains("`b`"),
            "{}",
            err.message
        );
    }

    #[test]
    fn missing_file_is_an_input_error() {
        let err = read_matrix(Path::new("/nonexistent/panel.csv")).unwrap_err();
        assert_eq!(err.code, crate::failure::EXIT_INPUT);
    }
}
