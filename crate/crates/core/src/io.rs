//! CSV ingestion and output.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{validate_dataset, Dataset, Matrix};
use crate::error::{HteError, Result};
use crate::simbench::SimDraw;

/// Names of the treatment and response columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub treatment_col: String,
    pub response_col: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            treatment_col: "T".into(),
            response_col: "Y".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub n_rows: usize,
    /// Always 0: malformed rows are rejected rather than dropped.
    pub dropped_rows: usize,
}

pub(crate) fn csv_err(e: csv::Error) -> HteError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HteError::Io(io),
        other => HteError::MalformedDocument(format!("{other:?}")),
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn open(path: &Path) -> Result<File> {
    Ok(File::open(path)?)
}

fn parse_cell(s: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| HteError::Parse {
        line,
        column: column.to_string(),
        message: format!("not a number: {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(HteError::Parse {
            line,
            column: column.to_string(),
            message: format!("non-finite value {s:?}"),
        });
    }
    Ok(v)
}

fn read_table<R: Read>(input: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(HteError::EmptyInput("missing header row".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            HteError::Parse {
                line,
                column: String::new(),
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .zip(&header)
            .map(|(cell, name)| parse_cell(cell, line, name))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn column_index(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| HteError::MissingColumn(name.to_string()))
}

/// Named treatment and response columns; every other column is a feature,
/// in header order.
pub fn load_csv_from<R: Read>(input: R, schema: &CsvSchema) -> Result<LoadedCsv> {
    let table = read_table(input)?;
    let ti = column_index(&table.header, &schema.treatment_col)?;
    let yi = column_index(&table.header, &schema.response_col)?;
    if table.rows.is_empty() {
        return Err(HteError::EmptyInput("no data rows".into()));
    }
    let feat: Vec<usize> = (0..table.header.len()).filter(|&j| j != ti && j != yi).collect();
    if feat.is_empty() {
        return Err(HteError::EmptyInput("no feature columns".into()));
    }
    let n = table.rows.len();
    let mut x = Vec::with_capacity(n * feat.len());
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (r, row) in table.rows.iter().enumerate() {
        let tv = row[ti];
        if tv != 0.0 && tv != 1.0 {
            return Err(HteError::Parse {
                // Header is line 1.
                line: r as u64 + 2,
                column: schema.treatment_col.clone(),
                message: format!("treatment must be 0 or 1, got {tv}"),
            });
        }
        t.push(tv as u8);
        y.push(row[yi]);
        x.extend(feat.iter().map(|&j| row[j]));
    }
    let names = feat.iter().map(|&j| table.header[j].clone()).collect();
    let dataset = Dataset::new(Matrix::new(n, feat.len(), x)?, t, y)?.with_feature_names(names)?;
    validate_dataset(&dataset)?;
    Ok(LoadedCsv {
        dataset,
        n_rows: n,
        dropped_rows: 0,
    })
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LoadedCsv> {
    load_csv_from(open(path)?, schema)
}

/// Feature matrix for prediction. Columns named in `exclude` are skipped.
/// With `order`, columns are picked by those names; otherwise all
/// remaining columns are used in header order.
pub fn load_features_from<R: Read>(
    input: R,
    exclude: &[&str],
    order: Option<&[String]>,
) -> Result<(Matrix, Vec<String>)> {
    let table = read_table(input)?;
    let cols: Vec<usize> = match order {
        Some(names) => names.iter().map(|n| column_index(&table.header, n)).collect::<Result<_>>()?,
        None => (0..table.header.len())
            .filter(|&j| !exclude.contains(&table.header[j].as_str()))
            .collect(),
    };
    if table.rows.is_empty() {
        return Err(HteError::EmptyInput("no data rows".into()));
    }
    let n = table.rows.len();
    let data = table.rows.iter().flat_map(|r| cols.iter().map(|&j| r[j])).collect();
    let names = cols.iter().map(|&j| table.header[j].clone()).collect();
    Ok((Matrix::new(n, cols.len(), data)?, names))
}

pub fn load_features(path: &Path, exclude: &[&str], order: Option<&[String]>) -> Result<(Matrix, Vec<String>)> {
    load_features_from(open(path)?, exclude, order)
}

/// One numeric column by name.
pub fn read_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let table = read_table(open(path)?)?;
    let j = column_index(&table.header, name)?;
    Ok(table.rows.iter().map(|r| r[j]).collect())
}

/// Whether `path` has a column called `name`.
pub fn has_column(path: &Path, name: &str) -> Result<bool> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    Ok(rdr.headers().map_err(csv_err)?.iter().any(|h| h.trim() == name))
}

fn write_rows<W: Write>(out: W, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Features (named `x1…xp` unless the dataset has names), then `T`, `Y`.
pub fn write_dataset_csv<W: Write>(d: &Dataset, out: W) -> Result<()> {
    let mut header: Vec<String> = match d.feature_names() {
        Some(n) => n.to_vec(),
        None => (1..=d.p()).map(|j| format!("x{j}")).collect(),
    };
    header.push("T".into());
    header.push("Y".into());
    let rows = (0..d.n()).map(|i| {
        let mut r = d.features().row(i).to_vec();
        r.push(f64::from(d.treatment()[i]));
        r.push(d.response()[i]);
        r
    });
    write_rows(out, &header, rows)
}

/// Per-unit `tau`, `pi`, `mu`.
pub fn write_truth_csv<W: Write>(draw: &SimDraw, out: W) -> Result<()> {
    let header = ["tau", "pi", "mu"].map(String::from);
    let rows = (0..draw.tau_true.len()).map(|i| vec![draw.tau_true[i], draw.pi_true[i], draw.mu_true[i]]);
    write_rows(out, &header, rows)
}

/// `tau_hat`, plus `mu1_hat`, `mu0_hat` when available.
pub fn write_effects_csv<W: Write>(
    tau_hat: &[f64],
    means: Option<(&[f64], &[f64])>,
    out: W,
) -> Result<()> {
    match means {
        Some((m1, m0)) => {
            let header = ["tau_hat", "mu1_hat", "mu0_hat"].map(String::from);
            write_rows(out, &header, (0..tau_hat.len()).map(|i| vec![tau_hat[i], m1[i], m0[i]]))
        }
        None => write_rows(out, &["tau_hat".to_string()], tau_hat.iter().map(|&v| vec![v])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(s: &str) -> Result<LoadedCsv> {
        load_csv_from(s.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn four_rows() {
        let l = load("a,T,b,Y\n1,1,2,3.5\n2,0,3,1\n3,1,4,2\n4,0,5,0\n").unwrap();
        assert_eq!(l.dataset.n(), 4);
        assert_eq!(l.dataset.p(), 2);
        assert_eq!(l.dataset.features().row(0), &[1.0, 2.0]);
        assert_eq!(l.dataset.feature_names().unwrap(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn bad_treatment_names_row() {
        let e = load("x,T,Y\n1,1,2\n2,2,3\n").unwrap_err();
        match e {
            HteError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "T");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell() {
        let e = load("x,T,Y\n1,1,2\nabc,0,3\n").unwrap_err();
        assert_eq!(e.kind(), "parse-error");
        assert!(e.to_string().contains('3'));
    }

    #[test]
    fn header_only_and_missing_column() {
        assert_eq!(load("x,T,Y\n").unwrap_err().kind(), "empty-input");
        assert_eq!(load("x,T\n1,0\n").unwrap_err().kind(), "missing-column");
        assert_eq!(load("x,T,Y\n1,1,2\n2,1,3\n").unwrap_err().kind(), "degenerate-arm");
    }

    #[test]
    fn dataset_round_trip() {
        let l = load("a,T,Y\n0.1,1,2.25\n-3e-5,0,1\n").unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&l.dataset, &mut buf).unwrap();
        let back = load_csv_from(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back.dataset.features(), l.dataset.features());
        assert_eq!(back.dataset.response(), l.dataset.response());
    }
}
