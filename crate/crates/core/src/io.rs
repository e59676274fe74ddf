//! Wide-format CSV input and output for panels.
//!
//! A panel file has one row per unit and one column per period. Empty cells
//! and the literal `NaN` mark missing values. Line numbers in errors are
//! 1-based and count the header.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::panel::{pattern_from_adoption_times, PanelObservation, StaggeredPattern};

/// A numeric table with missing cells as NaN, plus its header if one was read.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub values: DMatrix<f64>,
    pub header: Option<Vec<String>>,
}

/// Formats with 17 significant digits, which round-trips every double.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

fn parse_cell(cell: &str, line: usize, column: usize) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() || cell == "NaN" {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>().map_err(|_| Error::Schema {
        line,
        message: format!("column {}: cannot parse {cell:?} as a number", column + 1),
    })
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source)
}

fn record_line(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
        _ => Error::Schema {
            line,
            message: e.to_string(),
        },
    }
}

/// Reads a rectangular numeric table.
pub fn read_table<R: Read>(source: R, has_header: bool) -> Result<Table> {
    let mut rdr = csv_reader(source);
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = record_line(&rec, idx + 1);
        if has_header && header.is_none() {
            header = Some(rec.iter().map(|s| s.trim().to_string()).collect::<Vec<_>>());
            width = Some(rec.len());
            continue;
        }
        if rec.len() == 1 && rec[0].trim().is_empty() && width != Some(1) {
            continue;
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(Error::Schema {
                    line,
                    message: format!("expected {w} columns, found {}", rec.len()),
                })
            }
            _ => width = Some(rec.len()),
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| parse_cell(cell, line, c))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let t = width.unwrap_or(0);
    let values = DMatrix::from_fn(rows.len(), t, |i, j| rows[i][j]);
    Ok(Table { values, header })
}

pub fn read_table_file(path: &Path, has_header: bool) -> Result<Table> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_table(f, has_header)
}

/// Reads one adoption time per unit. `0` or a value above `t` means never
/// treated. Returns 1-based times with `t + 1` for never-treated units.
pub fn read_adoption_times<R: Read>(source: R, t: usize, has_header: bool) -> Result<Vec<usize>> {
    let mut rdr = csv_reader(source);
    let mut out = Vec::new();
    let mut skipped_header = !has_header;
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = record_line(&rec, idx + 1);
        if !skipped_header {
            skipped_header = true;
            continue;
        }
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != 1 {
            return Err(Error::Schema {
                line,
                message: format!("expected one adoption time, found {} columns", rec.len()),
            });
        }
        let cell = rec[0].trim();
        let a: i64 = cell.parse().map_err(|_| Error::Schema {
            line,
            message: format!("cannot parse {cell:?} as an integer adoption time"),
        })?;
        if a < 0 {
            return Err(Error::Schema {
                line,
                message: format!("adoption time {a} is negative"),
            });
        }
        let a = a as usize;
        out.push(if a == 0 || a > t { t + 1 } else { a });
    }
    Ok(out)
}

/// Panel from a values table alone: the mask is the set of non-missing cells.
pub fn panel_from_table(table: &Table) -> Result<PanelObservation> {
    PanelObservation::from_nan_values(table.values.clone())
}

/// Panel whose mask comes from adoption times; cells at or after adoption are
/// hidden even if the values file fills them.
pub fn panel_with_adoption_times(
    table: &Table,
    times: Vec<usize>,
) -> Result<(PanelObservation, StaggeredPattern)> {
    let (n, t) = table.values.shape();
    if times.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} adoption times for {n} units",
            times.len()
        )));
    }
    let mask = DMatrix::from_fn(n, t, |i, j| j + 1 < times[i]);
    let pattern = pattern_from_adoption_times(times, t)?;
    let panel = PanelObservation::new(table.values.clone(), mask)?;
    Ok((panel, pattern))
}

/// Writes a numeric table, with `header` as the first row when given.
pub fn write_table<W: Write>(
    sink: W,
    values: &DMatrix<f64>,
    header: Option<&[String]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    if let Some(h) = header {
        w.write_record(h).map_err(csv_error)?;
    }
    for row in values.row_iter() {
        w.write_record(row.iter().map(|&x| fmt_num(x)))
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_round_trips() {
        for x in [
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            123456789.123456789,
            f64::MIN_POSITIVE,
            0.0,
        ] {
            assert_eq!(fmt_num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_num(f64::NAN), "NaN");
    }

    #[test]
    fn reads_missing_cells_and_header() {
        let text = "p1,p2,p3\n1,2,3\n4,,NaN\n";
        let t = read_table(text.as_bytes(), true).unwrap();
        assert_eq!(t.header.as_deref().unwrap(), ["p1", "p2", "p3"]);
        assert_eq!(t.values.shape(), (2, 3));
        assert!(t.values[(1, 1)].is_nan() && t.values[(1, 2)].is_nan());
        let p = panel_from_table(&t).unwrap();
        assert_eq!(p.observed_count(), 4);
    }

    #[test]
    fn headerless_input() {
        let t = read_table("1,2\n3,4\n".as_bytes(), false).unwrap();
        assert!(t.header.is_none());
        assert_eq!(
            t.values,
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])
        );
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let err = read_table("a,b\n1,2\n3,x\n".as_bytes(), true).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 3, .. }), "{err:?}");
        let err = read_table("1,2\n3\n".as_bytes(), false).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err:?}");
        let err = read_adoption_times("t\n3\nq\n".as_bytes(), 5, true).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn adoption_time_sentinels() {
        let times = read_adoption_times("0\n3\n9\n2\n".as_bytes(), 4, false).unwrap();
        assert_eq!(times, vec![5, 3, 5, 2]);
    }

    #[test]
    fn adoption_times_hide_treated_cells() {
        let values = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let table = Table {
            values,
            header: None,
        };
        let (panel, pattern) = panel_with_adoption_times(&table, vec![4, 3, 2]).unwrap();
        assert!(panel.is_observed(1, 1) && !panel.is_observed(1, 2));
        assert!(panel.is_observed(2, 0) && !panel.is_observed(2, 1));
        assert_eq!(pattern.k(), 3);
        assert!(panel_with_adoption_times(&table, vec![4, 3]).is_err());
    }

    #[test]
    fn write_then_read_is_exact() {
        let m = DMatrix::from_fn(3, 4, |i, j| (i as f64 + 0.1) / (j as f64 + 0.7));
        let mut buf = Vec::new();
        let header: Vec<String> = (1..=4).map(|j| format!("t{j}")).collect();
        write_table(&mut buf, &m, Some(&header)).unwrap();
        let back = read_table(buf.as_slice(), true).unwrap();
        assert_eq!(back.values, m);
        assert_eq!(back.header.unwrap(), header);
    }
}
