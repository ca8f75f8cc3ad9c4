//! CSV ingestion and point/label tables.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Points;

/// Which columns to read. By default every column other than the label
/// column is a coordinate.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub columns: Option<Vec<String>>,
    pub label: Option<String>,
    /// Coordinates replaced by their natural logarithm.
    pub log_columns: Vec<String>,
}

impl CsvSchema {
    pub fn with_label(label: &str) -> Self {
        CsvSchema {
            label: Some(label.to_string()),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub columns: Vec<String>,
    pub points: Points,
    /// `None` where the label cell is empty.
    pub labels: Option<Vec<Option<usize>>>,
}

impl LoadedData {
    /// Labels restricted to labeled rows, with their row indices.
    pub fn labeled(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let labels = self.labels.as_ref()?;
        let (rows, vals) = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|v| (i, v)))
            .unzip();
        Some((rows, vals))
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let shown = path.display().to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(shown, io),
        other => Error::Data(format!("{shown}: {other:?}")),
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LoadedData> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: no column named {name:?}", path.display())))
    };
    let label_idx = match &schema.label {
        Some(l) => Some(find(l)?),
        None => None,
    };
    let coord_idx: Vec<usize> = match &schema.columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|i| Some(*i) != label_idx)
            .collect(),
    };
    if coord_idx.is_empty() {
        return Err(Error::Data(format!(
            "{}: no coordinate columns",
            path.display()
        )));
    }
    let log_flags: Vec<bool> = coord_idx
        .iter()
        .map(|&i| schema.log_columns.contains(&headers[i]))
        .collect();
    for l in &schema.log_columns {
        find(l)?;
    }

    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (&i, &log) in coord_idx.iter().zip(&log_flags) {
            let cell = rec.get(i).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{} line {line}: column {:?} is not numeric: {cell:?}",
                    path.display(),
                    headers[i]
                ))
            })?;
            let v = if log {
                if v <= 0.0 {
                    return Err(Error::Data(format!(
                        "{} line {line}: column {:?} must be positive for a log transform, got {v}",
                        path.display(),
                        headers[i]
                    )));
                }
                v.ln()
            } else {
                v
            };
            values.push(v);
        }
        if let (Some(li), Some(out)) = (label_idx, labels.as_mut()) {
            let cell = rec.get(li).unwrap_or("");
            out.push(if cell.is_empty() {
                None
            } else {
                Some(cell.parse().map_err(|_| {
                    Error::Data(format!(
                        "{} line {line}: label {cell:?} is not a non-negative integer",
                        path.display()
                    ))
                })?)
            });
        }
    }
    let points = Points::new(coord_idx.len(), values)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if points.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(LoadedData {
        columns: coord_idx.iter().map(|&i| headers[i].clone()).collect(),
        points,
        labels,
    })
}

/// Reads one integer column, by name or else the first of `label`/`cluster`.
pub fn read_labels(path: impl AsRef<Path>, column: Option<&str>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let idx = match column {
        Some(c) => headers.iter().position(|h| h == c),
        None => headers
            .iter()
            .position(|h| h == "label")
            .or_else(|| headers.iter().position(|h| h == "cluster")),
    }
    .ok_or_else(|| Error::Data(format!("{}: label column not found", path.display())))?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let cell = rec.get(idx).unwrap_or("");
        out.push(cell.parse().map_err(|_| {
            Error::Data(format!(
                "{} line {}: label {cell:?} is not a non-negative integer",
                path.display(),
                row + 2
            ))
        })?);
    }
    Ok(out)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

pub fn coordinate_names(dim: usize) -> Vec<String> {
    (1..=dim).map(|j| format!("x{j}")).collect()
}

/// Writes coordinates with an optional trailing integer column.
pub fn write_points(
    path: impl AsRef<Path>,
    points: &Points,
    extra: Option<(&str, &[usize])>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    let mut header = coordinate_names(points.dim());
    if let Some((name, _)) = extra {
        header.push(name.to_string());
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, row) in points.rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some((_, vals)) = extra {
            rec.push(vals[i].to_string());
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes `row,<name>` pairs.
pub fn write_labels(path: impl AsRef<Path>, name: &str, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["row", name])
        .map_err(|e| csv_error(path, e))?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_rows_and_missing_labels() {
        let f = file("a,b,label\n1,2,1\n3,4,\n5,6,2\n");
        let d = load_csv(f.path(), &CsvSchema::with_label("label")).unwrap();
        assert_eq!(d.points.len(), 3);
        assert_eq!(d.labels.unwrap(), vec![Some(1), None, Some(2)]);
    }

    #[test]
    fn log_transform() {
        let f = file("a,b\n2.718281828459045,1\n");
        let schema = CsvSchema {
            log_columns: vec!["a".into()],
            ..Default::default()
        };
        let d = load_csv(f.path(), &schema).unwrap();
        assert!((d.points.row(0)[0] - 1.0).abs() < 1e-15);
        let bad = file("a,b\n1,1\n0,1\n");
        let err = load_csv(bad.path(), &schema).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn malformed_row_names_line() {
        let f = file("a,b\n1,2\n3,x\n");
        let err = load_csv(f.path(), &CsvSchema::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn roundtrip_points() {
        let dir = tempfile::tempdir().unwrap();
        let p = Points::from_rows(&[vec![0.1, -2.5], vec![1e-17, 3.0]]).unwrap();
        let path = dir.path().join("p.csv");
        write_points(&path, &p, Some(("label", &[3, 4]))).unwrap();
        let d = load_csv(&path, &CsvSchema::with_label("label")).unwrap();
        assert_eq!(d.points, p);
        assert_eq!(read_labels(&path, None).unwrap(), vec![3, 4]);
    }
}
