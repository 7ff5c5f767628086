//! CSV and key-value text formats, written atomically.
//!
//! Numbers are printed with at most 12 significant digits so that reruns are
//! byte-stable. Measure files carry the header `x0,...,x{d-1},weight,label`;
//! plan files are bare comma-separated rows.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, LabeledMeasure};

/// Rounds to 12 significant digits and prints the shortest representation
/// that parses back to the rounded value (`1.0`, `0.25`, `1e-7`).
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    // -0.0 and 0.0 print identically.
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded:?}")
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| Error::Parse(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// A header and rows of already formatted cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines.next().ok_or(Error::Empty("csv"))?.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(Error::Parse(format!("row {} has {} fields, header has {}", k + 2, row.len(), header.len())));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn parse_f64(cell: &str, line: usize) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::Parse(format!("line {line}: not a number: {cell:?}")))
}

/// Renders a measure with optional labels (missing labels are written as 0).
pub fn measure_to_csv(measure: &DiscreteMeasure, labels: Option<&[usize]>) -> Result<String> {
    if let Some(l) = labels {
        if l.len() != measure.len() {
            return Err(Error::DimensionMismatch { expected: measure.len(), got: l.len() });
        }
    }
    let mut header: Vec<String> = (0..measure.dim()).map(|k| format!("x{k}")).collect();
    header.push("weight".into());
    header.push("label".into());
    let mut table = CsvTable { header, rows: Vec::with_capacity(measure.len()) };
    for i in 0..measure.len() {
        let mut row: Vec<String> = measure.point(i).iter().map(|&v| fmt_num(v)).collect();
        row.push(fmt_num(measure.weights()[i]));
        row.push(labels.map_or(0, |l| l[i]).to_string());
        table.rows.push(row);
    }
    Ok(table.render())
}

/// Parses `x0,...,x{d-1},weight[,label]`. Without a label column every
/// label is 0.
pub fn measure_from_csv(text: &str) -> Result<LabeledMeasure> {
    let table = CsvTable::parse(text)?;
    let has_label = table.header.last().is_some_and(|h| h == "label");
    let weight_col = table.column("weight").ok_or_else(|| Error::Parse("missing weight column".into()))?;
    let d = weight_col;
    let expected_cols = d + 1 + usize::from(has_label);
    if d == 0 || table.header.len() != expected_cols || (0..d).any(|k| table.header[k] != format!("x{k}")) {
        return Err(Error::Parse(format!("bad measure header: {}", table.header.join(","))));
    }
    if table.rows.is_empty() {
        return Err(Error::Empty("measure"));
    }
    let mut flat = Vec::with_capacity(table.rows.len() * d);
    let mut weights = Vec::with_capacity(table.rows.len());
    let mut labels = Vec::with_capacity(table.rows.len());
    for (k, row) in table.rows.iter().enumerate() {
        let line = k + 2;
        for cell in &row[..d] {
            flat.push(parse_f64(cell, line)?);
        }
        weights.push(parse_f64(&row[d], line)?);
        labels.push(if has_label { row[d + 1].parse::<usize>().map_err(|_| Error::Parse(format!("line {line}: bad label {:?}", row[d + 1])))? } else { 0 });
    }
    let points = Array2::from_shape_vec((weights.len(), d), flat).expect("shape");
    Ok(LabeledMeasure { measure: DiscreteMeasure::new(points, Some(weights.into()))?, labels })
}

pub fn read_measure(path: &Path) -> Result<LabeledMeasure> {
    measure_from_csv(&fs::read_to_string(path)?)
}

pub fn write_measure(path: &Path, measure: &DiscreteMeasure, labels: Option<&[usize]>) -> Result<()> {
    write_atomic(path, measure_to_csv(measure, labels)?.as_bytes())
}

pub fn plan_to_csv(plan: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in plan.rows() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_num(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn plan_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut flat = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<f64> = line.split(',').map(|c| parse_f64(c, k + 1)).collect::<Result<_>>()?;
        match cols {
            None => cols = Some(cells.len()),
            Some(c) if c != cells.len() => return Err(Error::Parse(format!("line {}: expected {c} fields", k + 1))),
            _ => {}
        }
        flat.extend(cells);
        rows += 1;
    }
    let cols = cols.ok_or(Error::Empty("plan"))?;
    Ok(Array2::from_shape_vec((rows, cols), flat).expect("shape"))
}

/// `key=value` lines.
pub fn key_values(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn number_formatting() {
        assert_eq!(fmt_num(1.0), "1.0");
        assert_eq!(fmt_num(0.25), "0.25");
        assert_eq!(fmt_num(-0.0), "0.0");
        assert_eq!(fmt_num(0.1 + 0.2), "0.3");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(123456789.123456789), "123456789.123");
        assert_eq!(fmt_num(2.5e-9), "2.5e-9");
    }

    #[test]
    fn measure_round_trip() {
        let m = DiscreteMeasure::new(array![[0.5, -1.25], [3.0, 2.0]], Some(array![0.75, 0.25])).unwrap();
        let text = measure_to_csv(&m, Some(&[1, 0])).unwrap();
        assert_eq!(text, "x0,x1,weight,label\n0.5,-1.25,0.75,1\n3.0,2.0,0.25,0\n");
        let back = measure_from_csv(&text).unwrap();
        assert_eq!(back.measure, m);
        assert_eq!(back.labels, vec![1, 0]);
    }

    #[test]
    fn unlabeled_measure_and_bad_inputs() {
        let back = measure_from_csv("x0,weight\n1.0,1.0\n").unwrap();
        assert_eq!(back.labels, vec![0]);
        assert!(measure_from_csv("a,b\n1,2\n").is_err());
        assert!(measure_from_csv("x0,weight\n1.0,abc\n").is_err());
        assert!(measure_from_csv("x0,weight\n").is_err());
        assert!(measure_from_csv("x0,weight\n1.0,-1.0\n").is_err());
    }

    #[test]
    fn plan_round_trip() {
        let p = array![[0.125, 0.0], [0.5, 1.0 / 3.0]];
        let back = plan_from_csv(&plan_to_csv(&p)).unwrap();
        assert!((&back - &p).iter().all(|d| d.abs() < 1e-12));
        assert!(plan_from_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/out.csv"), b"x").is_err());
    }
}
