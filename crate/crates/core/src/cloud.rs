//! Feature clouds: N × d collections of feature vectors, with binary and CSV I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Map};

use crate::container::{ArrayWriter, Container};
use crate::error::{LabError, Result};
use crate::linalg::{norm, Matrix};

/// Rows must be within this of unit norm for a cloud flagged `unit_norm`.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    vectors: Matrix,
    unit_norm: bool,
    pub source_tag: String,
}

impl FeatureCloud {
    pub fn new(vectors: Matrix, unit_norm: bool, source_tag: impl Into<String>) -> Result<Self> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(LabError::InvalidArgument("feature cloud needs at least one non-empty vector".into()));
        }
        if unit_norm {
            for i in 0..vectors.rows() {
                let n = norm(vectors.row(i));
                if (n - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(LabError::InvalidArgument(format!("row {i} has norm {n}, expected unit")));
                }
            }
        }
        Ok(Self { vectors, unit_norm, source_tag: source_tag.into() })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, unit_norm: bool, source_tag: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(LabError::ShapeMismatch { expected: format!("rows of length {d}"), got: "ragged rows".into() });
        }
        let n = rows.len();
        Self::new(Matrix::from_vec(n, d, rows.concat()), unit_norm, source_tag)
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |i| self.vectors.row(i))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.vectors
    }

    /// Cloud without row `skip`.
    pub fn without_row(&self, skip: usize) -> Result<Self> {
        let rows: Vec<Vec<f64>> = self.rows().enumerate().filter(|(i, _)| *i != skip).map(|(_, r)| r.to_vec()).collect();
        Self::from_rows(rows, self.unit_norm, self.source_tag.clone())
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(LabError::ShapeMismatch { expected: format!("dimension {d}"), got: format!("dimension {}", self.dim()) });
        }
        Ok(())
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let mut header = Map::new();
        header.insert("kind".into(), json!("feature_cloud"));
        header.insert("n".into(), json!(self.len()));
        header.insert("d".into(), json!(self.dim()));
        header.insert("unit_norm".into(), json!(self.unit_norm));
        header.insert("source_tag".into(), json!(self.source_tag));
        let mut arrays = ArrayWriter::default();
        arrays.push("vectors", &[self.len(), self.dim()], self.vectors.as_slice());
        arrays.write_to(header, w)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut c = Container::read_from(r)?;
        let kind: String = c.header_field("kind")?;
        if kind != "feature_cloud" {
            return Err(LabError::Format(format!("expected feature_cloud, found {kind}")));
        }
        let n: usize = c.header_field("n")?;
        let d: usize = c.header_field("d")?;
        let unit_norm: bool = c.header_field("unit_norm")?;
        let source_tag: String = c.header_field("source_tag")?;
        let data = c.take("vectors", &[n, d])?;
        c.finish()?;
        Self::new(Matrix::from_vec(n, d, data), unit_norm, source_tag)
    }

    /// Comma-separated rows, one vector per line. Lines starting with `#` are skipped.
    /// `unit_norm` is set when every row is within tolerance of the sphere.
    pub fn read_csv(r: impl Read, source_tag: impl Into<String>) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| LabError::Format(format!("line {}: {e}", lineno + 1)))?);
        }
        let unit = !rows.is_empty() && rows.iter().all(|r| (norm(r) - 1.0).abs() <= UNIT_NORM_TOL);
        Self::from_rows(rows, unit, source_tag)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Loads either format; `.csv` files are parsed as CSV.
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::read_csv(f, path.display().to_string())
        } else {
            Self::read(&mut BufReader::new(f))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            self.write_csv(&mut w)?;
        } else {
            self.write(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_norm_flag_is_checked() {
        assert!(FeatureCloud::from_rows(vec![vec![1.0, 0.0], vec![0.5, 0.0]], true, "t").is_err());
        assert!(FeatureCloud::from_rows(vec![vec![1.0, 0.0], vec![0.5, 0.0]], false, "t").is_ok());
        assert!(FeatureCloud::from_rows(vec![vec![1.0, 0.0], vec![0.5]], false, "t").is_err());
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let c = FeatureCloud::from_rows(vec![vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, -1.0]], true, "demo").unwrap();
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        assert_eq!(FeatureCloud::read(&mut buf.as_slice()).unwrap(), c);

        let mut csv = Vec::new();
        c.write_csv(&mut csv).unwrap();
        let back = FeatureCloud::read_csv(csv.as_slice(), "demo").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = FeatureCloud::read_csv("1,2\n# note\n3,x\n".as_bytes(), "bad").unwrap_err();
        assert!(err.to_string().contains("line 3"));
    }
}
