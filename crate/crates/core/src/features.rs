//! Row-major real feature matrices.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Usage(format!("{rows} x {cols} feature matrix with {} values", data.len())));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Usage("ragged feature rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows whose index satisfies `keep`.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> FeatureMatrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for i in (0..self.rows).filter(|&i| keep(i)) {
            data.extend_from_slice(self.row(i));
            rows += 1;
        }
        FeatureMatrix { rows, cols: self.cols, data }
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// CSV with a `f0,f1,...` header.
    pub fn to_csv(&self) -> String {
        let mut s = (0..self.cols).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
        s.push('\n');
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{v:e}").expect("writing to a string");
            }
            s.push('\n');
        }
        s
    }
}

/// Scales each nonzero row to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize_rows(f: &FeatureMatrix) -> FeatureMatrix {
    let mut out = f.clone();
    if f.cols == 0 {
        return out;
    }
    for row in out.data.chunks_mut(f.cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_normalize_examples() {
        let f = FeatureMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let n = l2_normalize_rows(&f);
        assert!((n.row(0)[0] - 0.6).abs() < 1e-15 && (n.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[0.0, 0.0]);
        assert!((n.row(2)[0] - 0.6).abs() < 1e-12 && (n.row(2)[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let f = FeatureMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let csv = f.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("f0,f1\n"));
        assert!(FeatureMatrix::new(2, 2, vec![1.0]).is_err());
    }
}
