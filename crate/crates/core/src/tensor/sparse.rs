use std::sync::Arc;

use crate::error::{GnsnError, Result};
use crate::tensor::Matrix;

/// Compressed-row sparsity structure. Column indices are sorted and unique
/// within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePattern {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl SparsePattern {
    /// Builds a pattern from per-row column lists; lists are sorted and
    /// deduplicated.
    pub fn from_rows(n_cols: usize, mut rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for (r, cols) in rows.iter_mut().enumerate() {
            cols.sort_unstable();
            cols.dedup();
            if let Some(&c) = cols.last() {
                if c >= n_cols {
                    return Err(GnsnError::shape(
                        "SparsePattern",
                        format!("row {r} has column {c} >= {n_cols}"),
                    ));
                }
            }
            col_indices.extend_from_slice(cols);
            row_offsets.push(col_indices.len());
        }
        Ok(SparsePattern {
            n_rows: rows.len(),
            n_cols,
            row_offsets,
            col_indices,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    #[inline]
    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_offsets[r]..self.row_offsets[r + 1]
    }

    #[inline]
    pub fn row_cols(&self, r: usize) -> &[usize] {
        &self.col_indices[self.row_range(r)]
    }

    #[inline]
    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    /// Position of `(r, c)` in the value array, if stored.
    pub fn find(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.row_range(r);
        self.col_indices[range.clone()]
            .binary_search(&c)
            .ok()
            .map(|k| range.start + k)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.find(r, c).is_some()
    }

    /// Row index of every stored entry.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            rows.extend(std::iter::repeat_n(r, self.row_range(r).len()));
        }
        rows
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols
            && (0..self.n_rows).all(|r| self.row_cols(r).iter().all(|&c| self.contains(c, r)))
    }

    pub fn is_subset_of(&self, other: &SparsePattern) -> bool {
        self.n_rows == other.n_rows
            && (0..self.n_rows).all(|r| self.row_cols(r).iter().all(|&c| other.contains(r, c)))
    }
}

/// Sparse matrix: shared pattern plus one value per stored entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pattern: Arc<SparsePattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(pattern: Arc<SparsePattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(GnsnError::shape(
                "SparseMatrix::new",
                format!("{} values for {} stored entries", values.len(), pattern.nnz()),
            ));
        }
        Ok(SparseMatrix { pattern, values })
    }

    pub fn identity(n: usize) -> Self {
        let pattern = SparsePattern::from_rows(n, (0..n).map(|i| vec![i]).collect())
            .expect("diagonal pattern is valid");
        SparseMatrix {
            pattern: Arc::new(pattern),
            values: vec![1.0; n],
        }
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.pattern.n_rows
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pattern.find(r, c).map_or(0.0, |k| self.values[k])
    }

    /// `self * dense`.
    pub fn matmul_dense(&self, dense: &Matrix) -> Result<Matrix> {
        spmm(&self.pattern, &self.values, dense)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.pattern.n_rows)
            .map(|r| self.values[self.pattern.row_range(r)].iter().sum())
            .collect()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.pattern.n_rows, self.pattern.n_cols);
        for r in 0..self.pattern.n_rows {
            for k in self.pattern.row_range(r) {
                m.set(r, self.pattern.col_indices[k], self.values[k]);
            }
        }
        m
    }

    /// Same pattern with every value multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> SparseMatrix {
        SparseMatrix {
            pattern: Arc::clone(&self.pattern),
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }
}

pub(crate) fn spmm(pattern: &SparsePattern, values: &[f64], dense: &Matrix) -> Result<Matrix> {
    if pattern.n_cols != dense.rows() {
        return Err(GnsnError::shape(
            "spmm",
            format!(
                "sparse {}x{} times dense {:?}",
                pattern.n_rows,
                pattern.n_cols,
                dense.shape()
            ),
        ));
    }
    let d = dense.cols();
    let mut out = Matrix::zeros(pattern.n_rows, d);
    for r in 0..pattern.n_rows {
        let out_row = out.row_mut(r);
        for k in pattern.row_range(r) {
            let w = values[k];
            let src = dense.row(pattern.col_indices[k]);
            for (o, &s) in out_row.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spmm_returns_input() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.5, 4.0]]).unwrap();
        let id = SparseMatrix::identity(2);
        assert_eq!(id.matmul_dense(&x).unwrap(), x);
    }

    #[test]
    fn pattern_sorts_and_dedups() {
        let p = SparsePattern::from_rows(3, vec![vec![2, 0, 2], vec![], vec![1]]).unwrap();
        assert_eq!(p.row_cols(0), &[0, 2]);
        assert_eq!(p.nnz(), 3);
        assert_eq!(p.find(2, 1), Some(2));
        assert!(!p.contains(1, 1));
        assert!(SparsePattern::from_rows(2, vec![vec![5]]).is_err());
    }
}
