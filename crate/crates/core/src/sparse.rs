//! Compressed sparse row storage for stamp matrices.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    /// Row of each stored entry, for iteration proportional to `nnz`.
    rows: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds an `n × n` matrix, summing duplicate entries. Explicit zeros
    /// are kept so the sparsity pattern does not depend on values.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; n + 1];
        let mut rows = Vec::with_capacity(triplets.len());
        let mut cols = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
            } else {
                rows.push(r);
                cols.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseMatrix {
            n,
            row_ptr,
            rows,
            cols,
            values,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_triplets(n, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]];
        match row.binary_search(&c) {
            Ok(i) => self.values[self.row_ptr[r] + i],
            Err(_) => 0.0,
        }
    }

    /// Iterates stored entries as `(row, col, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.values.len()).map(move |i| (self.rows[i], self.cols[i], self.values[i]))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.iter() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for (r, c, v) in self.iter() {
            y[r] += v * x[c];
        }
        y
    }

    /// `y = scale · A x`.
    pub fn mul_into(&self, x: &[f64], y: &mut [f64], scale: f64) {
        for (r, out) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[i] * x[self.cols[i]];
            }
            *out = scale * acc;
        }
    }

    /// `yᵀ A x` without forming `A x`.
    pub fn bilinear(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.iter().map(|(r, c, v)| y[r] * v * x[c]).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m = SparseMatrix::from_triplets(
            2,
            vec![(0, 0, 1.0), (1, 0, 2.0), (0, 0, 3.0), (0, 1, -1.0)],
        );
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.get(1, 1), 0.0);
        let d = m.to_dense();
        assert_eq!(d[(1, 0)], 2.0);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(m.mul_vec(&x), &d * &x);
        let mut y2 = [0.0; 2];
        m.mul_into(x.as_slice(), &mut y2, 2.0);
        assert_eq!(DVector::from_row_slice(&y2), &d * &x * 2.0);
        let y = DVector::from_vec(vec![3.0, -1.0]);
        assert_eq!(m.bilinear(&y, &x), y.dot(&(&d * &x)));
    }
}
