//! Coordinate-format sparse matrix with the two dense products the solver needs.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Sparse real matrix stored as row-major sorted triplets with no duplicates and no explicit zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Builds from unordered triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trips: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = trips.iter().find(|t| t.0 >= nrows || t.1 >= ncols) {
            return Err(Error::Shape(format!("entry ({r}, {c}) outside {nrows}x{ncols}")));
        }
        trips.sort_unstable_by_key(|t| (t.0, t.1));
        let mut m = SparseMatrix::zeros(nrows, ncols);
        for (r, c, v) in trips {
            if m.rows.last() == Some(&r) && m.cols.last() == Some(&c) {
                *m.vals.last_mut().unwrap() += v;
            } else {
                m.rows.push(r);
                m.cols.push(c);
                m.vals.push(v);
            }
        }
        m.drop_zeros();
        Ok(m)
    }

    fn drop_zeros(&mut self) {
        if self.vals.iter().all(|&v| v != 0.0) {
            return;
        }
        let keep: Vec<usize> = (0..self.vals.len()).filter(|&i| self.vals[i] != 0.0).collect();
        self.rows = keep.iter().map(|&i| self.rows[i]).collect();
        self.cols = keep.iter().map(|&i| self.cols[i]).collect();
        self.vals = keep.iter().map(|&i| self.vals[i]).collect();
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut trips = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != 0.0 {
                    trips.push((r, c, m[(r, c)]));
                }
            }
        }
        SparseMatrix::from_triplets(m.nrows(), m.ncols(), trips).expect("in bounds")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Fraction of structurally zero entries, `1 - nnz / (rows * cols)`.
    pub fn sparsity(&self) -> f64 {
        let total = self.nrows as f64 * self.ncols as f64;
        if total == 0.0 {
            1.0
        } else {
            1.0 - self.nnz() as f64 / total
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.vals.len()).map(move |i| (self.rows[i], self.cols[i], self.vals[i]))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let lo = self.rows.partition_point(|&x| x < r);
        let hi = self.rows.partition_point(|&x| x <= r);
        match self.cols[lo..hi].binary_search(&c) {
            Ok(i) => self.vals[lo + i],
            Err(_) => 0.0,
        }
    }

    pub fn sum(&self) -> f64 {
        self.vals.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.vals.iter().map(|v| v * v).sum()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (_, c, v) in self.iter() {
            out[c] += v;
        }
        out
    }

    /// Columns holding at least one nonzero.
    pub fn nonzero_cols(&self) -> usize {
        let mut seen = vec![false; self.ncols];
        for &c in &self.cols {
            seen[c] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut m = self.clone();
        m.vals.iter_mut().for_each(|v| *v = f(*v));
        m.drop_zeros();
        m
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter() {
            m[(r, c)] = v;
        }
        m
    }

    /// `lhs * self` for a dense `lhs` with `self.nrows()` columns.
    pub fn left_mul(&self, lhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if lhs.ncols() != self.nrows {
            return Err(Error::Shape(format!(
                "dense {}x{} times sparse {}x{}",
                lhs.nrows(),
                lhs.ncols(),
                self.nrows,
                self.ncols
            )));
        }
        let mut out = DMatrix::zeros(lhs.nrows(), self.ncols);
        for (r, c, v) in self.iter() {
            out.column_mut(c).axpy(v, &lhs.column(r), 1.0);
        }
        Ok(out)
    }

    /// `lhs * self^T` for a dense `lhs` with `self.ncols()` columns.
    pub fn left_mul_transpose(&self, lhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if lhs.ncols() != self.ncols {
            return Err(Error::Shape(format!(
                "dense {}x{} times transposed sparse {}x{}",
                lhs.nrows(),
                lhs.ncols(),
                self.nrows,
                self.ncols
            )));
        }
        let mut out = DMatrix::zeros(lhs.nrows(), self.nrows);
        for (r, c, v) in self.iter() {
            out.column_mut(r).axpy(v, &lhs.column(c), 1.0);
        }
        Ok(out)
    }

    /// Writes `row,col,value` lines in row-major order.
    /// Largest singular value, by power iteration on `SᵀS` from the all-ones vector.
    pub fn spectral_norm(&self, iters: usize) -> f64 {
        let n = self.ncols();
        if self.nnz() == 0 || n == 0 {
            return 0.0;
        }
        let mut x = DMatrix::from_element(1, n, 1.0 / (n as f64).sqrt());
        let mut sigma = 0.0;
        for _ in 0..iters {
            // y = x·Sᵀ (1 × rows), then x' = y·S (1 × cols)
            let y = self.left_mul_transpose(&x).expect("matching width");
            let next = self.left_mul(&y).expect("matching height");
            let norm = next.norm();
            if norm == 0.0 {
                return 0.0;
            }
            let est = norm.sqrt();
            x = next / norm;
            if (est - sigma).abs() <= 1e-12 * est {
                return est;
            }
            sigma = est;
        }
        sigma
    }

    pub fn write_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,value")?;
        for (r, c, v) in self.iter() {
            writeln!(w, "{r},{c},{v}")?;
        }
        w.flush()
    }

    pub fn read_coo<R: BufRead>(r: R, nrows: usize, ncols: usize) -> Result<Self> {
        let mut trips = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("coo stream", e))?;
            if lineno == 0 && line.starts_with("row") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split(',');
            let parse_err = || Error::Data(format!("bad COO line {}: `{line}`", lineno + 1));
            let row = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
            let col = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
            let val = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
            trips.push((row, col, val));
        }
        SparseMatrix::from_triplets(nrows, ncols, trips)
    }
}
