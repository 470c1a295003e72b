use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Weight matrices are stored input-major (`rows = fan_in`, `cols = fan_out`),
/// so a forward affine map is `y = x · W` and the gradient w.r.t. the input is
/// `dx = W · dy`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform(-r, r) init with r = 1/sqrt(rows), i.e. the fan-in of an
    /// input-major weight.
    pub fn uniform_fan_in<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let r = 1.0 / (rows.max(1) as f64).sqrt();
        Self::uniform(rows, cols, r, rng)
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, range: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-range..=range))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Appends one row. The first push on an empty 0-column matrix fixes the width.
    pub fn push_row(&mut self, row: &[f64]) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        assert_eq!(row.len(), self.cols, "push_row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// `out += x · self` where `x` has length `rows` and `out` has length `cols`.
    #[inline]
    pub fn vec_mul_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xr * w;
            }
        }
    }

    /// `out += self · dy` where `dy` has length `cols` and `out` has length `rows`.
    #[inline]
    pub fn mul_vec_acc(&self, dy: &[f64], out: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *o += row.iter().zip(dy).map(|(w, d)| w * d).sum::<f64>();
        }
    }

    /// `out += x · self[offset..offset + x.len(), :]`
    #[inline]
    pub fn vec_mul_acc_rows(&self, offset: usize, x: &[f64], out: &mut [f64]) {
        debug_assert!(offset + x.len() <= self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            let row = self.row(offset + r);
            for (o, w) in out.iter_mut().zip(row) {
                *o += xr * w;
            }
        }
    }

    /// `out += self[offset..offset + out.len(), :] · dy`
    #[inline]
    pub fn mul_vec_acc_rows(&self, offset: usize, dy: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.row(offset + r).iter().zip(dy).map(|(w, d)| w * d).sum::<f64>();
        }
    }

    /// `self[offset.., :] += x ⊗ dy`
    #[inline]
    pub fn outer_acc_rows(&mut self, offset: usize, x: &[f64], dy: &[f64]) {
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (g, d) in self.row_mut(offset + r).iter_mut().zip(dy) {
                *g += xr * d;
            }
        }
    }

    /// `self += x ⊗ dy` (outer product accumulation for weight gradients).
    #[inline]
    pub fn outer_acc(&mut self, x: &[f64], dy: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(dy.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (g, d) in row.iter_mut().zip(dy) {
                *g += xr * d;
            }
        }
    }
}
