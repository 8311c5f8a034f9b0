use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Almost everything in this crate is a matrix (`[rows, cols]`) or a
/// scalar (`[]`); higher ranks are representable but no operation needs them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "Array::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(
                    "Array::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn column(values: &[f64]) -> Self {
        Array {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Array {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut a = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            a.data[i * n + i] = *v;
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count; a scalar or vector is viewed as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn column_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.get(i, j)).collect()
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Array {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Combine every row of a matrix with `row`, element by element.
    pub fn zip_row(&self, row: &[f64], f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.is_matrix() || self.cols() != row.len() {
            return Err(Error::dim(
                "zip_row",
                format!("{:?} vs row of {}", self.shape, row.len()),
            ));
        }
        let k = row.len().max(1);
        Ok(Array {
            shape: self.shape.clone(),
            data: self.data.iter().enumerate().map(|(i, &a)| f(a, row[i % k])).collect(),
        })
    }

    pub fn add(&self, other: &Array) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Array) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Array {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Array) -> Result<Self> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.rows() {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let (m, n, p) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * p..(k + 1) * p];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Array {
            shape: vec![m, p],
            data: out,
        })
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        let n = self.rows();
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    pub fn lower_triangle(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows() {
            for j in (i + 1)..self.cols() {
                out.set(i, j, 0.0);
            }
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows().min(self.cols())).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    fn require_square(&self, op: &'static str) -> Result<usize> {
        if !self.is_matrix() || self.rows() != self.cols() {
            return Err(Error::dim(op, format!("expected square matrix, got {:?}", self.shape)));
        }
        Ok(self.rows())
    }

    /// Lower Cholesky factor of the symmetric part of `self`.
    ///
    /// Inputs whose asymmetry exceeds `1e-10 * ‖A‖` are rejected.
    pub fn cholesky(&self) -> Result<Array> {
        let n = self.require_square("cholesky")?;
        let norm = self.frobenius();
        let tol = 1e-10 * norm.max(f64::MIN_POSITIVE);
        let mut asym: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                asym = asym.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        if asym > tol {
            return Err(Error::NotSymmetric {
                asymmetry: asym,
                tolerance: tol,
            });
        }
        let a = self.symmetrized();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Array {
            shape: vec![n, n],
            data: l,
        })
    }

    /// Solves `L X = B` for lower-triangular `L = self`.
    pub fn solve_lower(&self, b: &Array) -> Result<Array> {
        let n = self.require_square("solve_lower")?;
        if b.rows() != n || !b.is_matrix() {
            return Err(Error::dim("solve_lower", format!("{:?} \\ {:?}", self.shape, b.shape)));
        }
        let p = b.cols();
        let mut x = b.data.clone();
        for i in 0..n {
            for k in 0..i {
                let lik = self.data[i * n + k];
                if lik != 0.0 {
                    for c in 0..p {
                        x[i * p + c] -= lik * x[k * p + c];
                    }
                }
            }
            let d = self.data[i * n + i];
            for c in 0..p {
                x[i * p + c] /= d;
            }
        }
        Ok(Array {
            shape: vec![n, p],
            data: x,
        })
    }

    /// Solves `Lᵀ X = B` for lower-triangular `L = self`.
    pub fn solve_lower_transpose(&self, b: &Array) -> Result<Array> {
        let n = self.require_square("solve_lower_transpose")?;
        if b.rows() != n || !b.is_matrix() {
            return Err(Error::dim(
                "solve_lower_transpose",
                format!("{:?} \\ {:?}", self.shape, b.shape),
            ));
        }
        let p = b.cols();
        let mut x = b.data.clone();
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = self.data[k * n + i];
                if lki != 0.0 {
                    for c in 0..p {
                        x[i * p + c] -= lki * x[k * p + c];
                    }
                }
            }
            let d = self.data[i * n + i];
            for c in 0..p {
                x[i * p + c] /= d;
            }
        }
        Ok(Array {
            shape: vec![n, p],
            data: x,
        })
    }

    /// Solves `A X = B` given the Cholesky factor `L = self` of `A`.
    pub fn cho_solve(&self, b: &Array) -> Result<Array> {
        self.solve_lower_transpose(&self.solve_lower(b)?)
    }

    /// `A⁻¹ B` for symmetric positive-definite `A = self`.
    pub fn solve_spd(&self, b: &Array) -> Result<Array> {
        self.cholesky()?.cho_solve(b)
    }

    pub fn inverse_spd(&self) -> Result<Array> {
        let n = self.require_square("inverse_spd")?;
        Ok(self.solve_spd(&Array::eye(n))?.symmetrized())
    }

    pub fn logdet_spd(&self) -> Result<f64> {
        let l = self.cholesky()?;
        Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    pub fn hcat(parts: &[&Array]) -> Result<Array> {
        let rows = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != rows || !p.is_matrix()) {
            return Err(Error::dim("hcat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row_slice(i));
            }
        }
        Array::matrix(rows, cols, data)
    }

    pub fn vcat(parts: &[&Array]) -> Result<Array> {
        let cols = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != cols || !p.is_matrix()) {
            return Err(Error::dim("vcat", "column counts differ"));
        }
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Array::matrix(rows, cols, data)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Array {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row_slice(i));
        }
        Array {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn select_cols(&self, start: usize, end: usize) -> Array {
        let r = self.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.row_slice(i)[start..end]);
        }
        Array {
            shape: vec![r, end - start],
            data,
        }
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows(), self.cols(), &self.data)
    }

    pub fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Array {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Array {
            shape: vec![r, c],
            data,
        }
    }

    /// Ratio of extreme eigenvalues of the symmetric part, for error reports.
    pub fn condition_estimate(&self) -> f64 {
        let eig = self.symmetrized().to_nalgebra().symmetric_eigenvalues();
        let max = eig.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_values() {
        let a = Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Array::column(&[1.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        let x = Array::column(&[1.0, 2.0]);
        assert_eq!(Array::eye(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Array::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cholesky_hand_values() {
        let a = Array::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = a.cholesky().unwrap();
        let want = [2.0, 0.0, 1.0, 2f64.sqrt()];
        for (x, y) in l.data().iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(Array::eye(3).cholesky().unwrap(), Array::eye(3));
    }

    #[test]
    fn cholesky_reports_pivot() {
        let a = Array::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        match a.cholesky() {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = Array::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(a.cholesky(), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn logdet_diag() {
        let a = Array::diag(&[2.0, 3.0]);
        assert!((a.logdet_spd().unwrap() - 6f64.ln()).abs() < 1e-14);
        assert_eq!(Array::eye(4).logdet_spd().unwrap(), 0.0);
    }
}
