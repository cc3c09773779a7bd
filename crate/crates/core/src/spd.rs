//! Small dense matrices (dimension 1 to 3) and the symmetric positive
//! definite newtype that carries cell coefficients and coarse-grained
//! matrices.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

/// Relative tolerance for the symmetry invariant.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Dense `d x d` matrix with `d <= 3`, stored row-major.
#[derive(Clone, Copy, PartialEq)]
pub struct Mat {
    dim: usize,
    data: [f64; MAX_DIM * MAX_DIM],
}

impl Mat {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension {dim} unsupported");
        Mat { dim, data: [0.0; MAX_DIM * MAX_DIM] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0)
    }

    pub fn scalar(dim: usize, c: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.set(i, i, c);
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn from_row_major(dim: usize, entries: &[f64]) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::param(format!("matrix dimension {dim} not in 1..=3")));
        }
        if entries.len() != dim * dim {
            return Err(Error::Format(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.set(i, j, entries[i * dim + j]);
            }
        }
        Ok(m)
    }

    /// Outer product `x y^t`.
    pub fn outer(x: &[f64], y: &[f64]) -> Self {
        let mut m = Self::zeros(x.len());
        for i in 0..x.len() {
            for j in 0..x.len() {
                m.set(i, j, x[i] * y[j]);
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * MAX_DIM + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * MAX_DIM + j] = v;
    }

    pub fn row_major(&self) -> Vec<f64> {
        let d = self.dim;
        (0..d * d).map(|k| self.get(k / d, k % d)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut m = *self;
        m.data.iter_mut().for_each(|x| *x *= c);
        m
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// `x . M x`
    pub fn quad(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    pub fn symmetrize(&self) -> Self {
        (*self + self.transpose()).scale(0.5)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        (0..self.dim).all(|i| {
            (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= rel_tol * scale)
        })
    }

    fn to_nalgebra(self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.set(i, j, m[(i, j)]);
            }
        }
        out
    }

    /// Eigen-decomposition of the symmetric part. Eigenvalues are returned in
    /// ascending order; column `k` of the returned matrix is the matching
    /// unit eigenvector.
    pub fn sym_eigen(&self) -> (Vec<f64>, Mat) {
        let eig = self.symmetrize().to_nalgebra().symmetric_eigen();
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let mut vectors = Mat::zeros(self.dim);
        for (col, &k) in order.iter().enumerate() {
            for i in 0..self.dim {
                vectors.set(i, col, eig.eigenvectors[(i, k)]);
            }
        }
        (values, vectors)
    }

    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        self.sym_eigen().0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.sym_eigenvalues()[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.sym_eigenvalues().last().unwrap()
    }

    /// Spectral norm of a symmetric matrix.
    pub fn spectral_norm(&self) -> f64 {
        self.sym_eigenvalues().iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    /// Applies `f` to the eigenvalues of the symmetric part.
    pub fn sym_apply(&self, f: impl Fn(f64) -> f64) -> Mat {
        let (values, v) = self.sym_eigen();
        let mut out = Mat::zeros(self.dim);
        for (k, &lam) in values.iter().enumerate() {
            let fl = f(lam);
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let cur = out.get(i, j);
                    out.set(i, j, cur + fl * v.get(i, k) * v.get(j, k));
                }
            }
        }
        out.symmetrize()
    }

    pub fn try_inverse(&self) -> Option<Mat> {
        self.to_nalgebra().try_inverse().map(|m| Self::from_nalgebra(&m))
    }
}

impl Add for Mat {
    type Output = Mat;
    fn add(mut self, rhs: Mat) -> Mat {
        debug_assert_eq!(self.dim, rhs.dim);
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += b;
        }
        self
    }
}

impl Sub for Mat {
    type Output = Mat;
    fn sub(mut self, rhs: Mat) -> Mat {
        debug_assert_eq!(self.dim, rhs.dim);
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a -= b;
        }
        self
    }
}

impl Mul for Mat {
    type Output = Mat;
    fn mul(self, rhs: Mat) -> Mat {
        debug_assert_eq!(self.dim, rhs.dim);
        let d = self.dim;
        let mut out = Mat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out.set(i, j, (0..d).map(|k| self.get(i, k) * rhs.get(k, j)).sum());
            }
        }
        out
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<Vec<f64>> = (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j)).collect())
            .collect();
        write!(f, "{rows:?}")
    }
}

/// Row-major JSON array.
impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        let dim = match v.len() {
            1 => 1,
            4 => 2,
            9 => 3,
            n => return Err(serde::de::Error::custom(format!("{n} entries is not a square matrix"))),
        };
        Mat::from_row_major(dim, &v).map_err(serde::de::Error::custom)
    }
}

/// Symmetric positive definite matrix.
#[derive(Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SpdMatrix(Mat);

impl SpdMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        if m.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::param(format!("matrix {m:?} has non-finite entries")));
        }
        if !m.is_symmetric(SYMMETRY_TOL) {
            return Err(Error::param(format!("matrix {m:?} is not symmetric")));
        }
        let m = m.symmetrize();
        let min = m.min_eigenvalue();
        if min <= 0.0 {
            return Err(Error::param(format!(
                "matrix {m:?} is not positive definite (min eigenvalue {min:e})"
            )));
        }
        Ok(SpdMatrix(m))
    }

    pub fn scalar(dim: usize, c: f64) -> Result<Self> {
        Self::new(Mat::scalar(dim, c))
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix(Mat::identity(dim))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    #[inline]
    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.min_eigenvalue()
    }

    /// Spectral norm, i.e. the largest eigenvalue.
    pub fn norm(&self) -> f64 {
        self.0.max_eigenvalue()
    }

    pub fn inverse(&self) -> SpdMatrix {
        SpdMatrix(self.0.sym_apply(|x| 1.0 / x))
    }

    pub fn sqrt(&self) -> SpdMatrix {
        SpdMatrix(self.0.sym_apply(f64::sqrt))
    }

    pub fn inv_sqrt(&self) -> SpdMatrix {
        SpdMatrix(self.0.sym_apply(|x| 1.0 / x.sqrt()))
    }

    pub fn quad(&self, x: &[f64]) -> f64 {
        self.0.quad(x)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.0.mul_vec(x)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn row_major(&self) -> Vec<f64> {
        self.0.row_major()
    }

    pub fn is_scalar(&self) -> bool {
        let c = self.get(0, 0);
        self.0 == Mat::scalar(self.dim(), c)
    }
}

impl From<SpdMatrix> for Mat {
    fn from(m: SpdMatrix) -> Mat {
        m.0
    }
}

impl fmt::Debug for SpdMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl<'de> Deserialize<'de> for SpdMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        SpdMatrix::new(Mat::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let m = Mat::from_row_major(2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(SpdMatrix::new(m).is_err());
        let m = Mat::from_row_major(2, &[2.0, 0.5, 0.4, 2.0]).unwrap();
        assert!(SpdMatrix::new(m).is_err());
        assert!(SpdMatrix::scalar(3, 0.0).is_err());
    }

    #[test]
    fn functional_calculus() {
        let m = Mat::from_row_major(2, &[4.0, 1.0, 1.0, 3.0]).unwrap();
        let a = SpdMatrix::new(m).unwrap();
        let r = a.sqrt();
        let back = *r.as_mat() * *r.as_mat();
        assert!((back - m).max_abs() < 1e-13);
        let id = *a.as_mat() * *a.inverse().as_mat();
        assert!((id - Mat::identity(2)).max_abs() < 1e-13);
        let s = *a.inv_sqrt().as_mat() * *a.as_mat() * *a.inv_sqrt().as_mat();
        assert!((s - Mat::identity(2)).max_abs() < 1e-13);
    }

    #[test]
    fn eigenvalues_sorted() {
        let m = Mat::diagonal(&[3.0, 1.0, 2.0]);
        assert_eq!(m.sym_eigenvalues(), vec![1.0, 2.0, 3.0]);
        assert_eq!(SpdMatrix::new(m).unwrap().norm(), 3.0);
    }

    #[test]
    fn json_is_row_major() {
        let m = Mat::from_row_major(2, &[1.0, 0.25, 0.25, 2.0]).unwrap();
        let a = SpdMatrix::new(m).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), "[1.0,0.25,0.25,2.0]");
        let back: SpdMatrix = serde_json::from_str("[1.0,0.25,0.25,2.0]").unwrap();
        assert_eq!(back, a);
    }
}
