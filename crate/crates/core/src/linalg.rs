//! Dense row-major matrices, Cholesky factorisation with jitter escalation and
//! the Kronecker identities the model relies on.
//!
//! Vectorisation is column-stacking throughout: `vec(X)` lists column 0, then
//! column 1, and so on. With this convention `(A ⊗ B) vec(X) = vec(B X Aᵀ)`,
//! and a vector indexed output-major (output slowest) is the column-stacking of
//! a points × outputs matrix.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};

/// Default relative jitter added to the diagonal when a factorisation fails.
pub const DEFAULT_BASE_JITTER: f64 = 1e-6;

/// Number of ×10 escalations attempted after the base jitter.
const JITTER_ESCALATIONS: i32 = 6;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting a wrong length or
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch("Matrix::new", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                span: "matrix entries".into(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(mismatch("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Self::from_raw(v.len(), 1, v.to_vec())
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_raw(1, v.len(), v.to_vec())
    }

    pub fn diagonal(v: &[f64]) -> Self {
        let mut m = Self::zeros(v.len(), v.len());
        for (i, x) in v.iter().enumerate() {
            m[(i, i)] = *x;
        }
        m
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_raw(1, 1, vec![x])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a 1×1 matrix.
    pub fn as_scalar(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Matrix product; panics on inner-dimension mismatch (internal callers
    /// validate shapes up front).
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::from_raw(n, m, out)
    }

    pub fn try_matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(mismatch(
                "matmul",
                format!("{} rows", self.cols),
                other.rows,
            ));
        }
        Ok(self.matmul(other))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Self::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_diagonal(&self, c: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += c;
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius inner product `Σ_ij a_ij b_ij`.
    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Lower triangle including the diagonal; strictly upper entries zeroed.
    pub fn lower_triangle(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| if j <= i { self[(i, j)] } else { 0.0 })
    }

    pub fn symmetrize(&self) -> Self {
        self.add(&self.transpose()).scale(0.5)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// Column-stacking vectorisation.
    pub fn vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    /// Inverse of [`Matrix::vec`].
    pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Self> {
        if v.len() != rows * cols {
            return Err(mismatch("unvec", rows * cols, v.len()));
        }
        Ok(Self::from_fn(rows, cols, |i, j| v[j * rows + i]))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[Matrix]) -> Result<Self> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols && b.rows > 0 {
                return Err(mismatch("vstack", cols, b.cols));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(idx.len(), self.cols, data)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Kronecker product: block (i, j) of the result is `a[i, j] · b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for p in 0..br {
                for q in 0..bc {
                    out[(i * br + p, j * bc + q)] = s * b[(p, q)];
                }
            }
        }
    }
    out
}

/// `(a ⊗ b) x` without forming the Kronecker product, via `vec(B X Aᵀ)` where
/// `X` is the `b.cols × a.cols` unvectorisation of `x`.
pub fn kron_matvec(a: &Matrix, b: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.cols() * b.cols() {
        return Err(mismatch("kron_matvec", a.cols() * b.cols(), x.len()));
    }
    let xm = Matrix::unvec(x, b.cols(), a.cols())?;
    Ok(b.matmul(&xm).matmul(&a.transpose()).vec())
}

/// `Tr(a ⊗ b) = Tr(a) · Tr(b)`.
pub fn trace_kron(a: &Matrix, b: &Matrix) -> Result<f64> {
    for m in [a, b] {
        if !m.is_square() {
            return Err(Error::NotSquare {
                op: "trace_kron",
                rows: m.rows(),
                cols: m.cols(),
            });
        }
    }
    Ok(a.trace() * b.trace())
}

/// Lower Cholesky factor of `input + jitter_used · I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CholeskyFactor {
    pub lower: Matrix,
    pub jitter_used: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `A⁻¹ rhs` by forward then backward substitution.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        tri_solve(self, rhs)
    }

    pub fn logdet(&self) -> f64 {
        logdet(self)
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        solve_lower_transpose(&self.lower, &solve_lower(&self.lower, &Matrix::identity(n)))
    }

    /// Reconstructs `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul(&self.lower.transpose())
    }
}

fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Cholesky factorisation of a symmetric matrix, escalating a diagonal jitter
/// through `0, base·s, 10·base·s, …, 10⁶·base·s` where `s` is the mean
/// diagonal, and returning the first success.
pub fn cholesky_jitter(a: &Matrix, base_jitter: f64) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            op: "cholesky_jitter",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if let Some(lower) = try_cholesky(a, 0.0) {
        return Ok(CholeskyFactor {
            lower,
            jitter_used: 0.0,
        });
    }
    let mean_diag = if n == 0 { 1.0 } else { a.trace() / n as f64 };
    let scale = if mean_diag.is_finite() && mean_diag > 0.0 {
        mean_diag
    } else {
        1.0
    };
    let mut jitter = base_jitter * scale;
    for _ in 0..=JITTER_ESCALATIONS {
        if let Some(lower) = try_cholesky(a, jitter) {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::Indefinite {
        size: n,
        max_jitter: jitter / 10.0,
    })
}

/// `L⁻¹ B` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    assert_eq!(n, b.rows(), "solve_lower dimension mismatch");
    let m = b.cols();
    let mut x = b.clone();
    for i in 0..n {
        let lii = l[(i, i)];
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == 0.0 {
                continue;
            }
            for j in 0..m {
                let v = x[(k, j)];
                x[(i, j)] -= lik * v;
            }
        }
        for j in 0..m {
            x[(i, j)] /= lii;
        }
    }
    x
}

/// `L⁻ᵀ B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    assert_eq!(n, b.rows(), "solve_lower_transpose dimension mismatch");
    let m = b.cols();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let lii = l[(i, i)];
        for k in (i + 1)..n {
            let lki = l[(k, i)];
            if lki == 0.0 {
                continue;
            }
            for j in 0..m {
                let v = x[(k, j)];
                x[(i, j)] -= lki * v;
            }
        }
        for j in 0..m {
            x[(i, j)] /= lii;
        }
    }
    x
}

/// `A⁻¹ rhs` where `factor` is the Cholesky factor of `A`.
pub fn tri_solve(factor: &CholeskyFactor, rhs: &Matrix) -> Result<Matrix> {
    if rhs.rows() != factor.dim() {
        return Err(mismatch("tri_solve", factor.dim(), rhs.rows()));
    }
    Ok(solve_lower_transpose(
        &factor.lower,
        &solve_lower(&factor.lower, rhs),
    ))
}

/// `log |A| = 2 Σ log L_ii`.
pub fn logdet(factor: &CholeskyFactor) -> f64 {
    2.0 * factor.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
}
