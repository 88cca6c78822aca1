//! Dense symmetric-matrix kernel: packed storage, ordered eigendecomposition
//! with a sign partition, cone projections and the symmetric pseudo-inverse.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;

/// Relative factor for the default zero-eigenvalue threshold.
pub const ZERO_TOL_REL: f64 = 1e-8;

/// Real symmetric `n×n` matrix.
///
/// Every constructor symmetrizes its input, so `a[(i, j)] == a[(j, i)]`
/// holds bit for bit.
#[derive(Clone, PartialEq)]
pub struct SymMatrix {
    data: DMatrix<f64>,
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymMatrix{}", self.data)
    }
}

/// Length of the packed form of an `n×n` symmetric matrix.
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of entry `(i, j)` in the packed form (upper triangle, column by column).
pub fn packed_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

/// Inverse of `packed_len`, if `len` is a triangular number.
pub fn order_from_packed_len(len: usize) -> Option<usize> {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (packed_len(n) == len).then_some(n)
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { data: DMatrix::zeros(n, n) }
    }

    pub fn identity(n: usize) -> Self {
        Self { data: DMatrix::identity(n, n) }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self { data: DMatrix::from_diagonal(&DVector::from_column_slice(diag)) }
    }

    /// Builds the matrix from the upper triangle of `f(i, j)`, `i <= j`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = f(i, j);
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        Self { data }
    }

    /// Symmetric part `(M + Mᵀ)/2` of a square matrix.
    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        Ok(Self::from_fn(n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)])))
    }

    /// Parses row-major nested rows; the input must already be symmetric to `1e-12`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("matrix rows must all have length n"));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (rows[i][j], rows[j][i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::invalid(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self::from_fn(n, |i, j| 0.5 * (rows[i][j] + rows[j][i])))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| (0..self.n()).map(|j| self.data[(i, j)]).collect()).collect()
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Packed vector with off-diagonal entries scaled by `√2`.
    pub fn pack(&self) -> Vector {
        let n = self.n();
        let mut v = Vector::zeros(packed_len(n));
        for j in 0..n {
            for i in 0..=j {
                let s = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                v[packed_index(i, j)] = s * self.data[(i, j)];
            }
        }
        v
    }

    pub fn unpack(n: usize, v: &Vector) -> Result<Self> {
        if v.len() != packed_len(n) {
            return Err(Error::invalid(format!(
                "packed length {} does not match order {n}",
                v.len()
            )));
        }
        Ok(Self::from_fn(n, |i, j| {
            let s = if i == j { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 };
            s * v[packed_index(i, j)]
        }))
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &SymMatrix) -> f64 {
        self.data.dot(&other.data)
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.norm_squared()
    }

    pub fn hadamard(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix { data: self.data.component_mul(&other.data) }
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `Pᵀ A P` for a (not necessarily square) `P`.
    pub fn congruence_t(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        p.transpose() * &self.data * p
    }

    /// `P M Pᵀ`, symmetrized.
    pub fn congruence(m: &DMatrix<f64>, p: &DMatrix<f64>) -> SymMatrix {
        let full = p * m * p.transpose();
        SymMatrix::from_dense(&full).expect("square by construction")
    }
}

impl Add for &SymMatrix {
    type Output = SymMatrix;
    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix { data: &self.data + &rhs.data }
    }
}

impl Sub for &SymMatrix {
    type Output = SymMatrix;
    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix { data: &self.data - &rhs.data }
    }
}

impl Mul<f64> for &SymMatrix {
    type Output = SymMatrix;
    fn mul(self, rhs: f64) -> SymMatrix {
        SymMatrix { data: &self.data * rhs }
    }
}

impl Neg for &SymMatrix {
    type Output = SymMatrix;
    fn neg(self) -> SymMatrix {
        SymMatrix { data: -&self.data }
    }
}

/// Which closed convex cone to project onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    /// Positive semidefinite matrices.
    Plus,
    /// Negative semidefinite matrices.
    Minus,
}

/// Eigendecomposition `A = P diag(λ) Pᵀ` with `λ` nonincreasing, split into
/// positive (`alpha`), zero (`beta`) and negative (`gamma`) index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    pub p: DMatrix<f64>,
    pub lambda: Vec<f64>,
    pub alpha: Vec<usize>,
    pub beta: Vec<usize>,
    pub gamma: Vec<usize>,
    pub zero_tol: f64,
}

/// Default threshold `1e-8·max(1, |λ_1|, |λ_n|)`.
pub fn default_zero_tol(lambda: &[f64]) -> f64 {
    let scale = lambda.iter().fold(1.0_f64, |m, l| m.max(l.abs()));
    ZERO_TOL_REL * scale
}

/// Eigendecomposition with the scale-aware default zero threshold.
pub fn eig_sym_default(a: &SymMatrix) -> Result<EigenSystem> {
    eig_sym_with(a, None)
}

pub fn eig_sym(a: &SymMatrix, zero_tol: f64) -> Result<EigenSystem> {
    if !(zero_tol >= 0.0) {
        return Err(Error::invalid("zero_tol must be nonnegative"));
    }
    eig_sym_with(a, Some(zero_tol))
}

fn eig_sym_with(a: &SymMatrix, zero_tol: Option<f64>) -> Result<EigenSystem> {
    let n = a.n();
    if n == 0 {
        return Err(Error::invalid("matrix order must be positive"));
    }
    if !a.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let eig = SymmetricEigen::try_new(a.as_matrix().clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::NumericalFailure("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: ties keep the solver's column order, so results are reproducible.
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let lambda: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut p = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(k).clone_owned();
        // Fix the sign so the largest-magnitude component is positive.
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        p.set_column(col, &v);
    }

    let tol = zero_tol.unwrap_or_else(|| default_zero_tol(&lambda));
    let mut sys = EigenSystem {
        p,
        lambda,
        alpha: Vec::new(),
        beta: Vec::new(),
        gamma: Vec::new(),
        zero_tol: tol,
    };
    for (i, &l) in sys.lambda.iter().enumerate() {
        if l > tol {
            sys.alpha.push(i);
        } else if l < -tol {
            sys.gamma.push(i);
        } else {
            sys.beta.push(i);
        }
    }
    Ok(sys)
}

impl EigenSystem {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    /// `P diag(f(λ_i)) Pᵀ`.
    pub fn spectral_map(&self, mut f: impl FnMut(f64) -> f64) -> SymMatrix {
        let mut scaled = self.p.clone();
        for (j, &l) in self.lambda.iter().enumerate() {
            let s = f(l);
            scaled.column_mut(j).scale_mut(s);
        }
        SymMatrix::from_dense(&(scaled * self.p.transpose())).expect("square")
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.spectral_map(|l| l)
    }

    pub fn projection(&self, cone: Cone) -> SymMatrix {
        match cone {
            Cone::Plus => self.spectral_map(|l| l.max(0.0)),
            Cone::Minus => self.spectral_map(|l| l.min(0.0)),
        }
    }

    /// Columns of `P` listed in `idx`.
    pub fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), idx.len(), |r, c| self.p[(r, idx[c])])
    }

    pub fn min_eigenvalue(&self) -> f64 {
        *self.lambda.last().expect("n > 0")
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.lambda[0]
    }
}

/// Metric projection onto `S^n_+` or `S^n_-`.
pub fn proj_cone(a: &SymMatrix, cone: Cone) -> Result<SymMatrix> {
    Ok(eig_sym_default(a)?.projection(cone))
}

/// Squared Frobenius distance to the cone.
pub fn dist_cone_sq(a: &SymMatrix, cone: Cone) -> Result<f64> {
    let eig = eig_sym_default(a)?;
    // The residual A − Π(A) is the projection onto the polar cone.
    Ok(eig
        .lambda
        .iter()
        .map(|&l| match cone {
            Cone::Plus => l.min(0.0).powi(2),
            Cone::Minus => l.max(0.0).powi(2),
        })
        .sum())
}

pub fn dist_cone(a: &SymMatrix, cone: Cone) -> Result<f64> {
    dist_cone_sq(a, cone).map(f64::sqrt)
}

/// Moore–Penrose pseudo-inverse; eigenvalues inside the default zero threshold are dropped.
pub fn pinv_sym(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = eig_sym_default(a)?;
    let tol = eig.zero_tol;
    Ok(eig.spectral_map(|l| if l.abs() > tol { 1.0 / l } else { 0.0 }))
}

/// Smallest eigenvalue of a dense symmetric matrix (symmetrized first).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let s = SymMatrix::from_dense(m)?;
    Ok(eig_sym_default(&s)?.min_eigenvalue())
}
