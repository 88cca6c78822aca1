//! NLSDP instances and KKT diagnostics.
//!
//! A [`Problem`] exposes its data through operator applications only:
//! values of `f`, `G` and `h`, the derivative maps `G'(x)`, `h'(x)` and their
//! adjoints, and Hessian-vector products of the Lagrangian
//! `L(x, Y, z) = f(x) + ⟨Y, G(x)⟩ + ⟨z, h(x)⟩`.
//! The PSD multiplier `Y` is kept in `S^n_-`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, packed_index, packed_len, Cone, SymMatrix, Vector};

pub trait Problem: Send + Sync {
    fn name(&self) -> String;

    /// Dimension of the (packed) primal variable.
    fn dim_x(&self) -> usize;

    /// Order of the PSD constraint.
    fn n_sdp(&self) -> usize;

    /// Number of scalar equality constraints.
    fn m_eq(&self) -> usize {
        0
    }

    fn f(&self, x: &Vector) -> f64;
    fn grad_f(&self, x: &Vector) -> Vector;

    fn g(&self, x: &Vector) -> SymMatrix;
    /// `G'(x) d`.
    fn apply_gp(&self, x: &Vector, d: &Vector) -> SymMatrix;
    /// `G'(x)* S`.
    fn apply_gp_adjoint(&self, x: &Vector, s: &SymMatrix) -> Vector;

    /// `L''_xx(x, Y, z) d`.
    fn apply_hess_lagrangian(&self, x: &Vector, y: &SymMatrix, z: &Vector, d: &Vector) -> Vector;

    fn h(&self, _x: &Vector) -> Vector {
        Vector::zeros(0)
    }
    fn apply_hp(&self, _x: &Vector, _d: &Vector) -> Vector {
        Vector::zeros(0)
    }
    fn apply_hp_adjoint(&self, _x: &Vector, _v: &Vector) -> Vector {
        Vector::zeros(self.dim_x())
    }

    /// Distance (or a surrogate of it) from `(Y, z)` to the multiplier set
    /// of the problem's reference stationary point, when known.
    fn multiplier_distance(&self, _y: &SymMatrix, _z: &Vector) -> Option<Result<f64>> {
        None
    }

    /// A known KKT point, when the instance has one.
    fn stationary_point(&self) -> Option<KktPoint> {
        None
    }
}

/// Primal point with its PSD multiplier `y ∈ S^n_-` and equality multiplier `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub x: Vector,
    pub y: SymMatrix,
    pub z: Vector,
}

impl KktPoint {
    pub fn new(x: Vector, y: SymMatrix, z: Vector) -> Self {
        Self { x, y, z }
    }

    pub fn check_dims(&self, p: &dyn Problem) -> Result<()> {
        if self.x.len() != p.dim_x() {
            return Err(Error::invalid(format!(
                "x has length {}, expected {}",
                self.x.len(),
                p.dim_x()
            )));
        }
        if self.y.n() != p.n_sdp() {
            return Err(Error::invalid(format!(
                "Y has order {}, expected {}",
                self.y.n(),
                p.n_sdp()
            )));
        }
        if self.z.len() != p.m_eq() {
            return Err(Error::invalid(format!(
                "z has length {}, expected {}",
                self.z.len(),
                p.m_eq()
            )));
        }
        Ok(())
    }
}

/// `∇f(x) + G'(x)*Y + h'(x)*z`.
pub fn lagrangian_grad(p: &dyn Problem, pt: &KktPoint) -> Result<Vector> {
    pt.check_dims(p)?;
    let mut g = p.grad_f(&pt.x);
    g += p.apply_gp_adjoint(&pt.x, &pt.y);
    if p.m_eq() > 0 {
        g += p.apply_hp_adjoint(&pt.x, &pt.z);
    }
    Ok(g)
}

/// `‖L'_x‖ + ‖G(x) − Π_+(G(x) + Y)‖ + ‖h(x)‖`.
pub fn kkt_residual(p: &dyn Problem, pt: &KktPoint) -> Result<f64> {
    let grad = lagrangian_grad(p, pt)?;
    let gx = p.g(&pt.x);
    let comp = &gx - &linalg::proj_cone(&(&gx + &pt.y), Cone::Plus)?;
    let mut r = grad.norm() + comp.norm();
    if p.m_eq() > 0 {
        r += p.h(&pt.x).norm();
    }
    if !r.is_finite() {
        return Err(Error::NumericalFailure("non-finite KKT residual".into()));
    }
    Ok(r)
}

/// One-dimensional instance `min ±x³/2 s.t. ∓x²·E₃₃ ∈ S³_+`.
///
/// The standard orientation has the stationary point `x̄ = 0` with
/// multiplier set `S³_-`; at `Ȳ = diag(0, −1, −2)` the Lagrangian
/// curvature is `4`. The flipped orientation keeps the same stationary
/// point and multiplier set but has curvature `−4` there.
#[derive(Debug, Clone, Copy)]
pub struct ToyProblem {
    sign: f64,
}

pub fn toy_problem() -> ToyProblem {
    ToyProblem { sign: 1.0 }
}

/// Toy instance with both the objective and the constraint curvature negated.
pub fn toy_problem_flipped() -> ToyProblem {
    ToyProblem { sign: -1.0 }
}

impl ToyProblem {
    pub fn is_flipped(&self) -> bool {
        self.sign < 0.0
    }

    fn e33(scale: f64) -> SymMatrix {
        SymMatrix::from_diagonal(&[0.0, 0.0, scale])
    }
}

impl Problem for ToyProblem {
    fn name(&self) -> String {
        if self.is_flipped() { "toy-flipped".into() } else { "toy".into() }
    }

    fn dim_x(&self) -> usize {
        1
    }

    fn n_sdp(&self) -> usize {
        3
    }

    fn f(&self, x: &Vector) -> f64 {
        self.sign * 0.5 * x[0].powi(3)
    }

    fn grad_f(&self, x: &Vector) -> Vector {
        Vector::from_element(1, self.sign * 1.5 * x[0] * x[0])
    }

    fn g(&self, x: &Vector) -> SymMatrix {
        Self::e33(-self.sign * x[0] * x[0])
    }

    fn apply_gp(&self, x: &Vector, d: &Vector) -> SymMatrix {
        Self::e33(-self.sign * 2.0 * x[0] * d[0])
    }

    fn apply_gp_adjoint(&self, x: &Vector, s: &SymMatrix) -> Vector {
        Vector::from_element(1, -self.sign * 2.0 * x[0] * s.get(2, 2))
    }

    fn apply_hess_lagrangian(&self, x: &Vector, y: &SymMatrix, _z: &Vector, d: &Vector) -> Vector {
        let curv = self.sign * (3.0 * x[0] - 2.0 * y.get(2, 2));
        Vector::from_element(1, curv * d[0])
    }

    /// `dist(Y, S³_-) = ‖Π_+(Y)‖`.
    fn multiplier_distance(&self, y: &SymMatrix, _z: &Vector) -> Option<Result<f64>> {
        Some(linalg::dist_cone(y, Cone::Minus))
    }

    fn stationary_point(&self) -> Option<KktPoint> {
        Some(KktPoint::new(
            Vector::zeros(1),
            SymMatrix::from_diagonal(&[0.0, -1.0, -2.0]),
            Vector::zeros(0),
        ))
    }
}

/// `min ½⟨X, Q∘X⟩ s.t. X ∈ S^n_+, B∘X = 0` over `X ∈ S^n` (packed).
///
/// `Q` has `q` on the leading diagonal, ones elsewhere in the leading
/// `(n−1)×(n−1)` block, zeros in the last row/column except `Q_nn = −1`.
/// `B` is one on the last row and column. `B∘X = 0` is encoded as `2n−1`
/// scalar equations: `X_{i,n}` for `i = 1..n`, then `X_{n,j}` for `j = 1..n−1`.
#[derive(Debug, Clone)]
pub struct HadamardProblem {
    n: usize,
    q: f64,
    weights: SymMatrix,
    equations: Vec<(usize, usize)>,
}

pub fn hadamard_problem(n: usize, q: f64) -> Result<HadamardProblem> {
    if n < 2 {
        return Err(Error::invalid(format!("hadamard problem needs n >= 2, got {n}")));
    }
    if !q.is_finite() || q < (n - 1) as f64 {
        return Err(Error::invalid(format!("hadamard problem needs q >= n-1 = {}, got {q}", n - 1)));
    }
    let last = n - 1;
    let weights = SymMatrix::from_fn(n, |i, j| match (i == last, j == last) {
        (true, true) => -1.0,
        (true, false) | (false, true) => 0.0,
        _ if i == j => q,
        _ => 1.0,
    });
    let mut equations: Vec<(usize, usize)> = (0..n).map(|i| (i, last)).collect();
    equations.extend((0..last).map(|j| (last, j)));
    Ok(HadamardProblem { n, q, weights, equations })
}

impl HadamardProblem {
    pub fn order(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn weights(&self) -> &SymMatrix {
        &self.weights
    }

    pub fn equations(&self) -> &[(usize, usize)] {
        &self.equations
    }

    fn mat(&self, x: &Vector) -> SymMatrix {
        SymMatrix::unpack(self.n, x).expect("packed length checked by caller")
    }

    fn eq_coeff(i: usize, j: usize) -> f64 {
        if i == j { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 }
    }

    /// Frobenius gradient of `⟨z, h(X)⟩`, i.e. the symmetric part of `B∘Z`.
    pub fn equality_multiplier_matrix(&self, z: &Vector) -> SymMatrix {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (k, &(i, j)) in self.equations.iter().enumerate() {
            m[(i, j)] += 0.5 * z[k];
            m[(j, i)] += 0.5 * z[k];
        }
        SymMatrix::from_dense(&m).expect("square")
    }
}

impl Problem for HadamardProblem {
    fn name(&self) -> String {
        format!("hadamard(n={}, q={})", self.n, self.q)
    }

    fn dim_x(&self) -> usize {
        packed_len(self.n)
    }

    fn n_sdp(&self) -> usize {
        self.n
    }

    fn m_eq(&self) -> usize {
        self.equations.len()
    }

    fn f(&self, x: &Vector) -> f64 {
        let m = self.mat(x);
        0.5 * m.inner(&self.weights.hadamard(&m))
    }

    fn grad_f(&self, x: &Vector) -> Vector {
        self.weights.hadamard(&self.mat(x)).pack()
    }

    fn g(&self, x: &Vector) -> SymMatrix {
        self.mat(x)
    }

    fn apply_gp(&self, _x: &Vector, d: &Vector) -> SymMatrix {
        self.mat(d)
    }

    fn apply_gp_adjoint(&self, _x: &Vector, s: &SymMatrix) -> Vector {
        s.pack()
    }

    fn apply_hess_lagrangian(&self, _x: &Vector, _y: &SymMatrix, _z: &Vector, d: &Vector) -> Vector {
        self.weights.hadamard(&self.mat(d)).pack()
    }

    fn h(&self, x: &Vector) -> Vector {
        self.apply_hp(x, x)
    }

    fn apply_hp(&self, _x: &Vector, d: &Vector) -> Vector {
        Vector::from_iterator(
            self.equations.len(),
            self.equations.iter().map(|&(i, j)| Self::eq_coeff(i, j) * d[packed_index(i, j)]),
        )
    }

    fn apply_hp_adjoint(&self, _x: &Vector, v: &Vector) -> Vector {
        let mut out = Vector::zeros(self.dim_x());
        for (k, &(i, j)) in self.equations.iter().enumerate() {
            out[packed_index(i, j)] += Self::eq_coeff(i, j) * v[k];
        }
        out
    }

    /// Surrogate `‖Y + B∘Z‖ + ‖Π_+(Y)‖`; vanishes exactly on the multiplier set.
    fn multiplier_distance(&self, y: &SymMatrix, z: &Vector) -> Option<Result<f64>> {
        let bz = self.equality_multiplier_matrix(z);
        Some(linalg::dist_cone(y, Cone::Minus).map(|d| (y + &bz).norm() + d))
    }

    fn stationary_point(&self) -> Option<KktPoint> {
        let mut ybar = vec![0.0; self.n];
        ybar[self.n - 1] = -1.0;
        let mut z = Vector::zeros(self.m_eq());
        // Equation n−1 is X_{n,n}.
        z[self.n - 1] = 1.0;
        Some(KktPoint::new(Vector::zeros(self.dim_x()), SymMatrix::from_diagonal(&ybar), z))
    }
}

/// `min ½xᵀHx + cᵀx s.t. G₀ + Σ_k x_k A_k ∈ S^n_+`.
///
/// A generic quadratic objective with an affine matrix constraint; handy for
/// building instances with a prescribed eigenvalue partition at a KKT point.
#[derive(Debug, Clone)]
pub struct QuadraticLinearSdp {
    pub hessian: DMatrix<f64>,
    pub linear: Vector,
    pub g0: SymMatrix,
    pub a: Vec<SymMatrix>,
}

impl QuadraticLinearSdp {
    pub fn new(hessian: DMatrix<f64>, linear: Vector, g0: SymMatrix, a: Vec<SymMatrix>) -> Result<Self> {
        let m = a.len();
        if hessian.nrows() != m || hessian.ncols() != m || linear.len() != m {
            return Err(Error::invalid("objective data must match the number of constraint matrices"));
        }
        if a.iter().any(|ak| ak.n() != g0.n()) {
            return Err(Error::invalid("constraint matrices must share one order"));
        }
        let hessian = 0.5 * (&hessian + hessian.transpose());
        Ok(Self { hessian, linear, g0, a })
    }

    /// Chooses the linear term so that `(0, Ȳ)` satisfies stationarity.
    pub fn with_stationary_multiplier(
        hessian: DMatrix<f64>,
        g0: SymMatrix,
        a: Vec<SymMatrix>,
        ybar: &SymMatrix,
    ) -> Result<Self> {
        let linear = Vector::from_iterator(a.len(), a.iter().map(|ak| -ak.inner(ybar)));
        Self::new(hessian, linear, g0, a)
    }
}

impl Problem for QuadraticLinearSdp {
    fn name(&self) -> String {
        "quadratic-linear-sdp".into()
    }

    fn dim_x(&self) -> usize {
        self.a.len()
    }

    fn n_sdp(&self) -> usize {
        self.g0.n()
    }

    fn f(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    fn grad_f(&self, x: &Vector) -> Vector {
        &self.hessian * x + &self.linear
    }

    fn g(&self, x: &Vector) -> SymMatrix {
        let mut g = self.g0.clone();
        for (ak, &xk) in self.a.iter().zip(x.iter()) {
            g = &g + &(ak * xk);
        }
        g
    }

    fn apply_gp(&self, _x: &Vector, d: &Vector) -> SymMatrix {
        let mut g = SymMatrix::zeros(self.g0.n());
        for (ak, &dk) in self.a.iter().zip(d.iter()) {
            g = &g + &(ak * dk);
        }
        g
    }

    fn apply_gp_adjoint(&self, _x: &Vector, s: &SymMatrix) -> Vector {
        Vector::from_iterator(self.a.len(), self.a.iter().map(|ak| ak.inner(s)))
    }

    fn apply_hess_lagrangian(&self, _x: &Vector, _y: &SymMatrix, _z: &Vector, d: &Vector) -> Vector {
        &self.hessian * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_values() {
        let p = toy_problem();
        let x = Vector::from_element(1, 2.0);
        assert_eq!(p.f(&x), 4.0);
        assert_eq!(p.g(&x), SymMatrix::from_diagonal(&[0.0, 0.0, -4.0]));
        let pt = p.stationary_point().unwrap();
        let h = p.apply_hess_lagrangian(&pt.x, &pt.y, &pt.z, &Vector::from_element(1, 1.0));
        assert_eq!(h[0], 4.0);
        let flipped = toy_problem_flipped();
        let h = flipped.apply_hess_lagrangian(&pt.x, &pt.y, &pt.z, &Vector::from_element(1, 1.0));
        assert_eq!(h[0], -4.0);
    }

    #[test]
    fn toy_multiplier_distance() {
        let p = toy_problem();
        let y = SymMatrix::from_diagonal(&[1.0, -1.0, 0.0]);
        let d = p.multiplier_distance(&y, &Vector::zeros(0)).unwrap().unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn toy_lagrangian_grad_and_residual() {
        let p = toy_problem();
        let pt = p.stationary_point().unwrap();
        assert_eq!(lagrangian_grad(&p, &pt).unwrap()[0], 0.0);
        assert_eq!(kkt_residual(&p, &pt).unwrap(), 0.0);

        let off = KktPoint::new(Vector::from_element(1, 1.0), SymMatrix::zeros(3), Vector::zeros(0));
        assert_eq!(lagrangian_grad(&p, &off).unwrap()[0], 1.5);
        assert!((kkt_residual(&p, &off).unwrap() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn hadamard_rejects_small_q() {
        assert!(matches!(hadamard_problem(3, 1.0), Err(Error::InvalidInput(_))));
        assert!(hadamard_problem(1, 5.0).is_err());
        assert!(hadamard_problem(3, 2.0).is_ok());
    }

    #[test]
    fn hadamard_structure() {
        let p = hadamard_problem(3, 2.0).unwrap();
        assert_eq!(p.dim_x(), 6);
        assert_eq!(p.m_eq(), 5);
        assert_eq!(p.equations(), &[(0, 2), (1, 2), (2, 2), (2, 0), (2, 1)]);
        let w = p.weights();
        assert_eq!(w.to_rows(), vec![vec![2.0, 1.0, 0.0], vec![1.0, 2.0, 0.0], vec![0.0, 0.0, -1.0]]);
    }

    #[test]
    fn hadamard_stationary_point() {
        let p = hadamard_problem(3, 2.0).unwrap();
        let pt = p.stationary_point().unwrap();
        assert_eq!(kkt_residual(&p, &pt).unwrap(), 0.0);
        assert!(lagrangian_grad(&p, &pt).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(p.multiplier_distance(&pt.y, &pt.z).unwrap().unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = toy_problem();
        let bad = KktPoint::new(Vector::zeros(2), SymMatrix::zeros(3), Vector::zeros(0));
        assert!(matches!(kkt_residual(&p, &bad), Err(Error::InvalidInput(_))));
    }
}
