//! Augmented Lagrangian of an NLSDP and its generalized Hessian.
//!
//! ```text
//!   L_ρ(x, Y, z) = f(x) + ρ/2·dist²(G(x) + Y/ρ, S^n_+) − ‖Y‖²/(2ρ)
//!                + ⟨z, h(x)⟩ + ρ/2·‖h(x)‖²
//! ```
//!
//! The gradient involves `Π_{S^n_-}(G(x) + Y/ρ)`; the generalized Hessian
//! replaces the derivative of that projection by an element `W` of its
//! B-subdifferential, parameterized by `(Ω, Q)` on the zero-eigenvalue block.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Cone, EigenSystem, SymMatrix, Vector};
use crate::problem::{kkt_residual, KktPoint, Problem};

/// KKT residual above which a point is not accepted as a reference KKT point.
pub const KKT_GATE_TOL: f64 = 1e-8;

/// Penalty `ρ`, offset `ρ̄` and dual step `ρ̃ = ρ − ρ̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyParams {
    rho: f64,
    rho_bar: f64,
}

impl PenaltyParams {
    pub fn new(rho: f64, rho_bar: f64) -> Result<Self> {
        if !(rho.is_finite() && rho_bar.is_finite() && rho_bar >= 0.0 && rho > rho_bar) {
            return Err(Error::invalid(format!(
                "penalty parameters need rho > rho_bar >= 0, got rho={rho}, rho_bar={rho_bar}"
            )));
        }
        Ok(Self { rho, rho_bar })
    }

    /// `ρ̄ = 0`, so the dual step equals the penalty.
    pub fn traditional(rho: f64) -> Result<Self> {
        Self::new(rho, 0.0)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn rho_bar(&self) -> f64 {
        self.rho_bar
    }

    pub fn rho_tilde(&self) -> f64 {
        self.rho - self.rho_bar
    }
}

/// Everything the inner solver needs at one point, computed from a single
/// eigendecomposition of `G(x) + Y/ρ`.
#[derive(Debug, Clone)]
pub struct AlmEval {
    pub value: f64,
    pub grad: Vector,
    pub gx: SymMatrix,
    pub hx: Vector,
    /// Eigensystem of `G(x) + Y/ρ`, partitioned by exact sign.
    pub shifted_eig: EigenSystem,
    /// `Π_{S^n_-}(G(x) + Y/ρ)`.
    pub proj_minus: SymMatrix,
    pub rho: f64,
}

impl AlmEval {
    /// `ρ·Π_{S^n_-}(G(x) + Y/ρ)`.
    pub fn multiplier_estimate(&self) -> SymMatrix {
        &self.proj_minus * self.rho
    }

    /// `z + ρ·h(x)`.
    pub fn equality_estimate(&self, z: &Vector) -> Vector {
        z + &self.hx * self.rho
    }

    /// `Π_+(G + Y/ρ) − G = Y/ρ − Π_-(G + Y/ρ)`, the Y-gradient of `L_ρ`.
    pub fn dual_gradient(&self, y: &SymMatrix) -> SymMatrix {
        &(y * (1.0 / self.rho)) - &self.proj_minus
    }

    /// Norm of the full dual gradient, with `‖h(x)‖` appended for equality constraints.
    pub fn dual_gradient_norm(&self, y: &SymMatrix) -> f64 {
        (self.dual_gradient(y).norm_sq() + self.hx.norm_squared()).sqrt()
    }
}

fn check_point(p: &dyn Problem, x: &Vector, y: &SymMatrix, z: &Vector) -> Result<()> {
    if x.len() != p.dim_x() || y.n() != p.n_sdp() || z.len() != p.m_eq() {
        return Err(Error::invalid(format!(
            "dimension mismatch: x {} (want {}), Y {} (want {}), z {} (want {})",
            x.len(),
            p.dim_x(),
            y.n(),
            p.n_sdp(),
            z.len(),
            p.m_eq()
        )));
    }
    Ok(())
}

pub fn evaluate(p: &dyn Problem, x: &Vector, y: &SymMatrix, z: &Vector, pen: &PenaltyParams) -> Result<AlmEval> {
    check_point(p, x, y, z)?;
    let rho = pen.rho();
    let gx = p.g(x);
    let shifted = &gx + &(y * (1.0 / rho));
    // Exact-sign partition: the iterate-level Jacobian must not lump small
    // nonzero eigenvalues into the zero block.
    let shifted_eig = linalg::eig_sym(&shifted, 0.0)?;
    let proj_minus = shifted_eig.projection(Cone::Minus);
    let hx = p.h(x);

    let mut value = p.f(x) + 0.5 * rho * proj_minus.norm_sq() - y.norm_sq() / (2.0 * rho);
    let mut grad = p.grad_f(x) + p.apply_gp_adjoint(x, &proj_minus) * rho;
    if p.m_eq() > 0 {
        value += z.dot(&hx) + 0.5 * rho * hx.norm_squared();
        grad += p.apply_hp_adjoint(x, &(z + &hx * rho));
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure("augmented Lagrangian is not finite".into()));
    }
    Ok(AlmEval { value, grad, gx, hx, shifted_eig, proj_minus, rho })
}

pub fn alm_value(p: &dyn Problem, x: &Vector, y: &SymMatrix, z: &Vector, pen: &PenaltyParams) -> Result<f64> {
    check_point(p, x, y, z)?;
    let rho = pen.rho();
    let shifted = &p.g(x) + &(y * (1.0 / rho));
    let mut value = p.f(x) + 0.5 * rho * linalg::dist_cone_sq(&shifted, Cone::Plus)? - y.norm_sq() / (2.0 * rho);
    if p.m_eq() > 0 {
        let hx = p.h(x);
        value += z.dot(&hx) + 0.5 * rho * hx.norm_squared();
    }
    Ok(value)
}

pub fn alm_grad(p: &dyn Problem, x: &Vector, y: &SymMatrix, z: &Vector, pen: &PenaltyParams) -> Result<Vector> {
    evaluate(p, x, y, z, pen).map(|e| e.grad)
}

/// How to fill the `Ω` block of a B-subdifferential element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    Zeros,
    Ones,
    Random(u64),
}

/// How to choose the rotation `Q` of the zero-eigenvalue block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMode {
    Identity,
    Random(u64),
}

/// One element `W ∈ ∂_B Π_{S^n_-}(Z)`.
///
/// `sigma` holds the divided-difference weights for index pairs outside
/// `β×β` (its `β×β` entries are unused and stored as zero); `omega` and `q`
/// act on the `|β|×|β|` block.
#[derive(Debug, Clone, PartialEq)]
pub struct WSelection {
    pub eig: EigenSystem,
    pub sigma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

fn sigma_weight(li: f64, lj: f64) -> f64 {
    1.0 - (li.max(0.0) + lj.max(0.0)) / (li.abs() + lj.abs())
}

pub fn build_w_selection(eig: &EigenSystem, omega_mode: OmegaMode, q_mode: QMode) -> WSelection {
    let n = eig.n();
    // β eigenvalues are treated as exact zeros.
    let lam: Vec<f64> = (0..n).map(|i| if eig.beta.contains(&i) { 0.0 } else { eig.lambda[i] }).collect();
    let sigma = DMatrix::from_fn(n, n, |i, j| {
        if lam[i] == 0.0 && lam[j] == 0.0 {
            0.0
        } else {
            sigma_weight(lam[i], lam[j])
        }
    });

    let nb = eig.beta.len();
    let omega = match omega_mode {
        OmegaMode::Zeros => DMatrix::zeros(nb, nb),
        OmegaMode::Ones => DMatrix::from_element(nb, nb, 1.0),
        OmegaMode::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = DMatrix::zeros(nb, nb);
            for j in 0..nb {
                for i in 0..=j {
                    let v: f64 = rng.random();
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            m
        }
    };
    let q = match q_mode {
        QMode::Identity => DMatrix::identity(nb, nb),
        QMode::Random(seed) => random_orthogonal(nb, seed),
    };
    WSelection { eig: eig.clone(), sigma, omega, q }
}

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian matrix.
fn random_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

/// `W(H)`: in the eigenbasis of `Z`, Hadamard-weights `H̃ = PᵀHP` by `Σ`
/// off the `β×β` block and applies `Q(Ω∘(QᵀH̃_ββQ))Qᵀ` on it.
pub fn apply_w(sel: &WSelection, h: &SymMatrix) -> Result<SymMatrix> {
    if h.n() != sel.eig.n() {
        return Err(Error::invalid(format!(
            "W acts on order {}, got order {}",
            sel.eig.n(),
            h.n()
        )));
    }
    let p = &sel.eig.p;
    let ht = h.congruence_t(p);
    let mut m = sel.sigma.component_mul(&ht);
    let beta = &sel.eig.beta;
    if !beta.is_empty() {
        let hbb = submatrix(&ht, beta, beta);
        let k = sel.q.transpose() * hbb * &sel.q;
        let back = &sel.q * sel.omega.component_mul(&k) * sel.q.transpose();
        for (a, &i) in beta.iter().enumerate() {
            for (b, &j) in beta.iter().enumerate() {
                m[(i, j)] = back[(a, b)];
            }
        }
    }
    Ok(SymMatrix::congruence(&m, p))
}

/// `V d = L''_xx(x, Ŷ, ẑ) d + ρ·G'(x)* W G'(x) d + ρ·h'(x)* h'(x) d + shift·d`
/// with `Ŷ = ρ·Π_-(G(x) + Y/ρ)` and `ẑ = z + ρ·h(x)`.
pub struct GenHessian<'a> {
    problem: &'a dyn Problem,
    x: &'a Vector,
    y_est: SymMatrix,
    z_est: Vector,
    rho: f64,
    sel: WSelection,
    shift: f64,
}

impl<'a> GenHessian<'a> {
    /// Operator at an evaluated point, with the given `W` selection.
    pub fn from_eval(problem: &'a dyn Problem, x: &'a Vector, z: &Vector, eval: &AlmEval, sel: WSelection) -> Self {
        Self {
            problem,
            x,
            y_est: eval.multiplier_estimate(),
            z_est: eval.equality_estimate(z),
            rho: eval.rho,
            sel,
            shift: 0.0,
        }
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    pub fn dim(&self) -> usize {
        self.problem.dim_x()
    }

    pub fn apply(&self, d: &Vector) -> Vector {
        let p = self.problem;
        let mut out = p.apply_hess_lagrangian(self.x, &self.y_est, &self.z_est, d);
        let gd = p.apply_gp(self.x, d);
        let wgd = apply_w(&self.sel, &gd).expect("orders checked at construction");
        out += p.apply_gp_adjoint(self.x, &wgd) * self.rho;
        if p.m_eq() > 0 {
            out += p.apply_hp_adjoint(self.x, &p.apply_hp(self.x, d)) * self.rho;
        }
        if self.shift != 0.0 {
            out += d * self.shift;
        }
        out
    }

    /// Dense matrix of the operator, built column by column and symmetrized.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = Vector::zeros(n);
            e[k] = 1.0;
            m.set_column(k, &self.apply(&e));
        }
        0.5 * (&m + m.transpose())
    }
}

/// Builds the generalized-Hessian operator at `(x, Y, z)` for a given selection.
///
/// `sel` must come from the eigensystem of `G(x) + Y/ρ`.
pub fn gen_hessian<'a>(
    p: &'a dyn Problem,
    x: &'a Vector,
    y: &SymMatrix,
    z: &Vector,
    pen: &PenaltyParams,
    sel: &WSelection,
) -> Result<GenHessian<'a>> {
    let eval = evaluate(p, x, y, z, pen)?;
    if sel.eig.n() != p.n_sdp() {
        return Err(Error::invalid(format!(
            "selection has order {}, problem has {}",
            sel.eig.n(),
            p.n_sdp()
        )));
    }
    Ok(GenHessian::from_eval(p, x, z, &eval, sel.clone()))
}

pub fn apply_gen_hessian(
    p: &dyn Problem,
    x: &Vector,
    y: &SymMatrix,
    z: &Vector,
    pen: &PenaltyParams,
    sel: &WSelection,
    d: &Vector,
) -> Result<Vector> {
    if d.len() != p.dim_x() {
        return Err(Error::invalid(format!("direction has length {}, expected {}", d.len(), p.dim_x())));
    }
    Ok(gen_hessian(p, x, y, z, pen, sel)?.apply(d))
}

/// `⟨d, A_ρ d⟩` evaluated term by term from the eigen-data of `A = G(x̄) + Ȳ`
/// at a KKT point:
///
/// ```text
///   ⟨d, L''d⟩ + ρ Σ_{γγ} H̃² + 2ρ Σ_{βγ} H̃² + 2ρ Σ_{αγ} −λ_j/(ρλ_i − λ_j) H̃²
///             + ρ Σ_{ββ} Ω_ij ((PᵀHP)_ij)² + ρ‖h'(x̄)d‖²
/// ```
///
/// with `H = G'(x̄)d`, `H̃ = P̄ᵀHP̄` and `P = [P̄_α, P̄_β Q, P̄_γ]`. The
/// selection fixes `P̄` (its eigenvectors of `G(x̄) + Ȳ/ρ` are also
/// eigenvectors of `A`) together with `Ω` and `Q`.
pub fn quad_form_expansion(
    p: &dyn Problem,
    xbar: &Vector,
    ybar: &SymMatrix,
    zbar: &Vector,
    pen: &PenaltyParams,
    sel: &WSelection,
    d: &Vector,
) -> Result<f64> {
    let pt = KktPoint::new(xbar.clone(), ybar.clone(), zbar.clone());
    let residual = kkt_residual(p, &pt)?;
    if residual > KKT_GATE_TOL {
        return Err(Error::StalePoint { residual, tol: KKT_GATE_TOL });
    }
    if d.len() != p.dim_x() || sel.eig.n() != p.n_sdp() {
        return Err(Error::invalid("direction or selection does not match the problem"));
    }
    let rho = pen.rho();
    let a_eig = linalg::eig_sym_default(&(&p.g(xbar) + ybar))?;
    let (alpha, beta, gamma) = (&sel.eig.alpha, &sel.eig.beta, &sel.eig.gamma);
    if &a_eig.alpha != alpha || &a_eig.beta != beta || &a_eig.gamma != gamma {
        return Err(Error::StalePoint { residual, tol: KKT_GATE_TOL });
    }
    let lam = &a_eig.lambda;

    let h = p.apply_gp(xbar, d);
    let ht = h.congruence_t(&sel.eig.p);

    let curvature = d.dot(&p.apply_hess_lagrangian(xbar, ybar, zbar, d));
    let gg: f64 = gamma.iter().flat_map(|&i| gamma.iter().map(move |&j| (i, j))).map(|(i, j)| ht[(i, j)].powi(2)).sum();
    let bg: f64 = beta.iter().flat_map(|&i| gamma.iter().map(move |&j| (i, j))).map(|(i, j)| ht[(i, j)].powi(2)).sum();
    let ag: f64 = alpha
        .iter()
        .flat_map(|&i| gamma.iter().map(move |&j| (i, j)))
        .map(|(i, j)| -lam[j] / (rho * lam[i] - lam[j]) * ht[(i, j)].powi(2))
        .sum();
    let bb = if beta.is_empty() {
        0.0
    } else {
        let k = sel.q.transpose() * submatrix(&ht, beta, beta) * &sel.q;
        sel.omega.component_mul(&k.component_mul(&k)).sum()
    };
    let eq = if p.m_eq() > 0 { p.apply_hp(xbar, d).norm_squared() } else { 0.0 };

    Ok(curvature + rho * gg + 2.0 * rho * bg + 2.0 * rho * ag + rho * bb + rho * eq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eig_sym_default;
    use crate::problem::{hadamard_problem, toy_problem};

    fn v1(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    #[test]
    fn penalty_validation() {
        assert!(PenaltyParams::new(1.0, 1.0).is_err());
        assert!(PenaltyParams::new(1.0, -0.1).is_err());
        assert!(PenaltyParams::new(f64::NAN, 0.0).is_err());
        let p = PenaltyParams::new(3.0, 1.0).unwrap();
        assert_eq!(p.rho_tilde(), 2.0);
    }

    #[test]
    fn toy_values() {
        let p = toy_problem();
        let z = Vector::zeros(0);
        let pen1 = PenaltyParams::traditional(1.0).unwrap();
        assert_eq!(alm_value(&p, &v1(0.0), &SymMatrix::zeros(3), &z, &pen1).unwrap(), 0.0);
        let pen2 = PenaltyParams::traditional(2.0).unwrap();
        let ybar = SymMatrix::from_diagonal(&[0.0, -1.0, -2.0]);
        let v = alm_value(&p, &v1(0.0), &ybar, &z, &pen2).unwrap();
        assert!(v.abs() < 1e-15);
        let g = alm_grad(&p, &v1(0.0), &ybar, &z, &pen2).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn hadamard_value_at_kkt_point() {
        let p = hadamard_problem(3, 2.0).unwrap();
        let pt = p.stationary_point().unwrap();
        for rho in [0.5, 1.0, 7.0] {
            let pen = PenaltyParams::traditional(rho).unwrap();
            let v = alm_value(&p, &pt.x, &pt.y, &pt.z, &pen).unwrap();
            assert!(v.abs() < 1e-15);
            let g = alm_grad(&p, &pt.x, &pt.y, &pt.z, &pen).unwrap();
            assert!(g.norm() < 1e-15);
        }
    }

    #[test]
    fn sigma_weights_example() {
        let eig = eig_sym_default(&SymMatrix::from_diagonal(&[2.0, 0.0, -1.0])).unwrap();
        let sel = build_w_selection(&eig, OmegaMode::Zeros, QMode::Identity);
        assert!((sel.sigma[(0, 2)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(sel.sigma[(2, 2)], 1.0);
        assert_eq!(sel.sigma[(0, 0)], 0.0);
        assert_eq!(sel.sigma[(0, 1)], 0.0);
        assert_eq!(sel.sigma[(1, 2)], 1.0);
        // α×γ entries equal −λ_j/(λ_i − λ_j).
        assert!((sel.sigma[(0, 2)] - 1.0 / (2.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn w_on_definite_matrices() {
        let h = SymMatrix::from_fn(3, |i, j| (i + 2 * j) as f64 - 1.5);
        let neg = eig_sym_default(&SymMatrix::from_diagonal(&[-1.0, -2.0, -3.0])).unwrap();
        let sel = build_w_selection(&neg, OmegaMode::Zeros, QMode::Identity);
        assert!(sel.sigma.iter().all(|&s| s == 1.0));
        assert!((&apply_w(&sel, &h).unwrap() - &h).norm() < 1e-14);

        let pos = eig_sym_default(&SymMatrix::from_diagonal(&[1.0, 2.0, 3.0])).unwrap();
        let sel = build_w_selection(&pos, OmegaMode::Zeros, QMode::Identity);
        assert!(apply_w(&sel, &h).unwrap().norm() < 1e-14);
    }

    #[test]
    fn w_two_by_two_example() {
        let eig = eig_sym_default(&SymMatrix::from_diagonal(&[2.0, -1.0])).unwrap();
        let sel = build_w_selection(&eig, OmegaMode::Zeros, QMode::Identity);
        let h = SymMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let w = apply_w(&sel, &h).unwrap();
        let expect = &h * (1.0 / 3.0);
        assert!((&w - &expect).norm() < 1e-15);
    }

    #[test]
    fn random_selection_is_valid_and_deterministic() {
        let eig = eig_sym_default(&SymMatrix::from_diagonal(&[1.0, 0.0, 0.0, 0.0, -2.0])).unwrap();
        let a = build_w_selection(&eig, OmegaMode::Random(7), QMode::Random(11));
        let b = build_w_selection(&eig, OmegaMode::Random(7), QMode::Random(11));
        assert_eq!(a, b);
        assert!(a.omega.iter().all(|&w| (0.0..=1.0).contains(&w)));
        assert_eq!(a.omega, a.omega.transpose());
        let qtq = a.q.transpose() * &a.q - DMatrix::identity(3, 3);
        assert!(qtq.norm() <= 1e-12);
    }

    #[test]
    fn toy_gen_hessian_is_four() {
        let p = toy_problem();
        let pt = p.stationary_point().unwrap();
        for rho in [0.1, 1.0, 10.0, 1e4] {
            let pen = PenaltyParams::traditional(rho).unwrap();
            let eig = eig_sym_default(&(&p.g(&pt.x) + &(&pt.y * (1.0 / rho)))).unwrap();
            let sel = build_w_selection(&eig, OmegaMode::Random(3), QMode::Random(4));
            let v = apply_gen_hessian(&p, &pt.x, &pt.y, &pt.z, &pen, &sel, &v1(1.0)).unwrap();
            assert_eq!(v[0], 4.0);
            let q = quad_form_expansion(&p, &pt.x, &pt.y, &pt.z, &pen, &sel, &v1(1.0)).unwrap();
            assert_eq!(q, 4.0);
        }
    }

    #[test]
    fn expansion_rejects_non_kkt_point() {
        let p = toy_problem();
        let pen = PenaltyParams::traditional(1.0).unwrap();
        let y = SymMatrix::from_diagonal(&[0.5, -1.0, -2.0]);
        let eig = eig_sym_default(&y).unwrap();
        let sel = build_w_selection(&eig, OmegaMode::Zeros, QMode::Identity);
        let err = quad_form_expansion(&p, &v1(0.0), &y, &Vector::zeros(0), &pen, &sel, &v1(1.0));
        assert!(matches!(err, Err(Error::StalePoint { .. })));
    }

    #[test]
    fn gen_hessian_rejects_bad_direction() {
        let p = toy_problem();
        let pt = p.stationary_point().unwrap();
        let pen = PenaltyParams::traditional(1.0).unwrap();
        let sel = build_w_selection(&eig_sym_default(&pt.y).unwrap(), OmegaMode::Zeros, QMode::Identity);
        let err = apply_gen_hessian(&p, &pt.x, &pt.y, &pt.z, &pen, &sel, &Vector::zeros(2));
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
