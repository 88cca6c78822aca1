//! Second-order certificates at a KKT point `(x̄, Ȳ, z̄)`.
//!
//! Two routes:
//! - the strong second-order sufficient condition, as positivity of
//!   `⟨d, L''d⟩ − Υ(G'(x̄)d)` over the subspace of directions with
//!   `G'(x̄)d` in the affine hull of the critical cone and `h'(x̄)d = 0`;
//! - positive definiteness of the generalized Hessian `A_ρ` of the augmented
//!   Lagrangian (with the `Ω = 0` selection) for all large `ρ`.
//!
//! `Υ(H) = 2⟨Ȳ, H·G(x̄)†·H⟩ ≤ 0` is the curvature term of the PSD cone.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::auglag::{self, OmegaMode, PenaltyParams, QMode, KKT_GATE_TOL};
use crate::error::{Error, Result};
use crate::linalg::{self, EigenSystem, SymMatrix, Vector};
use crate::problem::{kkt_residual, KktPoint, Problem};

/// Relative singular-value cutoff for null-space extraction.
pub const NULL_SPACE_CUTOFF: f64 = 1e-10;

const COMPLEMENTARITY_TOL: f64 = 1e-8;

fn check_complementary(gbar: &SymMatrix, ybar: &SymMatrix) -> Result<()> {
    if gbar.n() != ybar.n() {
        return Err(Error::invalid("G and Y have different orders"));
    }
    let prod = gbar.as_matrix() * ybar.as_matrix();
    let gmin = linalg::min_eigenvalue(gbar.as_matrix())?;
    let ymax = -linalg::min_eigenvalue(&(-ybar.as_matrix()))?;
    if prod.norm() > COMPLEMENTARITY_TOL || gmin < -COMPLEMENTARITY_TOL || ymax > COMPLEMENTARITY_TOL {
        return Err(Error::invalid(format!(
            "not a complementary pair: |GY| = {:.3e}, min eig G = {gmin:.3e}, max eig Y = {ymax:.3e}",
            prod.norm()
        )));
    }
    Ok(())
}

fn check_order(h: &SymMatrix, n: usize) -> Result<()> {
    if h.n() != n {
        return Err(Error::invalid(format!("direction has order {}, expected {n}", h.n())));
    }
    Ok(())
}

/// `Σ_{i∈α, j∈γ} w(λ_i, λ_j)·H̃_ij²` over the eigenbasis of `A`.
fn alpha_gamma_sum(eig: &EigenSystem, h: &SymMatrix, w: impl Fn(f64, f64) -> f64) -> f64 {
    let ht = h.congruence_t(&eig.p);
    let mut s = 0.0;
    for &i in &eig.alpha {
        for &j in &eig.gamma {
            s += w(eig.lambda[i], eig.lambda[j]) * ht[(i, j)].powi(2);
        }
    }
    s
}

/// `2·Σ_{i∈α, j∈γ} (λ_j/λ_i)·H̃_ij²` with the eigen-data of `Ḡ + Ȳ`.
pub fn sigma_term(gbar: &SymMatrix, ybar: &SymMatrix, h: &SymMatrix) -> Result<f64> {
    check_complementary(gbar, ybar)?;
    check_order(h, gbar.n())?;
    let eig = linalg::eig_sym_default(&(gbar + ybar))?;
    Ok(2.0 * alpha_gamma_sum(&eig, h, |li, lj| lj / li))
}

/// `2⟨Ȳ, H·Ḡ†·H⟩`.
pub fn sigma_term_definitional(gbar: &SymMatrix, ybar: &SymMatrix, h: &SymMatrix) -> Result<f64> {
    check_complementary(gbar, ybar)?;
    check_order(h, gbar.n())?;
    let pinv = linalg::pinv_sym(gbar)?;
    let hm = h.as_matrix();
    let inner = hm * pinv.as_matrix() * hm;
    Ok(2.0 * ybar.as_matrix().component_mul(&inner).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalConeClass {
    InCone,
    /// In the affine hull but with an indefinite `β` block.
    InAffineHull,
    Outside,
}

/// Classifies `H` against the critical cone described by the eigensystem of
/// `A = Ḡ + Ȳ`: `P_βᵀHP_γ = 0`, `P_γᵀHP_γ = 0`, and `P_βᵀHP_β ⪰ 0` for
/// membership in the cone itself.
pub fn critical_cone_membership(eig: &EigenSystem, h: &SymMatrix, tol: f64) -> CriticalConeClass {
    let ht = h.congruence_t(&eig.p);
    let (beta, gamma) = (&eig.beta, &eig.gamma);
    let off = beta.iter().flat_map(|&i| gamma.iter().map(move |&j| (i, j)));
    let gg = gamma.iter().flat_map(|&i| gamma.iter().map(move |&j| (i, j)));
    if off.chain(gg).any(|(i, j)| ht[(i, j)].abs() > tol) {
        return CriticalConeClass::Outside;
    }
    if beta.is_empty() {
        return CriticalConeClass::InCone;
    }
    let bb = DMatrix::from_fn(beta.len(), beta.len(), |a, b| ht[(beta[a], beta[b])]);
    match linalg::min_eigenvalue(&bb) {
        Ok(l) if l >= -tol => CriticalConeClass::InCone,
        _ => CriticalConeClass::InAffineHull,
    }
}

/// `Σ_{i∈α, j∈γ} (−λ_j/λ_i)·H̃_ij²` on the affine hull of the critical cone,
/// `+∞` off it. Equals `−½·sigma_term` on the hull.
pub fn quad_bundle_element(gbar: &SymMatrix, ybar: &SymMatrix, h: &SymMatrix) -> Result<f64> {
    check_complementary(gbar, ybar)?;
    check_order(h, gbar.n())?;
    let eig = linalg::eig_sym_default(&(gbar + ybar))?;
    let tol = 1e-9 * (1.0 + h.norm());
    if critical_cone_membership(&eig, h, tol) == CriticalConeClass::Outside {
        return Ok(f64::INFINITY);
    }
    Ok(alpha_gamma_sum(&eig, h, |li, lj| -lj / li))
}

/// Subspace of directions on which the reduced second-order form lives.
#[derive(Debug, Clone)]
pub struct ConeGeometry {
    /// Eigensystem of `A = G(x̄) + Ȳ`.
    pub eig: EigenSystem,
    /// Orthonormal basis (columns, packed coordinates) of
    /// `{d : G'(x̄)d ∈ aff C, h'(x̄)d = 0}`.
    pub basis: DMatrix<f64>,
    /// Dimension of `{d : G'(x̄)d = 0, h'(x̄)d = 0}` inside the subspace.
    pub kernel_dim: usize,
}

/// Orthonormal basis of the null space of `c` (rows are constraints).
fn null_space(c: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    if c.nrows() == 0 || c.iter().all(|&v| v == 0.0) {
        return DMatrix::identity(dim, dim);
    }
    // Pad to at least `dim` rows so the SVD returns a full right basis.
    let rows = c.nrows().max(dim);
    let mut padded = DMatrix::zeros(rows, dim);
    padded.view_mut((0, 0), (c.nrows(), dim)).copy_from(c);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..dim).filter(|&k| svd.singular_values[k] <= NULL_SPACE_CUTOFF * smax).collect();
    DMatrix::from_fn(dim, keep.len(), |r, c| vt[(keep[c], r)])
}

fn unit(n: usize, k: usize) -> Vector {
    let mut e = Vector::zeros(n);
    e[k] = 1.0;
    e
}

fn gate(p: &dyn Problem, pt: &KktPoint) -> Result<()> {
    let residual = kkt_residual(p, pt)?;
    if residual > KKT_GATE_TOL {
        return Err(Error::StalePoint { residual, tol: KKT_GATE_TOL });
    }
    Ok(())
}

pub fn cone_geometry(p: &dyn Problem, pt: &KktPoint) -> Result<ConeGeometry> {
    pt.check_dims(p)?;
    let x = &pt.x;
    let dim = p.dim_x();
    let eig = linalg::eig_sym_default(&(&p.g(x) + &pt.y))?;
    let (beta, gamma) = (&eig.beta, &eig.gamma);

    let mut pairs: Vec<(usize, usize)> = beta.iter().flat_map(|&i| gamma.iter().map(move |&j| (i, j))).collect();
    for (a, &i) in gamma.iter().enumerate() {
        pairs.extend(gamma[a..].iter().map(|&j| (i, j)));
    }
    let m = p.m_eq();
    let mut c = DMatrix::zeros(pairs.len() + m, dim);
    let mut gp = DMatrix::zeros(linalg::packed_len(p.n_sdp()), dim);
    for k in 0..dim {
        let e = unit(dim, k);
        let h = p.apply_gp(x, &e);
        gp.set_column(k, &h.pack());
        let ht = h.congruence_t(&eig.p);
        for (r, &(i, j)) in pairs.iter().enumerate() {
            c[(r, k)] = ht[(i, j)];
        }
        if m > 0 {
            let hd = p.apply_hp(x, &e);
            for r in 0..m {
                c[(pairs.len() + r, k)] = hd[r];
            }
        }
    }
    let basis = null_space(&c, dim);

    // Directions of the subspace that G' annihilates.
    let kernel_dim = if basis.ncols() == 0 {
        0
    } else {
        let image = &gp * &basis;
        let kb = basis.ncols();
        let rank = if image.iter().all(|&v| v == 0.0) {
            0
        } else {
            let sv = image.singular_values();
            let smax = sv.max();
            sv.iter().filter(|&&s| s > NULL_SPACE_CUTOFF * smax).count()
        };
        kb - rank
    };
    Ok(ConeGeometry { eig, basis, kernel_dim })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoscResult {
    /// `+∞` when the subspace is trivial.
    pub min_eig: f64,
    pub holds: bool,
    pub subspace_dim: usize,
}

/// Minimum eigenvalue of `⟨b_i, L''b_j⟩ − Υ(G'b_i, G'b_j)` over an
/// orthonormal basis of the critical subspace.
pub fn strong_sosc_check(p: &dyn Problem, pt: &KktPoint, tol: f64) -> Result<SoscResult> {
    gate(p, pt)?;
    let geo = cone_geometry(p, pt)?;
    let k = geo.basis.ncols();
    if k == 0 {
        return Ok(SoscResult { min_eig: f64::INFINITY, holds: true, subspace_dim: 0 });
    }
    let x = &pt.x;
    let cols: Vec<Vector> = (0..k).map(|j| geo.basis.column(j).clone_owned()).collect();
    let hcols: Vec<Vector> = cols.iter().map(|b| p.apply_hess_lagrangian(x, &pt.y, &pt.z, b)).collect();
    let ups = |d: &Vector| -> f64 {
        let h = p.apply_gp(x, d);
        2.0 * alpha_gamma_sum(&geo.eig, &h, |li, lj| lj / li)
    };
    let diag: Vec<f64> = cols.iter().map(&ups).collect();
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let curv = 0.5 * (cols[i].dot(&hcols[j]) + cols[j].dot(&hcols[i]));
            let cross = if i == j { diag[i] } else { 0.5 * (ups(&(&cols[i] + &cols[j])) - diag[i] - diag[j]) };
            m[(i, j)] = curv - cross;
            m[(j, i)] = m[(i, j)];
        }
    }
    let min_eig = linalg::min_eigenvalue(&m)?;
    Ok(SoscResult { min_eig, holds: min_eig > tol, subspace_dim: k })
}

/// Dense `A_ρ(Ȳ, W)` at a KKT point for the given selection modes.
pub fn bundle_matrix(p: &dyn Problem, pt: &KktPoint, rho: f64, omega: OmegaMode, q: QMode) -> Result<DMatrix<f64>> {
    let pen = PenaltyParams::traditional(rho)?;
    let eig = linalg::eig_sym_default(&(&p.g(&pt.x) + &(&pt.y * (1.0 / rho))))?;
    let sel = auglag::build_w_selection(&eig, omega, q);
    Ok(auglag::gen_hessian(p, &pt.x, &pt.y, &pt.z, &pen, &sel)?.to_dense())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Positive,
    Negative,
    /// The two routes disagree.
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub rho: f64,
    pub lambda_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub problem: String,
    pub kkt_residual: f64,
    /// `null` in JSON when the subspace is trivial.
    pub sosc_min_eig: f64,
    pub sosc_holds: bool,
    pub subspace_dim: usize,
    pub kernel_dim: usize,
    pub bundle_min_eigs: Vec<BundleEntry>,
    pub eta_estimate: f64,
    pub bundle_positive: bool,
    pub verdict: Verdict,
}

/// Positive once `λ_min ≥ eta_tol` holds from some grid point to the end.
fn bundle_positive(entries: &[BundleEntry], eta_tol: f64) -> bool {
    match entries.iter().position(|e| e.lambda_min >= eta_tol) {
        Some(first) => entries[first..].iter().all(|e| e.lambda_min >= eta_tol),
        None => false,
    }
}

pub fn hessian_bundle_check(p: &dyn Problem, pt: &KktPoint, rho_grid: &[f64], eta_tol: f64) -> Result<CertificateReport> {
    if rho_grid.is_empty() || rho_grid.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::invalid("rho grid must be nonempty with finite positive entries"));
    }
    if rho_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("rho grid must be strictly increasing"));
    }
    let sosc = strong_sosc_check(p, pt, eta_tol)?;
    let geo = cone_geometry(p, pt)?;
    let mut entries = Vec::with_capacity(rho_grid.len());
    for &rho in rho_grid {
        let a = bundle_matrix(p, pt, rho, OmegaMode::Zeros, QMode::Identity)?;
        entries.push(BundleEntry { rho, lambda_min: linalg::min_eigenvalue(&a)? });
    }
    let eta_estimate = entries.iter().map(|e| e.lambda_min).fold(f64::INFINITY, f64::min);
    let positive = bundle_positive(&entries, eta_tol);
    let verdict = match (sosc.holds, positive) {
        (true, true) => Verdict::Positive,
        (false, false) => Verdict::Negative,
        _ => Verdict::Inconsistent,
    };
    Ok(CertificateReport {
        problem: p.name(),
        kkt_residual: kkt_residual(p, pt)?,
        sosc_min_eig: sosc.min_eig,
        sosc_holds: sosc.holds,
        subspace_dim: sosc.subspace_dim,
        kernel_dim: geo.kernel_dim,
        bundle_min_eigs: entries,
        eta_estimate,
        bundle_positive: positive,
        verdict,
    })
}
