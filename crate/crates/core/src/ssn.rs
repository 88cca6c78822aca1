//! Semismooth Newton-CG for the augmented Lagrangian subproblem
//! `min_x L_ρ(x, Y, z)` with `(Y, z)` fixed.
//!
//! Each step solves `(V_j + ε_j I) d = −g_j` inexactly by CG, where `V_j` is
//! a generalized Hessian, `ε_j = τ₁·min(τ₂, ‖g_j‖)` and the CG residual target
//! is `min(ν̄, ‖g_j‖^{1+τ})`, then backtracks along `d` with an Armijo rule.

use serde::{Deserialize, Serialize};

use crate::auglag::{self, AlmEval, GenHessian, OmegaMode, PenaltyParams, QMode};
use crate::error::{Error, Result};
use crate::linalg::{SymMatrix, Vector};
use crate::problem::Problem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    /// Armijo constant.
    pub mu: f64,
    /// Exponent in the CG residual target.
    pub tau: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub nu_bar: f64,
    /// Backtracking factor.
    pub theta: f64,
    /// CG iteration cap; `None` means `min(100, dim_x)`.
    pub max_cg_iters: Option<usize>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub max_backtracks: usize,
    pub omega: OmegaMode,
    pub q: QMode,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            mu: 1e-4,
            tau: 0.5,
            tau1: 1e-4,
            tau2: 1e-2,
            nu_bar: 0.5,
            theta: 0.5,
            max_cg_iters: None,
            max_iters: 50,
            grad_tol: 1e-12,
            max_backtracks: 60,
            omega: OmegaMode::Zeros,
            q: QMode::Identity,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        let open01 = |v: f64| v > 0.0 && v < 1.0;
        if !(self.mu > 0.0 && self.mu < 0.5) {
            return Err(Error::invalid(format!("mu must lie in (0, 1/2), got {}", self.mu)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(open01(self.tau1) && open01(self.tau2) && open01(self.nu_bar) && open01(self.theta)) {
            return Err(Error::invalid("tau1, tau2, nu_bar and theta must lie in (0, 1)"));
        }
        if !(self.grad_tol >= 0.0) || self.max_cg_iters == Some(0) {
            return Err(Error::invalid("grad_tol must be nonnegative and the CG cap positive"));
        }
        Ok(())
    }

    fn cg_cap(&self, dim: usize) -> usize {
        self.max_cg_iters.unwrap_or_else(|| dim.min(100)).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewtonStatus {
    /// `‖g‖ ≤ grad_tol`.
    Converged,
    /// The caller's stopping test accepted the iterate.
    Accepted,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub x: Vector,
    pub eval: AlmEval,
    pub iterations: usize,
    pub cg_iterations: usize,
    pub negative_curvature_steps: usize,
    pub status: NewtonStatus,
}

impl NewtonReport {
    pub fn grad_norm(&self) -> f64 {
        self.eval.grad.norm()
    }

    /// True unless the iteration cap was hit.
    pub fn converged(&self) -> bool {
        self.status != NewtonStatus::MaxIterations
    }
}

/// State handed to the stopping callback before each Newton step.
pub struct InnerState<'a> {
    pub iteration: usize,
    pub x: &'a Vector,
    pub eval: &'a AlmEval,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vector,
    pub iterations: usize,
    pub residual_norm: f64,
    pub negative_curvature: bool,
}

/// Conjugate gradients for `A x = b` from `x = 0`, stopping when
/// `‖b − A x‖ ≤ tol` or after `max_iter` steps.
///
/// On a direction of nonpositive curvature the current iterate is returned
/// (or `b` itself if no step has been taken) with `negative_curvature` set.
pub fn cg_solve(apply: impl Fn(&Vector) -> Vector, b: &Vector, tol: f64, max_iter: usize) -> CgOutcome {
    let mut x = Vector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let mut iterations = 0;
    while rr.sqrt() > tol && iterations < max_iter {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !(pap > f64::EPSILON * p.norm_squared()) {
            let x = if iterations == 0 { b.clone() } else { x };
            return CgOutcome { x, iterations, residual_norm: rr.sqrt(), negative_curvature: true };
        }
        let step = rr / pap;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rr_new = r.norm_squared();
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
        iterations += 1;
    }
    CgOutcome { x, iterations, residual_norm: rr.sqrt(), negative_curvature: false }
}

/// Minimizes `L_ρ(·, Y, z)` from `x0`.
///
/// `stop` is consulted at every iterate, including `x0`; returning `true`
/// ends the solve with [`NewtonStatus::Accepted`].
pub fn solve_subproblem(
    p: &dyn Problem,
    x0: &Vector,
    y: &SymMatrix,
    z: &Vector,
    pen: &PenaltyParams,
    cfg: &NewtonConfig,
    stop: &mut dyn FnMut(&InnerState<'_>) -> bool,
) -> Result<NewtonReport> {
    cfg.validate()?;
    let mut x = x0.clone();
    let mut eval = auglag::evaluate(p, &x, y, z, pen)?;
    let cg_cap = cfg.cg_cap(p.dim_x());
    let mut cg_total = 0;
    let mut neg_curv = 0;

    for j in 0.. {
        let status = if stop(&InnerState { iteration: j, x: &x, eval: &eval }) {
            Some(NewtonStatus::Accepted)
        } else if eval.grad.norm() <= cfg.grad_tol {
            Some(NewtonStatus::Converged)
        } else if j >= cfg.max_iters {
            Some(NewtonStatus::MaxIterations)
        } else {
            None
        };
        if let Some(status) = status {
            return Ok(NewtonReport {
                x,
                eval,
                iterations: j,
                cg_iterations: cg_total,
                negative_curvature_steps: neg_curv,
                status,
            });
        }

        let g = eval.grad.clone();
        let gnorm = g.norm();
        let shift = cfg.tau1 * cfg.tau2.min(gnorm);
        let cg_tol = cfg.nu_bar.min(gnorm.powf(1.0 + cfg.tau));
        let sel = auglag::build_w_selection(&eval.shifted_eig, cfg.omega, cfg.q);
        let cg = {
            let op = GenHessian::from_eval(p, &x, z, &eval, sel).with_shift(shift);
            cg_solve(|v| op.apply(v), &(-&g), cg_tol, cg_cap)
        };
        cg_total += cg.iterations;
        if cg.negative_curvature {
            neg_curv += 1;
        }
        let mut d = cg.x;
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            d = -&g;
            slope = -gnorm * gnorm;
        }

        let (x_new, eval_new) = line_search(p, &x, y, z, pen, cfg, &eval, &d, slope)?;
        x = x_new;
        eval = eval_new;
    }
    unreachable!("the loop only exits by returning")
}

#[allow(clippy::too_many_arguments)]
fn line_search(
    p: &dyn Problem,
    x: &Vector,
    y: &SymMatrix,
    z: &Vector,
    pen: &PenaltyParams,
    cfg: &NewtonConfig,
    eval: &AlmEval,
    d: &Vector,
    slope: f64,
) -> Result<(Vector, AlmEval)> {
    // Roundoff allowance so a step cannot be rejected on noise alone.
    let slack = 4.0 * f64::EPSILON * (1.0 + eval.value.abs());
    let mut t = 1.0;
    for _ in 0..=cfg.max_backtracks {
        let trial = x + d * t;
        if let Ok(e) = auglag::evaluate(p, &trial, y, z, pen) {
            if e.value <= eval.value + cfg.mu * t * slope + slack {
                return Ok((trial, e));
            }
        }
        t *= cfg.theta;
    }
    Err(Error::LineSearchFailure { backtracks: cfg.max_backtracks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{toy_problem, QuadraticLinearSdp};
    use nalgebra::DMatrix;

    #[test]
    fn cg_scaled_identity() {
        let b = Vector::from_vec(vec![1.0, -2.0, 4.0]);
        let out = cg_solve(|v| v * 2.0, &b, 1e-14, 10);
        assert_eq!(out.iterations, 1);
        assert!((&out.x - &b * 0.5).norm() < 1e-15);
    }

    #[test]
    fn cg_diagonal_finishes_in_n_steps() {
        let diag = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = Vector::from_element(5, 1.0);
        let out = cg_solve(|v| v.component_mul(&diag), &b, 1e-12, 50);
        assert!(out.iterations <= 5);
        let expect = b.component_div(&diag);
        assert!((&out.x - &expect).norm() < 1e-10);
    }

    #[test]
    fn cg_matches_dense_solve() {
        let n = 20;
        let m = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        let a = &m * m.transpose() + DMatrix::identity(n, n);
        let b = Vector::from_fn(n, |i, _| (i as f64).sin());
        let out = cg_solve(|v| &a * v, &b, 1e-12, 200);
        let exact = a.clone().cholesky().unwrap().solve(&b);
        assert!(!out.negative_curvature);
        assert!((&out.x - &exact).norm() <= 1e-9 * exact.norm());
    }

    #[test]
    fn cg_flags_negative_curvature() {
        let b = Vector::from_vec(vec![1.0, 1.0]);
        let out = cg_solve(|v| Vector::from_vec(vec![v[0], -3.0 * v[1]]), &b, 1e-12, 10);
        assert!(out.negative_curvature);
        assert_eq!(out.x, b);
    }

    fn root_by_bisection(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(f(lo) * f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn toy_subproblem_matches_scalar_oracle() {
        // With Y₃₃ = 1/2 and ρ = 1 the subproblem is
        // x³/2 + ½·min(0, ½ − x²)² − const, with a local minimizer below −√½.
        let p = toy_problem();
        let y = SymMatrix::from_diagonal(&[0.0, -1.0, 0.5]);
        let pen = PenaltyParams::traditional(1.0).unwrap();
        let deriv = |x: f64| 1.5 * x * x + 2.0 * x * (x * x - 0.5);
        let oracle = root_by_bisection(deriv, -2.0, -0.8);
        let x0 = Vector::from_element(1, -1.0);
        let rep = solve_subproblem(&p, &x0, &y, &Vector::zeros(0), &pen, &NewtonConfig::default(), &mut |_| false)
            .unwrap();
        assert_eq!(rep.status, NewtonStatus::Converged);
        assert!((rep.x[0] - oracle).abs() < 1e-10, "{} vs {}", rep.x[0], oracle);
    }

    #[test]
    fn stationary_start_takes_no_steps() {
        let p = toy_problem();
        let pt = p.stationary_point().unwrap();
        let pen = PenaltyParams::traditional(2.0).unwrap();
        let rep = solve_subproblem(&p, &pt.x, &pt.y, &pt.z, &pen, &NewtonConfig::default(), &mut |_| false).unwrap();
        assert_eq!(rep.iterations, 0);
        assert!(rep.converged());

        let far = Vector::from_element(1, 3.0);
        let rep = solve_subproblem(&p, &far, &pt.y, &pt.z, &pen, &NewtonConfig::default(), &mut |_| true).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.status, NewtonStatus::Accepted);
    }

    #[test]
    fn values_decrease_monotonically() {
        let a = vec![
            SymMatrix::from_diagonal(&[1.0, 0.0, 0.0]),
            SymMatrix::from_fn(3, |i, j| if i + j == 2 { 1.0 } else { 0.0 }),
            SymMatrix::identity(3),
        ];
        let h = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.5]);
        let prob = QuadraticLinearSdp::new(h, Vector::from_vec(vec![1.0, -1.0, 0.5]), SymMatrix::identity(3), a)
            .unwrap();
        let y = SymMatrix::from_diagonal(&[-1.0, 0.5, -0.2]);
        let pen = PenaltyParams::traditional(5.0).unwrap();
        let mut values = Vec::new();
        let x0 = Vector::from_vec(vec![3.0, -2.0, 1.0]);
        let rep = solve_subproblem(&prob, &x0, &y, &Vector::zeros(0), &pen, &NewtonConfig::default(), &mut |s| {
            values.push(s.eval.value);
            false
        })
        .unwrap();
        assert!(rep.grad_norm() <= 1e-10);
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn repeated_solves_are_bit_identical() {
        let p = toy_problem();
        let y = SymMatrix::from_diagonal(&[0.0, -1.0, 0.5]);
        let pen = PenaltyParams::new(3.0, 1.0).unwrap();
        let x0 = Vector::from_element(1, -0.9);
        let cfg = NewtonConfig::default();
        let a = solve_subproblem(&p, &x0, &y, &Vector::zeros(0), &pen, &cfg, &mut |_| false).unwrap();
        let b = solve_subproblem(&p, &x0, &y, &Vector::zeros(0), &pen, &cfg, &mut |_| false).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn config_validation() {
        let bad = NewtonConfig { theta: 1.0, ..NewtonConfig::default() };
        assert!(bad.validate().is_err());
        let bad = NewtonConfig { mu: 0.6, ..NewtonConfig::default() };
        assert!(bad.validate().is_err());
        assert!(NewtonConfig::default().validate().is_ok());
    }
}
