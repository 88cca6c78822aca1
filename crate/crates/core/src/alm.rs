//! Augmented Lagrangian outer loop.
//!
//! Iteration `k` minimizes `L_{ρ_k}(·, Y^k, z^k)` approximately from `x^k`,
//! then updates
//!
//! ```text
//!   Y^{k+1} = Y^k + ρ̃_k [G(x^{k+1}) − Π_+(G(x^{k+1}) + Y^k/ρ_k)]
//!   z^{k+1} = z^k + ρ̃_k h(x^{k+1})
//! ```
//!
//! with `ρ̃_k = ρ_k − ρ̄`, and stops on the KKT residual.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auglag::{self, PenaltyParams};
use crate::error::{Error, Result};
use crate::linalg::{self, Cone, SymMatrix, Vector};
use crate::problem::{kkt_residual, KktPoint, Problem};
use crate::ssn::{self, NewtonConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoUpdate {
    Fixed,
    Geometric(f64),
}

/// Inner stopping rule, in terms of `√ρ̃·‖∇_x L_ρ‖`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `≤ ε'_k`.
    A,
    /// `≤ ε'_k·min(1, ρ̃·‖(L_ρ)'_Y‖)`.
    B,
    /// `≤ ε'_k·min(1, ρ̃·‖(L_ρ)'_Y‖)²`.
    C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlmConfig {
    pub rho0: f64,
    pub rho_bar: f64,
    pub rho_update: RhoUpdate,
    pub rho_max: f64,
    pub criterion: Criterion,
    /// `ε'_k = eps0·eps_decay^k`; a decay below one keeps the schedule summable.
    pub eps0: f64,
    pub eps_decay: f64,
    pub kkt_tol: f64,
    pub max_outer: usize,
    /// Constant `c` of the extra inner test `‖∇_x L_ρ‖ ≤ c‖(Y^{k+1}, z^{k+1}) − (Y^k, z^k)‖`.
    pub supplement_c: Option<f64>,
    /// Replace a starting multiplier outside `S^n_-` by its projection.
    pub project_initial_multiplier: bool,
    /// Record wall-clock time per outer iteration; zero otherwise.
    pub timing: bool,
}

impl Default for AlmConfig {
    fn default() -> Self {
        Self {
            rho0: 10.0,
            rho_bar: 0.0,
            rho_update: RhoUpdate::Geometric(2.0),
            rho_max: 1e8,
            criterion: Criterion::B,
            eps0: 0.01,
            eps_decay: 1.0 / 1.05,
            kkt_tol: 1e-5,
            max_outer: 200,
            supplement_c: None,
            project_initial_multiplier: false,
            timing: true,
        }
    }
}

impl AlmConfig {
    pub fn validate(&self) -> Result<()> {
        PenaltyParams::new(self.rho0, self.rho_bar)?;
        if !(self.rho_max >= self.rho0) {
            return Err(Error::invalid(format!("rho_max {} is below rho0 {}", self.rho_max, self.rho0)));
        }
        if let RhoUpdate::Geometric(f) = self.rho_update {
            if !(f.is_finite() && f >= 1.0) {
                return Err(Error::invalid(format!("geometric factor must be >= 1, got {f}")));
            }
        }
        if !(self.eps0 > 0.0 && self.eps_decay > 0.0 && self.eps_decay < 1.0) {
            return Err(Error::invalid("need eps0 > 0 and eps_decay in (0, 1)"));
        }
        if !(self.kkt_tol >= 0.0) || self.max_outer == 0 {
            return Err(Error::invalid("need kkt_tol >= 0 and max_outer >= 1"));
        }
        if let Some(c) = self.supplement_c {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("supplement constant must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// `ε'_k` for the 0-based outer index `k`.
    pub fn eps(&self, k: usize) -> f64 {
        self.eps0 * self.eps_decay.powi(k as i32)
    }
}

/// One outer iteration. Point-dependent columns refer to `(x^{k+1}, Y^{k+1}, z^{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub rho: f64,
    pub rho_tilde: f64,
    pub inner_iters: usize,
    pub cg_iters: usize,
    pub alm_value: f64,
    pub grad_norm: f64,
    pub kkt_residual: f64,
    pub dist_mult: Option<f64>,
    pub dy_norm: f64,
    pub time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlmTrace {
    pub rows: Vec<TraceRow>,
    pub initial_kkt_residual: f64,
    pub initial_dist_mult: Option<f64>,
    pub initial_multiplier_outside_cone: bool,
}

impl AlmTrace {
    /// `dist_mult` before the first iteration followed by the per-row values.
    pub fn dist_series(&self) -> Option<Vec<f64>> {
        let mut out = vec![self.initial_dist_mult?];
        for r in &self.rows {
            out.push(r.dist_mult?);
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlmStatus {
    Converged,
    MaxOuter,
}

#[derive(Debug, Clone)]
pub struct AlmOutcome {
    pub point: KktPoint,
    pub trace: AlmTrace,
    pub status: AlmStatus,
}

impl AlmOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.rows.len()
    }

    pub fn final_residual(&self) -> f64 {
        self.trace.rows.last().map_or(self.trace.initial_kkt_residual, |r| r.kkt_residual)
    }
}

/// Failure of an outer run, carrying the rows completed so far.
#[derive(Debug, thiserror::Error)]
#[error("{error} (after {} outer iterations)", trace.rows.len())]
pub struct AlmFailure {
    pub error: Error,
    pub trace: AlmTrace,
}

pub fn update_multipliers(
    p: &dyn Problem,
    x_new: &Vector,
    y: &SymMatrix,
    z: &Vector,
    pen: &PenaltyParams,
) -> Result<(SymMatrix, Vector)> {
    let eval = auglag::evaluate(p, x_new, y, z, pen)?;
    Ok(multipliers_from_eval(&eval, y, z, pen))
}

/// `(ρ̄/ρ)Y + ρ̃Π_-(G + Y/ρ)`, algebraically equal to the update above and
/// exactly in `S^n_-` when `ρ̄ = 0`.
fn multipliers_from_eval(eval: &auglag::AlmEval, y: &SymMatrix, z: &Vector, pen: &PenaltyParams) -> (SymMatrix, Vector) {
    let rt = pen.rho_tilde();
    let mut y_new = &eval.proj_minus * rt;
    if pen.rho_bar() > 0.0 {
        y_new = &y_new + &(y * (pen.rho_bar() / pen.rho()));
    }
    let z_new = z + &eval.hx * rt;
    (y_new, z_new)
}

pub fn check_inner_criterion(
    grad_x_norm: f64,
    dual_grad_norm: f64,
    pen: &PenaltyParams,
    k: usize,
    cfg: &AlmConfig,
) -> bool {
    let lhs = pen.rho_tilde().sqrt() * grad_x_norm;
    let eps = cfg.eps(k);
    let m = 1.0_f64.min(pen.rho_tilde() * dual_grad_norm);
    match cfg.criterion {
        Criterion::A => lhs <= eps,
        Criterion::B => lhs <= eps * m,
        Criterion::C => lhs <= eps * m * m,
    }
}

pub fn penalty_update(rho: f64, cfg: &AlmConfig) -> f64 {
    match cfg.rho_update {
        RhoUpdate::Fixed => rho,
        RhoUpdate::Geometric(f) => (f * rho).min(cfg.rho_max).max(rho),
    }
}

fn fail(error: Error, trace: &AlmTrace) -> AlmFailure {
    AlmFailure { error, trace: trace.clone() }
}

pub fn run_alm(
    p: &dyn Problem,
    start: &KktPoint,
    cfg: &AlmConfig,
    newton: &NewtonConfig,
) -> std::result::Result<AlmOutcome, AlmFailure> {
    run_alm_observed(p, start, cfg, newton, &mut |_, _| {})
}

/// [`run_alm`] that also hands every inner iterate, with its outer index, to `observer`.
pub fn run_alm_observed(
    p: &dyn Problem,
    start: &KktPoint,
    cfg: &AlmConfig,
    newton: &NewtonConfig,
    observer: &mut dyn FnMut(usize, &ssn::InnerState<'_>),
) -> std::result::Result<AlmOutcome, AlmFailure> {
    let mut trace = AlmTrace::default();
    cfg.validate().map_err(|e| fail(e, &trace))?;
    newton.validate().map_err(|e| fail(e, &trace))?;
    start.check_dims(p).map_err(|e| fail(e, &trace))?;

    let mut x = start.x.clone();
    let mut y = start.y.clone();
    let mut z = start.z.clone();
    let outside = linalg::dist_cone(&y, Cone::Minus).map_err(|e| fail(e, &trace))? > 0.0;
    trace.initial_multiplier_outside_cone = outside;
    if outside && cfg.project_initial_multiplier {
        y = linalg::proj_cone(&y, Cone::Minus).map_err(|e| fail(e, &trace))?;
    }

    let dist = |y: &SymMatrix, z: &Vector| p.multiplier_distance(y, z).transpose();
    let pt = KktPoint::new(x.clone(), y.clone(), z.clone());
    trace.initial_kkt_residual = kkt_residual(p, &pt).map_err(|e| fail(e, &trace))?;
    trace.initial_dist_mult = dist(&y, &z).map_err(|e| fail(e, &trace))?;
    if trace.initial_kkt_residual <= cfg.kkt_tol {
        return Ok(AlmOutcome { point: pt, trace, status: AlmStatus::Converged });
    }

    let mut rho = cfg.rho0;
    for k in 0..cfg.max_outer {
        let started = Instant::now();
        let pen = PenaltyParams::new(rho, cfg.rho_bar).map_err(|e| fail(e, &trace))?;

        let mut accept = |s: &ssn::InnerState<'_>| {
            observer(k, s);
            let g = s.eval.grad.norm();
            if !check_inner_criterion(g, s.eval.dual_gradient_norm(&y), &pen, k, cfg) {
                return false;
            }
            match cfg.supplement_c {
                None => true,
                Some(c) => {
                    let (yn, zn) = multipliers_from_eval(s.eval, &y, &z, &pen);
                    let step = ((&yn - &y).norm_sq() + (&zn - &z).norm_squared()).sqrt();
                    g <= c * step
                }
            }
        };
        let rep = ssn::solve_subproblem(p, &x, &y, &z, &pen, newton, &mut accept).map_err(|e| fail(e, &trace))?;

        let (y_new, z_new) = multipliers_from_eval(&rep.eval, &y, &z, &pen);
        let dy_norm = (&y_new - &y).norm();
        x = rep.x.clone();
        y = y_new;
        z = z_new;

        let pt = KktPoint::new(x.clone(), y.clone(), z.clone());
        let residual = kkt_residual(p, &pt).map_err(|e| fail(e, &trace))?;
        let dist_mult = dist(&y, &z).map_err(|e| fail(e, &trace))?;
        trace.rows.push(TraceRow {
            k,
            rho,
            rho_tilde: pen.rho_tilde(),
            inner_iters: rep.iterations,
            cg_iters: rep.cg_iterations,
            alm_value: rep.eval.value,
            grad_norm: rep.grad_norm(),
            kkt_residual: residual,
            dist_mult,
            dy_norm,
            time_s: if cfg.timing { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        if residual <= cfg.kkt_tol {
            return Ok(AlmOutcome { point: pt, trace, status: AlmStatus::Converged });
        }
        rho = penalty_update(rho, cfg);
    }
    Ok(AlmOutcome { point: KktPoint::new(x, y, z), trace, status: AlmStatus::MaxOuter })
}

/// Symmetric matrix with entries drawn uniformly from `[lo, hi)`.
pub fn random_symmetric(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> SymMatrix {
    SymMatrix::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// Seeded start near a reference KKT point: a uniform random primal point
/// in `[0, 1)` (packed) and multipliers `(Ȳ, z̄) + η·(P₁, p₂)` with
/// `P₁` symmetric and `p₂` uniform on `[0, 1)`.
pub fn perturbed_start(p: &dyn Problem, reference: &KktPoint, eta: f64, seed: u64) -> Result<KktPoint> {
    reference.check_dims(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xm = random_symmetric(&mut rng, p.n_sdp(), 0.0, 1.0);
    let x = if p.dim_x() == xm.pack().len() {
        xm.pack()
    } else {
        Vector::from_fn(p.dim_x(), |_, _| rng.random_range(0.0..1.0))
    };
    let y = &reference.y + &(&random_symmetric(&mut rng, p.n_sdp(), 0.0, 1.0) * eta);
    let z = &reference.z + Vector::from_fn(p.m_eq(), |_, _| eta * rng.random_range(0.0..1.0));
    Ok(KktPoint::new(x, y, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{hadamard_problem, toy_problem};

    #[test]
    fn multiplier_update_examples() {
        let p = toy_problem();
        let pen = PenaltyParams::traditional(2.0).unwrap();
        let (y, _) = update_multipliers(&p, &Vector::from_element(1, 1.0), &SymMatrix::zeros(3), &Vector::zeros(0), &pen)
            .unwrap();
        assert_eq!(y, SymMatrix::from_diagonal(&[0.0, 0.0, -2.0]));

        // Shifted point inside S_+: Y_new = Y(1 − ρ̃/ρ).
        let y0 = SymMatrix::from_diagonal(&[2.0, 1.0, 4.0]);
        let pen = PenaltyParams::new(2.0, 0.5).unwrap();
        let (y, _) = update_multipliers(&p, &Vector::from_element(1, 0.0), &y0, &Vector::zeros(0), &pen).unwrap();
        assert!((&y - &(&y0 * 0.25)).norm() < 1e-15);
    }

    #[test]
    fn criterion_examples() {
        let cfg = |c| AlmConfig { criterion: c, ..AlmConfig::default() };
        let pen = PenaltyParams::traditional(4.0).unwrap();
        for c in [Criterion::A, Criterion::B, Criterion::C] {
            assert!(check_inner_criterion(0.0, 0.0, &pen, 3, &cfg(c)));
        }
        assert!(!check_inner_criterion(1e-300, 0.0, &pen, 0, &cfg(Criterion::B)));
        // √ρ̃·g = 0.009 with ρ̃·dual = 2.
        let g = 0.009 / 2.0;
        for c in [Criterion::A, Criterion::B, Criterion::C] {
            assert!(check_inner_criterion(g, 0.5, &pen, 0, &cfg(c)));
        }
        // min term 0.5: a holds, b fails at 0.009 > 0.005.
        assert!(check_inner_criterion(g, 0.125, &pen, 0, &cfg(Criterion::A)));
        assert!(!check_inner_criterion(g, 0.125, &pen, 0, &cfg(Criterion::B)));
    }

    #[test]
    fn penalty_examples() {
        let fixed = AlmConfig { rho_update: RhoUpdate::Fixed, ..AlmConfig::default() };
        assert_eq!(penalty_update(10.0, &fixed), 10.0);
        let geo = AlmConfig { rho_update: RhoUpdate::Geometric(1.25), rho_max: 1e8, ..AlmConfig::default() };
        assert_eq!(penalty_update(10.0, &geo), 12.5);
        let geo2 = AlmConfig { rho_update: RhoUpdate::Geometric(2.0), ..geo };
        assert_eq!(penalty_update(1e8, &geo2), 1e8);
    }

    #[test]
    fn eps_schedule() {
        let cfg = AlmConfig::default();
        assert_eq!(cfg.eps(0), 0.01);
        assert!((cfg.eps(2) - 0.01 / (1.05 * 1.05)).abs() < 1e-17);
    }

    #[test]
    fn config_validation() {
        assert!(AlmConfig { rho0: 1.0, rho_bar: 1.0, ..AlmConfig::default() }.validate().is_err());
        assert!(AlmConfig { rho_max: 1.0, ..AlmConfig::default() }.validate().is_err());
        assert!(AlmConfig { rho_update: RhoUpdate::Geometric(0.5), ..AlmConfig::default() }.validate().is_err());
        assert!(AlmConfig::default().validate().is_ok());
    }

    #[test]
    fn start_at_kkt_point_stops_immediately() {
        let p = hadamard_problem(3, 2.0).unwrap();
        let pt = p.stationary_point().unwrap();
        let out = run_alm(&p, &pt, &AlmConfig::default(), &NewtonConfig::default()).unwrap();
        assert_eq!(out.iterations(), 0);
        assert_eq!(out.status, AlmStatus::Converged);
        assert_eq!(out.final_residual(), 0.0);
    }

    #[test]
    fn traditional_multipliers_stay_in_cone() {
        let p = toy_problem();
        let base = p.stationary_point().unwrap();
        let start = KktPoint::new(
            Vector::from_element(1, 0.3),
            &base.y + &SymMatrix::from_fn(3, |i, j| 0.05 * (1 + i + j) as f64),
            Vector::zeros(0),
        );
        let cfg = AlmConfig { kkt_tol: 1e-9, timing: false, ..AlmConfig::default() };
        let out = run_alm(&p, &start, &cfg, &NewtonConfig::default()).unwrap();
        assert!(out.trace.initial_multiplier_outside_cone);
        assert_eq!(out.status, AlmStatus::Converged);
        for (k, row) in out.trace.rows.iter().enumerate() {
            assert_eq!(row.k, k);
            assert!(row.dist_mult.unwrap() <= 1e-10);
        }
    }

    #[test]
    fn perturbed_start_is_seeded() {
        let p = hadamard_problem(4, 3.0).unwrap();
        let reference = p.stationary_point().unwrap();
        let a = perturbed_start(&p, &reference, 0.1, 42).unwrap();
        let b = perturbed_start(&p, &reference, 0.1, 42).unwrap();
        let c = perturbed_start(&p, &reference, 0.1, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((&a.y - &reference.y).norm() <= 0.1 * 4.0);
    }
}
