//! Nonconvex nonlinear semidefinite programming toolkit.
//!
//! Solves problems of the form
//!
//! ```text
//!     min f(x)   s.t.   G(x) ∈ S^n_+,   h(x) = 0
//! ```
//!
//! with an (extended) augmented Lagrangian outer loop whose subproblems are
//! handled by a semismooth Newton-CG method, and certifies the strong
//! second-order sufficient condition at a KKT point through two independent
//! routes: the reduced strong-SOSC form over the affine hull of the critical
//! cone, and positive definiteness of the generalized Hessian bundle of the
//! augmented Lagrangian.
//!
//! Matrix-valued variables are handled through the packed (`svec`) form of
//! [`SymMatrix`], whose Euclidean inner product equals the Frobenius inner
//! product, so every problem exposes a plain vector variable.

pub mod alm;
pub mod auglag;
pub mod certify;
pub mod cli;
mod error;
pub mod linalg;
pub mod problem;
pub mod ssn;

pub use error::{Error, Result};
pub use linalg::{EigenSystem, SymMatrix, Vector};
pub use problem::{KktPoint, Problem};
