//! Numerical toolkit for singular, possibly degenerate SDEs
//!
//! ```text
//! dX_t = sigma_hat(X_t) dW_t + G(X_t) dt,   G = beta(rho, A, psi) + B
//! ```
//!
//! whose law keeps the measure `mu_hat = psi * rho dx` (sub-)invariant. The crate
//! assembles the coefficients from `(rho, psi, A, B)`, checks the structural
//! assumptions numerically, reproduces the nested-domain resolvent construction
//! on grids and tests the resulting process by Monte Carlo.
//!
//! Modules, bottom-up:
//!
//! * [`field`]: scalar/vector/matrix fields with analytic or finite-difference derivatives
//! * [`coefficients`]: the validated coefficient bundle and everything derived from it
//! * [`quadrature`]: tensor Gauss-Legendre with dyadic refinement at singular points
//! * [`validators`]: integral identities and growth/Lyapunov criteria
//! * [`resolvent`]: monotone grid discretization, resolvent solves and structural checks
//! * [`simulator`]: tamed Euler-Maruyama ensembles and statistical tests
//! * [`scenarios`]: built-in scenarios and config loading

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::needless_range_loop)]

pub mod coefficients;
pub mod error;
pub mod field;
pub mod linalg;
pub(crate) mod par;
pub mod qmc;
pub mod quadrature;
pub mod report;
pub mod resolvent;
pub mod rng;
pub mod scenarios;
pub mod simulator;
pub mod validators;

pub use coefficients::{CoefficientSet, Direction, MeasureDensity, MeasureMode};
pub use error::{Error, Result};
pub use field::{MatrixField, ScalarField, SingularSet, VectorField};
pub use report::{ReportEntry, Status, ValidationReport};
pub use scenarios::{load_scenario, Scenario};
