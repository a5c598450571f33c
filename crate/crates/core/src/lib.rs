//! Boundary expansions and numerics for constant-mean-curvature graphs over
//! the hyperbolic half-space.
//!
//! The crate has three layers:
//!
//! - **Symbolic-numeric kernel**: truncated tangential Taylor expansions
//!   ([`jet::Jet`]), finite `t`/`log t` series with jet coefficients
//!   ([`series::LogSeries`]), a small expression language ([`expr`]), and the
//!   graph mean-curvature operator acting on these ([`operator`]).
//! - **Expansion engine** ([`expansion`]): computes the boundary expansion of
//!   a solution order by order, including the log term that appears at order
//!   `n + 1`, in floating point or exact rational arithmetic.
//! - **Numerics**: a damped Newton finite-difference solver ([`solver`]) on
//!   tensor grids ([`grid`]), reference solutions ([`exact`]), and decay-rate
//!   analysis of remainders ([`analyzer`]).

pub mod analyzer;
pub mod coeff;
pub mod error;
pub mod exact;
pub mod expansion;
pub mod expr;
pub mod grid;
pub mod io;
pub mod jet;
pub mod linalg;
pub mod operator;
pub mod series;
pub mod solver;
pub mod verify;

pub use analyzer::{fit_exponent, DecayLevel, DecayReport, ExponentFit, FitWindow};
pub use coeff::Coeff;
pub use error::{CmcError, Result};
pub use exact::ExactSolution;
pub use expansion::{solve_global, solve_local, CoeffSource, ExpansionTable};
pub use expr::{eval_real, parse_expr, Expr};
pub use grid::{Axis, BoundarySpec, GridField};
pub use jet::Jet;
pub use operator::ProblemData;
pub use series::LogSeries;
