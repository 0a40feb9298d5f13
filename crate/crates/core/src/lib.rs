//! Soft-constrained MPC for tracking, solved by ADMM.
//!
//! The z-update of every iteration is an equality-constrained QP whose KKT
//! matrices are semi-banded (block diagonal or banded, plus a low-rank term),
//! so it is solved with structured Cholesky factors and small Woodbury
//! corrections computed once offline. Soft constraints enter only through a
//! closed-form proximal step in the v-update, which leaves that structure
//! untouched.
//!
//! Modules:
//!
//! - [`linalg`]: block-diagonal and banded Cholesky, semi-banded solves.
//! - [`problem`]: problem data, bound stacking, ADMM ingredients.
//! - [`precompute`]: offline factorizations.
//! - [`admm`]: the iteration itself.
//! - [`oracle`]: slow dense reference solvers for testing.
//! - [`sim`]: plant models, closed-loop rollouts, batch statistics.
//! - [`config`]: the JSON problem file format.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod config;
pub mod error;
pub mod linalg;
pub mod oracle;
pub mod precompute;
pub mod problem;
pub mod sim;

pub use admm::{solve, MpctSolver, SolveReport, SolveStatus, SolverState, WarmStart};
pub use error::{Error, Result};
pub use problem::{
    validate, BoundMode, BoxBounds, Diagnostic, PlantModel, ProblemData, ReferencePair,
    StageBounds, Weights,
};
