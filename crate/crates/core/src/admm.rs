//! ADMM iterations for the soft-constrained tracking problem.
//!
//! Each iteration performs
//!
//! 1. the z-update, an equality-constrained QP solved through its KKT system
//!    as three semi-banded solves (`P ξ = p`, `W μ = −(Gξ + b)`,
//!    `P z = −(Gᵀμ + p)`),
//! 2. the separable v-update: identity on `x0`, a clamp on `u0`, and the
//!    closed-form prox of the soft penalty elsewhere,
//! 3. the dual update `λ ← λ + ρ(Ez − v)`,
//!
//! and stops once `‖Ez − v‖∞ ≤ ε_p` and `‖v − v_prev‖∞ ≤ ε_d`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::precompute::{build_cache, FactorCache};
use crate::problem::{
    assemble_b, assemble_ingredients, ensure_valid, stack_bounds, BoundMode, Ingredients,
    ProblemData, ReferencePair, StackedBounds, StageBounds,
};

/// `argmin_y ½y² − b y + α max(c − y, y − d, 0)` for `c < d`.
///
/// Either limit may be infinite. With `y₁ = b + α`, `y₂ = b`, `y₃ = b − α`
/// the minimiser is `y₁` below `c`, `y₂` inside `[c, d]`, `y₃` above `d`,
/// and otherwise sticks to the limit the unconstrained pieces straddle.
pub fn scalar_soft_prox(b: f64, c: f64, d: f64, alpha: f64) -> Result<f64> {
    if !(c < d) {
        return Err(Error::InvalidInterval { lower: c, upper: d });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "prox weight must be finite and non-negative, got {alpha}"
        )));
    }
    Ok(soft_prox(b, c, d, alpha))
}

#[inline]
pub(crate) fn soft_prox(b: f64, c: f64, d: f64, alpha: f64) -> f64 {
    let y1 = b + alpha;
    let y2 = b;
    let y3 = b - alpha;
    if y1 <= c {
        y1
    } else if y2 < c {
        c
    } else if y2 <= d {
        y2
    } else if y3 < d {
        d
    } else {
        y3
    }
}

/// Solves the z-subproblem for the given `v`, `λ` and linear cost `q`.
pub fn z_update(
    cache: &FactorCache,
    ing: &Ingredients,
    q: &DVector<f64>,
    b: &DVector<f64>,
    v: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("z-update q", ing.n_z(), q.len())?;
    check_dim("z-update b", ing.m_z(), b.len())?;
    check_dim("z-update v", ing.n_v(), v.len())?;
    check_dim("z-update lambda", ing.n_v(), lambda.len())?;

    // p = q + Eᵀ(λ − ρ v)
    let p = q + ing.e_transpose_mul(&(lambda - v * ing.rho));
    let xi = cache.solve_p(&p)?;
    let mut rhs_w = cache.constraints().mul_vec(&xi)?;
    rhs_w += b;
    rhs_w.neg_mut();
    let mu = cache.solve_w(&rhs_w)?;
    let mut rhs_p = cache.constraints().mul_transpose_vec(&mu)?;
    rhs_p += &p;
    rhs_p.neg_mut();
    cache.solve_p(&rhs_p)
}

/// Component-wise v-update given `Ez`.
fn v_update_from(
    bounds: &StackedBounds,
    ez: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: f64,
) -> DVector<f64> {
    let inv_rho = 1.0 / rho;
    DVector::from_fn(ez.len(), |j, _| {
        let c = ez[j] + lambda[j] * inv_rho;
        match bounds.modes[j] {
            BoundMode::Free => c,
            // max/min rather than clamp so a NaN iterate still lands in the box
            BoundMode::Hard => c.max(bounds.lower[j]).min(bounds.upper[j]),
            BoundMode::Soft(beta) => soft_prox(c, bounds.lower[j], bounds.upper[j], beta * inv_rho),
        }
    })
}

/// Minimises the augmented Lagrangian over `v` for fixed `z` and `λ`.
pub fn v_update(
    ing: &Ingredients,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    check_dim("v-update z", ing.n_z(), z.len())?;
    check_dim("v-update lambda", ing.n_v(), lambda.len())?;
    Ok(v_update_from(&ing.bounds, &ing.e_mul(z), lambda, rho))
}

/// `λ + ρ (Ez − v)`.
pub fn dual_update(
    ing: &Ingredients,
    lambda: &DVector<f64>,
    z: &DVector<f64>,
    v: &DVector<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    check_dim("dual update z", ing.n_z(), z.len())?;
    check_dim("dual update v", ing.n_v(), v.len())?;
    check_dim("dual update lambda", ing.n_v(), lambda.len())?;
    Ok(lambda + (ing.e_mul(z) - v) * rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseTimes {
    pub z_update: Duration,
    pub v_update: Duration,
    pub dual_update: Duration,
}

/// Iterates at exit.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub z: DVector<f64>,
    pub v: DVector<f64>,
    pub v_prev: DVector<f64>,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl SolverState {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            v: self.v.clone(),
            lambda: self.lambda.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub solve_time: Duration,
    pub phase_times: PhaseTimes,
    /// Tracking cost plus soft penalty at the returned `(z, v)`.
    pub objective: f64,
    /// First input, read from `v` so it always respects its hard limits.
    pub u0: DVector<f64>,
    pub xs: DVector<f64>,
    pub us: DVector<f64>,
}

/// Initial `(v, λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub v: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl WarmStart {
    pub fn cold(n_v: usize) -> Self {
        Self {
            v: DVector::zeros(n_v),
            lambda: DVector::zeros(n_v),
        }
    }
}

/// A validated problem with its offline factorization.
///
/// The factor cache sits behind an `Arc`: solvers that only differ in bounds
/// share it (see [`MpctSolver::with_bounds`]).
#[derive(Debug, Clone)]
pub struct MpctSolver {
    problem: ProblemData,
    ingredients: Ingredients,
    cache: Arc<FactorCache>,
}

impl MpctSolver {
    pub fn new(problem: ProblemData) -> Result<Self> {
        ensure_valid(&problem)?;
        let ingredients =
            assemble_ingredients(&problem, &ReferencePair::zeros(problem.nx(), problem.nu()))?;
        let cache = Arc::new(build_cache(&ingredients)?);
        Ok(Self {
            problem,
            ingredients,
            cache,
        })
    }

    /// Same factorization, different limits or soft weights.
    pub fn with_bounds(&self, bounds: StageBounds) -> Result<Self> {
        let problem = self.problem.with_bounds(bounds);
        ensure_valid(&problem)?;
        let mut ingredients = self.ingredients.clone();
        ingredients.bounds = stack_bounds(&problem)?;
        Ok(Self {
            problem,
            ingredients,
            cache: Arc::clone(&self.cache),
        })
    }

    pub fn problem(&self) -> &ProblemData {
        &self.problem
    }

    pub fn ingredients(&self) -> &Ingredients {
        &self.ingredients
    }

    pub fn cache(&self) -> &FactorCache {
        &self.cache
    }

    pub fn shares_cache_with(&self, other: &MpctSolver) -> bool {
        Arc::ptr_eq(&self.cache, &other.cache)
    }

    /// Runs ADMM from `warm` (zeros when `None`) until both residual tests
    /// pass or `max_iterations` is reached.
    pub fn solve(
        &self,
        reference: &ReferencePair,
        x_current: &DVector<f64>,
        warm: Option<&WarmStart>,
    ) -> Result<(SolveReport, SolverState)> {
        self.solve_with(
            reference,
            x_current,
            warm,
            self.problem.eps_p,
            self.problem.eps_d,
        )
    }

    /// As [`solve`](Self::solve) with explicit tolerances.
    pub fn solve_with(
        &self,
        reference: &ReferencePair,
        x_current: &DVector<f64>,
        warm: Option<&WarmStart>,
        eps_p: f64,
        eps_d: f64,
    ) -> Result<(SolveReport, SolverState)> {
        let start = Instant::now();
        let ing = &self.ingredients;
        let rho = self.problem.rho;
        let n_v = ing.n_v();

        let q = ing.linear_cost(reference)?;
        let b = assemble_b(ing, x_current)?;
        let (mut v, mut lambda) = match warm {
            Some(w) => {
                check_dim("warm-start v", n_v, w.v.len())?;
                check_dim("warm-start lambda", n_v, w.lambda.len())?;
                (w.v.clone(), w.lambda.clone())
            }
            None => (DVector::zeros(n_v), DVector::zeros(n_v)),
        };

        let mut phases = PhaseTimes::default();
        let mut z = DVector::zeros(ing.n_z());
        let mut v_prev = v.clone();
        let mut primal = f64::INFINITY;
        let mut dual = f64::INFINITY;
        let mut status = SolveStatus::MaxIterations;
        let mut k = 0;

        while k < self.problem.max_iterations {
            let t0 = Instant::now();
            z = z_update(&self.cache, ing, &q, &b, &v, &lambda)?;
            let ez = ing.e_mul(&z);
            let t1 = Instant::now();
            let v_next = v_update_from(&ing.bounds, &ez, &lambda, rho);
            let t2 = Instant::now();
            let r = &ez - &v_next;
            lambda.axpy(rho, &r, 1.0);
            let t3 = Instant::now();
            phases.z_update += t1 - t0;
            phases.v_update += t2 - t1;
            phases.dual_update += t3 - t2;

            v_prev = std::mem::replace(&mut v, v_next);
            k += 1;
            primal = r.amax();
            dual = (&v - &v_prev).amax();
            if primal <= eps_p && dual <= eps_d {
                status = SolveStatus::Converged;
                break;
            }
        }
        debug_assert!(status != SolveStatus::Converged || (primal <= eps_p && dual <= eps_d));

        let (nx, nu, nb) = (ing.nx, ing.nu, ing.nb());
        let off = ing.horizon * nb;
        let report = SolveReport {
            status,
            iterations: k,
            solve_time: start.elapsed(),
            phase_times: phases,
            objective: ing.tracking_cost(&z, reference) + ing.bounds.penalty(&v),
            u0: v.rows(nx, nu).into_owned(),
            xs: z.rows(off, nx).into_owned(),
            us: z.rows(off + nx, nu).into_owned(),
        };
        let state = SolverState {
            z,
            v,
            v_prev,
            lambda,
            iterations: k,
            primal_residual: primal,
            dual_residual: dual,
        };
        Ok((report, state))
    }
}

/// One-shot solve: validates, assembles, factors and iterates.
pub fn solve(
    p: &ProblemData,
    reference: &ReferencePair,
    x_current: &DVector<f64>,
    warm: Option<&WarmStart>,
) -> Result<(SolveReport, SolverState)> {
    MpctSolver::new(p.clone())?.solve(reference, x_current, warm)
}
