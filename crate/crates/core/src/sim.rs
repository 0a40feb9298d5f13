//! Plant simulation and experiment generation.
//!
//! Includes the oscillating-masses benchmark (a chain of masses and springs
//! between two walls), exact zero-order-hold discretization, random initial
//! states, and closed-loop rollouts with warm-started solves.

use std::io::Write;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::admm::{MpctSolver, SolveStatus, WarmStart};
use crate::error::{check_dim, Error, Result};
use crate::problem::{
    BoundMode, BoxBounds, PlantModel, ProblemData, ReferencePair, StageBounds, Weights,
    DEFAULT_MAX_ITERATIONS,
};

/// Masses in a line, joined by identical springs, with the outer masses also
/// tied to fixed walls. Forces act on the actuated masses in the positive
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct MassSpringChain {
    pub masses: Vec<f64>,
    pub spring_constant: f64,
    pub actuated: Vec<usize>,
}

impl MassSpringChain {
    /// Three 1 kg masses, k = 2 N/m, forces on the first and last mass.
    pub fn three_masses() -> Self {
        Self {
            masses: vec![1.0; 3],
            spring_constant: 2.0,
            actuated: vec![0, 2],
        }
    }

    fn check(&self) -> Result<()> {
        if self.masses.len() < 2 {
            return Err(Error::InvalidParameter(
                "chain needs at least two masses".into(),
            ));
        }
        if self.masses.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidParameter("masses must be positive".into()));
        }
        if !(self.spring_constant >= 0.0) {
            return Err(Error::InvalidParameter(
                "spring constant must be non-negative".into(),
            ));
        }
        if self.actuated.is_empty() || self.actuated.iter().any(|&i| i >= self.masses.len()) {
            return Err(Error::InvalidParameter(
                "invalid actuated mass index".into(),
            ));
        }
        Ok(())
    }

    /// Continuous dynamics `ẋ = Ac x + Bc u` with `x = (positions, velocities)`.
    pub fn continuous(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check()?;
        let n = self.masses.len();
        let k = self.spring_constant;
        let mut ac = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            ac[(i, n + i)] = 1.0;
            let m = self.masses[i];
            // each mass has a spring on both sides (wall or neighbour)
            ac[(n + i, i)] = -2.0 * k / m;
            if i > 0 {
                ac[(n + i, i - 1)] = k / m;
            }
            if i + 1 < n {
                ac[(n + i, i + 1)] = k / m;
            }
        }
        let mut bc = DMatrix::zeros(2 * n, self.actuated.len());
        for (col, &i) in self.actuated.iter().enumerate() {
            bc[(n + i, col)] = 1.0 / self.masses[i];
        }
        Ok((ac, bc))
    }

    /// Outputs are the distances between neighbouring masses, `p_{i+1} − p_i`.
    pub fn output_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.masses.len();
        let mut c = DMatrix::zeros(n - 1, 2 * n);
        for i in 0..n - 1 {
            c[(i, i)] = -1.0;
            c[(i, i + 1)] = 1.0;
        }
        (c, DMatrix::zeros(n - 1, self.actuated.len()))
    }
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.amax() < 1e-18 * result.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Exact zero-order-hold discretization of `(Ac, Bc)` with sample time `ts`.
pub fn zoh(ac: &DMatrix<f64>, bc: &DMatrix<f64>, ts: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(ts > 0.0) {
        return Err(Error::InvalidParameter(
            "sample time must be positive".into(),
        ));
    }
    let (nx, nu) = (ac.nrows(), bc.ncols());
    check_dim("Bc rows", nx, bc.nrows())?;
    let mut aug = DMatrix::zeros(nx + nu, nx + nu);
    aug.view_mut((0, 0), (nx, nx)).copy_from(&(ac * ts));
    aug.view_mut((0, nx), (nx, nu)).copy_from(&(bc * ts));
    let e = expm(&aug);
    Ok((
        e.view((0, 0), (nx, nx)).into_owned(),
        e.view((0, nx), (nx, nu)).into_owned(),
    ))
}

/// Discretized chain model with distance outputs.
pub fn build_chain_model(chain: &MassSpringChain, ts: f64) -> Result<PlantModel> {
    let (ac, bc) = chain.continuous()?;
    let (a, b) = zoh(&ac, &bc, ts)?;
    let (c, d) = chain.output_matrices();
    PlantModel::new(a, b, c, d)
}

/// `(A x + B u, C x + D u)`.
pub fn step_plant(
    model: &PlantModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    (&model.a * x + &model.b * u, &model.c * x + &model.d * u)
}

/// Component-wise box for sampling initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl StateBox {
    pub fn symmetric(half_width: &[f64]) -> Self {
        let upper = DVector::from_column_slice(half_width);
        Self {
            lower: -&upper,
            upper,
        }
    }
}

/// Uniform samples from `bx`; deterministic for a given seed.
pub fn sample_initial_states(bx: &StateBox, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    check_dim("sampling box", bx.lower.len(), bx.upper.len())?;
    if bx.lower.iter().zip(bx.upper.iter()).any(|(l, u)| !(l <= u)) {
        return Err(Error::InvalidParameter(
            "sampling box has lower > upper".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            DVector::from_fn(bx.lower.len(), |i, _| {
                let (l, u) = (bx.lower[i], bx.upper[i]);
                if l == u {
                    l
                } else {
                    rng.gen_range(l..u)
                }
            })
        })
        .collect())
}

/// Which constraint handling a rollout or batch uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// The bounds as configured (soft where the problem says so).
    Soft,
    /// Every bound enforced exactly.
    Hard,
}

impl Formulation {
    pub fn apply(self, bounds: &StageBounds) -> StageBounds {
        match self {
            Formulation::Soft => bounds.clone(),
            Formulation::Hard => bounds.clone().hardened(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub problem: ProblemData,
    pub reference: ReferencePair,
    pub initial_state: DVector<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
    pub solve_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub steps: Vec<TraceStep>,
    pub final_state: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RolloutError {
    #[error("hard formulation did not converge at step {step} (treated as infeasible)")]
    AbortedInfeasible { step: usize },
    #[error(transparent)]
    Solver(#[from] Error),
}

/// Receding-horizon loop: solve, apply `u0`, step the plant, warm start the
/// next solve with the previous `(v, λ)`.
pub fn run_closed_loop(
    scn: &Scenario,
    mode: Formulation,
) -> std::result::Result<RolloutTrace, RolloutError> {
    let problem = scn.problem.with_bounds(mode.apply(&scn.problem.bounds));
    let solver = MpctSolver::new(problem)?;
    let model = &scn.problem.model;
    check_dim("initial state", model.nx(), scn.initial_state.len())?;

    let mut x = scn.initial_state.clone();
    let mut warm: Option<WarmStart> = None;
    let mut steps = Vec::with_capacity(scn.steps);
    for t in 0..scn.steps {
        let (report, state) = solver.solve(&scn.reference, &x, warm.as_ref())?;
        if mode == Formulation::Hard && report.status == SolveStatus::MaxIterations {
            return Err(RolloutError::AbortedInfeasible { step: t });
        }
        let u = report.u0.clone();
        let (x_next, y) = step_plant(model, &x, &u);
        steps.push(TraceStep {
            t,
            x: x.clone(),
            u,
            y,
            iterations: report.iterations,
            status: report.status,
            solve_time: report.solve_time,
        });
        warm = Some(state.warm_start());
        x = x_next;
    }
    Ok(RolloutTrace {
        steps,
        final_state: x,
    })
}

/// Avg / median / max / min of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub avg: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Some(Self {
            avg: sorted.iter().sum::<f64>() / n as f64,
            median,
            max: sorted[n - 1],
            min: sorted[0],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub iterations: Summary,
    /// Absent when timings are suppressed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_s: Option<Summary>,
    pub not_converged: usize,
}

impl RolloutTrace {
    pub fn summary(&self, with_timing: bool) -> Option<TraceSummary> {
        let iters: Vec<f64> = self.steps.iter().map(|s| s.iterations as f64).collect();
        let times: Vec<f64> = self
            .steps
            .iter()
            .map(|s| s.solve_time.as_secs_f64())
            .collect();
        Some(TraceSummary {
            steps: self.steps.len(),
            iterations: Summary::of(&iters)?,
            time_s: if with_timing {
                Summary::of(&times)
            } else {
                None
            },
            not_converged: self
                .steps
                .iter()
                .filter(|s| s.status != SolveStatus::Converged)
                .count(),
        })
    }

    /// One row per step: `t, x1.., u1.., y1.., iters, status, time_s`.
    pub fn write_csv<W: Write>(&self, out: W, with_timing: bool) -> Result<()> {
        let io = |e: csv::Error| Error::InvalidParameter(format!("writing trace: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let Some(first) = self.steps.first() else {
            return w
                .flush()
                .map_err(|e| Error::InvalidParameter(e.to_string()));
        };
        let mut header = vec!["t".to_string()];
        header.extend((1..=first.x.len()).map(|i| format!("x{i}")));
        header.extend((1..=first.u.len()).map(|i| format!("u{i}")));
        header.extend((1..=first.y.len()).map(|i| format!("y{i}")));
        header.extend(["iters", "status", "time_s"].map(String::from));
        w.write_record(&header).map_err(io)?;
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            row.extend(
                s.x.iter()
                    .chain(s.u.iter())
                    .chain(s.y.iter())
                    .map(|v| v.to_string()),
            );
            row.push(s.iterations.to_string());
            row.push(format!("{:?}", s.status));
            row.push(if with_timing {
                format!("{:.9}", s.solve_time.as_secs_f64())
            } else {
                "0".into()
            });
            w.write_record(&row).map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::InvalidParameter(e.to_string()))
    }
}

/// Benchmark scenario: three oscillating masses, Ts = 0.2 s.
pub mod benchmark {
    use super::*;

    pub const HORIZON: usize = 15;
    pub const SAMPLE_TIME: f64 = 0.2;
    pub const RHO: f64 = 1.2;
    pub const TOLERANCE: f64 = 1e-4;
    pub const BETA: f64 = 10.0;
    pub const OUTPUT_LIMIT: f64 = 0.07;

    pub fn model() -> PlantModel {
        build_chain_model(&MassSpringChain::three_masses(), SAMPLE_TIME)
            .expect("benchmark chain is valid")
    }

    pub fn weights() -> Weights {
        Weights::diagonal(
            &[2.5, 2.5, 2.5, 0.5, 0.5, 0.5],
            &[0.3, 0.3],
            &[200.0, 200.0, 200.0, 10.0, 10.0, 10.0],
            &[1.0, 1.0],
        )
    }

    /// State and input limits, outputs unbounded, all softened with β = 10.
    pub fn bounds(horizon: usize) -> StageBounds {
        let x = BoxBounds::symmetric(&[0.6, 0.6, 0.6, 1.0, 1.0, 1.0], BoundMode::Hard);
        let u = BoxBounds::new(vec![0.0, 0.0], vec![1.0, 1.0], BoundMode::Hard);
        let y = BoxBounds::unbounded(2);
        StageBounds::constant(horizon, x, u, y).softened(BETA)
    }

    /// As [`bounds`] with `|y| ≤ 0.07` on every stage and on the reference.
    pub fn bounds_with_output_limits(horizon: usize) -> StageBounds {
        let x = BoxBounds::symmetric(&[0.6, 0.6, 0.6, 1.0, 1.0, 1.0], BoundMode::Hard);
        let u = BoxBounds::new(vec![0.0, 0.0], vec![1.0, 1.0], BoundMode::Hard);
        let y = BoxBounds::symmetric(&[OUTPUT_LIMIT, OUTPUT_LIMIT], BoundMode::Hard);
        StageBounds::constant(horizon, x, u, y).softened(BETA)
    }

    pub fn problem_with_horizon(horizon: usize) -> ProblemData {
        ProblemData {
            model: model(),
            weights: weights(),
            horizon,
            bounds: bounds(horizon),
            rho: RHO,
            eps_p: TOLERANCE,
            eps_d: TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn problem() -> ProblemData {
        problem_with_horizon(HORIZON)
    }

    pub fn reference() -> ReferencePair {
        ReferencePair::new(&[0.4, 0.4, 0.4, 0.0, 0.0, 0.0], &[0.8, 0.8])
    }

    pub fn initial_state_box() -> StateBox {
        StateBox::symmetric(&[0.1, 0.1, 0.1, 0.2, 0.2, 0.2])
    }

    /// Closed-loop start: first mass moving left at 0.5 m/s.
    pub fn closed_loop_initial_state() -> DVector<f64> {
        DVector::from_vec(vec![0.0, 0.0, 0.0, -0.5, 0.0, 0.0])
    }

    pub const CLOSED_LOOP_STEPS: usize = 60;

    pub fn output_limit_scenario() -> Scenario {
        let mut problem = problem();
        problem.bounds = bounds_with_output_limits(HORIZON);
        Scenario {
            problem,
            reference: reference(),
            initial_state: closed_loop_initial_state(),
            steps: CLOSED_LOOP_STEPS,
        }
    }
}
