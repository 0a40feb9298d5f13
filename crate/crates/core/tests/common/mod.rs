#![allow(dead_code)]

use mpct::{BoundMode, BoxBounds, PlantModel, ProblemData, ReferencePair, StageBounds, Weights};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

/// Symmetric positive definite with eigenvalues at least `floor`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, 1.0);
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

/// Rows of `A` sum to at most 0.9 in absolute value, so `‖Aⁱx‖∞ ≤ ‖x‖∞`.
pub fn random_contraction(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut a = random_matrix(rng, n, n, 1.0);
    for mut row in a.row_iter_mut() {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        row *= 0.9 / s;
    }
    a
}

pub struct Instance {
    pub problem: ProblemData,
    pub reference: ReferencePair,
    pub x0: DVector<f64>,
}

/// A small feasible problem: `A` is a contraction, `u = 0` lies inside the
/// input box, and the horizon leaves `N·nu ≥ nx` inputs to reach an
/// equilibrium whatever the hard `u0`.
pub fn random_feasible(rng: &mut ChaCha8Rng, beta: f64) -> Instance {
    let nx = rng.gen_range(1..=4);
    let nu = rng.gen_range(1..=2);
    let ny = rng.gen_range(1..=2);
    let mut horizon = rng.gen_range(2..=5);
    // after a hard u0 the remaining inputs must still reach an equilibrium
    while horizon * nu < nx {
        horizon += 1;
    }
    let model = PlantModel::new(
        random_contraction(rng, nx),
        random_matrix(rng, nx, nu, 1.0),
        random_matrix(rng, ny, nx, 1.0),
        random_matrix(rng, ny, nu, 0.5),
    )
    .unwrap();
    let weights = Weights {
        q: random_spd(rng, nx, 0.5),
        r: random_spd(rng, nu, 0.5),
        t: random_spd(rng, nx, 1.0) * 10.0,
        s: random_spd(rng, nu, 1.0),
    };
    let x0 = random_vector(rng, nx, 0.5);
    let x_lim: Vec<f64> = (0..nx).map(|_| rng.gen_range(0.6..1.5)).collect();
    let u_lo: Vec<f64> = (0..nu).map(|_| rng.gen_range(-1.0..-0.1)).collect();
    let u_hi: Vec<f64> = (0..nu).map(|_| rng.gen_range(0.1..1.0)).collect();
    let c_norm = model
        .c
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let y_lim: Vec<f64> = (0..ny)
        .map(|_| 0.5 * c_norm + rng.gen_range(0.1..0.5))
        .collect();
    let bounds = StageBounds::constant(
        horizon,
        BoxBounds::symmetric(&x_lim, BoundMode::Hard),
        BoxBounds::new(u_lo, u_hi, BoundMode::Hard),
        BoxBounds::symmetric(&y_lim, BoundMode::Hard),
    )
    .softened(beta);
    let reference = ReferencePair {
        x: random_vector(rng, nx, 1.0),
        u: random_vector(rng, nu, 1.0),
    };
    Instance {
        problem: ProblemData {
            model,
            weights,
            horizon,
            bounds,
            rho: rng.gen_range(0.5..5.0),
            eps_p: 1e-6,
            eps_d: 1e-6,
            max_iterations: 50_000,
        },
        reference,
        x0,
    }
}

/// Generic plant and weights with no bounds, for exercising the linear
/// algebra. Dimensions with more equality rows than variables are redrawn.
pub fn random_structure(rng: &mut ChaCha8Rng, max_horizon: usize) -> Instance {
    let nx = rng.gen_range(1..=4);
    let nu = rng.gen_range(1..=2);
    let ny = rng.gen_range(1..=2);
    let mut horizon = rng.gen_range(2..=max_horizon);
    while (horizon + 1) * nu < nx {
        horizon = rng.gen_range(2..=max_horizon);
    }
    let model = PlantModel::new(
        random_matrix(rng, nx, nx, 1.0),
        random_matrix(rng, nx, nu, 1.0),
        random_matrix(rng, ny, nx, 1.0),
        random_matrix(rng, ny, nu, 1.0),
    )
    .unwrap();
    let weights = Weights {
        q: random_spd(rng, nx, 0.5),
        r: random_spd(rng, nu, 0.5),
        t: random_spd(rng, nx, 0.5),
        s: random_spd(rng, nu, 0.5),
    };
    let bounds = StageBounds::constant(
        horizon,
        BoxBounds::unbounded(nx),
        BoxBounds::unbounded(nu),
        BoxBounds::unbounded(ny),
    );
    Instance {
        problem: ProblemData {
            model,
            weights,
            horizon,
            bounds,
            rho: rng.gen_range(0.5..5.0),
            eps_p: 1e-6,
            eps_d: 1e-6,
            max_iterations: 1000,
        },
        reference: ReferencePair::zeros(nx, nu),
        x0: DVector::zeros(nx),
    }
}

/// Dense `P = H + ρEᵀE` and `W = G P⁻¹ Gᵀ`.
pub fn dense_p_w(ing: &mpct::problem::Ingredients) -> (DMatrix<f64>, DMatrix<f64>) {
    let e = ing.e_dense();
    let p = ing.h_dense() + e.transpose() * &e * ing.rho;
    let g = ing.g.to_dense();
    let w = &g * p.clone().lu().solve(&g.transpose()).unwrap();
    (p, w)
}

pub fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    sv.max() / sv.min()
}

/// Largest condition number at which a 1e-10 relative comparison between two
/// backward-stable solves is meaningful.
pub const COMPARABLE_CONDITION: f64 = 1e5;

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}
