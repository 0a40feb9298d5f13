mod common;

use common::{random_feasible, random_vector, rng};
use mpct::admm::{dual_update, scalar_soft_prox, v_update, z_update};
use mpct::oracle::{build_slack_qp, grid_prox_oracle, solve_dense_qp, solve_equality_qp, DenseQp};
use mpct::precompute::build_cache;
use mpct::problem::{assemble_b, assemble_ingredients, stack_bounds};
use mpct::sim::{benchmark, sample_initial_states};
use mpct::{BoundMode, MpctSolver, SolveStatus, WarmStart};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn limit() -> impl Strategy<Value = f64> {
    prop_oneof![4 => -5.0..5.0f64, 1 => Just(f64::INFINITY)]
}

proptest! {
    #[test]
    fn prox_satisfies_optimality(b in -20.0..20.0f64, lo in limit(), hi in limit(), alpha in 0.0..10.0f64) {
        let c = if lo.is_finite() { lo.min(hi) } else { f64::NEG_INFINITY };
        let d = if hi.is_finite() { hi.max(c + 0.01) } else { f64::INFINITY };
        let d = if lo.is_finite() && hi.is_finite() && d <= c { c + 0.01 } else { d };
        let y = scalar_soft_prox(b, c, d, alpha).unwrap();
        // left and right derivatives of h at y bracket zero
        let right = y - b + if y >= d { alpha } else if y < c { -alpha } else { 0.0 };
        let left = y - b + if y > d { alpha } else if y <= c { -alpha } else { 0.0 };
        prop_assert!(left <= 1e-12 && right >= -1e-12, "y={y} left={left} right={right}");
        let grid = grid_prox_oracle(b, c, d, alpha, 400).unwrap();
        prop_assert!((y - grid).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn prox_is_monotone_in_b(b in -10.0..10.0f64, delta in 0.0..5.0f64, alpha in 0.0..5.0f64) {
        let y1 = scalar_soft_prox(b, -1.0, 2.0, alpha).unwrap();
        let y2 = scalar_soft_prox(b + delta, -1.0, 2.0, alpha).unwrap();
        prop_assert!(y2 >= y1);
    }
}

#[test]
fn prox_boundary_conditions() {
    // y* = c requires y₁ > c and y₂ < c; y* = d requires y₂ > d and y₃ < d
    let (c, d) = (-1.0, 1.0);
    for (b, alpha) in [(-1.5, 1.0), (-1.2, 0.5), (1.5, 1.0), (1.2, 0.5)] {
        let y = scalar_soft_prox(b, c, d, alpha).unwrap();
        if y == c {
            assert!(b + alpha > c && b < c);
        } else {
            assert_eq!(y, d);
            assert!(b > d && b - alpha < d);
        }
    }
    assert!(scalar_soft_prox(0.0, 1.0, 1.0, 1.0).is_err());
    assert!(scalar_soft_prox(0.0, 2.0, 1.0, 1.0).is_err());
}

#[test]
fn z_update_matches_dense_kkt() {
    let mut r = rng(8);
    for _ in 0..30 {
        let inst = random_feasible(&mut r, 2.0);
        let ing = assemble_ingredients(&inst.problem, &inst.reference).unwrap();
        let cache = build_cache(&ing).unwrap();
        let v = random_vector(&mut r, ing.n_v(), 1.0);
        let lambda = random_vector(&mut r, ing.n_v(), 1.0);
        let b = assemble_b(&ing, &inst.x0).unwrap();
        let z = z_update(&cache, &ing, &ing.q, &b, &v, &lambda).unwrap();

        let e = ing.e_dense();
        let p = ing.h_dense() + e.transpose() * &e * ing.rho;
        let pk = &ing.q + e.transpose() * (&lambda - &v * ing.rho);
        let g = ing.g.to_dense();
        let (z_ref, _) = solve_equality_qp(&p, &pk, &g, &b).unwrap();
        assert!((&z - &z_ref).amax() < 1e-9 * (1.0 + z_ref.amax()));
        assert!((&g * &z - &b).amax() <= 1e-9 * b.amax().max(1.0));
    }
}

#[test]
fn z_update_of_zero_data_is_zero() {
    let p = benchmark::problem();
    let r = mpct::ReferencePair::zeros(6, 2);
    let ing = assemble_ingredients(&p, &r).unwrap();
    let cache = build_cache(&ing).unwrap();
    let zeros = DVector::zeros(160);
    let z = z_update(&cache, &ing, &ing.q, &DVector::zeros(102), &zeros, &zeros).unwrap();
    assert_eq!(z.amax(), 0.0);
}

#[test]
fn v_update_matches_separable_qp() {
    let p = benchmark::problem().with_bounds(benchmark::bounds_with_output_limits(15));
    let ing = assemble_ingredients(&p, &benchmark::reference()).unwrap();
    let mut r = rng(21);
    let z = random_vector(&mut r, ing.n_z(), 1.0);
    let lambda = random_vector(&mut r, ing.n_v(), 5.0);
    let rho = p.rho;
    let v = v_update(&ing, &z, &lambda, rho).unwrap();

    // min γ(v) − λᵀv + ρ/2‖Ez − v‖² with one slack per soft component
    let bounds = stack_bounds(&p).unwrap();
    let ez = ing.e_mul(&z);
    let n = ing.n_v();
    let soft: Vec<usize> = (0..n)
        .filter(|&j| matches!(bounds.modes[j], BoundMode::Soft(_)))
        .collect();
    let nn = n + soft.len();
    let mut h = DMatrix::zeros(nn, nn);
    let mut q = DVector::zeros(nn);
    for j in 0..n {
        h[(j, j)] = rho;
        q[j] = -lambda[j] - rho * ez[j];
    }
    let mut rows: Vec<(usize, f64, Option<usize>, f64)> = Vec::new();
    for j in 0..n {
        match bounds.modes[j] {
            BoundMode::Free => {}
            BoundMode::Hard => {
                rows.push((j, 1.0, None, bounds.upper[j]));
                rows.push((j, -1.0, None, -bounds.lower[j]));
            }
            BoundMode::Soft(beta) => {
                let k = n + soft.iter().position(|&s| s == j).unwrap();
                q[k] = beta;
                if bounds.upper[j].is_finite() {
                    rows.push((j, 1.0, Some(k), bounds.upper[j]));
                }
                if bounds.lower[j].is_finite() {
                    rows.push((j, -1.0, Some(k), -bounds.lower[j]));
                }
                rows.push((usize::MAX, 0.0, Some(k), 0.0));
            }
        }
    }
    let mut ain = DMatrix::zeros(rows.len(), nn);
    let mut bin = DVector::zeros(rows.len());
    for (i, (j, s, k, rhs)) in rows.into_iter().enumerate() {
        if j != usize::MAX {
            ain[(i, j)] = s;
        }
        if let Some(k) = k {
            ain[(i, k)] = -1.0;
        }
        bin[i] = rhs;
    }
    let qp = DenseQp {
        h,
        q,
        aeq: DMatrix::zeros(0, nn),
        beq: DVector::zeros(0),
        ain,
        bin,
        n_original: n,
    };
    let sol = solve_dense_qp(&qp, 1e-15).unwrap();
    let diff = &v - sol.x.rows(0, n);
    let j = diff.iamax();
    assert!(
        diff.amax() <= 1e-8,
        "diff {} at {j}: {} vs {} mode {:?}",
        diff.amax(),
        v[j],
        sol.x[j],
        bounds.modes[j]
    );
}

#[test]
fn v_update_clamps_hard_inputs_and_ignores_zero_weight() {
    let p = benchmark::problem();
    let ing = assemble_ingredients(&p, &benchmark::reference()).unwrap();
    let mut z = DVector::zeros(128);
    z[6] = 3.0;
    z[7] = -3.0;
    z[14] = 5.0;
    let v = v_update(&ing, &z, &DVector::zeros(160), 1.2).unwrap();
    assert_eq!((v[6], v[7]), (1.0, 0.0));

    let free = p.with_bounds(p.bounds.clone().softened(0.0));
    let ing0 = assemble_ingredients(&free, &benchmark::reference()).unwrap();
    let v0 = v_update(&ing0, &z, &DVector::zeros(160), 1.2).unwrap();
    assert_eq!(v0[8 + 2 + 6], z[14]);
    assert_eq!((v0[6], v0[7]), (1.0, 0.0));
}

#[test]
fn dual_update_examples() {
    let p = benchmark::problem();
    let ing = assemble_ingredients(&p, &benchmark::reference()).unwrap();
    let mut r = rng(1);
    let z = random_vector(&mut r, 128, 1.0);
    let lambda = random_vector(&mut r, 160, 1.0);
    let ez = ing.e_mul(&z);
    assert_eq!(dual_update(&ing, &lambda, &z, &ez, 2.0).unwrap(), lambda);
    let mut v = ez.clone();
    v[3] -= 1.0;
    let out = dual_update(&ing, &DVector::zeros(160), &z, &v, 2.0).unwrap();
    let mut e3 = DVector::zeros(160);
    e3[3] = 2.0;
    assert!((out - e3).amax() < 1e-15);
}

#[test]
fn solutions_match_the_slack_oracle() {
    let mut r = rng(77);
    for k in 0..15 {
        let inst = random_feasible(&mut r, 5.0);
        let solver = MpctSolver::new(inst.problem.clone()).unwrap();
        let (rep, st) = solver.solve(&inst.reference, &inst.x0, None).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged, "instance {k}");
        let qp = build_slack_qp(&inst.problem, &inst.reference, &inst.x0).unwrap();
        let sol = solve_dense_qp(&qp, 1e-9).unwrap();
        let dz = (&st.z - sol.x.rows(0, qp.n_original)).amax();
        assert!(dz <= 1e-3, "instance {k}: ‖Δz‖∞ = {dz}");
        assert!(st.primal_residual <= 1e-6 && st.dual_residual <= 1e-6);
    }
}

#[test]
fn equality_holds_every_iteration_on_the_benchmark() {
    let p = benchmark::problem();
    let solver = MpctSolver::new(p.clone()).unwrap();
    let ing = solver.ingredients();
    let x = sample_initial_states(&benchmark::initial_state_box(), 1, 9)
        .unwrap()
        .remove(0);
    let b = assemble_b(ing, &x).unwrap();
    let (mut v, mut lambda) = (DVector::zeros(160), DVector::zeros(160));
    for _ in 0..40 {
        let z = z_update(solver.cache(), ing, &ing.q, &b, &v, &lambda).unwrap();
        assert!((ing.g.mul_vec(&z).unwrap() - &b).amax() <= 1e-9 * b.amax().max(1.0));
        v = v_update(ing, &z, &lambda, p.rho).unwrap();
        lambda = dual_update(ing, &lambda, &z, &v, p.rho).unwrap();
    }
}

#[test]
fn warm_start_at_the_optimum() {
    let p = benchmark::problem();
    let solver = MpctSolver::new(p).unwrap();
    let r = benchmark::reference();
    let (_, st) = solver.solve_with(&r, &r.x, None, 1e-10, 1e-10).unwrap();
    let (rep, _) = solver.solve(&r, &r.x, Some(&st.warm_start())).unwrap();
    assert_eq!(rep.status, SolveStatus::Converged);
    assert!(rep.iterations <= 2, "{} iterations", rep.iterations);
    assert!((&rep.u0 - &r.u).amax() < 1e-6);
}

#[test]
fn inputs_respect_hard_limits_even_without_convergence() {
    let scn = benchmark::output_limit_scenario();
    let mut p = scn.problem.clone();
    p.max_iterations = 7;
    let solver = MpctSolver::new(p).unwrap();
    let hard = solver
        .with_bounds(solver.problem().bounds.clone().hardened())
        .unwrap();
    assert!(solver.shares_cache_with(&hard));
    let mut r = rng(4);
    for s in [&solver, &hard] {
        for _ in 0..20 {
            let x = random_vector(&mut r, 6, 0.8);
            let (rep, _) = s.solve(&scn.reference, &x, None).unwrap();
            assert!(rep.u0.iter().all(|u| (0.0..=1.0).contains(u)));
        }
    }
}

#[test]
fn hard_output_limits_do_not_converge() {
    let scn = benchmark::output_limit_scenario();
    let p = scn
        .problem
        .with_bounds(scn.problem.bounds.clone().hardened());
    let (rep, _) = mpct::solve(&p, &scn.reference, &scn.initial_state, None).unwrap();
    assert_eq!(rep.status, SolveStatus::MaxIterations);
    assert_eq!(rep.iterations, 5000);
}

#[test]
fn benchmark_instances_take_typical_iterations() {
    let p = benchmark::problem();
    let solver = MpctSolver::new(p).unwrap();
    let xs = sample_initial_states(&benchmark::initial_state_box(), 20, 3).unwrap();
    for x in &xs {
        let (rep, _) = solver.solve(&benchmark::reference(), x, None).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        assert!((25..=50).contains(&rep.iterations), "{}", rep.iterations);
    }
    let w = WarmStart::cold(160);
    assert_eq!(w.v.len(), 160);
}

#[test]
fn invalid_problems_are_rejected() {
    let mut p = benchmark::problem();
    p.rho = 0.0;
    assert!(MpctSolver::new(p).is_err());
    let mut p = benchmark::problem();
    p.weights.q[(0, 0)] = 0.0;
    assert!(MpctSolver::new(p).is_err());
    let mut p = benchmark::problem();
    p.horizon = 1;
    assert!(MpctSolver::new(p).is_err());
}
