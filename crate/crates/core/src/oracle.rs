//! Slow dense reference solvers used to check the structured solver.
//!
//! Nothing here reuses the structured factorizations: the QP matrices are
//! rebuilt from the problem data, and solves go through dense LU.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::problem::{BoundMode, BoxBounds, ProblemData, ReferencePair};

/// `min ½ xᵀHx + qᵀx` subject to `Aeq x = beq`, `Ain x ≤ bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
    pub aeq: DMatrix<f64>,
    pub beq: DVector<f64>,
    pub ain: DMatrix<f64>,
    pub bin: DVector<f64>,
    /// Leading variables that form `z`; the rest are slacks.
    pub n_original: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("problem appears infeasible")]
    Infeasible,
    #[error("interior point method did not converge in {0} iterations")]
    NotConverged(usize),
    #[error(transparent)]
    Problem(#[from] Error),
}

/// Dense soft-constrained MPCT problem with one explicit slack per soft
/// component: soft limits become `v_j − s_j ≤ v̄_j`, `v̲_j − v_j ≤ s_j`,
/// `s_j ≥ 0` with cost `β_j s_j`; hard limits become plain inequalities.
/// Infinite limits contribute no row, but their slack is still created.
pub fn build_slack_qp(
    p: &ProblemData,
    reference: &ReferencePair,
    x_current: &DVector<f64>,
) -> Result<DenseQp> {
    let m = &p.model;
    m.check()?;
    let (nx, nu, ny, n) = (m.nx(), m.nu(), m.ny(), p.horizon);
    check_dim("current state", nx, x_current.len())?;
    check_dim("reference state", nx, reference.x.len())?;
    check_dim("reference input", nu, reference.u.len())?;
    let nb = nx + nu;
    let n_z = (n + 1) * nb;
    let xi = |i: usize| i * nb;
    let ui = |i: usize| i * nb + nx;

    // cost ½ Σ ‖x_i − x_s‖²_Q + ‖u_i − u_s‖²_R + ½ ‖x_s − x_r‖²_T + ½ ‖u_s − u_r‖²_S
    let mut h = DMatrix::zeros(n_z, n_z);
    let mut add_quad = |a: usize, b: Option<usize>, w: &DMatrix<f64>| {
        // adds (z_a − z_b)ᵀ W (z_a − z_b)
        let k = w.nrows();
        for r in 0..k {
            for c in 0..k {
                h[(a + r, a + c)] += w[(r, c)];
                if let Some(b) = b {
                    h[(b + r, b + c)] += w[(r, c)];
                    h[(a + r, b + c)] -= w[(r, c)];
                    h[(b + r, a + c)] -= w[(r, c)];
                }
            }
        }
    };
    for i in 0..n {
        add_quad(xi(i), Some(xi(n)), &p.weights.q);
        add_quad(ui(i), Some(ui(n)), &p.weights.r);
    }
    add_quad(xi(n), None, &p.weights.t);
    add_quad(ui(n), None, &p.weights.s);
    let mut q = DVector::zeros(n_z);
    q.rows_mut(xi(n), nx)
        .copy_from(&-(&p.weights.t * &reference.x));
    q.rows_mut(ui(n), nu)
        .copy_from(&-(&p.weights.s * &reference.u));

    // x_0 = x(t); x_{i+1} = A x_i + B u_i with x_N = x_s; x_s = A x_s + B u_s
    let m_eq = (n + 2) * nx;
    let mut aeq = DMatrix::zeros(m_eq, n_z);
    let mut beq = DVector::zeros(m_eq);
    for r in 0..nx {
        aeq[(r, xi(0) + r)] = 1.0;
        beq[r] = x_current[r];
    }
    for i in 0..n {
        let row = (i + 1) * nx;
        aeq.view_mut((row, xi(i)), (nx, nx)).copy_from(&m.a);
        aeq.view_mut((row, ui(i)), (nx, nu)).copy_from(&m.b);
        for r in 0..nx {
            aeq[(row + r, xi(i + 1) + r)] -= 1.0;
        }
    }
    let row = (n + 1) * nx;
    aeq.view_mut((row, xi(n)), (nx, nx)).copy_from(&m.a);
    aeq.view_mut((row, ui(n)), (nx, nu)).copy_from(&m.b);
    for r in 0..nx {
        aeq[(row + r, xi(n) + r)] -= 1.0;
    }

    // rows of v_i = (x_i, u_i, C x_i + D u_i) as dense linear maps of z
    struct Limit {
        row: DVector<f64>,
        lower: f64,
        upper: f64,
        mode: BoundMode,
    }
    let mut limits: Vec<Limit> = Vec::new();
    let mut push = |stage: usize, bb: &BoxBounds, kind: char, force: Option<BoundMode>| {
        let len = match kind {
            'x' => nx,
            'u' => nu,
            _ => ny,
        };
        for j in 0..len {
            let mut row = DVector::zeros(n_z);
            match kind {
                'x' => row[xi(stage) + j] = 1.0,
                'u' => row[ui(stage) + j] = 1.0,
                _ => {
                    for c in 0..nx {
                        row[xi(stage) + c] = m.c[(j, c)];
                    }
                    for c in 0..nu {
                        row[ui(stage) + c] = m.d[(j, c)];
                    }
                }
            }
            limits.push(Limit {
                row,
                lower: bb.lower[j],
                upper: bb.upper[j],
                mode: force.unwrap_or(bb.modes[j]),
            });
        }
    };
    let b = &p.bounds;
    check_dim("x bound stages", n, b.x.len())?;
    check_dim("u bound stages", n, b.u.len())?;
    check_dim("y bound stages", n, b.y.len())?;
    for i in 0..n {
        if i > 0 {
            push(i, &b.x[i], 'x', None);
        }
        push(
            i,
            &b.u[i],
            'u',
            if i == 0 { Some(BoundMode::Hard) } else { None },
        );
        push(i, &b.y[i], 'y', None);
    }
    push(n, &b.xs, 'x', None);
    push(n, &b.us, 'u', None);
    push(n, &b.ys, 'y', None);

    let n_slack = limits
        .iter()
        .filter(|l| matches!(l.mode, BoundMode::Soft(_)))
        .count();
    let n_all = n_z + n_slack;
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut cost_tail = Vec::with_capacity(n_slack);
    let widen = |r: &DVector<f64>| {
        let mut out = DVector::zeros(n_all);
        out.rows_mut(0, n_z).copy_from(r);
        out
    };
    let mut slack = n_z;
    for l in &limits {
        match l.mode {
            BoundMode::Free => {}
            BoundMode::Hard => {
                if l.upper.is_finite() {
                    rows.push((widen(&l.row), l.upper));
                }
                if l.lower.is_finite() {
                    rows.push((-widen(&l.row), -l.lower));
                }
            }
            BoundMode::Soft(beta) => {
                if l.upper.is_finite() {
                    let mut r = widen(&l.row);
                    r[slack] = -1.0;
                    rows.push((r, l.upper));
                }
                if l.lower.is_finite() {
                    let mut r = -widen(&l.row);
                    r[slack] = -1.0;
                    rows.push((r, -l.lower));
                }
                let mut r = DVector::zeros(n_all);
                r[slack] = -1.0;
                rows.push((r, 0.0));
                cost_tail.push(beta);
                slack += 1;
            }
        }
    }

    let mut ain = DMatrix::zeros(rows.len(), n_all);
    let mut bin = DVector::zeros(rows.len());
    for (k, (r, rhs)) in rows.into_iter().enumerate() {
        ain.set_row(k, &r.transpose());
        bin[k] = rhs;
    }
    let mut h_all = DMatrix::zeros(n_all, n_all);
    h_all.view_mut((0, 0), (n_z, n_z)).copy_from(&h);
    let mut q_all = DVector::zeros(n_all);
    q_all.rows_mut(0, n_z).copy_from(&q);
    for (k, beta) in cost_tail.into_iter().enumerate() {
        q_all[n_z + k] = beta;
    }
    let mut aeq_all = DMatrix::zeros(m_eq, n_all);
    aeq_all.view_mut((0, 0), (m_eq, n_z)).copy_from(&aeq);

    Ok(DenseQp {
        h: h_all,
        q: q_all,
        aeq: aeq_all,
        beq,
        ain,
        bin,
        n_original: n_z,
    })
}

impl DenseQp {
    pub fn n_slack(&self) -> usize {
        self.h.nrows() - self.n_original
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.q.dot(x)
    }
}

const MAX_IPM_ITERATIONS: usize = 200;

/// Newton direction `(dx, dy, dz, dw)`.
type Direction = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);

fn step_to_boundary(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(1.0, f64::min)
}

/// Mehrotra predictor-corrector interior point method. Stops when the
/// scaled residuals and the complementarity gap drop below `tol`.
pub fn solve_dense_qp(qp: &DenseQp, tol: f64) -> std::result::Result<QpSolution, OracleError> {
    let n = qp.h.nrows();
    let me = qp.aeq.nrows();
    let mi = qp.ain.nrows();
    check_dim("QP linear term", n, qp.q.len())?;
    check_dim("QP equality columns", n, qp.aeq.ncols())?;
    check_dim("QP inequality columns", n, qp.ain.ncols())?;

    let scale = 1.0 + qp.q.amax().max(qp.beq.amax()).max(qp.bin.amax());
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(me);
    let mut w = (&qp.bin - &qp.ain * &x).map(|v| v.max(1.0));
    let mut z = DVector::from_element(mi, 1.0);

    for it in 0..MAX_IPM_ITERATIONS {
        let r_d = &qp.h * &x + &qp.q + qp.aeq.tr_mul(&y) + qp.ain.tr_mul(&z);
        let r_eq = &qp.aeq * &x - &qp.beq;
        let r_in = &qp.ain * &x + &w - &qp.bin;
        let mu = if mi > 0 { w.dot(&z) / mi as f64 } else { 0.0 };
        let res = r_d.amax().max(r_eq.amax()).max(r_in.amax());
        if res <= tol * scale && mu <= tol {
            return Ok(QpSolution {
                objective: qp.objective(&x),
                x,
                iterations: it,
            });
        }
        if x.amax() > 1e12 || y.amax() > 1e14 || z.amax() > 1e14 {
            return Err(OracleError::Infeasible);
        }

        // reduced KKT: [H + Aᵀ(Z/W)A, Aeqᵀ; Aeq, 0]
        let d = z.component_div(&w);
        let mut scaled = qp.ain.clone();
        for (k, mut row) in scaled.row_iter_mut().enumerate() {
            row *= d[k];
        }
        let mut kkt = DMatrix::zeros(n + me, n + me);
        kkt.view_mut((0, 0), (n, n))
            .copy_from(&(&qp.h + qp.ain.tr_mul(&scaled)));
        kkt.view_mut((0, n), (n, me)).copy_from(&qp.aeq.transpose());
        kkt.view_mut((n, 0), (me, n)).copy_from(&qp.aeq);
        // tiny regularization keeps the factorization usable near the end
        for k in 0..n {
            kkt[(k, k)] += 1e-13;
        }
        for k in 0..me {
            kkt[(n + k, n + k)] -= 1e-13;
        }
        let lu = kkt.clone().lu();
        let kkt_solve = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
            let mut sol = lu.solve(rhs)?;
            let fix = lu.solve(&(rhs - &kkt * &sol))?;
            sol += fix;
            Some(sol)
        };

        let solve = |r_c: &DVector<f64>| -> Option<Direction> {
            // dz = W⁻¹(−r_c + Z r_in + Z Ain dx), dw = −r_in − Ain dx
            let t = (-r_c + z.component_mul(&r_in)).component_div(&w);
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&(-&r_d - qp.ain.tr_mul(&t)));
            rhs.rows_mut(n, me).copy_from(&-&r_eq);
            let sol = kkt_solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, me).into_owned();
            let adx = &qp.ain * &dx;
            let dz = &t + d.component_mul(&adx);
            let dw = -&r_in - adx;
            Some((dx, dy, dz, dw))
        };

        let r_aff = w.component_mul(&z);
        let Some((_, _, dz_a, dw_a)) = solve(&r_aff) else {
            return Err(OracleError::NotConverged(it));
        };
        let a_aff = step_to_boundary(&w, &dw_a).min(step_to_boundary(&z, &dz_a));
        let mu_aff = if mi > 0 {
            (&w + &dw_a * a_aff).dot(&(&z + &dz_a * a_aff)) / mi as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3) } else { 0.0 };
        let r_c = &r_aff + dw_a.component_mul(&dz_a) - DVector::from_element(mi, sigma * mu);
        let Some(mut dir) = solve(&r_c) else {
            return Err(OracleError::NotConverged(it));
        };
        let step = |(_, _, dz, dw): &Direction| {
            let alpha = (0.995 * step_to_boundary(&w, dw).min(step_to_boundary(&z, dz))).min(1.0);
            let gap = if mi > 0 {
                (&w + dw * alpha).dot(&(&z + dz * alpha)) / mi as f64
            } else {
                0.0
            };
            (alpha, gap)
        };
        let (mut alpha, gap) = step(&dir);
        if gap > mu {
            // the second-order correction backfired; take a plain centered step
            let r_c = &r_aff - DVector::from_element(mi, sigma.max(0.3) * mu);
            let Some(centered) = solve(&r_c) else {
                return Err(OracleError::NotConverged(it));
            };
            dir = centered;
            alpha = step(&dir).0;
        }
        let (dx, dy, dz, dw) = dir;
        x += &dx * alpha;
        y += &dy * alpha;
        z += &dz * alpha;
        w += &dw * alpha;
    }
    Err(OracleError::NotConverged(MAX_IPM_ITERATIONS))
}

/// Solves `min ½ xᵀHx + qᵀx` s.t. `A x = b` from the dense KKT system.
/// Returns `(x, μ)` with `Hx + q + Aᵀμ = 0`.
pub fn solve_equality_qp(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (n, m) = (h.nrows(), a.nrows());
    check_dim("KKT linear term", n, q.len())?;
    check_dim("KKT constraint columns", n, a.ncols())?;
    check_dim("KKT right-hand side", m, b.len())?;
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&-q);
    rhs.rows_mut(n, m).copy_from(b);
    let sol = kkt.lu().solve(&rhs).ok_or(Error::SingularSmallSystem)?;
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

/// `φ(y) = max(c − y, y − d, 0)` with infinite limits dropped.
fn violation(y: f64, c: f64, d: f64) -> f64 {
    let below = if c.is_finite() { c - y } else { 0.0 };
    let above = if d.is_finite() { y - d } else { 0.0 };
    below.max(above).max(0.0)
}

/// `φ(y1) − φ(y2)`, exact in `y1 − y2` when both points share a piece.
fn violation_difference(y1: f64, y2: f64, c: f64, d: f64) -> f64 {
    let piece = |y: f64| {
        if y > d {
            1
        } else if y < c {
            -1
        } else {
            0
        }
    };
    match (piece(y1), piece(y2)) {
        (1, 1) => y1 - y2,
        (-1, -1) => y2 - y1,
        (0, 0) => 0.0,
        _ => violation(y1, c, d) - violation(y2, c, d),
    }
}

/// `h(y1) − h(y2)` for `h(y) = ½y² − by + αφ(y)`, computed without the
/// cancellation of evaluating `h` twice.
fn prox_cost_difference(y1: f64, y2: f64, b: f64, c: f64, d: f64, alpha: f64) -> f64 {
    (y1 - y2) * (0.5 * (y1 + y2) - b) + alpha * violation_difference(y1, y2, c, d)
}

/// Minimizes `½y² − by + α max(c − y, y − d, 0)` by brute force: a uniform
/// grid of `resolution` points over a bracket that must contain the
/// minimizer, then golden-section refinement around the best grid point.
pub fn grid_prox_oracle(b: f64, c: f64, d: f64, alpha: f64, resolution: usize) -> Result<f64> {
    if !(c < d) || c.is_nan() || d.is_nan() {
        return Err(Error::InvalidInterval { lower: c, upper: d });
    }
    if !(alpha >= 0.0) || !b.is_finite() {
        return Err(Error::InvalidParameter(
            "prox needs finite b and α ≥ 0".into(),
        ));
    }
    let resolution = resolution.max(3);
    // the minimizer lies between the smallest and largest of b ± α, c, d
    let mut lo = b - alpha;
    let mut hi = b + alpha;
    if c.is_finite() {
        lo = lo.min(c);
        hi = hi.max(c);
    }
    if d.is_finite() {
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let pad = 1e-3 * (1.0 + hi - lo);
    lo -= pad;
    hi += pad;

    let step = (hi - lo) / (resolution - 1) as f64;
    let mut best = lo;
    for k in 1..resolution {
        let y = lo + step * k as f64;
        if prox_cost_difference(y, best, b, c, d, alpha) < 0.0 {
            best = y;
        }
    }

    // convex, so the minimizer is within one grid step of the best point
    let (mut a, mut e) = (best - step, best + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut y1 = e - g * (e - a);
    let mut y2 = a + g * (e - a);
    for _ in 0..200 {
        if e - a <= 1e-13 * (1.0 + best.abs()) {
            break;
        }
        if prox_cost_difference(y1, y2, b, c, d, alpha) <= 0.0 {
            e = y2;
            y2 = y1;
            y1 = e - g * (e - a);
        } else {
            a = y1;
            y1 = y2;
            y2 = a + g * (e - a);
        }
    }
    Ok(0.5 * (a + e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::benchmark;
    use nalgebra::dmatrix;

    fn no_inequalities(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }

    #[test]
    fn one_dimensional_unconstrained() {
        let (ain, bin) = no_inequalities(1);
        let qp = DenseQp {
            h: dmatrix![1.0],
            q: DVector::from_vec(vec![-1.0]),
            aeq: DMatrix::zeros(0, 1),
            beq: DVector::zeros(0),
            ain,
            bin,
            n_original: 1,
        };
        let sol = solve_dense_qp(&qp, 1e-10).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn box_constrained_minimum_hits_the_bound() {
        // min ½x² − 2x, 0 ≤ x ≤ 1
        let qp = DenseQp {
            h: dmatrix![1.0],
            q: DVector::from_vec(vec![-2.0]),
            aeq: DMatrix::zeros(0, 1),
            beq: DVector::zeros(0),
            ain: dmatrix![1.0; -1.0],
            bin: DVector::from_vec(vec![1.0, 0.0]),
            n_original: 1,
        };
        let sol = solve_dense_qp(&qp, 1e-10).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let qp = DenseQp {
            h: dmatrix![1.0],
            q: DVector::zeros(1),
            aeq: DMatrix::zeros(0, 1),
            beq: DVector::zeros(0),
            ain: dmatrix![1.0; -1.0],
            bin: DVector::from_vec(vec![-1.0, -1.0]),
            n_original: 1,
        };
        assert!(solve_dense_qp(&qp, 1e-10).is_err());
    }

    #[test]
    fn equality_qp_matches_ipm() {
        let h = dmatrix![4.0, 1.0, 0.0; 1.0, 3.0, 0.5; 0.0, 0.5, 2.0];
        let q = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let a = dmatrix![1.0, 1.0, 1.0];
        let b = DVector::from_vec(vec![1.0]);
        let (x, mu) = solve_equality_qp(&h, &q, &a, &b).unwrap();
        assert!((&h * &x + &q + a.tr_mul(&mu)).amax() < 1e-12);
        let (ain, bin) = no_inequalities(3);
        let qp = DenseQp {
            h,
            q,
            aeq: a,
            beq: b,
            ain,
            bin,
            n_original: 3,
        };
        let sol = solve_dense_qp(&qp, 1e-12).unwrap();
        assert!((sol.x - x).amax() < 1e-9);
    }

    #[test]
    fn grid_prox_without_weight_returns_b() {
        for b in [-2.0, 0.3, 5.0] {
            let y = grid_prox_oracle(b, -1.0, 1.0, 0.0, 1000).unwrap();
            assert!((y - b).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_prox_hand_values() {
        assert!((grid_prox_oracle(2.0, -1.0, 1.0, 0.5, 1000).unwrap() - 1.5).abs() < 1e-9);
        assert!((grid_prox_oracle(2.0, -1.0, 1.0, 1.5, 1000).unwrap() - 1.0).abs() < 1e-9);
        assert!(
            (grid_prox_oracle(0.2, f64::NEG_INFINITY, 1.0, 3.0, 1000).unwrap() - 0.2).abs() < 1e-9
        );
        assert!(grid_prox_oracle(0.0, 1.0, 1.0, 1.0, 100).is_err());
    }

    #[test]
    fn benchmark_slack_count() {
        let p = benchmark::problem();
        let r = benchmark::reference();
        let qp = build_slack_qp(&p, &r, &DVector::zeros(6)).unwrap();
        // every component of v except x0 and u0
        assert_eq!(qp.n_original, 128);
        assert_eq!(qp.n_slack(), 160 - 8);
        assert_eq!(qp.h.nrows(), 280);

        let hard = p.with_bounds(p.bounds.clone().hardened());
        assert_eq!(
            build_slack_qp(&hard, &r, &DVector::zeros(6))
                .unwrap()
                .n_slack(),
            0
        );
    }
}
