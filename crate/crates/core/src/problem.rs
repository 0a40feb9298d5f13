//! MPC-for-tracking problem data and the ADMM ingredients derived from it.
//!
//! Decision vector layout (`nb = nx + nu`):
//!
//! ```text
//! z = (x0, u0, x1, u1, ..., x_{N-1}, u_{N-1}, xs, us)          n_z = (N+1) nb
//! v = (x0, u0, y0, x1, u1, y1, ..., xs, us, ys)                 n_v = (N+1)(nb+ny)
//! ```
//!
//! The coupling constraint is `E z = v` with `E = diag(Ê, ..., Ê)` and
//! `Ê = [I 0; 0 I; C D]`. The dynamics and steady-state conditions are the
//! equality constraints `G z = b`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dense_cholesky, BlockDiagonalMatrix};

/// Discrete-time LTI plant `x⁺ = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl PlantModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let model = Self { a, b, c, d };
        model.check()?;
        Ok(model)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let (nx, nu, ny) = (self.nx(), self.nu(), self.ny());
        check_dim("A columns", nx, self.a.ncols())?;
        check_dim("B rows", nx, self.b.nrows())?;
        check_dim("C columns", nx, self.c.ncols())?;
        check_dim("D rows", ny, self.d.nrows())?;
        check_dim("D columns", nu, self.d.ncols())?;
        if nx == 0 || nu == 0 || ny == 0 {
            return Err(Error::InvalidParameter(
                "plant needs at least one state, input and output".into(),
            ));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn ny(&self) -> usize {
        self.c.nrows()
    }
}

/// Stage weights `Q`, `R` and offset weights `T`, `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl Weights {
    pub fn diagonal(q: &[f64], r: &[f64], t: &[f64], s: &[f64]) -> Self {
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        Self {
            q: diag(q),
            r: diag(r),
            t: diag(t),
            s: diag(s),
        }
    }

    fn named(&self) -> [(&'static str, &DMatrix<f64>); 4] {
        [
            ("Q", &self.q),
            ("R", &self.r),
            ("T", &self.t),
            ("S", &self.s),
        ]
    }
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    dense_cholesky(m).is_ok()
}

/// How a single bounded component enters the problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundMode {
    /// Box constraint enforced exactly.
    Hard,
    /// Violation penalised by `weight · max(v − upper, lower − v, 0)`.
    Soft(f64),
    /// Unbounded; the stored limits are ignored.
    Free,
}

/// Lower/upper limits for one stage vector, with a mode per component.
/// Infinite limits are allowed and never become active.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub modes: Vec<BoundMode>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, mode: BoundMode) -> Self {
        let modes = vec![mode; lower.len()];
        Self {
            lower,
            upper,
            modes,
        }
    }

    /// `-upper <= w <= upper`.
    pub fn symmetric(upper: &[f64], mode: BoundMode) -> Self {
        Self::new(upper.iter().map(|u| -u).collect(), upper.to_vec(), mode)
    }

    pub fn unbounded(n: usize) -> Self {
        Self::new(
            vec![f64::NEG_INFINITY; n],
            vec![f64::INFINITY; n],
            BoundMode::Hard,
        )
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn with_mode(mut self, mode: BoundMode) -> Self {
        self.modes = vec![mode; self.lower.len()];
        self
    }

    fn check_len(&self, n: usize, context: &'static str) -> Result<()> {
        check_dim(context, n, self.lower.len())?;
        check_dim(context, n, self.upper.len())?;
        check_dim(context, n, self.modes.len())
    }

    /// True when every non-free component has `lower < upper`.
    fn is_ordered(&self) -> bool {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(&self.modes)
            .all(|((l, u), m)| *m == BoundMode::Free || l < u)
    }
}

/// Per-stage box limits.
///
/// `x[i]`, `u[i]`, `y[i]` hold the limits at prediction stage `i` for
/// `i = 0..N`. The initial state `x[0]` is always treated as free and the
/// first input `u[0]` as hard, whatever their stored modes.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBounds {
    pub x: Vec<BoxBounds>,
    pub u: Vec<BoxBounds>,
    pub y: Vec<BoxBounds>,
    pub xs: BoxBounds,
    pub us: BoxBounds,
    pub ys: BoxBounds,
}

impl StageBounds {
    /// Same limits at every stage and on the artificial reference.
    pub fn constant(horizon: usize, x: BoxBounds, u: BoxBounds, y: BoxBounds) -> Self {
        Self {
            x: vec![x.clone(); horizon],
            u: vec![u.clone(); horizon],
            y: vec![y.clone(); horizon],
            xs: x,
            us: u,
            ys: y,
        }
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut BoxBounds> {
        self.x
            .iter_mut()
            .chain(self.u.iter_mut())
            .chain(self.y.iter_mut())
            .chain([&mut self.xs, &mut self.us, &mut self.ys])
    }

    /// Every component made hard.
    pub fn hardened(mut self) -> Self {
        for b in self.all_mut() {
            b.modes.iter_mut().for_each(|m| *m = BoundMode::Hard);
        }
        self
    }

    /// Every component softened with the same weight.
    pub fn softened(mut self, beta: f64) -> Self {
        for b in self.all_mut() {
            b.modes.iter_mut().for_each(|m| *m = BoundMode::Soft(beta));
        }
        self
    }

    /// Softens with one weight per component of `v_t`, in stacking order
    /// `(y0, x1, u1, y1, ..., xs, us, ys)`.
    pub fn softened_per_component(mut self, beta: &[f64]) -> Result<Self> {
        let horizon = self.x.len();
        let expected = self.y[0].len()
            + (1..horizon)
                .map(|i| self.x[i].len() + self.u[i].len() + self.y[i].len())
                .sum::<usize>()
            + self.xs.len()
            + self.us.len()
            + self.ys.len();
        check_dim("soft weights", expected, beta.len())?;
        let mut it = beta.iter();
        let mut apply = |b: &mut BoxBounds| {
            for m in b.modes.iter_mut() {
                *m = BoundMode::Soft(*it.next().unwrap());
            }
        };
        apply(&mut self.y[0]);
        for i in 1..horizon {
            apply(&mut self.x[i]);
            apply(&mut self.u[i]);
            apply(&mut self.y[i]);
        }
        apply(&mut self.xs);
        apply(&mut self.us);
        apply(&mut self.ys);
        Ok(self)
    }
}

/// Everything defining one soft-constrained MPCT problem except the current
/// state and the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    pub model: PlantModel,
    pub weights: Weights,
    pub horizon: usize,
    pub bounds: StageBounds,
    pub rho: f64,
    pub eps_p: f64,
    pub eps_d: f64,
    pub max_iterations: usize,
}

pub const DEFAULT_MAX_ITERATIONS: usize = 5000;

impl ProblemData {
    pub fn nx(&self) -> usize {
        self.model.nx()
    }

    pub fn nu(&self) -> usize {
        self.model.nu()
    }

    pub fn ny(&self) -> usize {
        self.model.ny()
    }

    pub fn n_z(&self) -> usize {
        (self.horizon + 1) * (self.nx() + self.nu())
    }

    pub fn n_v(&self) -> usize {
        (self.horizon + 1) * (self.nx() + self.nu() + self.ny())
    }

    pub fn m_z(&self) -> usize {
        (self.horizon + 2) * self.nx()
    }

    pub fn with_bounds(&self, bounds: StageBounds) -> Self {
        Self {
            bounds,
            ..self.clone()
        }
    }
}

/// Steady-state target `(x_r, u_r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePair {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

impl ReferencePair {
    pub fn new(x: &[f64], u: &[f64]) -> Self {
        Self {
            x: DVector::from_column_slice(x),
            u: DVector::from_column_slice(u),
        }
    }

    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            x: DVector::zeros(nx),
            u: DVector::zeros(nu),
        }
    }
}

/// One violated invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Diagnostic {
    DimensionMismatch(String),
    NotPositiveDefinite(String),
    InvalidBounds(String),
    HorizonTooShort(usize),
    /// More equality constraints than decision variables.
    Overdetermined {
        rows: usize,
        cols: usize,
    },
    NonPositiveRho(f64),
    NonPositiveTolerance(String),
    InvalidSoftWeight(String),
    ZeroMaxIterations,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::DimensionMismatch(s) => write!(f, "dimension mismatch: {s}"),
            Diagnostic::NotPositiveDefinite(s) => {
                write!(f, "{s} is not symmetric positive definite")
            }
            Diagnostic::InvalidBounds(s) => write!(f, "bounds on {s} are not ordered"),
            Diagnostic::HorizonTooShort(n) => write!(f, "horizon N = {n} must be at least 2"),
            Diagnostic::Overdetermined { rows, cols } => write!(
                f,
                "{rows} equality constraints exceed {cols} decision variables; increase N or nu"
            ),
            Diagnostic::NonPositiveRho(r) => write!(f, "rho = {r} must be positive"),
            Diagnostic::NonPositiveTolerance(s) => write!(f, "{s} must be positive"),
            Diagnostic::InvalidSoftWeight(s) => {
                write!(f, "soft weight on {s} must be finite and non-negative")
            }
            Diagnostic::ZeroMaxIterations => write!(f, "max_iterations must be positive"),
        }
    }
}

/// Checks every invariant of [`ProblemData`]. Returns an empty list when the
/// problem is well posed.
pub fn validate(p: &ProblemData) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if let Err(e) = p.model.check() {
        out.push(Diagnostic::DimensionMismatch(format!("plant: {e}")));
        return out;
    }
    let (nx, nu, ny) = (p.nx(), p.nu(), p.ny());

    let expected = [nx, nu, nx, nu];
    for ((name, m), n) in p.weights.named().into_iter().zip(expected) {
        if m.nrows() != n || m.ncols() != n {
            out.push(Diagnostic::DimensionMismatch(format!(
                "{name} is {}x{}, expected {n}x{n}",
                m.nrows(),
                m.ncols()
            )));
        } else if !is_spd(m) {
            out.push(Diagnostic::NotPositiveDefinite(name.to_string()));
        }
    }

    if p.horizon < 2 {
        out.push(Diagnostic::HorizonTooShort(p.horizon));
    } else {
        let rows = (p.horizon + 2) * nx;
        let cols = (p.horizon + 1) * (nx + nu);
        if rows > cols {
            out.push(Diagnostic::Overdetermined { rows, cols });
        }
    }
    if !(p.rho > 0.0 && p.rho.is_finite()) {
        out.push(Diagnostic::NonPositiveRho(p.rho));
    }
    for (name, eps) in [("eps_p", p.eps_p), ("eps_d", p.eps_d)] {
        if !(eps > 0.0 && eps.is_finite()) {
            out.push(Diagnostic::NonPositiveTolerance(name.into()));
        }
    }
    if p.max_iterations == 0 {
        out.push(Diagnostic::ZeroMaxIterations);
    }

    let b = &p.bounds;
    for (name, list) in [("x", &b.x), ("u", &b.u), ("y", &b.y)] {
        if list.len() != p.horizon {
            out.push(Diagnostic::DimensionMismatch(format!(
                "{name} bounds cover {} stages, expected {}",
                list.len(),
                p.horizon
            )));
        }
    }
    let mut labelled: Vec<(String, &BoxBounds, usize)> = Vec::new();
    for (i, bb) in b.x.iter().enumerate().skip(1) {
        labelled.push((format!("x{i}"), bb, nx));
    }
    for (i, bb) in b.u.iter().enumerate() {
        labelled.push((format!("u{i}"), bb, nu));
    }
    for (i, bb) in b.y.iter().enumerate() {
        labelled.push((format!("y{i}"), bb, ny));
    }
    labelled.push(("xs".into(), &b.xs, nx));
    labelled.push(("us".into(), &b.us, nu));
    labelled.push(("ys".into(), &b.ys, ny));
    for (label, bb, n) in labelled {
        if bb.check_len(n, "bounds").is_err() {
            out.push(Diagnostic::DimensionMismatch(format!(
                "{label} bounds have length {}, expected {n}",
                bb.len()
            )));
            continue;
        }
        let forced_hard = label == "u0";
        let ordered = if forced_hard {
            bb.lower.iter().zip(&bb.upper).all(|(l, u)| l < u)
        } else {
            bb.is_ordered()
        };
        if !ordered {
            out.push(Diagnostic::InvalidBounds(label.clone()));
        }
        if !forced_hard
            && bb
                .modes
                .iter()
                .any(|m| matches!(m, BoundMode::Soft(w) if !(w.is_finite() && *w >= 0.0)))
        {
            out.push(Diagnostic::InvalidSoftWeight(label));
        }
    }
    out
}

pub(crate) fn ensure_valid(p: &ProblemData) -> Result<()> {
    let diags = validate(p);
    if diags.is_empty() {
        return Ok(());
    }
    // keep the most specific error variant for the common single-cause cases
    match &diags[0] {
        Diagnostic::NotPositiveDefinite(name) => {
            Err(Error::WeightNotPositiveDefinite(name.clone()))
        }
        Diagnostic::InvalidBounds(label) => Err(Error::InvalidBounds(label.clone())),
        _ => Err(Error::InvalidProblem(
            diags
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}

/// Bound vectors over all `n_v` components of `v`, in stacking order.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub modes: Vec<BoundMode>,
}

impl StackedBounds {
    /// Soft-constraint penalty `Σ β_j max(v_j − upper_j, lower_j − v_j, 0)`
    /// over the soft components.
    pub fn penalty(&self, v: &DVector<f64>) -> f64 {
        self.modes
            .iter()
            .enumerate()
            .filter_map(|(j, m)| match m {
                BoundMode::Soft(beta) => {
                    let viol = (v[j] - self.upper[j]).max(self.lower[j] - v[j]).max(0.0);
                    Some(beta * viol)
                }
                _ => None,
            })
            .sum()
    }

    /// Largest violation of a hard component.
    pub fn hard_violation(&self, v: &DVector<f64>) -> f64 {
        self.modes
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == BoundMode::Hard)
            .map(|(j, _)| (v[j] - self.upper[j]).max(self.lower[j] - v[j]).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Stacks the per-stage limits into `v̄`, `v̲` and per-component modes.
pub fn stack_bounds(p: &ProblemData) -> Result<StackedBounds> {
    let (nx, nu, ny) = (p.nx(), p.nu(), p.ny());
    let b = &p.bounds;
    check_dim("x bound stages", p.horizon, b.x.len())?;
    check_dim("u bound stages", p.horizon, b.u.len())?;
    check_dim("y bound stages", p.horizon, b.y.len())?;

    let n_v = p.n_v();
    let mut lower = Vec::with_capacity(n_v);
    let mut upper = Vec::with_capacity(n_v);
    let mut modes = Vec::with_capacity(n_v);

    let mut push =
        |bb: &BoxBounds, n: usize, label: String, force: Option<BoundMode>| -> Result<()> {
            bb.check_len(n, "stage bounds")?;
            for j in 0..n {
                let mode = force.unwrap_or(bb.modes[j]);
                match mode {
                    BoundMode::Free => {
                        lower.push(f64::NEG_INFINITY);
                        upper.push(f64::INFINITY);
                    }
                    _ => {
                        if !(bb.lower[j] < bb.upper[j]) {
                            return Err(Error::InvalidBounds(label.clone()));
                        }
                        lower.push(bb.lower[j]);
                        upper.push(bb.upper[j]);
                    }
                }
                modes.push(mode);
            }
            Ok(())
        };

    push(&b.x[0], nx, "x0".into(), Some(BoundMode::Free))?;
    push(&b.u[0], nu, "u0".into(), Some(BoundMode::Hard))?;
    push(&b.y[0], ny, "y0".into(), None)?;
    for i in 1..p.horizon {
        push(&b.x[i], nx, format!("x{i}"), None)?;
        push(&b.u[i], nu, format!("u{i}"), None)?;
        push(&b.y[i], ny, format!("y{i}"), None)?;
    }
    push(&b.xs, nx, "xs".into(), None)?;
    push(&b.us, nu, "us".into(), None)?;
    push(&b.ys, ny, "ys".into(), None)?;

    Ok(StackedBounds {
        lower: DVector::from_vec(lower),
        upper: DVector::from_vec(upper),
        modes,
    })
}

/// The equality constraints `G z = b` stored by stage blocks.
///
/// Row block 0 is `[I 0]` on `(x0, u0)`. Row block `k = 1..=N` is
/// `[A B]` on stage `k-1` and `[-I 0]` on stage `k` (stage `N` being
/// `(xs, us)`). Row block `N+1` is `[(A - I) B]` on `(xs, us)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualityConstraints {
    nx: usize,
    nu: usize,
    horizon: usize,
    ab: DMatrix<f64>,
    ab_steady: DMatrix<f64>,
}

impl EqualityConstraints {
    pub fn new(model: &PlantModel, horizon: usize) -> Self {
        let (nx, nu) = (model.nx(), model.nu());
        let mut ab = DMatrix::zeros(nx, nx + nu);
        ab.view_mut((0, 0), (nx, nx)).copy_from(&model.a);
        ab.view_mut((0, nx), (nx, nu)).copy_from(&model.b);
        let mut ab_steady = ab.clone();
        for i in 0..nx {
            ab_steady[(i, i)] -= 1.0;
        }
        Self {
            nx,
            nu,
            horizon,
            ab,
            ab_steady,
        }
    }

    pub fn nrows(&self) -> usize {
        (self.horizon + 2) * self.nx
    }

    pub fn ncols(&self) -> usize {
        (self.horizon + 1) * (self.nx + self.nu)
    }

    pub fn row_blocks(&self) -> usize {
        self.horizon + 2
    }

    /// Nonzero blocks `(column block, nx × nb block)` of row block `k`.
    pub fn row_block(&self, k: usize) -> Vec<(usize, DMatrix<f64>)> {
        let (nx, nb) = (self.nx, self.nx + self.nu);
        let sel = |sign: f64| {
            let mut m = DMatrix::zeros(nx, nb);
            for i in 0..nx {
                m[(i, i)] = sign;
            }
            m
        };
        if k == 0 {
            vec![(0, sel(1.0))]
        } else if k <= self.horizon {
            vec![(k - 1, self.ab.clone()), (k, sel(-1.0))]
        } else {
            vec![(self.horizon, self.ab_steady.clone())]
        }
    }

    pub fn mul_vec(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("G z", self.ncols(), z.len())?;
        let (nx, nb) = (self.nx, self.nx + self.nu);
        let mut out = DVector::zeros(self.nrows());
        out.rows_mut(0, nx).copy_from(&z.rows(0, nx));
        for k in 1..=self.horizon {
            let prev = &self.ab * z.rows((k - 1) * nb, nb);
            let mut row = out.rows_mut(k * nx, nx);
            row.copy_from(&prev);
            row -= z.rows(k * nb, nx);
        }
        let last = &self.ab_steady * z.rows(self.horizon * nb, nb);
        out.rows_mut((self.horizon + 1) * nx, nx).copy_from(&last);
        Ok(out)
    }

    pub fn mul_transpose_vec(&self, mu: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("Gᵀ mu", self.nrows(), mu.len())?;
        let (nx, nb) = (self.nx, self.nx + self.nu);
        let mut out = DVector::zeros(self.ncols());
        {
            let mut head = out.rows_mut(0, nx);
            head += mu.rows(0, nx);
        }
        for k in 1..=self.horizon {
            let mk = mu.rows(k * nx, nx);
            let contrib = self.ab.tr_mul(&mk);
            let mut prev = out.rows_mut((k - 1) * nb, nb);
            prev += contrib;
            let mut cur = out.rows_mut(k * nb, nx);
            cur -= mk;
        }
        let contrib = self.ab_steady.tr_mul(&mu.rows((self.horizon + 1) * nx, nx));
        let mut last = out.rows_mut(self.horizon * nb, nb);
        last += contrib;
        Ok(out)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let nb = self.nx + self.nu;
        let mut g = DMatrix::zeros(self.nrows(), self.ncols());
        for k in 0..self.row_blocks() {
            for (j, blk) in self.row_block(k) {
                g.view_mut((k * self.nx, j * nb), (self.nx, nb))
                    .copy_from(&blk);
            }
        }
        g
    }
}

/// The problem in ADMM form: `min ½ zᵀHz + qᵀz + g(v)` s.t. `Gz = b`, `Ez = v`.
///
/// `H` is never stored densely. It is represented as
/// `H = Γ̂ + Û V̂ − ρ EᵀE` where `Γ̂` is block diagonal and `Û V̂` carries the
/// coupling between every stage and the artificial reference.
#[derive(Debug, Clone)]
pub struct Ingredients {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    pub horizon: usize,
    pub rho: f64,
    pub model: PlantModel,
    pub g: EqualityConstraints,
    /// `Ê = [I 0; 0 I; C D]`, repeated along the diagonal of `E`.
    pub e_block: DMatrix<f64>,
    pub gamma_hat: BlockDiagonalMatrix,
    pub u_hat: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub q: DVector<f64>,
    pub bounds: StackedBounds,
    pub b_template: DVector<f64>,
    weights: Weights,
}

impl Ingredients {
    pub fn nb(&self) -> usize {
        self.nx + self.nu
    }

    pub fn nvb(&self) -> usize {
        self.nx + self.nu + self.ny
    }

    pub fn n_z(&self) -> usize {
        (self.horizon + 1) * self.nb()
    }

    pub fn n_v(&self) -> usize {
        (self.horizon + 1) * self.nvb()
    }

    pub fn m_z(&self) -> usize {
        (self.horizon + 2) * self.nx
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// `q = −(0, ..., 0, T x_r, S u_r)`.
    pub fn linear_cost(&self, reference: &ReferencePair) -> Result<DVector<f64>> {
        check_dim("reference state", self.nx, reference.x.len())?;
        check_dim("reference input", self.nu, reference.u.len())?;
        let mut q = DVector::zeros(self.n_z());
        let off = self.horizon * self.nb();
        q.rows_mut(off, self.nx)
            .copy_from(&-(&self.weights.t * &reference.x));
        q.rows_mut(off + self.nx, self.nu)
            .copy_from(&-(&self.weights.s * &reference.u));
        Ok(q)
    }

    /// `E z`, stage by stage: `(x_i, u_i, C x_i + D u_i)`.
    pub fn e_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let (nb, nvb) = (self.nb(), self.nvb());
        let mut out = DVector::zeros(self.n_v());
        for i in 0..=self.horizon {
            let blk = &self.e_block * z.rows(i * nb, nb);
            out.rows_mut(i * nvb, nvb).copy_from(&blk);
        }
        out
    }

    /// `Eᵀ w`.
    pub fn e_transpose_mul(&self, w: &DVector<f64>) -> DVector<f64> {
        let (nb, nvb) = (self.nb(), self.nvb());
        let mut out = DVector::zeros(self.n_z());
        for i in 0..=self.horizon {
            let blk = self.e_block.tr_mul(&w.rows(i * nvb, nvb));
            out.rows_mut(i * nb, nb).copy_from(&blk);
        }
        out
    }

    /// Dense `E`, for tests and oracles.
    pub fn e_dense(&self) -> DMatrix<f64> {
        let (nb, nvb) = (self.nb(), self.nvb());
        let mut e = DMatrix::zeros(self.n_v(), self.n_z());
        for i in 0..=self.horizon {
            e.view_mut((i * nvb, i * nb), (nvb, nb))
                .copy_from(&self.e_block);
        }
        e
    }

    /// Dense `H = Γ̂ + Û V̂ − ρ EᵀE`.
    pub fn h_dense(&self) -> DMatrix<f64> {
        let e = self.e_dense();
        self.gamma_hat.to_dense() + &self.u_hat * &self.v_hat - e.transpose() * e * self.rho
    }

    /// `b = (x(t), 0, ..., 0)`.
    pub fn assemble_b(&self, x_current: &DVector<f64>) -> Result<DVector<f64>> {
        assemble_b(self, x_current)
    }

    /// Tracking cost `½ Σ ‖x_i − x_s‖²_Q + ‖u_i − u_s‖²_R + ½ ‖x_s − x_r‖²_T + ½ ‖u_s − u_r‖²_S`.
    /// Equals `½ zᵀHz + qᵀz` plus the constant `½ (x_rᵀT x_r + u_rᵀS u_r)`.
    pub fn tracking_cost(&self, z: &DVector<f64>, reference: &ReferencePair) -> f64 {
        let (nx, nu, nb) = (self.nx, self.nu, self.nb());
        let off = self.horizon * nb;
        let xs = z.rows(off, nx);
        let us = z.rows(off + nx, nu);
        let w = &self.weights;
        let quad = |m: &DMatrix<f64>, d: DVector<f64>| d.dot(&(m * &d));
        let mut cost = 0.0;
        for i in 0..self.horizon {
            cost += quad(&w.q, z.rows(i * nb, nx) - xs);
            cost += quad(&w.r, z.rows(i * nb + nx, nu) - us);
        }
        cost += quad(&w.t, xs - &reference.x);
        cost += quad(&w.s, us - &reference.u);
        0.5 * cost
    }
}

/// Builds every ADMM ingredient for `p`, with `q` evaluated at `reference`.
///
/// Works for any horizon `N ≥ 1`; [`validate`] additionally demands `N ≥ 2`
/// before a full solve.
pub fn assemble_ingredients(p: &ProblemData, reference: &ReferencePair) -> Result<Ingredients> {
    p.model.check()?;
    let (nx, nu, ny) = (p.nx(), p.nu(), p.ny());
    let nb = nx + nu;
    let n = p.horizon;
    if n == 0 {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    let w = &p.weights;
    for ((name, m), dim) in w.named().into_iter().zip([nx, nu, nx, nu]) {
        check_dim("weight rows", dim, m.nrows())?;
        check_dim("weight columns", dim, m.ncols())?;
        if !is_spd(m) {
            return Err(Error::WeightNotPositiveDefinite(name.into()));
        }
    }

    let mut e_block = DMatrix::zeros(nb + ny, nb);
    for i in 0..nb {
        e_block[(i, i)] = 1.0;
    }
    e_block.view_mut((nb, 0), (ny, nx)).copy_from(&p.model.c);
    e_block.view_mut((nb, nx), (ny, nu)).copy_from(&p.model.d);
    let ete = e_block.tr_mul(&e_block) * p.rho;

    let stage_diag = block_diag2(&w.q, &w.r);
    let steady_diag = block_diag2(&(&w.q * n as f64 + &w.t), &(&w.r * n as f64 + &w.s));
    let mut blocks = vec![&stage_diag + &ete; n];
    blocks.push(&steady_diag + &ete);
    let gamma_hat = BlockDiagonalMatrix::new(blocks)?;

    // Y = −1ᵀ_N ⊗ diag(Q, R); Û = [Yᵀ 0; 0 I], V̂ = [0 I; Y 0].
    let n_z = (n + 1) * nb;
    let mut u_hat = DMatrix::zeros(n_z, 2 * nb);
    let mut v_hat = DMatrix::zeros(2 * nb, n_z);
    for i in 0..n {
        u_hat
            .view_mut((i * nb, 0), (nb, nb))
            .copy_from(&-&stage_diag);
        v_hat
            .view_mut((nb, i * nb), (nb, nb))
            .copy_from(&-&stage_diag);
    }
    for i in 0..nb {
        u_hat[(n * nb + i, nb + i)] = 1.0;
        v_hat[(i, n * nb + i)] = 1.0;
    }

    let bounds = stack_bounds(p)?;
    let mut ing = Ingredients {
        nx,
        nu,
        ny,
        horizon: n,
        rho: p.rho,
        model: p.model.clone(),
        g: EqualityConstraints::new(&p.model, n),
        e_block,
        gamma_hat,
        u_hat,
        v_hat,
        q: DVector::zeros(n_z),
        bounds,
        b_template: DVector::zeros((n + 2) * nx),
        weights: w.clone(),
    };
    ing.q = ing.linear_cost(reference)?;
    Ok(ing)
}

fn block_diag2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut m = DMatrix::zeros(na + nb, na + nb);
    m.view_mut((0, 0), (na, na)).copy_from(a);
    m.view_mut((na, na), (nb, nb)).copy_from(b);
    m
}

/// `b = (x(t), 0, ..., 0)` of length `m_z`.
pub fn assemble_b(ing: &Ingredients, x_current: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("current state", ing.nx, x_current.len())?;
    let mut b = ing.b_template.clone();
    b.rows_mut(0, ing.nx).copy_from(x_current);
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    pub(crate) fn toy_problem(a: f64, b: f64, horizon: usize, rho: f64) -> ProblemData {
        let model = PlantModel::new(
            dmatrix![a],
            dmatrix![b],
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let one = BoxBounds::unbounded(1);
        ProblemData {
            model,
            weights: Weights::diagonal(&[1.0], &[1.0], &[1.0], &[1.0]),
            horizon,
            bounds: StageBounds::constant(horizon, one.clone(), one.clone(), one),
            rho,
            eps_p: 1e-4,
            eps_d: 1e-4,
            max_iterations: 100,
        }
    }

    #[test]
    fn toy_hessian_and_constraints() {
        let p = toy_problem(0.5, 2.0, 1, 0.0);
        let ing = assemble_ingredients(&p, &ReferencePair::zeros(1, 1)).unwrap();
        let h = dmatrix![
            1.0, 0.0, -1.0, 0.0;
            0.0, 1.0, 0.0, -1.0;
            -1.0, 0.0, 2.0, 0.0;
            0.0, -1.0, 0.0, 2.0
        ];
        assert!((ing.h_dense() - h).amax() < 1e-14);
        let g = dmatrix![
            1.0, 0.0, 0.0, 0.0;
            0.5, 2.0, -1.0, 0.0;
            0.0, 0.0, -0.5, 2.0
        ];
        assert_eq!(ing.g.to_dense(), g);
        assert_eq!(ing.m_z(), 3);
    }

    #[test]
    fn g_products_match_dense() {
        let p = toy_problem(0.9, 0.3, 4, 1.0);
        let ing = assemble_ingredients(&p, &ReferencePair::zeros(1, 1)).unwrap();
        let gd = ing.g.to_dense();
        let z = DVector::from_fn(ing.n_z(), |i, _| (i as f64 * 0.37).sin());
        let mu = DVector::from_fn(ing.m_z(), |i, _| (i as f64 * 0.91).cos());
        assert!((ing.g.mul_vec(&z).unwrap() - &gd * &z).amax() < 1e-14);
        assert!((ing.g.mul_transpose_vec(&mu).unwrap() - gd.transpose() * &mu).amax() < 1e-14);
    }

    #[test]
    fn assemble_b_places_state_first() {
        let mut p = toy_problem(1.0, 1.0, 4, 1.0);
        p.model = PlantModel::new(
            DMatrix::identity(2, 2),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 2, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        p.weights = Weights::diagonal(&[1.0, 1.0], &[1.0], &[1.0, 1.0], &[1.0]);
        let two = BoxBounds::unbounded(2);
        let one = BoxBounds::unbounded(1);
        p.horizon = 1;
        p.bounds = StageBounds::constant(1, two, one.clone(), one);
        let ing = assemble_ingredients(&p, &ReferencePair::zeros(2, 1)).unwrap();
        assert_eq!(ing.m_z(), 6);
        let b = assemble_b(&ing, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(b.as_slice(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            assemble_b(&ing, &DVector::zeros(2)).unwrap(),
            DVector::zeros(6)
        );
        assert!(assemble_b(&ing, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn stacking_order_for_unit_dimensions() {
        let mut p = toy_problem(1.0, 1.0, 1, 1.0);
        let mk = |lo: f64, hi: f64| BoxBounds::new(vec![lo], vec![hi], BoundMode::Soft(3.0));
        p.bounds = StageBounds {
            x: vec![mk(-1.0, 1.0)],
            u: vec![mk(-2.0, 2.0)],
            y: vec![mk(-3.0, 3.0)],
            xs: mk(-4.0, 4.0),
            us: mk(-5.0, 5.0),
            ys: mk(-6.0, 6.0),
        };
        let s = stack_bounds(&p).unwrap();
        assert_eq!(s.modes.len(), 6);
        assert_eq!(s.upper[0], f64::INFINITY);
        assert_eq!(s.modes[0], BoundMode::Free);
        assert_eq!(s.modes[1], BoundMode::Hard);
        assert_eq!(&s.upper.as_slice()[1..], &[2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(s.modes[2..].iter().all(|m| *m == BoundMode::Soft(3.0)));
    }

    #[test]
    fn stacking_rejects_inverted_bounds() {
        let mut p = toy_problem(1.0, 1.0, 2, 1.0);
        p.bounds.xs = BoxBounds::new(vec![1.0], vec![0.0], BoundMode::Hard);
        assert_eq!(stack_bounds(&p), Err(Error::InvalidBounds("xs".into())));
    }

    #[test]
    fn validate_flags_each_violation() {
        let mut p = toy_problem(1.0, 1.0, 2, 1.0);
        assert!(validate(&p).is_empty());
        p.weights.q = dmatrix![0.0];
        assert_eq!(
            validate(&p),
            vec![Diagnostic::NotPositiveDefinite("Q".into())]
        );
        p.weights.q = dmatrix![1.0];
        p.bounds.u[0] = BoxBounds::new(vec![1.0], vec![0.0], BoundMode::Hard);
        assert_eq!(validate(&p), vec![Diagnostic::InvalidBounds("u0".into())]);
        p.bounds.u[0] = BoxBounds::unbounded(1);
        p.horizon = 1;
        p.bounds = StageBounds::constant(
            1,
            BoxBounds::unbounded(1),
            BoxBounds::unbounded(1),
            BoxBounds::unbounded(1),
        );
        p.rho = 0.0;
        assert_eq!(
            validate(&p),
            vec![
                Diagnostic::HorizonTooShort(1),
                Diagnostic::NonPositiveRho(0.0)
            ]
        );
    }

    #[test]
    fn validate_flags_more_rows_than_variables() {
        let model = PlantModel::new(
            DMatrix::identity(4, 4) * 0.5,
            DMatrix::from_element(4, 1, 1.0),
            DMatrix::from_element(1, 4, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let p = ProblemData {
            model,
            weights: Weights {
                q: DMatrix::identity(4, 4),
                r: DMatrix::identity(1, 1),
                t: DMatrix::identity(4, 4),
                s: DMatrix::identity(1, 1),
            },
            horizon: 2,
            bounds: StageBounds::constant(
                2,
                BoxBounds::unbounded(4),
                BoxBounds::unbounded(1),
                BoxBounds::unbounded(1),
            ),
            rho: 1.0,
            eps_p: 1e-4,
            eps_d: 1e-4,
            max_iterations: 10,
        };
        assert_eq!(
            validate(&p),
            vec![Diagnostic::Overdetermined { rows: 16, cols: 15 }]
        );
    }

    #[test]
    fn soft_penalty_counts_only_soft_components() {
        let s = StackedBounds {
            lower: DVector::from_vec(vec![-1.0, -1.0, -1.0]),
            upper: DVector::from_vec(vec![1.0, 1.0, 1.0]),
            modes: vec![BoundMode::Soft(2.0), BoundMode::Hard, BoundMode::Soft(0.5)],
        };
        let v = DVector::from_vec(vec![1.5, 3.0, -3.0]);
        assert!((s.penalty(&v) - (2.0 * 0.5 + 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(s.hard_violation(&v), 2.0);
    }
}
