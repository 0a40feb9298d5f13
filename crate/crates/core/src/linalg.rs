//! Structured linear algebra for the ADMM z-update.
//!
//! Three storage types cover every matrix the solver factors:
//!
//! - [`BlockDiagonalMatrix`] for the stage-wise Hessian blocks,
//! - [`BandedMatrix`] for the projected constraint system,
//! - [`SmallDenseFactor`] for the low-dimensional Woodbury corrections.
//!
//! [`SemiBanded`] ties them together and solves `(Γ + U V) z = d` in three
//! steps: a structured solve with `Γ`, a small dense correction, and a second
//! structured solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Relative pivot guard: a Cholesky pivot at or below this fraction of the
/// largest diagonal entry is treated as a loss of definiteness.
pub const PIVOT_GUARD: f64 = 1e-14;

/// Anything that can apply `Γ⁻¹` to a vector in place.
pub trait LinearSolve {
    fn dim(&self) -> usize;

    /// Overwrites `rhs` with `Γ⁻¹ rhs`. Callers guarantee `rhs.len() == dim()`.
    fn solve_in_place(&self, rhs: &mut [f64]);

    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("linear solve", self.dim(), rhs.len())?;
        let mut out = rhs.clone();
        self.solve_in_place(out.as_mut_slice());
        Ok(out)
    }

    /// Applies `Γ⁻¹` to every column of `rhs`.
    fn solve_columns(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("linear solve", self.dim(), rhs.nrows())?;
        let mut out = rhs.clone();
        for mut col in out.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        Ok(out)
    }
}

/// Dense lower Cholesky factor of a symmetric matrix. Only the lower triangle
/// of `a` is read. On failure returns the index of the offending pivot.
pub fn dense_cholesky(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "dense_cholesky needs a square matrix");
    let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let guard = PIVOT_GUARD * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > guard) {
            return Err(j);
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = rhs` in place given a dense lower factor.
pub(crate) fn dense_cholesky_solve_in_place(l: &DMatrix<f64>, rhs: &mut [f64]) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[(i, k)] * rhs[k];
        }
        rhs[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for k in i + 1..n {
            s -= l[(k, i)] * rhs[k];
        }
        rhs[i] = s / l[(i, i)];
    }
}

/// Square dense blocks along the diagonal, possibly of unequal sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonalMatrix {
    blocks: Vec<DMatrix<f64>>,
    offsets: Vec<usize>,
    dim: usize,
}

impl BlockDiagonalMatrix {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidParameter(
                "block-diagonal matrix needs at least one block".into(),
            ));
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut dim = 0;
        for b in &blocks {
            check_dim("block-diagonal block", b.nrows(), b.ncols())?;
            offsets.push(dim);
            dim += b.nrows();
        }
        Ok(Self {
            blocks,
            offsets,
            dim,
        })
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("block-diagonal product", self.dim, x.len())?;
        let mut out = DVector::zeros(self.dim);
        for (b, &off) in self.blocks.iter().zip(&self.offsets) {
            let n = b.nrows();
            let y = b * x.rows(off, n);
            out.rows_mut(off, n).copy_from(&y);
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (b, &off) in self.blocks.iter().zip(&self.offsets) {
            m.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        }
        m
    }
}

/// Per-block lower Cholesky factors of a block-diagonal SPD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCholesky {
    factors: BlockDiagonalMatrix,
}

impl BlockCholesky {
    /// The lower factors, one per block, in the original block layout.
    pub fn factors(&self) -> &BlockDiagonalMatrix {
        &self.factors
    }
}

impl LinearSolve for BlockCholesky {
    fn dim(&self) -> usize {
        self.factors.dim
    }

    fn solve_in_place(&self, rhs: &mut [f64]) {
        for (l, &off) in self.factors.blocks.iter().zip(&self.factors.offsets) {
            dense_cholesky_solve_in_place(l, &mut rhs[off..off + l.nrows()]);
        }
    }
}

/// Factors every block independently. The error carries the index of the
/// first block that fails.
pub fn cholesky_block_diagonal(m: &BlockDiagonalMatrix) -> Result<BlockCholesky> {
    let blocks = m
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| dense_cholesky(b).map_err(|_| Error::NotPositiveDefinite { index: i }))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockCholesky {
        factors: BlockDiagonalMatrix {
            blocks,
            offsets: m.offsets.clone(),
            dim: m.dim,
        },
    })
}

/// Square banded matrix in diagonal-major storage.
///
/// Diagonal `k` (from `-lower` to `upper`) occupies `dim` slots starting at
/// `(k + lower) * dim`; slot `i` holds entry `(i, i + k)`. Slots that fall
/// outside the matrix stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    dim: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(dim: usize, lower: usize, upper: usize) -> Self {
        Self {
            dim,
            lower,
            upper,
            data: vec![0.0; (lower + upper + 1) * dim],
        }
    }

    /// Copies the band of a dense matrix; entries outside the band are dropped.
    pub fn from_dense(m: &DMatrix<f64>, lower: usize, upper: usize) -> Result<Self> {
        check_dim("banded from dense", m.nrows(), m.ncols())?;
        let n = m.nrows();
        let mut b = Self::zeros(n, lower, upper);
        for i in 0..n {
            let lo = i.saturating_sub(lower);
            let hi = (i + upper).min(n - 1);
            for j in lo..=hi {
                b.set(i, j, m[(i, j)]);
            }
        }
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower_bandwidth(&self) -> usize {
        self.lower
    }

    pub fn upper_bandwidth(&self) -> usize {
        self.upper
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.dim && j < self.dim && j + self.lower >= i && i + self.upper >= j
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        // (k + lower) * dim + i with k = j - i
        (j + self.lower - i) * self.dim + i
    }

    /// Entry `(i, j)`; zero outside the band.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.slot(i, j)]
        } else {
            0.0
        }
    }

    /// Panics if `(i, j)` lies outside the band.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(self.in_band(i, j), "({i}, {j}) is outside the band");
        let s = self.slot(i, j);
        self.data[s] = value;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        assert!(self.in_band(i, j), "({i}, {j}) is outside the band");
        let s = self.slot(i, j);
        self.data[s] += value;
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("banded product", self.dim, x.len())?;
        let n = self.dim;
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let lo = i.saturating_sub(self.lower);
            let hi = (i + self.upper).min(n - 1);
            y[i] = (lo..=hi).map(|j| self.data[self.slot(i, j)] * x[j]).sum();
        }
        Ok(y)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    /// Largest relative asymmetry within the band, `max |a_ij - a_ji| / max |a|`.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in i.saturating_sub(self.lower)..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / scale
    }
}

/// Which triangle of a lower banded factor to substitute with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangularSide {
    /// Solve `L y = d`.
    Lower,
    /// Solve `Lᵀ y = d`.
    Upper,
}

/// Banded Cholesky without pivoting. Only the lower band of `m` is read; the
/// factor keeps the same lower bandwidth and has no upper band.
pub fn cholesky_banded(m: &BandedMatrix) -> Result<BandedMatrix> {
    let n = m.dim;
    let p = m.lower;
    let max_diag = (0..n).map(|i| m.get(i, i).abs()).fold(0.0, f64::max);
    let guard = PIVOT_GUARD * max_diag;
    let mut l = BandedMatrix::zeros(n, p, 0);
    for j in 0..n {
        let k0 = j.saturating_sub(p);
        let mut pivot = m.get(j, j);
        for k in k0..j {
            let v = l.get(j, k);
            pivot -= v * v;
        }
        if !(pivot > guard) {
            return Err(Error::NotPositiveDefinite { index: j });
        }
        let ljj = pivot.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..(j + p + 1).min(n) {
            let mut s = m.get(i, j);
            for k in i.saturating_sub(p)..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

fn substitute_in_place(l: &BandedMatrix, y: &mut [f64], side: TriangularSide) {
    let n = l.dim;
    let p = l.lower;
    match side {
        TriangularSide::Lower => {
            for i in 0..n {
                let lo = i.saturating_sub(p);
                let mut s = y[i];
                for (k, yk) in y[lo..i].iter().enumerate() {
                    s -= l.data[l.slot(i, lo + k)] * yk;
                }
                y[i] = s / l.data[l.slot(i, i)];
            }
        }
        TriangularSide::Upper => {
            for i in (0..n).rev() {
                let hi = (i + p + 1).min(n);
                let mut s = y[i];
                for (k, yk) in y[i + 1..hi].iter().enumerate() {
                    s -= l.data[l.slot(i + 1 + k, i)] * yk;
                }
                y[i] = s / l.data[l.slot(i, i)];
            }
        }
    }
}

/// Forward (`Lower`) or backward (`Upper`, i.e. with `Lᵀ`) substitution with a
/// lower banded factor.
pub fn solve_triangular_banded(
    l: &BandedMatrix,
    d: &DVector<f64>,
    side: TriangularSide,
) -> Result<DVector<f64>> {
    check_dim("banded substitution", l.dim, d.len())?;
    if l.upper != 0 {
        return Err(Error::InvalidParameter(
            "triangular substitution needs a lower banded factor".into(),
        ));
    }
    let mut y = d.clone();
    substitute_in_place(l, y.as_mut_slice(), side);
    Ok(y)
}

/// Cholesky factor of a symmetric banded matrix, usable as a [`LinearSolve`].
#[derive(Debug, Clone, PartialEq)]
pub struct BandedCholesky {
    factor: BandedMatrix,
}

impl BandedCholesky {
    pub fn new(m: &BandedMatrix) -> Result<Self> {
        Ok(Self {
            factor: cholesky_banded(m)?,
        })
    }

    pub fn factor(&self) -> &BandedMatrix {
        &self.factor
    }
}

impl LinearSolve for BandedCholesky {
    fn dim(&self) -> usize {
        self.factor.dim
    }

    fn solve_in_place(&self, rhs: &mut [f64]) {
        substitute_in_place(&self.factor, rhs, TriangularSide::Lower);
        substitute_in_place(&self.factor, rhs, TriangularSide::Upper);
    }
}

/// Partial-pivoting LU of a small dense matrix.
#[derive(Debug, Clone)]
pub struct SmallDenseFactor {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    dim: usize,
}

impl SmallDenseFactor {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_dim("small dense factor", m.nrows(), m.ncols())?;
        let dim = m.nrows();
        let scale = m.amax();
        let lu = m.lu();
        let u = lu.u();
        let min_pivot = (0..dim)
            .map(|i| u[(i, i)].abs())
            .fold(f64::INFINITY, f64::min);
        if !(min_pivot > f64::EPSILON * scale.max(1.0) * dim as f64) {
            return Err(Error::SingularSmallSystem);
        }
        Ok(Self { lu, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve_in_place(&self, rhs: &mut DVector<f64>) -> Result<()> {
        check_dim("small dense solve", self.dim, rhs.len())?;
        if self.lu.solve_mut(rhs) {
            Ok(())
        } else {
            Err(Error::SingularSmallSystem)
        }
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.lu.try_inverse().ok_or(Error::SingularSmallSystem)
    }
}

/// Solves `(Γ + U V) z = d` with a prepared factor of `I + V Γ⁻¹ U`.
///
/// 1. `z₁ = Γ⁻¹ d`
/// 2. `z₂ = (I + V Γ⁻¹ U)⁻¹ V z₁`
/// 3. `z₃ = Γ⁻¹ U z₂`
///
/// and returns `z₁ − z₃`.
pub fn solve_semibanded<G: LinearSolve + ?Sized>(
    gamma: &G,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    small: &SmallDenseFactor,
    d: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = gamma.dim();
    check_dim("semi-banded rhs", n, d.len())?;
    check_dim("semi-banded U rows", n, u.nrows())?;
    check_dim("semi-banded V cols", n, v.ncols())?;
    check_dim("semi-banded U/V rank", u.ncols(), v.nrows())?;
    check_dim("semi-banded small system", u.ncols(), small.dim())?;

    let mut z1 = d.clone();
    gamma.solve_in_place(z1.as_mut_slice());
    let mut z2 = v * &z1;
    small.solve_in_place(&mut z2)?;
    let mut z3 = u * z2;
    gamma.solve_in_place(z3.as_mut_slice());
    z1 -= z3;
    Ok(z1)
}

/// A semi-banded matrix `Γ + U V` together with everything needed to solve
/// against it.
#[derive(Debug, Clone)]
pub struct SemiBanded<G> {
    gamma: G,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    gamma_inv_u: DMatrix<f64>,
    small: SmallDenseFactor,
}

impl<G: LinearSolve> SemiBanded<G> {
    /// Factors the small correction `I + V Γ⁻¹ U`.
    pub fn new(gamma: G, u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        check_dim("semi-banded U rows", gamma.dim(), u.nrows())?;
        check_dim("semi-banded V cols", gamma.dim(), v.ncols())?;
        check_dim("semi-banded U/V rank", u.ncols(), v.nrows())?;
        let gamma_inv_u = gamma.solve_columns(&u)?;
        let m = u.ncols();
        let small = SmallDenseFactor::new(DMatrix::identity(m, m) + &v * &gamma_inv_u)?;
        Ok(Self {
            gamma,
            u,
            v,
            gamma_inv_u,
            small,
        })
    }

    pub fn gamma(&self) -> &G {
        &self.gamma
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Cached `Γ⁻¹ U`.
    pub fn gamma_inv_u(&self) -> &DMatrix<f64> {
        &self.gamma_inv_u
    }

    pub fn small(&self) -> &SmallDenseFactor {
        &self.small
    }

    pub fn dim(&self) -> usize {
        self.gamma.dim()
    }

    pub fn solve(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        solve_semibanded(&self.gamma, &self.u, &self.v, &self.small, d)
    }
}
