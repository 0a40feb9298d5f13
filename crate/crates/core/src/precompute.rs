//! Offline factorizations for the equality-constrained z-update.
//!
//! With `P = H + ρEᵀE = Γ̂ + Û V̂` and `W = G P⁻¹ Gᵀ = Γ̃ + Ũ Ṽ`, where
//!
//! ```text
//! Γ̃ = G Γ̂⁻¹ Gᵀ
//! Ũ = −G Γ̂⁻¹ Û (I + V̂ Γ̂⁻¹ Û)⁻¹
//! Ṽ = V̂ Γ̂⁻¹ Gᵀ
//! ```
//!
//! every online solve with `P` or `W` reduces to block or banded
//! substitutions plus one small dense solve of size `2 (nx + nu)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};
use crate::linalg::{
    cholesky_block_diagonal, dense_cholesky_solve_in_place, BandedCholesky, BandedMatrix,
    BlockCholesky, LinearSolve, SemiBanded,
};
use crate::problem::{EqualityConstraints, Ingredients, PlantModel, ProblemData, Weights};

/// Everything the factorization depends on. Bounds, references, soft weights
/// and the current state are deliberately absent.
#[derive(Debug, Clone, PartialEq)]
struct CacheKey {
    model: PlantModel,
    weights: Weights,
    horizon: usize,
    rho: f64,
}

#[derive(Debug, Clone)]
pub struct FactorCache {
    key: CacheKey,
    g: EqualityConstraints,
    p_system: SemiBanded<BlockCholesky>,
    gamma_tilde: BandedMatrix,
    w_system: SemiBanded<BandedCholesky>,
}

impl FactorCache {
    /// True when `p` differs from the problem this cache was built for in a
    /// way that changes `P` or `W`.
    pub fn needs_rebuild(&self, p: &ProblemData) -> bool {
        self.key.model != p.model
            || self.key.weights != p.weights
            || self.key.horizon != p.horizon
            || self.key.rho != p.rho
    }

    pub fn gamma_hat_factor(&self) -> &BlockCholesky {
        self.p_system.gamma()
    }

    pub fn gamma_tilde(&self) -> &BandedMatrix {
        &self.gamma_tilde
    }

    pub fn gamma_tilde_factor(&self) -> &BandedCholesky {
        self.w_system.gamma()
    }

    pub fn u_tilde(&self) -> &DMatrix<f64> {
        self.w_system.u()
    }

    pub fn v_tilde(&self) -> &DMatrix<f64> {
        self.w_system.v()
    }

    /// Dimension of both small correction systems.
    pub fn small_dim(&self) -> usize {
        self.p_system.small().dim()
    }

    pub fn n_z(&self) -> usize {
        self.p_system.dim()
    }

    pub fn m_z(&self) -> usize {
        self.w_system.dim()
    }

    /// `P⁻¹ d`.
    pub fn solve_p(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("P solve", self.n_z(), d.len())?;
        self.p_system.solve(d)
    }

    /// `W⁻¹ d`.
    pub fn solve_w(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("W solve", self.m_z(), d.len())?;
        self.w_system.solve(d)
    }

    pub fn constraints(&self) -> &EqualityConstraints {
        &self.g
    }
}

/// Lower bandwidth of `G Γ̂⁻¹ Gᵀ`: row blocks of `G` only share a stage with
/// their neighbours, so the matrix is block tridiagonal in `nx × nx` blocks.
pub fn gamma_tilde_bandwidth(nx: usize) -> usize {
    2 * nx - 1
}

/// Forms `G Γ̂⁻¹ Gᵀ` block by block in symmetric banded storage.
fn assemble_gamma_tilde(
    g: &EqualityConstraints,
    factor: &BlockCholesky,
    nx: usize,
) -> Result<BandedMatrix> {
    let m_z = g.nrows();
    let bw = gamma_tilde_bandwidth(nx);
    let stages = factor.factors().blocks().len();

    // touching[j]: row blocks of G with a nonzero block in column block j
    let mut touching: Vec<Vec<(usize, DMatrix<f64>)>> = vec![Vec::new(); stages];
    for k in 0..g.row_blocks() {
        for (j, blk) in g.row_block(k) {
            touching[j].push((k, blk));
        }
    }

    let mut out = BandedMatrix::zeros(m_z, bw, bw);
    for (j, rows) in touching.iter().enumerate() {
        let l = factor.factors().block(j);
        // Γ̂_j⁻¹ G_kjᵀ for every row block k touching stage j
        let solved: Vec<DMatrix<f64>> = rows
            .iter()
            .map(|(_, blk)| {
                let mut x = blk.transpose();
                for mut col in x.column_iter_mut() {
                    dense_cholesky_solve_in_place(l, col.as_mut_slice());
                }
                x
            })
            .collect();
        for (k, gk) in rows {
            for ((kl, _), xl) in rows.iter().zip(&solved) {
                let prod = gk * xl;
                for r in 0..nx {
                    for c in 0..nx {
                        out.add(k * nx + r, kl * nx + c, prod[(r, c)]);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn g_mul_columns(g: &EqualityConstraints, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(g.nrows(), m.ncols());
    for (j, col) in m.column_iter().enumerate() {
        out.set_column(j, &g.mul_vec(&col.into_owned())?);
    }
    Ok(out)
}

/// Builds the offline factorizations for the given ingredients.
pub fn build_cache(ing: &Ingredients) -> Result<FactorCache> {
    let chol_hat = cholesky_block_diagonal(&ing.gamma_hat)?;
    let p_system = SemiBanded::new(chol_hat, ing.u_hat.clone(), ing.v_hat.clone())?;

    let gamma_tilde = assemble_gamma_tilde(&ing.g, p_system.gamma(), ing.nx)?;
    let chol_tilde = BandedCholesky::new(&gamma_tilde)?;

    // Ũ = −G (Γ̂⁻¹Û) (I + V̂Γ̂⁻¹Û)⁻¹
    let small_inv = p_system.small().inverse()?;
    let u_tilde = -(g_mul_columns(&ing.g, p_system.gamma_inv_u())? * small_inv);
    // Ṽ = V̂ Γ̂⁻¹ Gᵀ = (G Γ̂⁻¹ V̂ᵀ)ᵀ since Γ̂ is symmetric
    let gamma_inv_vt = p_system.gamma().solve_columns(&ing.v_hat.transpose())?;
    let v_tilde = g_mul_columns(&ing.g, &gamma_inv_vt)?.transpose();

    let w_system = SemiBanded::new(chol_tilde, u_tilde, v_tilde)?;

    Ok(FactorCache {
        key: CacheKey {
            model: ing.model.clone(),
            weights: ing.weights().clone(),
            horizon: ing.horizon,
            rho: ing.rho,
        },
        g: ing.g.clone(),
        p_system,
        gamma_tilde,
        w_system,
    })
}
