//! Baseline AO-ADMM solver for `min ½‖W Hᵀ − V‖²_F` with `W, H ≥ 0`.
//!
//! Each nonnegative least-squares subproblem is solved inexactly by a few
//! ADMM iterations with an auxiliary nonnegative copy `H̃` and a scaled
//! dual `U`. The W-update is the H-update applied to `(H, Vᵀ)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{jacobi_svd, Cholesky};
use crate::matrix::DenseMatrix;
use crate::models::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rho: f64,
    pub inner_iters: usize,
    pub outer_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            inner_iters: 5,
            outer_iters: 5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidConfig(format!("rho must be positive, got {}", self.rho)));
        }
        if self.inner_iters == 0 {
            return Err(Error::InvalidConfig("inner_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// `FᵀF + ρI` for the fixed factor `F`.
pub fn gram_matrix(fixed: &DenseMatrix, rho: f64) -> DenseMatrix {
    let r = fixed.cols();
    fixed
        .transpose()
        .matmul_unchecked(fixed)
        .add(&DenseMatrix::identity(r).scale(rho))
        .expect("square gram")
}

/// ADMM state for one factor's subproblem, warm-startable across calls.
#[derive(Clone, Debug)]
pub struct AdmmState {
    /// Unconstrained primal iterate.
    pub h: DenseMatrix,
    /// Auxiliary copy, always elementwise nonnegative.
    pub h_aux: DenseMatrix,
    /// Scaled dual variable.
    pub dual: DenseMatrix,
    gram_chol: Cholesky,
}

impl AdmmState {
    /// Starts from `init`: the auxiliary variable takes its nonnegative part
    /// and the dual is zero. `fixed` is the factor held constant.
    pub fn warm(fixed: &DenseMatrix, init: &DenseMatrix, rho: f64) -> Result<Self> {
        let dual = DenseMatrix::zeros(init.rows(), init.cols());
        Self::from_parts(fixed, init.clone(), init.positive_part(), dual, rho)
    }

    pub fn from_parts(
        fixed: &DenseMatrix,
        h: DenseMatrix,
        h_aux: DenseMatrix,
        dual: DenseMatrix,
        rho: f64,
    ) -> Result<Self> {
        if !h.same_shape(&h_aux) || !h.same_shape(&dual) {
            return Err(Error::dims("AdmmState", "primal, auxiliary and dual shapes differ"));
        }
        if fixed.cols() != h.cols() {
            return Err(Error::dims(
                "AdmmState",
                format!("fixed factor rank {} vs state rank {}", fixed.cols(), h.cols()),
            ));
        }
        if !h_aux.is_nonneg() {
            return Err(Error::InvalidConfig("auxiliary variable must be nonnegative".into()));
        }
        let gram_chol = Cholesky::factor(&gram_matrix(fixed, rho))?;
        Ok(Self {
            h,
            h_aux,
            dual,
            gram_chol,
        })
    }

    /// Refactors `FᵀF + ρI` after the fixed factor changed.
    pub fn refresh_gram(&mut self, fixed: &DenseMatrix, rho: f64) -> Result<()> {
        if fixed.cols() != self.h.cols() {
            return Err(Error::dims("refresh_gram", "rank mismatch"));
        }
        self.gram_chol = Cholesky::factor(&gram_matrix(fixed, rho))?;
        Ok(())
    }

    pub fn gram_chol(&self) -> &Cholesky {
        &self.gram_chol
    }

    /// Resets to a new starting point, dropping the dual.
    pub fn restart(&mut self, init: &DenseMatrix) {
        self.h = init.clone();
        self.h_aux = init.positive_part();
        self.dual = DenseMatrix::zeros(init.rows(), init.cols());
    }
}

/// Runs `cfg.inner_iters` ADMM iterations on `min_{H ≥ 0} ½‖W Hᵀ − V‖²`.
///
/// The state's cached factorization must match `w` and `cfg.rho`.
pub fn nnls_admm(w: &DenseMatrix, v: &DenseMatrix, mut state: AdmmState, cfg: &SolverConfig) -> Result<AdmmState> {
    cfg.validate()?;
    let (m, r) = w.shape();
    let n = v.cols();
    if v.rows() != m || state.h.shape() != (n, r) || state.gram_chol.dim() != r {
        return Err(Error::dims(
            "nnls_admm",
            format!(
                "W {}x{}, V {}x{}, state {}x{}",
                m,
                r,
                v.rows(),
                n,
                state.h.rows(),
                state.h.cols()
            ),
        ));
    }
    let wtv = w.transpose().matmul_unchecked(v);
    for _ in 0..cfg.inner_iters {
        let rhs = wtv.add(&state.h_aux.add(&state.dual)?.transpose().scale(cfg.rho))?;
        state.h = state.gram_chol.solve(&rhs)?.transpose();
        state.h_aux = state.h.sub(&state.dual)?.positive_part();
        state.dual = state.dual.add(&state.h_aux.sub(&state.h)?)?;
    }
    if !state.h.is_finite() || !state.dual.is_finite() {
        return Err(Error::NonFinite("ADMM iterate (divergence)".into()));
    }
    Ok(state)
}

/// Alternating H/W ADMM updates starting from `(w_init, h_init)`.
///
/// Iterate 0 is the starting point; iterate `t` holds the feasible
/// auxiliary variables after `t` outer iterations.
pub fn ao_admm(v: &DenseMatrix, w_init: &DenseMatrix, h_init: &DenseMatrix, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_factor_shapes("ao_admm", v, w_init, h_init)?;
    let start = Instant::now();
    let vt = v.transpose();
    let mut w = w_init.clone();
    let mut h = h_init.clone();
    let mut h_state = AdmmState::warm(&w, &h, cfg.rho)?;
    let mut w_state = AdmmState::warm(&h, &w, cfg.rho)?;

    let mut traj = Trajectory::default();
    traj.push(w.clone(), h.clone(), rmse(&w, &h, v), start.elapsed().as_secs_f64());
    for _ in 0..cfg.outer_iters {
        h_state.refresh_gram(&w, cfg.rho)?;
        h_state = nnls_admm(&w, v, h_state, cfg)?;
        h = h_state.h_aux.clone();
        w_state.refresh_gram(&h, cfg.rho)?;
        w_state = nnls_admm(&h, &vt, w_state, cfg)?;
        w = w_state.h_aux.clone();
        traj.push(w.clone(), h.clone(), rmse(&w, &h, v), start.elapsed().as_secs_f64());
    }
    Ok(traj)
}

pub(crate) fn check_factor_shapes(op: &'static str, v: &DenseMatrix, w: &DenseMatrix, h: &DenseMatrix) -> Result<()> {
    if w.rows() != v.rows() || h.rows() != v.cols() || w.cols() != h.cols() {
        return Err(Error::dims(
            op,
            format!(
                "V {}x{}, W {}x{}, H {}x{}",
                v.rows(),
                v.cols(),
                w.rows(),
                w.cols(),
                h.rows(),
                h.cols()
            ),
        ));
    }
    Ok(())
}

/// `½‖W Hᵀ − V‖²_F`.
pub fn loss_frob(w: &DenseMatrix, h: &DenseMatrix, v: &DenseMatrix) -> f64 {
    0.5 * residual_sq(w, h, v)
}

/// `‖W Hᵀ − V‖_F / √(mn)`.
pub fn rmse(w: &DenseMatrix, h: &DenseMatrix, v: &DenseMatrix) -> f64 {
    (residual_sq(w, h, v) / v.len() as f64).sqrt()
}

fn residual_sq(w: &DenseMatrix, h: &DenseMatrix, v: &DenseMatrix) -> f64 {
    assert!(
        w.rows() == v.rows() && h.rows() == v.cols() && w.cols() == h.cols(),
        "factor shapes do not match V"
    );
    let r = w.cols();
    let mut acc = 0.0;
    for i in 0..v.rows() {
        let wi = w.row(i);
        for j in 0..v.cols() {
            let hj = h.row(j);
            let mut p = 0.0;
            for l in 0..r {
                p += wi[l] * hj[l];
            }
            let d = p - v.get(i, j);
            acc += d * d;
        }
    }
    acc
}

/// Nonnegative double SVD initialization (plain variant: zeros produced by
/// sign selection stay zero). Small negative entries of `V` are clamped
/// before factorizing.
pub fn nndsvd_init(v: &DenseMatrix, rank: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    let (m, n) = v.shape();
    if rank == 0 || rank > m.min(n) {
        return Err(Error::InvalidRank { rank, rows: m, cols: n });
    }
    let svd = jacobi_svd(&v.positive_part())?;
    let mut w = DenseMatrix::zeros(m, rank);
    let mut h = DenseMatrix::zeros(n, rank);

    let s0 = svd.sigma[0].sqrt();
    for i in 0..m {
        w.set(i, 0, s0 * svd.u.get(i, 0).abs());
    }
    for j in 0..n {
        h.set(j, 0, s0 * svd.v.get(j, 0).abs());
    }

    for c in 1..rank {
        let x = svd.u.column(c);
        let y = svd.v.column(c);
        let (xp, xn) = split_signs(&x);
        let (yp, yn) = split_signs(&y);
        let (nxp, nxn, nyp, nyn) = (norm(&xp), norm(&xn), norm(&yp), norm(&yn));
        let (mp, mn) = (nxp * nyp, nxn * nyn);
        let (a, b, na, nb, mag) = if mp > mn {
            (xp, yp, nxp, nyp, mp)
        } else {
            (xn, yn, nxn, nyn, mn)
        };
        if mag == 0.0 {
            continue;
        }
        let scale = (svd.sigma[c] * mag).sqrt();
        for i in 0..m {
            w.set(i, c, scale * a[i] / na);
        }
        for j in 0..n {
            h.set(j, c, scale * b[j] / nb);
        }
    }
    Ok((w, h))
}

fn split_signs(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        x.iter().map(|&v| v.max(0.0)).collect(),
        x.iter().map(|&v| (-v).max(0.0)).collect(),
    )
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
