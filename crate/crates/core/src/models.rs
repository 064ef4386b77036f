//! End-to-end accelerated solvers that interleave the N-Factormer with
//! unrolled ADMM: learned initialization and learned acceleration.
//!
//! Both run on a [`Tape`], so the same code serves training (recording
//! tape) and evaluation (inference tape). The ADMM steps issue the same
//! kernel sequence as [`crate::admm::nnls_admm`], so a bypassed
//! accelerator reproduces the baseline bit for bit.

use std::time::Instant;

use crate::admm::{check_factor_shapes, rmse};
use crate::error::{Error, Result};
use crate::factormer::{n_factormer, project_nonneg, ModelConfig, ModelParams, NFactormerParams};
use crate::matrix::DenseMatrix;
use crate::tape::{Tape, Var};

/// Iterates `(W_t, H_t)` for `t = 0..=T` with their RMSE and the
/// cumulative wall-clock seconds at which each was produced.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub iterates: Vec<(DenseMatrix, DenseMatrix)>,
    pub rmse: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl Trajectory {
    pub fn push(&mut self, w: DenseMatrix, h: DenseMatrix, rmse: f64, seconds: f64) {
        self.iterates.push((w, h));
        self.rmse.push(rmse);
        self.seconds.push(seconds);
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn last(&self) -> Option<&(DenseMatrix, DenseMatrix)> {
        self.iterates.last()
    }

    pub fn is_feasible(&self) -> bool {
        self.iterates.iter().all(|(w, h)| w.is_nonneg() && h.is_nonneg())
    }
}

/// Tape-level iterates of an unrolled run.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub iterates: Vec<(Var, Var)>,
    pub seconds: Vec<f64>,
}

/// ADMM state for one factor, held on the tape.
#[derive(Clone, Copy, Debug)]
struct TapeAdmm {
    h: Var,
    aux: Var,
    dual: Var,
}

impl TapeAdmm {
    fn start(tape: &mut Tape, init: Var) -> Result<Self> {
        let (r, c) = tape.shape(init);
        let aux = tape.relu(init)?;
        let dual = tape.constant(DenseMatrix::zeros(r, c));
        Ok(Self { h: init, aux, dual })
    }
}

/// `K` ADMM iterations on `min_{X ≥ 0} ½‖F Xᵀ − target‖²` with `F` fixed.
fn admm_half(tape: &mut Tape, fixed: Var, target: Var, state: &mut TapeAdmm, cfg: &ModelConfig) -> Result<()> {
    let (fixed, target) = if cfg.detach_solver {
        *state = TapeAdmm {
            h: tape.detach(state.h),
            aux: tape.detach(state.aux),
            dual: tape.detach(state.dual),
        };
        (tape.detach(fixed), target)
    } else {
        (fixed, target)
    };
    let r = tape.shape(fixed).1;
    let fixed_t = tape.transpose(fixed)?;
    let gram = tape.matmul(fixed_t, fixed)?;
    let rho_eye = tape.constant(DenseMatrix::identity(r).scale(cfg.rho));
    let gram = tape.add(gram, rho_eye)?;
    let ftv = tape.matmul(fixed_t, target)?;
    for _ in 0..cfg.inner_iters {
        let sum = tape.add(state.aux, state.dual)?;
        let sum_t = tape.transpose(sum)?;
        let scaled = tape.scale(sum_t, cfg.rho)?;
        let rhs = tape.add(ftv, scaled)?;
        let x = tape.spd_solve(gram, rhs)?;
        state.h = tape.transpose(x)?;
        let diff = tape.sub(state.h, state.dual)?;
        state.aux = tape.relu(diff)?;
        let gap = tape.sub(state.aux, state.h)?;
        state.dual = tape.add(state.dual, gap)?;
    }
    Ok(())
}

fn check_inputs(tape: &Tape, w0: Var, h0: Var, v: Var, cfg: &ModelConfig) -> Result<()> {
    let (m, n) = tape.shape(v);
    let (wm, wr) = tape.shape(w0);
    let (hn, hr) = tape.shape(h0);
    if wm != m || hn != n || wr != cfg.rank || hr != cfg.rank {
        return Err(Error::dims(
            "model input",
            format!("V {m}x{n}, W {wm}x{wr}, H {hn}x{hr}, rank {}", cfg.rank),
        ));
    }
    Ok(())
}

/// Learned initialization: N-Factormer refinement of `(W⁰, H⁰)`, projection,
/// then `T` alternating ADMM outer iterations. Iterate 0 is the projected
/// network output.
pub fn unroll_init(
    tape: &mut Tape,
    w0: Var,
    h0: Var,
    v: Var,
    params: &NFactormerParams,
    cfg: &ModelConfig,
) -> Result<Unrolled> {
    check_inputs(tape, w0, h0, v, cfg)?;
    let start = Instant::now();
    let vt = tape.transpose(v)?;
    let (w_net, h_net) = n_factormer(tape, w0, h0, v, params, cfg)?;
    let mut w = project_nonneg(tape, w_net)?;
    let mut h = project_nonneg(tape, h_net)?;
    let mut iterates = vec![(w, h)];
    let mut seconds = vec![start.elapsed().as_secs_f64()];

    let mut h_state = TapeAdmm::start(tape, h)?;
    let mut w_state = TapeAdmm::start(tape, w)?;
    for _ in 0..cfg.outer_iters {
        admm_half(tape, w, v, &mut h_state, cfg)?;
        h = h_state.aux;
        admm_half(tape, h, vt, &mut w_state, cfg)?;
        w = w_state.aux;
        iterates.push((w, h));
        seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(Unrolled { iterates, seconds })
}

/// Learned acceleration: ADMM outer iterations where, for the first
/// `nbr_acc` of them, the N-Factormer maps `([H_t, Ĥ_t], [W_t, Ŵ_t])` to the
/// next iterate. ADMM duals restart after every intervention.
pub fn unroll_accel(
    tape: &mut Tape,
    w0: Var,
    h0: Var,
    v: Var,
    params: &NFactormerParams,
    cfg: &ModelConfig,
    nbr_acc: usize,
) -> Result<Unrolled> {
    check_inputs(tape, w0, h0, v, cfg)?;
    if nbr_acc > cfg.outer_iters {
        return Err(Error::InvalidConfig(format!(
            "nbr_acc {nbr_acc} exceeds outer iterations {}",
            cfg.outer_iters
        )));
    }
    let start = Instant::now();
    let vt = tape.transpose(v)?;
    let (mut w, mut h) = (w0, h0);
    let mut iterates = vec![(w, h)];
    let mut seconds = vec![start.elapsed().as_secs_f64()];

    let mut h_state = TapeAdmm::start(tape, h)?;
    let mut w_state = TapeAdmm::start(tape, w)?;
    for t in 0..cfg.outer_iters {
        admm_half(tape, w, v, &mut h_state, cfg)?;
        let h_hat = h_state.aux;
        admm_half(tape, h_hat, vt, &mut w_state, cfg)?;
        let w_hat = w_state.aux;
        if t < nbr_acc {
            let hc = tape.concat_columns(&[h, h_hat])?;
            let wc = tape.concat_columns(&[w, w_hat])?;
            let (w_net, h_net) = n_factormer(tape, wc, hc, v, params, cfg)?;
            w = project_nonneg(tape, w_net)?;
            h = project_nonneg(tape, h_net)?;
            h_state = TapeAdmm::start(tape, h)?;
            w_state = TapeAdmm::start(tape, w)?;
        } else {
            w = w_hat;
            h = h_hat;
        }
        iterates.push((w, h));
        seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(Unrolled { iterates, seconds })
}

fn to_trajectory(tape: &Tape, un: &Unrolled, v: &DenseMatrix) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    for (&(w, h), &s) in un.iterates.iter().zip(&un.seconds) {
        let (w, h) = (tape.value(w).clone(), tape.value(h).clone());
        let e = rmse(&w, &h, v);
        traj.push(w, h, e, s);
    }
    Ok(traj)
}

pub fn learned_init(
    w0: &DenseMatrix,
    h0: &DenseMatrix,
    v: &DenseMatrix,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_factor_shapes("learned_init", v, w0, h0)?;
    let mut tape = Tape::inference();
    let bound = NFactormerParams::bind_constant(&mut tape, params, cfg);
    let (wv, hv, vv) = (tape.constant(w0.clone()), tape.constant(h0.clone()), tape.constant(v.clone()));
    let un = unroll_init(&mut tape, wv, hv, vv, &bound, cfg)?;
    to_trajectory(&tape, &un, v)
}

pub fn learned_accel(
    w0: &DenseMatrix,
    h0: &DenseMatrix,
    v: &DenseMatrix,
    params: &ModelParams,
    cfg: &ModelConfig,
    nbr_acc: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_factor_shapes("learned_accel", v, w0, h0)?;
    let mut tape = Tape::inference();
    let bound = NFactormerParams::bind_constant(&mut tape, params, cfg);
    let (wv, hv, vv) = (tape.constant(w0.clone()), tape.constant(h0.clone()), tape.constant(v.clone()));
    let un = unroll_accel(&mut tape, wv, hv, vv, &bound, cfg, nbr_acc)?;
    to_trajectory(&tape, &un, v)
}

/// `½‖W Hᵀ − V‖²_F` on the tape.
pub fn tape_loss_frob(tape: &mut Tape, w: Var, h: Var, v: Var) -> Result<Var> {
    let ht = tape.transpose(h)?;
    let prod = tape.matmul(w, ht)?;
    let r = tape.sub(prod, v)?;
    let sq = tape.mul(r, r)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 0.5)
}
