//! Finite-difference checks of the tape gradients of the full models.
//!
//! Each check compares the analytic directional derivative `∇L·u` with the
//! central difference `(L(θ + hu) − L(θ − hu)) / 2h` along random directions
//! `u`, one set of directions per parameter tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::factormer::{factormer, n_factormer, ModelConfig, ModelKind, ModelParams, NFactormerParams};
use crate::matrix::DenseMatrix;
use crate::models::{tape_loss_frob, unroll_init};
use crate::tape::{Tape, Var};
use crate::training::discounted_loss_tape;

pub const FD_STEP: f64 = 1e-5;
pub const DIRECTIONS_PER_TENSOR: usize = 2;

/// Scalar objective of the parameters, built on the given tape.
pub type Objective<'a> = dyn Fn(&mut Tape, &NFactormerParams) -> Result<Var> + 'a;

/// Worst relative error `|∇L·u − fd| / (|fd| + 1e-8)` over random
/// directions for every parameter tensor whose name passes `filter`.
pub fn directional_check(
    params: &ModelParams,
    cfg: &ModelConfig,
    objective: &Objective<'_>,
    filter: impl Fn(&str) -> bool,
    seed: u64,
    step: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = NFactormerParams::bind(&mut tape, params, cfg);
    let loss = objective(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::inference();
        let bound = NFactormerParams::bind_constant(&mut tape, p, cfg);
        let loss = objective(&mut tape, &bound)?;
        tape.scalar(loss)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (k, spec) in params.specs().iter().enumerate() {
        if !filter(&spec.name) {
            continue;
        }
        let value = &params.values()[k];
        let g = grads
            .get(bound.vars[k])
            .cloned()
            .unwrap_or_else(|| DenseMatrix::zeros(value.rows(), value.cols()));
        for _ in 0..DIRECTIONS_PER_TENSOR {
            let u = DenseMatrix::from_fn(value.rows(), value.cols(), |_, _| rng.random_range(-1.0..1.0));
            let analytic: f64 = g.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
            let mut plus = params.clone();
            plus.set(&spec.name, value.add(&u.scale(step))?)?;
            let mut minus = params.clone();
            minus.set(&spec.name, value.sub(&u.scale(step))?)?;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            worst = worst.max((analytic - fd).abs() / (fd.abs() + 1e-8));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub component: &'static str,
    pub max_rel_error: f64,
    /// Multiple of the requested tolerance this component must meet.
    pub tolerance_factor: f64,
}

impl ComponentResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol * self.tolerance_factor
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Single Factormer layer: `d = 8`, two heads, 5 sources, 4 targets.
pub fn check_factormer(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        rank: 2,
        hidden: 8,
        heads: 2,
        blocks: 1,
        ..Default::default()
    };
    let params = ModelParams::init(&cfg, ModelKind::Init, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (m, n) = (5, 4);
    let src = uniform(&mut rng, m, cfg.hidden, -1.0, 1.0);
    let tgt = uniform(&mut rng, n, cfg.hidden, -1.0, 1.0);
    let edges = uniform(&mut rng, m, n, 0.0, 2.0);
    let probe = uniform(&mut rng, n, cfg.hidden, -1.0, 1.0);
    let objective = |tape: &mut Tape, p: &NFactormerParams| -> Result<Var> {
        let s = tape.constant(src.clone());
        let t = tape.constant(tgt.clone());
        let e = tape.constant(edges.clone());
        let c = tape.constant(probe.clone());
        let out = factormer(tape, s, t, e, &p.layers[0], &cfg, false)?;
        let weighted = tape.mul(out, c)?;
        tape.sum(weighted)
    };
    directional_check(&params, &cfg, &objective, |n| n.starts_with("layers.0."), seed, FD_STEP)
}

fn problem(rng: &mut ChaCha8Rng, m: usize, n: usize, r: usize) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let v = uniform(rng, m, n, 0.2, 2.0);
    let w = uniform(rng, m, r, 0.1, 1.0);
    let h = uniform(rng, n, r, 0.1, 1.0);
    (v, w, h)
}

/// N-Factormer with `N = 1` under a reconstruction loss of its raw output.
pub fn check_n_factormer(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        rank: 2,
        hidden: 8,
        heads: 2,
        blocks: 1,
        ..Default::default()
    };
    let params = ModelParams::init(&cfg, ModelKind::Init, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let (v, w, h) = problem(&mut rng, 5, 4, cfg.rank);
    let objective = |tape: &mut Tape, p: &NFactormerParams| -> Result<Var> {
        let vv = tape.constant(v.clone());
        let wv = tape.constant(w.clone());
        let hv = tape.constant(h.clone());
        let (wo, ho) = n_factormer(tape, wv, hv, vv, p, &cfg)?;
        tape_loss_frob(tape, wo, ho, vv)
    };
    directional_check(&params, &cfg, &objective, |_| true, seed, FD_STEP)
}

/// Learned initialization unrolled through `T = 2` outer and `K = 2` inner
/// ADMM iterations under the discounted loss.
pub fn check_learned_init(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        rank: 2,
        hidden: 8,
        heads: 2,
        blocks: 1,
        outer_iters: 2,
        inner_iters: 2,
        ..Default::default()
    };
    let params = ModelParams::init(&cfg, ModelKind::Init, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let (v, w, h) = problem(&mut rng, 5, 4, cfg.rank);
    let objective = |tape: &mut Tape, p: &NFactormerParams| -> Result<Var> {
        let vv = tape.constant(v.clone());
        let wv = tape.constant(w.clone());
        let hv = tape.constant(h.clone());
        let un = unroll_init(tape, wv, hv, vv, p, &cfg)?;
        discounted_loss_tape(tape, &un.iterates, vv, 0.2)
    };
    directional_check(&params, &cfg, &objective, |_| true, seed, FD_STEP)
}

/// Runs every component check. The unrolled solver is held to ten times
/// the base tolerance.
pub fn run_suite(seed: u64) -> Result<Vec<ComponentResult>> {
    Ok(vec![
        ComponentResult {
            component: "factormer",
            max_rel_error: check_factormer(seed)?,
            tolerance_factor: 1.0,
        },
        ComponentResult {
            component: "n_factormer",
            max_rel_error: check_n_factormer(seed)?,
            tolerance_factor: 1.0,
        },
        ComponentResult {
            component: "learned_init",
            max_rel_error: check_learned_init(seed)?,
            tolerance_factor: 10.0,
        },
    ])
}
