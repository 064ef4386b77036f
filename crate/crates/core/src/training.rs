//! Unsupervised training of the learned-initialization and
//! learned-acceleration models: discounted unrolled loss, AdamW, a cosine
//! schedule restarted every epoch, and the acceleration curriculum.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{loss_frob, nndsvd_init};
use crate::error::{Error, Result};
use crate::factormer::{ModelConfig, ModelKind, ModelParams, NFactormerParams};
use crate::matrix::DenseMatrix;
use crate::models::{learned_accel, learned_init, tape_loss_frob, unroll_accel, unroll_init, Trajectory};
use crate::tape::{Tape, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub epochs: usize,
    /// Defaults to 1e-4 for the init model and 1e-5 for the accel model.
    pub lr0: Option<f64>,
    pub epoch_decay: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub curriculum_period: usize,
    pub max_acc_steps: usize,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Init,
            epochs: 15,
            lr0: None,
            epoch_decay: 0.9,
            gamma: 0.2,
            weight_decay: 0.01,
            seed: 0,
            curriculum_period: 2,
            max_acc_steps: 5,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            model_kind: kind,
            ..Default::default()
        }
    }

    pub fn lr0(&self) -> f64 {
        self.lr0.unwrap_or(match self.model_kind {
            ModelKind::Init => 1e-4,
            ModelKind::Accel => 1e-5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr0() > 0.0) || !self.lr0().is_finite() {
            return bad(format!("lr0 must be positive, got {}", self.lr0()));
        }
        if !(self.epoch_decay > 0.0 && self.epoch_decay <= 1.0) {
            return bad(format!("epoch_decay must lie in (0, 1], got {}", self.epoch_decay));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.curriculum_period == 0 {
            return bad("curriculum_period must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Model and training settings read from one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Adam moments for every parameter, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .values()
            .iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW step with decoupled weight decay.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[DenseMatrix],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dims(
            "adamw_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (k, (g, p)) in grads.iter().zip(params.values()).enumerate() {
        if g.shape() != p.shape() || state.m[k].shape() != p.shape() {
            return Err(Error::ParamShape {
                name: params.specs()[k].name.clone(),
                expected: vec![p.rows(), p.cols()],
                found: vec![g.rows(), g.cols()],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, p) in params.values_mut().iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr * weight_decay * *x;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global Frobenius norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [DenseMatrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Cosine decay from the epoch ceiling `lr0 · decay^epoch` to zero, restarted
/// at every epoch boundary.
pub fn lr_schedule(epoch: usize, step_in_epoch: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let ceiling = cfg.lr0() * cfg.epoch_decay.powi(epoch as i32);
    let frac = step_in_epoch as f64 / steps_per_epoch.max(1) as f64;
    ceiling * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Acceleration steps used during `epoch`: one more every
/// `curriculum_period` epochs, capped at `max_acc_steps`.
pub fn curriculum(epoch: usize, cfg: &TrainConfig) -> usize {
    (1 + epoch / cfg.curriculum_period).min(cfg.max_acc_steps)
}

/// `Σ_k γ^k ℓ(W^{T−k}, H^{T−k}, V)`: the final iterate has weight one.
pub fn discounted_loss(traj: &Trajectory, v: &DenseMatrix, gamma: f64) -> f64 {
    traj.iterates
        .iter()
        .rev()
        .enumerate()
        .map(|(k, (w, h))| gamma.powi(k as i32) * loss_frob(w, h, v))
        .sum()
}

pub fn discounted_loss_tape(tape: &mut Tape, iterates: &[(Var, Var)], v: Var, gamma: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (k, &(w, h)) in iterates.iter().rev().enumerate() {
        let l = tape_loss_frob(tape, w, h, v)?;
        let l = tape.scale(l, gamma.powi(k as i32))?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::InvalidConfig("empty trajectory".into()))
}

/// A training or validation matrix with its NNDSVD starting point.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub v: DenseMatrix,
    pub w0: DenseMatrix,
    pub h0: DenseMatrix,
}

impl Sample {
    pub fn new(id: impl Into<String>, v: DenseMatrix, rank: usize) -> Result<Self> {
        let (w0, h0) = nndsvd_init(&v, rank)?;
        Ok(Self { id: id.into(), v, w0, h0 })
    }
}

pub fn prepare_samples(matrices: Vec<(String, DenseMatrix)>, rank: usize) -> Result<Vec<Sample>> {
    matrices
        .into_par_iter()
        .map(|(id, v)| Sample::new(id, v, rank))
        .collect()
}

/// Discounted loss of one sample and its gradient for every parameter.
pub fn sample_gradients(
    params: &ModelParams,
    model: &ModelConfig,
    kind: ModelKind,
    sample: &Sample,
    gamma: f64,
    nbr_acc: usize,
) -> Result<(f64, Vec<DenseMatrix>)> {
    let mut tape = Tape::new();
    let bound = NFactormerParams::bind(&mut tape, params, model);
    let v = tape.constant(sample.v.clone());
    let w0 = tape.constant(sample.w0.clone());
    let h0 = tape.constant(sample.h0.clone());
    let unrolled = match kind {
        ModelKind::Init => unroll_init(&mut tape, w0, h0, v, &bound, model)?,
        ModelKind::Accel => unroll_accel(&mut tape, w0, h0, v, &bound, model, nbr_acc)?,
    };
    let loss = discounted_loss_tape(&mut tape, &unrolled.iterates, v, gamma)?;
    let loss_value = tape.scalar(loss)?;
    let grads = tape.backward(loss)?;
    let out = bound
        .vars
        .iter()
        .zip(params.values())
        .map(|(&var, p)| {
            grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| DenseMatrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((loss_value, out))
}

pub fn run_model(
    params: &ModelParams,
    model: &ModelConfig,
    kind: ModelKind,
    sample: &Sample,
    nbr_acc: usize,
) -> Result<Trajectory> {
    match kind {
        ModelKind::Init => learned_init(&sample.w0, &sample.h0, &sample.v, params, model),
        ModelKind::Accel => learned_accel(&sample.w0, &sample.h0, &sample.v, params, model, nbr_acc),
    }
}

/// Mean RMSE at the final iterate over `samples`.
pub fn validation_rmse(
    params: &ModelParams,
    model: &ModelConfig,
    kind: ModelKind,
    samples: &[Sample],
    nbr_acc: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let finals: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            run_model(params, model, kind, s, nbr_acc).map(|t| *t.rmse.last().expect("trajectory is never empty"))
        })
        .collect::<Result<_>>()?;
    Ok(finals.iter().sum::<f64>() / finals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub nbr_acc: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub nbr_acc: usize,
    pub mean_loss: f64,
    pub val_rmse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

/// Batch-size-one training loop. `on_epoch` runs after every epoch with
/// the current parameters, e.g. to write a checkpoint.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    mut params: ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let kind = cfg.model_kind;
    let expected = crate::factormer::param_layout(model, kind);
    if expected.as_slice() != params.specs() {
        return Err(Error::InvalidConfig(format!(
            "parameters do not match the {kind:?} layout for this model configuration"
        )));
    }
    let mut opt = OptimizerState::new(&params);
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let steps = train_set.len();
    let mut order: Vec<usize> = (0..steps).collect();
    for epoch in 0..cfg.epochs {
        let nbr_acc = match kind {
            ModelKind::Init => 0,
            ModelKind::Accel => curriculum(epoch, cfg).min(model.outer_iters),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, &k) in order.iter().enumerate() {
            let sample = &train_set[k];
            let diverged = |loss: f64| Error::Diverged {
                id: sample.id.clone(),
                loss,
            };
            let (loss, mut grads) = match sample_gradients(&params, model, kind, sample, cfg.gamma, nbr_acc) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(loss));
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let lr = lr_schedule(epoch, step, steps, cfg);
            adamw_step(&mut params, &grads, &mut opt, lr, cfg.weight_decay)?;
            loss_sum += loss;
            log.push(LogRow {
                epoch,
                step,
                lr,
                loss,
                nbr_acc,
            });
        }
        let val_rmse = if val_set.is_empty() {
            None
        } else {
            Some(validation_rmse(&params, model, kind, val_set, nbr_acc)?)
        };
        let summary = EpochSummary {
            epoch,
            nbr_acc,
            mean_loss: loss_sum / steps as f64,
            val_rmse,
        };
        on_epoch(&summary, &params)?;
        epochs.push(summary);
    }
    Ok(TrainOutcome { params, log, epochs })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
