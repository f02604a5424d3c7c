//! Offline pre-training: per-environment batch sampling with prompt
//! conditioning, a joint MSE update with gradient clipping, convergence
//! detection, checkpointing and CSV telemetry.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{
    build_sequence_range, sample_prompt, write_atomic, DatasetError, Trajectory, TokenSequence,
};
use crate::model::{
    action_targets, backward, forward, mse_grads, squared_error_sum, ModelConfig, ModelError,
    ModelParams, Normalizers,
};
use crate::rng::{derive_seed, EpisodeRng};

const STEP_TAG: u64 = 0x7374_6570;
const EVAL_TAG: u64 = 0x6576_616c;

const CKPT_MAGIC: &[u8; 8] = b"APDTCKP1";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("no environments supplied")]
    NoEnvs,
    #[error("empty dataset or prompt set for env tag {0}")]
    EmptyDataset(u64),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    ShapeMismatch { params: usize, grads: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("loss became non-finite at step {step}; parameters restored to the last good state")]
    NonFiniteLoss { step: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint corrupted (checksum mismatch)")]
    Checksum,
    #[error("checkpoint truncated or mis-sized")]
    Truncated,
}

/// Parameter-update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// Plain descent, theta -= eta * g. Kept selectable for closed-form
    /// checks; moments are left untouched.
    Sgd,
    /// Adaptive moment estimation with bias correction.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Trajectories sampled per environment per step.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Absolute step budget; a resumed run continues up to this total.
    pub max_steps: u64,
    pub eval_every: u64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub optimizer: OptimizerMode,
    /// Moving-average window for the plateau stop.
    pub plateau_window: usize,
    /// Relative improvement below which training counts as converged.
    pub plateau_rel_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: 2000,
            eval_every: 100,
            grad_clip_norm: 1.0,
            seed: 0,
            optimizer: OptimizerMode::Adam,
            plateau_window: 200,
            plateau_rel_tol: 1e-3,
        }
    }
}

impl TrainConfig {
    /// `learning_rate = 0` is allowed so a no-op run stays expressible.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::InvalidConfig("decay rates must lie in [0, 1)".into()));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(TrainError::InvalidConfig("epsilon must be positive".into()));
        }
        if !self.grad_clip_norm.is_finite() || self.grad_clip_norm <= 0.0 {
            return Err(TrainError::InvalidConfig("grad_clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size, max_steps and eval_every must be >= 1".into(),
            ));
        }
        if self.plateau_window == 0 || self.plateau_rel_tol < 0.0 {
            return Err(TrainError::InvalidConfig(
                "plateau_window must be >= 1 and plateau_rel_tol >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Scales `grads` in place so its global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Applies one update in place. Rejects non-finite gradients before touching
/// parameters or moments.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    tcfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index });
    }
    let eta = tcfg.learning_rate;
    match tcfg.optimizer {
        OptimizerMode::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= eta * g;
            }
        }
        OptimizerMode::Adam => {
            state.t += 1;
            let bc1 = 1.0 - tcfg.beta1.powi(state.t as i32);
            let bc2 = 1.0 - tcfg.beta2.powi(state.t as i32);
            for i in 0..params.len() {
                state.m[i] = tcfg.beta1 * state.m[i] + (1.0 - tcfg.beta1) * grads[i];
                state.v[i] = tcfg.beta2 * state.v[i] + (1.0 - tcfg.beta2) * grads[i] * grads[i];
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                params[i] -= eta * m_hat / (v_hat.sqrt() + tcfg.epsilon);
            }
        }
    }
    Ok(())
}

/// One environment's offline data: the trajectories trained on and the pool
/// prompts are drawn from (often the same slice).
#[derive(Debug, Clone, Copy)]
pub struct EnvSet<'a> {
    pub env_tag: u64,
    pub dataset: &'a [Trajectory],
    pub prompts: &'a [Trajectory],
}

/// One step's training set: a prompted window per batch slot per env.
struct TrainItem {
    seq: TokenSequence,
    targets: Vec<[f64; 3]>,
}

/// Samples the step's training set. Every env contributes `batch_size`
/// windows behind one freshly drawn prompt; draw order is prompt first, then
/// per window the trajectory index and the window start.
fn assemble_batch(
    params: &ModelParams,
    envs: &[EnvSet],
    batch_size: usize,
    rng: &mut EpisodeRng,
) -> Result<Vec<TrainItem>, TrainError> {
    let k = params.config.prompt_len;
    let window = params.config.context_window;
    let mut items = Vec::with_capacity(envs.len() * batch_size);
    for env in envs {
        let prompt = sample_prompt(env.prompts, k, rng)?;
        for _ in 0..batch_size {
            let traj = &env.dataset[rng.gen_range(0..env.dataset.len())];
            let len = window.min(traj.steps.len());
            let start = rng.gen_range(0..=traj.steps.len() - len);
            let seq = build_sequence_range(traj, start, len, Some(&prompt))?;
            let targets = action_targets(&seq, params);
            items.push(TrainItem { seq, targets });
        }
    }
    Ok(items)
}

/// Joint loss over the aggregated step set and the summed gradient.
/// Normalization is by the total action-position count across all sequences,
/// so the environment count does not rescale the step size. Per-sequence
/// passes run in parallel; the reduction order is fixed.
fn batch_loss_and_grads(
    params: &ModelParams,
    items: &[TrainItem],
) -> Result<(f64, Vec<f64>), TrainError> {
    let n_total: usize = items.iter().map(|it| it.targets.len()).sum();
    let per_seq: Vec<Result<(f64, Vec<f64>), ModelError>> = items
        .par_iter()
        .map(|it| {
            let fwd = forward(params, &it.seq)?;
            let sse = squared_error_sum(&fwd.preds, &it.targets);
            let dpreds = mse_grads(&fwd.preds, &it.targets, n_total);
            let g = backward(params, &it.seq, &fwd, &dpreds);
            Ok((sse, g))
        })
        .collect();
    let mut sse_sum = 0.0;
    let mut grads = params.zero_grad_buffer();
    for r in per_seq {
        let (sse, g) = r?;
        sse_sum += sse;
        for (acc, x) in grads.iter_mut().zip(&g) {
            *acc += x;
        }
    }
    Ok((sse_sum / (3.0 * n_total as f64), grads))
}

fn batch_loss(params: &ModelParams, items: &[TrainItem]) -> Result<f64, TrainError> {
    let n_total: usize = items.iter().map(|it| it.targets.len()).sum();
    let sse: f64 = items
        .par_iter()
        .map(|it| forward(params, &it.seq).map(|f| squared_error_sum(&f.preds, &it.targets)))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .sum();
    Ok(sse / (3.0 * n_total as f64))
}

/// One telemetry record per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelemetryRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Writes telemetry as `step,loss,grad_norm,lr` CSV (atomically).
pub fn write_telemetry_csv(rows: &[TelemetryRow], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("step,loss,grad_norm,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.grad_norm, r.lr));
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<TelemetryRow>,
    /// (step, held-out loss) at each eval point.
    pub eval_curve: Vec<(u64, f64)>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// True when the moving-average plateau fired before `max_steps`.
    pub converged: bool,
}

/// Result of a training run: the report plus what a checkpoint needs.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub opt: AdamState,
    /// Absolute step count reached (resume here to continue).
    pub next_step: u64,
}

/// State carried across a save/load boundary.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub opt: AdamState,
    pub step: u64,
}

/// Detects a plateau in a descending series: compares the mean of the last
/// `window` values against the mean of the `window` before it.
pub(crate) fn plateaued(losses: &[f64], window: usize, rel_tol: f64) -> bool {
    if losses.len() < 2 * window {
        return false;
    }
    let cur: f64 = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    let prev: f64 =
        losses[losses.len() - 2 * window..losses.len() - window].iter().sum::<f64>() / window as f64;
    let improvement = (prev - cur) / prev.abs().max(f64::MIN_POSITIVE);
    improvement < rel_tol
}

/// Runs the offline pre-training loop.
///
/// Every step touches every supplied environment: per env a prompt and a
/// `batch_size` window batch are drawn, the joint MSE over the aggregated set
/// is differentiated, the global gradient norm is clipped and one optimizer
/// step is applied. Stops at `max_steps` (absolute) or when the moving
/// average of the loss plateaus. Per-step sampling is keyed by the absolute
/// step index, so a resumed run replays the uninterrupted stream.
///
/// A fixed probe batch (drawn from a dedicated stream before the first step)
/// is evaluated every `eval_every` steps; a non-finite probe or training loss
/// aborts the run and restores the last parameters that evaluated finite.
pub fn pretrain(
    params: &mut ModelParams,
    envs: &[EnvSet],
    tcfg: &TrainConfig,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome, TrainError> {
    tcfg.validate()?;
    if envs.is_empty() {
        return Err(TrainError::NoEnvs);
    }
    for env in envs {
        if env.dataset.is_empty() || env.prompts.is_empty() {
            return Err(TrainError::EmptyDataset(env.env_tag));
        }
    }

    let (mut opt, start_step) = match resume {
        Some(r) => {
            if r.opt.m.len() != params.n_params() {
                return Err(TrainError::ShapeMismatch {
                    params: params.n_params(),
                    grads: r.opt.m.len(),
                });
            }
            (r.opt, r.step)
        }
        None => (AdamState::new(params.n_params()), 0),
    };

    let mut eval_rng = EpisodeRng::seed_from_u64(derive_seed(tcfg.seed, EVAL_TAG, 0));
    let eval_items = assemble_batch(params, envs, tcfg.batch_size, &mut eval_rng)?;

    let mut rows = Vec::new();
    let mut eval_curve = Vec::new();
    let mut losses = Vec::new();
    let mut last_good = params.data.clone();
    let mut converged = false;
    let mut step = start_step;

    while step < tcfg.max_steps {
        let mut rng = EpisodeRng::seed_from_u64(derive_seed(tcfg.seed, STEP_TAG, step));
        let items = assemble_batch(params, envs, tcfg.batch_size, &mut rng)?;
        let (loss, mut grads) = batch_loss_and_grads(params, &items)?;
        if !loss.is_finite() {
            params.data.copy_from_slice(&last_good);
            return Err(TrainError::NonFiniteLoss { step });
        }
        let grad_norm = clip_global_norm(&mut grads, tcfg.grad_clip_norm);
        if let Err(e) = optimizer_step(&mut params.data, &grads, &mut opt, tcfg) {
            params.data.copy_from_slice(&last_good);
            return Err(e);
        }
        rows.push(TelemetryRow {
            step,
            loss,
            grad_norm,
            lr: tcfg.learning_rate,
        });
        losses.push(loss);
        step += 1;

        if step % tcfg.eval_every == 0 || step == tcfg.max_steps {
            let eval_loss = batch_loss(params, &eval_items)?;
            if !eval_loss.is_finite() {
                params.data.copy_from_slice(&last_good);
                return Err(TrainError::NonFiniteLoss { step });
            }
            eval_curve.push((step, eval_loss));
            last_good.copy_from_slice(&params.data);
        }
        if plateaued(&losses, tcfg.plateau_window, tcfg.plateau_rel_tol) {
            converged = true;
            break;
        }
    }

    let initial_loss = rows.first().map_or(f64::NAN, |r| r.loss);
    let final_loss = rows.last().map_or(f64::NAN, |r| r.loss);
    Ok(TrainOutcome {
        report: TrainReport {
            rows,
            eval_curve,
            initial_loss,
            final_loss,
            converged,
        },
        opt,
        next_step: step,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
    norm: Normalizers,
    train_seed: u64,
    step: u64,
    n_params: usize,
    /// Optimizer step counter when moments are stored.
    opt_t: Option<u64>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: Option<AdamState>,
    pub step: u64,
    pub train_seed: u64,
}

fn push_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect()
}

/// Serializes parameters (and optionally optimizer moments) with a JSON
/// header and a trailing SHA-256 over everything before it.
pub fn save_checkpoint(
    params: &ModelParams,
    opt: Option<&AdamState>,
    step: u64,
    train_seed: u64,
    path: &Path,
) -> Result<(), TrainError> {
    let header = CheckpointHeader {
        version: CKPT_VERSION,
        model: params.config.clone(),
        norm: params.norm.clone(),
        train_seed,
        step,
        n_params: params.n_params(),
        opt_t: opt.map(|o| o.t),
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + hjson.len() + 8 * params.n_params() * 3 + 32);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hjson);
    push_f64s(&mut buf, &params.data);
    if let Some(o) = opt {
        push_f64s(&mut buf, &o.m);
        push_f64s(&mut buf, &o.v);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    write_atomic(path, &buf)?;
    Ok(())
}

/// Reads a checkpoint back; any single corrupted byte fails the checksum.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let buf = std::fs::read(path)?;
    if buf.len() < CKPT_MAGIC.len() + 4 + 32 {
        return Err(TrainError::Truncated);
    }
    if &buf[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(TrainError::BadMagic);
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(TrainError::Checksum);
    }
    let hlen =
        u32::from_le_bytes(body[8..12].try_into().expect("4 header-length bytes")) as usize;
    if body.len() < 12 + hlen {
        return Err(TrainError::Truncated);
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[12..12 + hlen])?;
    if header.version != CKPT_VERSION {
        return Err(TrainError::Version(header.version));
    }
    let payload = &body[12 + hlen..];
    let n = header.n_params;
    let blocks = if header.opt_t.is_some() { 3 } else { 1 };
    if payload.len() != 8 * n * blocks {
        return Err(TrainError::Truncated);
    }
    let mut params = ModelParams::new(header.model, header.norm, 0)?;
    if params.n_params() != n {
        return Err(TrainError::Truncated);
    }
    params.data.copy_from_slice(&read_f64s(&payload[..8 * n]));
    let opt = header.opt_t.map(|t| AdamState {
        m: read_f64s(&payload[8 * n..16 * n]),
        v: read_f64s(&payload[16 * n..24 * n]),
        t,
    });
    Ok(Checkpoint {
        params,
        opt,
        step: header.step,
        train_seed: header.train_seed,
    })
}
