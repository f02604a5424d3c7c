//! Online deployment: prompt-conditioned acting with return/cost-to-go
//! decrementing, the bounded online prompt buffer, evaluation metrics and the
//! zero-padding ablation.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::dataset::{
    rollout, sample_prompt, snapshot_users, write_atomic, DatasetError, Policy, PolicyError,
    PromptSegment, ServiceLog, StepRecord, Trajectory, TokenSequence,
};
use crate::env::{ActionCommand, EnvConfig, EnvError, EnvState, StepOutcome};
use crate::mobility::MobilityParams;
use crate::model::{forward, ModelError, ModelParams};
use crate::rng::{derive_seed, EpisodeRng};
use crate::trainer::plateaued;

const PROMPT_TAG: u64 = 0x7072_6d70;
const DEPLOY_TAG: u64 = 0x6465_706c;

#[derive(Debug, Error)]
pub enum DeployError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("no prompt source: online buffer is empty and no bootstrap data was supplied")]
    NoPromptSource,
    #[error("empty target source")]
    EmptySource,
    #[error("no episodes were completed")]
    NoEpisodes,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// FIFO store of recent prompt segments, capacity `O`.
#[derive(Debug, Clone, Default)]
pub struct OnlineBuffer {
    segments: VecDeque<PromptSegment>,
    capacity: usize,
}

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "buffer capacity must be >= 1");
        Self {
            segments: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    /// Appends a segment, evicting the oldest exactly when the size would
    /// exceed the capacity.
    pub fn push(&mut self, seg: PromptSegment) {
        self.segments.push_back(seg);
        if self.segments.len() > self.capacity {
            self.segments.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Uniform draw; `None` when empty.
    pub fn sample(&self, rng: &mut EpisodeRng) -> Option<&PromptSegment> {
        if self.segments.is_empty() {
            None
        } else {
            self.segments.get(rng.gen_range(0..self.segments.len()))
        }
    }

    /// Oldest-first view (test and report plumbing).
    pub fn iter(&self) -> impl Iterator<Item = &PromptSegment> {
        self.segments.iter()
    }
}

/// Picks conditioning targets from observed episode returns: the best return
/// nudged 5% toward zero-from-below (so it dominates every observation), and
/// 95% of the energy budget.
pub fn choose_targets(returns: &[f64], cfg: &EnvConfig) -> Result<(f64, f64), DeployError> {
    let best = returns
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Err(DeployError::EmptySource);
    }
    Ok((best + 0.05 * best.abs(), 0.95 * cfg.energy_budget))
}

/// Where a controller draws its episode prompt from.
#[derive(Debug, Clone)]
pub enum PromptSource {
    /// One segment chosen by the caller (online deployment picks per episode).
    Fixed(PromptSegment),
    /// A trajectory pool sampled per episode, keyed by the episode seed.
    Pool(Vec<Trajectory>),
}

/// The trained model acting as a sequence-conditioned controller.
///
/// Each decision rebuilds the token view: prompt, then the most recent
/// complete steps that fit in the context window, then a partial step holding
/// the running return/cost-to-go and the current state. After each
/// transition the running targets are decremented by the observed reward and
/// cost, and the completed step is recorded with the token values that
/// conditioned it.
pub struct ApdtController<'a> {
    params: &'a ModelParams,
    source: PromptSource,
    r_target: f64,
    c_target: f64,
    prompt: Option<PromptSegment>,
    r_running: f64,
    c_running: f64,
    cur_state: Option<EnvState>,
    history: Vec<StepRecord>,
}

impl<'a> ApdtController<'a> {
    pub fn new(
        params: &'a ModelParams,
        source: PromptSource,
        r_target: f64,
        c_target: f64,
    ) -> Self {
        Self {
            params,
            source,
            r_target,
            c_target,
            prompt: None,
            r_running: r_target,
            c_running: c_target,
            cur_state: None,
            history: Vec::new(),
        }
    }

    /// Completed steps of the current or just-finished episode, with the
    /// token-valued return/cost-to-go fields.
    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    /// Non-overlapping prompt-length segments of the finished episode,
    /// oldest first.
    pub fn harvest_segments(&self) -> Vec<PromptSegment> {
        self.history
            .chunks_exact(self.params.config.prompt_len)
            .map(|c| PromptSegment { steps: c.to_vec() })
            .collect()
    }

    fn partial_record(&self, state: &EnvState) -> StepRecord {
        StepRecord {
            t: state.t,
            uav: [state.uav_pos.x, state.uav_pos.y],
            users: snapshot_users(state),
            action: [0.0; 3],
            reward: 0.0,
            cost: 0.0,
            rtg: self.r_running,
            ctg: self.c_running,
        }
    }
}

impl Policy for ApdtController<'_> {
    fn begin_episode(&mut self, seed: u64, init: &EnvState) {
        self.prompt = Some(match &self.source {
            PromptSource::Fixed(p) => p.clone(),
            PromptSource::Pool(pool) => {
                let mut rng = EpisodeRng::seed_from_u64(derive_seed(seed, PROMPT_TAG, 0));
                sample_prompt(pool, self.params.config.prompt_len, &mut rng)
                    .expect("controller prompt pool admits a prompt")
            }
        });
        self.r_running = self.r_target;
        self.c_running = self.c_target;
        self.cur_state = Some(init.clone());
        self.history.clear();
    }

    fn act(&mut self, state: &EnvState, cfg: &EnvConfig) -> Result<ActionCommand, PolicyError> {
        let w = self.params.config.context_window;
        let tail_start = self.history.len().saturating_sub(w - 1);
        let tail = &self.history[tail_start..];
        let mut seq = TokenSequence::with_prompt(self.prompt.as_ref());
        for (i, s) in tail.iter().enumerate() {
            seq.push_main_step(i, s);
        }
        seq.push_partial_step(tail.len(), &self.partial_record(state));
        let fwd = forward(self.params, &seq)?;
        let pred = fwd.preds.last().expect("partial step ends in a state token");
        let cmd = crate::env::denormalize_action(*pred, self.params.norm.dist);
        Ok(cmd.clamped(cfg))
    }

    fn observe(&mut self, executed: &ActionCommand, outcome: &StepOutcome) {
        let pre = self
            .cur_state
            .as_ref()
            .expect("begin_episode ran before observe");
        let mut rec = self.partial_record(pre);
        rec.action = executed.as_array();
        rec.reward = outcome.reward;
        rec.cost = outcome.cost;
        self.history.push(rec);
        self.r_running -= outcome.reward;
        self.c_running -= outcome.cost;
        self.cur_state = Some(outcome.next_state.clone());
    }
}

/// Per-episode outcome statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub seed: u64,
    /// Mean over slots of the post-update average AoI.
    pub mean_aoi: f64,
    pub total_energy: f64,
    /// True exactly when the budget was not met strictly.
    pub violated: bool,
    pub served_success: usize,
    /// Post-update average AoI per slot.
    pub aoi_trace: Vec<f64>,
}

impl EpisodeMetrics {
    /// Rewards are negated post-update average AoI, so the trace and its
    /// mean come straight from the step records.
    pub fn from_steps(
        steps: &[StepRecord],
        log: &ServiceLog,
        cfg: &EnvConfig,
        seed: u64,
    ) -> Self {
        let aoi_trace: Vec<f64> = steps.iter().map(|s| -s.reward).collect();
        let mean_aoi = aoi_trace.iter().sum::<f64>() / aoi_trace.len().max(1) as f64;
        let total_energy: f64 = steps.iter().map(|s| s.cost).sum();
        Self {
            seed,
            mean_aoi,
            total_energy,
            violated: total_energy >= cfg.energy_budget,
            served_success: log.iter().filter(|e| e.served_ok).count(),
            aoi_trace,
        }
    }
}

/// One prompt-conditioned episode of Algorithm-style online acting.
///
/// The prompt comes from the online buffer when it holds anything, otherwise
/// from the bootstrap trajectories. The finished episode is sliced into
/// prompt-length segments which are pushed into the buffer FIFO. The returned
/// trajectory's `rtg`/`ctg` fields hold the decremented token values.
#[allow(clippy::too_many_arguments)]
pub fn online_episode(
    params: &ModelParams,
    cfg: &EnvConfig,
    mob: &MobilityParams,
    r_target: f64,
    c_target: f64,
    buffer: &mut OnlineBuffer,
    bootstrap: Option<&[Trajectory]>,
    env_tag: u32,
    seed: u64,
) -> Result<(Trajectory, EpisodeMetrics), DeployError> {
    let mut prng = EpisodeRng::seed_from_u64(derive_seed(seed, PROMPT_TAG, 1));
    let prompt = match buffer.sample(&mut prng) {
        Some(p) => p.clone(),
        None => match bootstrap {
            Some(pool) if !pool.is_empty() => {
                sample_prompt(pool, params.config.prompt_len, &mut prng)?
            }
            _ => return Err(DeployError::NoPromptSource),
        },
    };

    let mut ctl = ApdtController::new(params, PromptSource::Fixed(prompt), r_target, c_target);
    let (_, log) = rollout(&mut ctl, cfg, mob, env_tag, seed)?;
    let metrics = EpisodeMetrics::from_steps(ctl.history(), &log, cfg, seed);
    for seg in ctl.harvest_segments() {
        buffer.push(seg);
    }
    Ok((
        Trajectory {
            env_tag,
            seed,
            steps: ctl.history().to_vec(),
        },
        metrics,
    ))
}

/// Aggregate of an evaluation sweep.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub per_episode: Vec<EpisodeMetrics>,
    pub mean_aoi: f64,
    pub std_aoi: f64,
    pub mean_energy: f64,
    pub violation_rate: f64,
    /// Episodes the policy refused (padded encoder overflow).
    pub skipped: usize,
}

/// NaN stats when nothing completed; callers that require completions guard
/// for themselves.
fn summarize(per_episode: Vec<EpisodeMetrics>, skipped: usize) -> EvalSummary {
    let n = per_episode.len() as f64;
    let mean_aoi = per_episode.iter().map(|m| m.mean_aoi).sum::<f64>() / n;
    let var = per_episode
        .iter()
        .map(|m| (m.mean_aoi - mean_aoi).powi(2))
        .sum::<f64>()
        / n;
    EvalSummary {
        mean_aoi,
        std_aoi: var.sqrt(),
        mean_energy: per_episode.iter().map(|m| m.total_energy).sum::<f64>() / n,
        violation_rate: per_episode.iter().filter(|m| m.violated).count() as f64 / n,
        per_episode,
        skipped,
    }
}

fn is_capacity_overflow(err: &DatasetError) -> bool {
    matches!(
        err,
        DatasetError::Policy(PolicyError::Model(ModelError::TooManyUsers { .. }))
    )
}

/// Runs one episode per seed and aggregates. The seed list fully determines
/// every number in the result.
pub fn evaluate(
    policy: &mut dyn Policy,
    cfg: &EnvConfig,
    mob: &MobilityParams,
    env_tag: u32,
    seeds: &[u64],
) -> Result<EvalSummary, DeployError> {
    if seeds.is_empty() {
        return Err(DeployError::NoEpisodes);
    }
    let mut per_episode = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (traj, log) = rollout(policy, cfg, mob, env_tag, seed)?;
        per_episode.push(EpisodeMetrics::from_steps(&traj.steps, &log, cfg, seed));
    }
    Ok(summarize(per_episode, 0))
}

/// Like [`evaluate`] but skips (and counts) episodes the padded encoder
/// cannot represent instead of failing the sweep; an all-skipped sweep
/// yields NaN statistics.
pub fn evaluate_skipping_overflow(
    policy: &mut dyn Policy,
    cfg: &EnvConfig,
    mob: &MobilityParams,
    env_tag: u32,
    seeds: &[u64],
) -> Result<EvalSummary, DeployError> {
    let mut per_episode = Vec::with_capacity(seeds.len());
    let mut skipped = 0;
    for &seed in seeds {
        match rollout(policy, cfg, mob, env_tag, seed) {
            Ok((traj, log)) => {
                per_episode.push(EpisodeMetrics::from_steps(&traj.steps, &log, cfg, seed))
            }
            Err(e) if is_capacity_overflow(&e) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(summarize(per_episode, skipped))
}

/// Outcome of a full online deployment run.
#[derive(Debug, Clone)]
pub struct DeployReport {
    pub episodes: Vec<EpisodeMetrics>,
    pub r_target: f64,
    pub c_target: f64,
    /// True when the moving-average AoI plateaued before the episode budget.
    pub converged: bool,
}

/// Algorithm-style online deployment: repeated prompt-conditioned episodes
/// feeding the buffer, stopping at the episode budget or when the 10-episode
/// moving average of episode AoI stops improving by 0.5%.
#[allow(clippy::too_many_arguments)]
pub fn deploy_run(
    params: &ModelParams,
    cfg: &EnvConfig,
    mob: &MobilityParams,
    bootstrap: &[Trajectory],
    buffer_capacity: usize,
    max_episodes: usize,
    env_tag: u32,
    base_seed: u64,
) -> Result<DeployReport, DeployError> {
    let returns: Vec<f64> = bootstrap.iter().map(|t| t.episode_return()).collect();
    let (r_target, c_target) = choose_targets(&returns, cfg)?;
    let mut buffer = OnlineBuffer::new(buffer_capacity);
    let mut episodes = Vec::with_capacity(max_episodes);
    let mut aoi_series = Vec::with_capacity(max_episodes);
    let mut converged = false;
    for ep in 0..max_episodes {
        let seed = derive_seed(base_seed, DEPLOY_TAG, ep as u64);
        let (_, metrics) = online_episode(
            params,
            cfg,
            mob,
            r_target,
            c_target,
            &mut buffer,
            Some(bootstrap),
            env_tag,
            seed,
        )?;
        aoi_series.push(metrics.mean_aoi);
        episodes.push(metrics);
        if plateaued(&aoi_series, 10, 5e-3) {
            converged = true;
            break;
        }
    }
    Ok(DeployReport {
        episodes,
        r_target,
        c_target,
        converged,
    })
}

/// One row of the encoder ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub density: f64,
    pub policy: &'static str,
    pub mean_aoi: f64,
    pub std_aoi: f64,
    pub violation_rate: f64,
    pub skipped: usize,
}

/// Evaluates the attention and padded models across user densities. Pool
/// prompts come per episode from the supplied bootstrap trajectories; padded
/// episodes whose population overflows `u_max` are skipped and counted.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    attn: &ModelParams,
    padded: &ModelParams,
    densities: &[f64],
    cfg: &EnvConfig,
    mob: &MobilityParams,
    bootstrap: &[Trajectory],
    seeds: &[u64],
    targets: (f64, f64),
) -> Result<Vec<AblationRow>, DeployError> {
    let mut rows = Vec::with_capacity(densities.len() * 2);
    for &density in densities {
        let dcfg = EnvConfig {
            rho: density,
            ..cfg.clone()
        };
        let dmob = MobilityParams {
            arrival_rate: crate::mobility::calibrate_density(density).arrival_rate,
            ..mob.clone()
        };
        for (name, params) in [("attention", attn), ("padded", padded)] {
            let mut ctl = ApdtController::new(
                params,
                PromptSource::Pool(bootstrap.to_vec()),
                targets.0,
                targets.1,
            );
            let summary =
                evaluate_skipping_overflow(&mut ctl, &dcfg, &dmob, density.round() as u32, seeds)?;
            rows.push(AblationRow {
                density,
                policy: name,
                mean_aoi: summary.mean_aoi,
                std_aoi: summary.std_aoi,
                violation_rate: summary.violation_rate,
                skipped: summary.skipped,
            });
        }
    }
    Ok(rows)
}

/// Writes per-episode metrics as
/// `episode,seed,avg_aoi,total_energy_J,violated,served_success`.
pub fn write_metrics_csv(metrics: &[EpisodeMetrics], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("episode,seed,avg_aoi,total_energy_J,violated,served_success\n");
    for (i, m) in metrics.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, m.seed, m.mean_aoi, m.total_energy, m.violated, m.served_success
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Writes ablation rows as `density,policy,mean_aoi,std_aoi,violation_rate`.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("density,policy,mean_aoi,std_aoi,violation_rate\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.density, r.policy, r.mean_aoi, r.std_aoi, r.violation_rate
        ));
    }
    write_atomic(path, out.as_bytes())
}
