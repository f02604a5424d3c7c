//! Command-line orchestration: dataset generation, offline pre-training,
//! online deployment, evaluation sweeps, the gradient gate and the encoder
//! ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::{
    build_dataset, build_sequence_range, load_dataset, rollout, DatasetError, GreedyExpert,
    MaxFlightPolicy, Policy, PromptSegment, RandomPolicy, Trajectory,
};
use crate::deploy::{
    choose_targets, deploy_run, evaluate, run_ablation, write_ablation_csv, write_metrics_csv,
    ApdtController, DeployError, PromptSource,
};
use crate::env::{EnvConfig, EnvError};
use crate::mobility::{calibrate_density, MobilityParams};
use crate::model::{
    action_targets, conditioned_fixture, finite_diff_check, ModelError, ModelParams, Normalizers,
    StateEncoderKind,
};
use crate::plot::{write_line_chart, PlotError, Series};
use crate::rng::derive_seed;
use crate::trainer::{
    load_checkpoint, pretrain, save_checkpoint, write_telemetry_csv, EnvSet, ResumeState,
    TrainError,
};

const GEN_TAG: u64 = 0x6765_6e64;
const DEPLOY_TAG: u64 = 0x6465_7063;
const EVAL_TAG: u64 = 0x6576_6361;
const ABLATE_TAG: u64 = 0x6162_6c61;
const INIT_TAG: u64 = 0x696e_6974;
const GRADCHECK_TAG: u64 = 0x6763_6b31;

/// Tolerance of the gradient gate.
const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("gradient check failed: max relative error {got:e} exceeds {tol:e}")]
    GradCheckFailed { got: f64, tol: f64 },
}

#[derive(Debug, Parser)]
#[command(
    name = "apdt",
    about = "UAV data-collection planning with a prompt decision transformer",
    version
)]
pub struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Experiment seed (beats APDT_SEED and the config value).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenPolicy {
    Greedy,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalPolicy {
    Apdt,
    Greedy,
    Random,
    MaxFlight,
}

impl EvalPolicy {
    fn name(self) -> &'static str {
        match self {
            EvalPolicy::Apdt => "apdt",
            EvalPolicy::Greedy => "greedy",
            EvalPolicy::Random => "random",
            EvalPolicy::MaxFlight => "max_flight",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out a scripted policy and write one JSONL dataset per env tag.
    GenData {
        /// Episodes per environment tag.
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = GenPolicy::Greedy)]
        policy: GenPolicy,
        /// Fixed user counts, one dataset each.
        #[arg(long, value_delimiter = ',', default_value = "11,13,15")]
        env_tags: Vec<u32>,
    },
    /// Pre-train the model on the generated datasets.
    Pretrain {
        /// Dataset directory (default: paths.data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write (default: paths.checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint at --out; keeps its recorded seed so
        /// the step stream continues where it stopped.
        #[arg(long)]
        resume: bool,
    },
    /// Run online prompt-conditioned deployment across user densities.
    Deploy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episode budget per density (default: deploy.max_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Densities to sweep (default: deploy.densities).
        #[arg(long, value_delimiter = ',')]
        density: Option<Vec<f64>>,
    },
    /// Evaluate a policy over seeded episodes and write per-episode metrics.
    Eval {
        #[arg(long, value_enum)]
        policy: EvalPolicy,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episode count (default: deploy.eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Density override; the config env is used as-is when omitted.
        #[arg(long)]
        density: Option<f64>,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck,
    /// Compare attention and zero-padded state encoders across densities.
    Ablate {
        #[arg(long)]
        checkpoint_attn: PathBuf,
        #[arg(long)]
        checkpoint_padded: PathBuf,
        #[arg(long, value_delimiter = ',')]
        densities: Option<Vec<f64>>,
    },
}

/// Loads the config (explicit file or defaults) and resolves the seed.
fn load_config(cli_config: Option<&Path>, cli_seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match cli_config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.resolve_seed(cli_seed)?;
    Ok(cfg)
}

/// An env with the population pinned to `tag` users and turnover disabled:
/// the fixed-user scenarios trained on offline.
fn fixed_user_env(cfg: &ExperimentConfig, tag: u32) -> (EnvConfig, MobilityParams) {
    (
        EnvConfig {
            rho: tag as f64,
            ..cfg.env.clone()
        },
        MobilityParams {
            arrival_rate: 0.0,
            departure_prob: 0.0,
            ..cfg.mobility.clone()
        },
    )
}

/// An env at average density `rho` with arrivals calibrated to hold it.
fn density_env(cfg: &ExperimentConfig, rho: f64) -> (EnvConfig, MobilityParams) {
    (
        EnvConfig {
            rho,
            ..cfg.env.clone()
        },
        MobilityParams {
            arrival_rate: calibrate_density(rho).arrival_rate,
            ..cfg.mobility.clone()
        },
    )
}

fn dataset_path(data_dir: &Path, tag: u32) -> PathBuf {
    data_dir.join(format!("env_{tag}.jsonl"))
}

/// Discovers `env_<tag>.jsonl` files, sorted by tag for a stable order.
fn discover_datasets(data_dir: &Path) -> Result<Vec<(u32, PathBuf)>, CliError> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(data_dir).map_err(|e| {
        CliError::Invalid(format!("cannot read data dir {}: {e}", data_dir.display()))
    })? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(tag) = name
            .strip_prefix("env_")
            .and_then(|s| s.strip_suffix(".jsonl"))
            .and_then(|s| s.parse::<u32>().ok())
        {
            found.push((tag, path));
        }
    }
    if found.is_empty() {
        return Err(CliError::Invalid(format!(
            "no env_<tag>.jsonl datasets in {}",
            data_dir.display()
        )));
    }
    found.sort_by_key(|(tag, _)| *tag);
    Ok(found)
}

fn load_all_datasets(data_dir: &Path) -> Result<Vec<(u32, Vec<Trajectory>)>, CliError> {
    discover_datasets(data_dir)?
        .into_iter()
        .map(|(tag, path)| Ok((tag, load_dataset(&path)?)))
        .collect()
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    Ok(load_checkpoint(path)?.params)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenData {
            episodes,
            policy,
            env_tags,
        } => cmd_gen_data(&cfg, episodes, policy, &env_tags),
        Command::Pretrain { data, out, resume } => cmd_pretrain(&cfg, data, out, resume),
        Command::Deploy {
            checkpoint,
            episodes,
            density,
        } => cmd_deploy(&cfg, checkpoint, episodes, density),
        Command::Eval {
            policy,
            checkpoint,
            episodes,
            density,
        } => cmd_eval(&cfg, policy, checkpoint, episodes, density),
        Command::GradCheck => cmd_grad_check(&cfg),
        Command::Ablate {
            checkpoint_attn,
            checkpoint_padded,
            densities,
        } => cmd_ablate(&cfg, &checkpoint_attn, &checkpoint_padded, densities),
    }
}

fn cmd_gen_data(
    cfg: &ExperimentConfig,
    episodes: usize,
    policy: GenPolicy,
    env_tags: &[u32],
) -> Result<(), CliError> {
    if episodes == 0 {
        return Err(CliError::Invalid("--episodes must be >= 1".into()));
    }
    if env_tags.is_empty() {
        return Err(CliError::Invalid("--env-tags must name at least one env".into()));
    }
    std::fs::create_dir_all(&cfg.paths.data_dir)?;
    for &tag in env_tags {
        let (env, mob) = fixed_user_env(cfg, tag);
        env.validate()?;
        let mut greedy = GreedyExpert;
        let mut random = RandomPolicy::new(derive_seed(cfg.seed, GEN_TAG, tag as u64));
        let policy: &mut dyn Policy = match policy {
            GenPolicy::Greedy => &mut greedy,
            GenPolicy::Random => &mut random,
        };
        let path = dataset_path(&cfg.paths.data_dir, tag);
        let stats = build_dataset(policy, episodes, &env, &mob, tag, cfg.seed, &path)?;
        let trajs = load_dataset(&path)?;
        let n = trajs.len().max(1) as f64;
        let mean_return = trajs.iter().map(|t| t.episode_return()).sum::<f64>() / n;
        let mean_energy = trajs.iter().map(|t| t.episode_energy()).sum::<f64>() / n;
        println!(
            "env {tag}: wrote {} episodes ({} dropped for budget) to {}; mean return {:.3}, mean energy {:.1} J",
            stats.written,
            stats.dropped,
            stats.path.display(),
            mean_return,
            mean_energy
        );
    }
    Ok(())
}

fn cmd_pretrain(
    cfg: &ExperimentConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: bool,
) -> Result<(), CliError> {
    let data_dir = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let out_path = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::create_dir_all(&cfg.paths.out_dir)?;

    let datasets = load_all_datasets(&data_dir)?;
    let envs: Vec<EnvSet> = datasets
        .iter()
        .map(|(tag, trajs)| EnvSet {
            env_tag: *tag as u64,
            dataset: trajs,
            prompts: trajs,
        })
        .collect();
    for (tag, trajs) in &datasets {
        println!("env {tag}: {} trajectories", trajs.len());
    }

    let mut tcfg = cfg.train.clone();
    let (mut params, resume_state) = if resume {
        let ck = load_checkpoint(&out_path)?;
        if ck.params.config != cfg.model {
            return Err(CliError::Invalid(format!(
                "checkpoint model {:?} does not match the configured model {:?}; refusing to resume",
                ck.params.config, cfg.model
            )));
        }
        // The recorded seed keeps the per-step sampling stream continuous.
        tcfg.seed = ck.train_seed;
        let n = ck.params.n_params();
        let opt = ck.opt.unwrap_or_else(|| crate::trainer::AdamState::new(n));
        println!("resuming from step {} of {}", ck.step, out_path.display());
        (ck.params, Some(ResumeState { opt, step: ck.step }))
    } else {
        let params = ModelParams::new(
            cfg.model.clone(),
            Normalizers::from_env(&cfg.env),
            derive_seed(cfg.seed, INIT_TAG, 0),
        )?;
        (params, None)
    };

    let started = Instant::now();
    let outcome = match pretrain(&mut params, &envs, &tcfg, resume_state) {
        Ok(o) => o,
        Err(e @ TrainError::NonFiniteLoss { .. }) => {
            // Parameters were restored to the last good state; keep them.
            save_checkpoint(&params, None, 0, tcfg.seed, &out_path)?;
            eprintln!(
                "training aborted ({e}); last-good parameters saved to {}",
                out_path.display()
            );
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };

    save_checkpoint(
        &params,
        Some(&outcome.opt),
        outcome.next_step,
        tcfg.seed,
        &out_path,
    )?;
    let csv_path = cfg.paths.out_dir.join("train_loss.csv");
    write_telemetry_csv(&outcome.report.rows, &csv_path)?;

    let r = &outcome.report;
    for (step, loss) in &r.eval_curve {
        println!("step {step}: held-out loss {loss:.6}");
    }
    println!(
        "trained to step {} in {:.1}s: loss {:.6} -> {:.6}{}; checkpoint {}, telemetry {}",
        outcome.next_step,
        started.elapsed().as_secs_f64(),
        r.initial_loss,
        r.final_loss,
        if r.converged { " (plateaued)" } else { "" },
        out_path.display(),
        csv_path.display()
    );
    Ok(())
}

fn cmd_deploy(
    cfg: &ExperimentConfig,
    checkpoint: Option<PathBuf>,
    episodes: Option<usize>,
    density: Option<Vec<f64>>,
) -> Result<(), CliError> {
    let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let params = load_model(&ckpt)?;
    let densities = density.unwrap_or_else(|| cfg.deploy.densities.clone());
    if densities.is_empty() {
        return Err(CliError::Invalid("--density list is empty".into()));
    }
    let episodes = episodes.unwrap_or(cfg.deploy.max_episodes);
    if episodes == 0 {
        return Err(CliError::Invalid("--episodes must be >= 1".into()));
    }
    let bootstrap: Vec<Trajectory> = load_all_datasets(&cfg.paths.data_dir)?
        .into_iter()
        .flat_map(|(_, t)| t)
        .collect();
    std::fs::create_dir_all(&cfg.paths.out_dir)?;

    let mut summary = String::from("density,mean_aoi,std_aoi,mean_energy,violation_rate\n");
    let mut by_episode = Vec::new();
    for &rho in &densities {
        let (env, mob) = density_env(cfg, rho);
        env.validate()?;
        let base_seed = derive_seed(cfg.seed, DEPLOY_TAG, rho.to_bits());
        let report = deploy_run(
            &params,
            &env,
            &mob,
            &bootstrap,
            cfg.deploy.buffer_capacity,
            episodes,
            rho.round() as u32,
            base_seed,
        )?;

        let metrics_path = cfg.paths.out_dir.join(format!("deploy_metrics_rho{rho}.csv"));
        write_metrics_csv(&report.episodes, &metrics_path)?;
        let first = &report.episodes[0];
        let last = report.episodes.last().expect("at least one episode ran");
        write_line_chart(
            &cfg.paths.out_dir.join(format!("aoi_trace_rho{rho}.svg")),
            &format!("Per-slot average AoI (density {rho})"),
            "slot",
            "average AoI",
            &[
                Series::from_values("first episode", &first.aoi_trace),
                Series::from_values("last episode", &last.aoi_trace),
            ],
        )?;

        let aois: Vec<f64> = report.episodes.iter().map(|m| m.mean_aoi).collect();
        let n = aois.len() as f64;
        let mean = aois.iter().sum::<f64>() / n;
        let std = (aois.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mean_energy =
            report.episodes.iter().map(|m| m.total_energy).sum::<f64>() / n;
        let viol =
            report.episodes.iter().filter(|m| m.violated).count() as f64 / n;
        summary.push_str(&format!("{rho},{mean},{std},{mean_energy},{viol}\n"));
        by_episode.push(Series::from_values(format!("density {rho}"), &aois));
        println!(
            "density {rho}: {} episodes, mean AoI {:.3} (std {:.3}), mean energy {:.1} J, violations {:.0}%{}",
            report.episodes.len(),
            mean,
            std,
            mean_energy,
            viol * 100.0,
            if report.converged { " (plateaued)" } else { "" }
        );
    }
    crate::dataset::write_atomic(
        &cfg.paths.out_dir.join("deploy_summary.csv"),
        summary.as_bytes(),
    )?;
    write_line_chart(
        &cfg.paths.out_dir.join("deploy_aoi_by_episode.svg"),
        "Mean episode AoI over online episodes",
        "episode",
        "mean AoI",
        &by_episode,
    )?;
    Ok(())
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    policy: EvalPolicy,
    checkpoint: Option<PathBuf>,
    episodes: Option<usize>,
    density: Option<f64>,
) -> Result<(), CliError> {
    let n_episodes = episodes.unwrap_or(cfg.deploy.eval_episodes);
    if n_episodes == 0 {
        return Err(CliError::Invalid("--episodes must be >= 1".into()));
    }
    let (env, mob) = match density {
        Some(rho) => density_env(cfg, rho),
        None => (cfg.env.clone(), cfg.mobility.clone()),
    };
    env.validate()?;
    let env_tag = env.rho.round() as u32;
    let seeds: Vec<u64> = (0..n_episodes)
        .map(|i| derive_seed(cfg.seed, EVAL_TAG, i as u64))
        .collect();

    let params;
    let mut apdt_ctl;
    let mut greedy = GreedyExpert;
    let mut random = RandomPolicy::new(derive_seed(cfg.seed, EVAL_TAG, u64::MAX));
    let mut maxf = MaxFlightPolicy::new(derive_seed(cfg.seed, EVAL_TAG, u64::MAX - 1));
    let driver: &mut dyn Policy = match policy {
        EvalPolicy::Apdt => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            params = load_model(&ckpt)?;
            let bootstrap: Vec<Trajectory> = load_all_datasets(&cfg.paths.data_dir)?
                .into_iter()
                .flat_map(|(_, t)| t)
                .collect();
            let returns: Vec<f64> = bootstrap.iter().map(|t| t.episode_return()).collect();
            let (r_t, c_t) = choose_targets(&returns, &env)?;
            apdt_ctl = ApdtController::new(&params, PromptSource::Pool(bootstrap), r_t, c_t);
            &mut apdt_ctl
        }
        EvalPolicy::Greedy => &mut greedy,
        EvalPolicy::Random => &mut random,
        EvalPolicy::MaxFlight => &mut maxf,
    };

    let summary = evaluate(driver, &env, &mob, env_tag, &seeds)?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let csv = cfg
        .paths
        .out_dir
        .join(format!("eval_{}.csv", policy.name()));
    write_metrics_csv(&summary.per_episode, &csv)?;
    println!(
        "{}: {} episodes, mean AoI {:.3} (std {:.3}), mean energy {:.1} J, violation rate {:.2}; wrote {}",
        policy.name(),
        summary.per_episode.len(),
        summary.mean_aoi,
        summary.std_aoi,
        summary.mean_energy,
        summary.violation_rate,
        csv.display()
    );
    Ok(())
}

/// Builds the reference gradient-check problem: a small but real prompted
/// two-step sequence from a scripted rollout, and a well-conditioned
/// parameter point.
fn grad_check_problem(
    cfg: &ExperimentConfig,
    encoder: StateEncoderKind,
) -> Result<(ModelParams, crate::dataset::TokenSequence), CliError> {
    let model_cfg = crate::model::ModelConfig {
        d_model: 16,
        d_k: 8,
        n_layers: 2,
        n_heads: 2,
        context_window: 2,
        prompt_len: 2,
        state_encoder: encoder,
    };
    let env = EnvConfig {
        x_max: 100.0,
        y_max: 100.0,
        horizon: 4,
        rho: 3.0,
        uav_start: [0.0, 0.0],
        ..cfg.env.clone()
    };
    let mob = MobilityParams {
        arrival_rate: 0.0,
        departure_prob: 0.0,
        ..cfg.mobility.clone()
    };
    let params = conditioned_fixture(
        model_cfg,
        Normalizers::from_env(&env),
        derive_seed(cfg.seed, GRADCHECK_TAG, 0),
    )?;
    let (traj, _) = rollout(
        &mut GreedyExpert,
        &env,
        &mob,
        3,
        derive_seed(cfg.seed, GRADCHECK_TAG, 1),
    )?;
    let prompt = PromptSegment {
        steps: traj.steps[..2].to_vec(),
    };
    let seq = build_sequence_range(&traj, 2, 2, Some(&prompt))?;
    Ok((params, seq))
}

fn cmd_grad_check(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for encoder in [
        StateEncoderKind::Attention,
        StateEncoderKind::Padded { u_max: 8 },
    ] {
        let (mut params, seq) = grad_check_problem(cfg, encoder)?;
        let targets = action_targets(&seq, &params);
        let report = finite_diff_check(&mut params, &seq, &targets, 1e-4, None)?;
        println!(
            "{:?} encoder: checked {} parameters, loss {:.6}, max relative error {:.3e} at parameter {}",
            encoder, report.n_checked, report.loss, report.max_rel_err, report.worst_index
        );
        worst = worst.max(report.max_rel_err);
    }
    println!(
        "gradient check finished in {:.1}s: max relative error {worst:.3e} (tolerance {GRAD_TOL:e})",
        started.elapsed().as_secs_f64()
    );
    if worst > GRAD_TOL {
        return Err(CliError::GradCheckFailed {
            got: worst,
            tol: GRAD_TOL,
        });
    }
    println!("PASS");
    Ok(())
}

fn cmd_ablate(
    cfg: &ExperimentConfig,
    ckpt_attn: &Path,
    ckpt_padded: &Path,
    densities: Option<Vec<f64>>,
) -> Result<(), CliError> {
    let attn = load_model(ckpt_attn)?;
    let padded = load_model(ckpt_padded)?;
    if !matches!(attn.config.state_encoder, StateEncoderKind::Attention) {
        return Err(CliError::Invalid(
            "--checkpoint-attn does not hold an attention-encoder model".into(),
        ));
    }
    if !matches!(padded.config.state_encoder, StateEncoderKind::Padded { .. }) {
        return Err(CliError::Invalid(
            "--checkpoint-padded does not hold a padded-encoder model".into(),
        ));
    }
    let densities = densities.unwrap_or_else(|| cfg.deploy.densities.clone());
    if densities.is_empty() {
        return Err(CliError::Invalid("--densities list is empty".into()));
    }
    let bootstrap: Vec<Trajectory> = load_all_datasets(&cfg.paths.data_dir)?
        .into_iter()
        .flat_map(|(_, t)| t)
        .collect();
    let returns: Vec<f64> = bootstrap.iter().map(|t| t.episode_return()).collect();
    let targets = choose_targets(&returns, &cfg.env)?;
    let seeds: Vec<u64> = (0..cfg.deploy.eval_episodes)
        .map(|i| derive_seed(cfg.seed, ABLATE_TAG, i as u64))
        .collect();

    let rows = run_ablation(
        &attn,
        &padded,
        &densities,
        &cfg.env,
        &cfg.mobility,
        &bootstrap,
        &seeds,
        targets,
    )?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let csv = cfg.paths.out_dir.join("ablation.csv");
    write_ablation_csv(&rows, &csv)?;
    for r in &rows {
        println!(
            "density {}: {} mean AoI {:.3} (std {:.3}), violation rate {:.2}{}",
            r.density,
            r.policy,
            r.mean_aoi,
            r.std_aoi,
            r.violation_rate,
            if r.skipped > 0 {
                format!(", {} episodes skipped (population over capacity)", r.skipped)
            } else {
                String::new()
            }
        );
    }
    println!("wrote {}", csv.display());
    Ok(())
}
