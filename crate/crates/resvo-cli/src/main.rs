//! Command-line entry points: training runs, checkpoint evaluation, and the
//! closed-form dilemma analyzer.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use clap::{Args, Parser, Subcommand};
use resvo::analyzer::{
    emit_vector_field, field_to_csv, run_dynamics, trajectory_to_csv, AnalyzerState, GridSpec,
};
use resvo::checkpoint::{read_checkpoint, write_checkpoint};
use resvo::config::{ConfigError, ExperimentConfig, RunMeta};
use resvo::metrics::{rows_to_csv, write_atomic, MetricsRow};
use resvo::trainer::{BaselineKind, IterationReport, Trainer};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "resvo", version, about = "Reward-sharing role emergence lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment described by a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a metrics summary.
    Eval(EvalArgs),
    /// Closed-form two-player dilemma dynamics: vector field and trajectory.
    AnalyzeIpd(AnalyzeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Freeze sharing instead of learning it
    /// (no_sharing or fixed_prosocial).
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Write one PPM frame per step into this directory.
    #[arg(long)]
    render: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, default_value_t = 0.5)]
    theta1: f64,
    #[arg(long, default_value_t = 0.5)]
    theta2: f64,
    /// Four comma-separated reals: wC11,wC12,wD11,wD12.
    #[arg(long, default_value = "1,0,1,0")]
    w1: String,
    /// Four comma-separated reals: wC21,wC22,wD21,wD22.
    #[arg(long, default_value = "0,1,0,1")]
    w2: String,
    #[arg(long, default_value_t = 500)]
    rounds: usize,
    #[arg(long, default_value_t = 10)]
    policy_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    zeta: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// Grid resolution per axis for the vector field.
    #[arg(long, default_value_t = 21)]
    grid: usize,
    #[arg(long, default_value = "field.csv")]
    field_out: PathBuf,
    #[arg(long, default_value = "trajectory.csv")]
    traj_out: PathBuf,
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::AnalyzeIpd(args) => cmd_analyze_ipd(args),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

enum CliError {
    /// Bad invocation, unreadable or invalid config: exit 2.
    Usage(String),
    /// Failure while running: exit 1.
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        config.output_dir = Some(out.display().to_string());
    }
    let out_dir = PathBuf::from(
        config
            .output_dir
            .clone()
            .ok_or_else(|| CliError::Usage("no output directory (use --out)".into()))?,
    );
    let baseline = match &args.baseline {
        Some(text) => Some(text.parse::<BaselineKind>().map_err(CliError::Usage)?),
        None => None,
    };

    for &seed in &config.seeds {
        run_one_seed(&config, seed, &out_dir, baseline)?;
    }
    Ok(())
}

fn run_one_seed(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    baseline: Option<BaselineKind>,
) -> Result<(), CliError> {
    let seed_dir = out_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&seed_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", seed_dir.display())))?;

    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    let resolved = ExperimentConfig {
        env: config.env.clone(),
        train: train_cfg.clone(),
        output_dir: Some(seed_dir.display().to_string()),
        seeds: vec![seed],
        checkpoint_interval: config.checkpoint_interval,
    };
    write_atomic(&seed_dir.join("resolved_config.toml"), resolved.to_toml().as_bytes())
        .map_err(|e| CliError::Runtime(format!("writing resolved config: {e}")))?;

    let mut trainer = Trainer::new(config.env.clone(), train_cfg.clone(), baseline)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let meta = RunMeta { env: config.env.clone(), train: train_cfg.clone(), baseline };
    let meta_toml = meta.to_toml();
    let metrics_path = seed_dir.join("metrics.csv");
    let mut rows: Vec<MetricsRow> = Vec::new();
    write_atomic(&metrics_path, rows_to_csv(&rows).as_bytes())
        .map_err(|e| CliError::Runtime(format!("writing metrics: {e}")))?;

    let interval = config.checkpoint_interval;
    for iteration in 0..train_cfg.total_iterations {
        let report = trainer
            .train_iteration(iteration)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        append_rows(&mut rows, &report, seed);
        write_atomic(&metrics_path, rows_to_csv(&rows).as_bytes())
            .map_err(|e| CliError::Runtime(format!("writing metrics: {e}")))?;
        if interval > 0 && (iteration + 1) % interval == 0 {
            let path = seed_dir.join(format!("checkpoint_{:06}.ckpt", iteration + 1));
            write_checkpoint(&path, &trainer.to_checkpoint(meta_toml.clone()))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }

    write_checkpoint(
        &seed_dir.join("checkpoint_final.ckpt"),
        &trainer.to_checkpoint(meta_toml),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn append_rows(rows: &mut Vec<MetricsRow>, report: &IterationReport, seed: u64) {
    for agent in 0..report.extrinsic_mean.len() {
        rows.push(MetricsRow {
            iteration: report.iteration,
            seed,
            agent_id: agent,
            extrinsic_reward_mean: report.extrinsic_mean[agent],
            shaped_reward_mean: report.shaped_mean[agent],
            reward_given_mean: report.given_mean[agent],
            reward_received_mean: report.received_mean[agent],
            svo_rank_mean: report.svo_rank_mean,
            mi_loss: report.mi_loss,
            steps_per_episode: report.steps_per_episode,
            levers_pulled: report.levers_pulled[agent],
            waste_cleaned: report.waste_cleaned[agent],
            apples_collected: report.apples_collected[agent],
        });
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&args.checkpoint)
        .map_err(|e| CliError::Usage(format!("cannot load checkpoint: {e}")))?;
    let meta = RunMeta::parse(&ckpt.meta)
        .map_err(|e| CliError::Usage(format!("bad checkpoint metadata: {e}")))?;
    let mut trainer = Trainer::new(meta.env, meta.train, meta.baseline)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    trainer
        .restore(&ckpt)
        .map_err(|e| CliError::Usage(format!("checkpoint does not match its environment: {e}")))?;

    if args.episodes == 0 {
        println!("episodes: 0");
        return Ok(());
    }

    if let Some(dir) = &args.render {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    let render_dir = args.render.clone();
    let mut frame_error: Option<String> = None;
    let mut sink = |index: usize, frame: resvo::envs::Frame| {
        if let Some(dir) = &render_dir {
            let path = dir.join(format!("frame_{index:06}.ppm"));
            if let Err(e) = frame.save_ppm(&path) {
                frame_error.get_or_insert(format!("writing {}: {e}", path.display()));
            }
        }
    };
    let episodes = trainer
        .evaluate(args.episodes, if args.render.is_some() { Some(&mut sink) } else { None })
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(err) = frame_error {
        return Err(CliError::Runtime(err));
    }

    let n = episodes[0].traj.num_agents();
    let count = episodes.len() as f64;
    println!("episodes: {}", episodes.len());
    let steps: f64 = episodes.iter().map(|e| e.traj.len() as f64).sum::<f64>() / count;
    println!("steps_per_episode: {steps:.3}");
    for agent in 0..n {
        let ext: f64 = episodes
            .iter()
            .map(|e| e.traj.agents[agent].steps.iter().map(|s| s.extrinsic_reward).sum::<f64>())
            .sum::<f64>()
            / count;
        let shaped: f64 = episodes
            .iter()
            .map(|e| e.traj.agents[agent].steps.iter().map(|s| s.shaped_reward).sum::<f64>())
            .sum::<f64>()
            / count;
        println!("agent {agent}: extrinsic {ext:.4} shaped {shaped:.4}");
    }
    Ok(())
}

fn parse_w(text: &str, flag: &str) -> Result<[f64; 4], CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(CliError::Usage(format!("--{flag} needs 4 comma-separated reals")));
    }
    let mut out = [0.0; 4];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .parse::<f64>()
            .map_err(|e| CliError::Usage(format!("--{flag}: bad number '{part}': {e}")))?;
    }
    Ok(out)
}

fn cmd_analyze_ipd(args: AnalyzeArgs) -> Result<(), CliError> {
    let w1 = parse_w(&args.w1, "w1")?;
    let w2 = parse_w(&args.w2, "w2")?;
    let state = AnalyzerState {
        theta1: args.theta1,
        theta2: args.theta2,
        w1,
        w2,
        zeta: args.zeta,
        beta: args.beta,
        gamma: args.gamma,
    };
    state.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let field =
        emit_vector_field(w1, w2, GridSpec::unit(args.grid), args.zeta, args.beta, args.gamma)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    write_atomic(&args.field_out, field_to_csv(&field).as_bytes())
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", args.field_out.display())))?;

    let trajectory = run_dynamics(&state, args.rounds, args.policy_steps)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&args.traj_out, trajectory_to_csv(&trajectory).as_bytes())
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", args.traj_out.display())))?;

    let last = trajectory.last().expect("at least the initial state");
    println!(
        "rounds: {} final theta1 {:.4} theta2 {:.4}",
        trajectory.len() - 1,
        last.theta1,
        last.theta2
    );
    Ok(())
}
