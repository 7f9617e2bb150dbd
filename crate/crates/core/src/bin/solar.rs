use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use solar::driver::{
    emit_metrics, evaluate, evaluate_mpc, goal_variants, load_agent, load_model, pretrain_base_model,
    run_solar_with_artifacts, Artifacts, RunConfig,
};
use solar::error::{Result, SolarError};

#[derive(Parser)]
#[command(name = "solar", version, about = "Latent LQR-FLM experiments on simulated navigation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
    /// Worker threads for rollouts and batch inference.
    #[arg(long, env = "SOLAR_WORKERS", global = true)]
    workers: Option<usize>,
}

#[derive(Args)]
struct Overrides {
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints and report.json.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Writes one row of metrics per iteration (train only).
    #[arg(long, global = true)]
    metrics_csv: Option<PathBuf>,
    /// Learn the cost from terminal success labels instead of per-step costs.
    #[arg(long, global = true)]
    sparse: bool,
    /// Replace the learned latent dynamics with a per-step standard-normal prior.
    #[arg(long, global = true)]
    vae_only: bool,
    /// Start from a pretrained base model instead of training one.
    #[arg(long, global = true)]
    transfer_from: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model on random-policy data pooled over the configured goals.
    Pretrain { config: PathBuf },
    /// Run the full loop and write checkpoints and a report.
    Train { config: PathBuf },
    /// Roll out a trained policy; `checkpoint` is a run directory or its model file.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Receding-horizon CEM with a trained model.
    Plan {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
    },
}

fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(d) = &o.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    if o.sparse {
        cfg.sparse_reward = true;
    }
    if o.vae_only {
        cfg.train.vae_only = true;
    }
    if let Some(p) = &o.transfer_from {
        cfg.transfer_from = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_paths(checkpoint: &Path) -> (PathBuf, PathBuf) {
    if checkpoint.is_dir() {
        (checkpoint.join("model.ckpt"), checkpoint.join("policy.ckpt"))
    } else {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        (checkpoint.to_path_buf(), dir.join("policy.ckpt"))
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SolarError::Parse(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let o = &cli.overrides;
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = load_config(&config, o)?;
            let model = pretrain_base_model(&goal_variants(&cfg), &cfg)?;
            let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("base_model.ckpt");
            model.to_checkpoint().save(&path)?;
            println!("{}", path.display());
        }
        Command::Train { config } => {
            let cfg = load_config(&config, o)?;
            let (report, _) = run_solar_with_artifacts(&cfg)?;
            if let Some(path) = &o.metrics_csv {
                emit_metrics(&report, path)?;
            }
            print_json(&report.records)?;
        }
        Command::Eval { checkpoint, config, episodes } => {
            let cfg = load_config(&config, o)?;
            let (model_path, agent_path) = model_paths(&checkpoint);
            let (policy, dynamics) = load_agent(&agent_path)?;
            let artifacts = Artifacts { model: load_model(&model_path)?, policy, dynamics };
            print_json(&evaluate(&cfg.env, &artifacts, episodes, cfg.seed)?)?;
        }
        Command::Plan { checkpoint, config, episodes } => {
            let cfg = load_config(&config, o)?;
            let (model_path, _) = model_paths(&checkpoint);
            let model = load_model(&model_path)?;
            print_json(&evaluate_mpc(&cfg.env, &model, &cfg.cem, episodes, cfg.seed)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
