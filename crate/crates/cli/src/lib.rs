//! Command-line driver: train, evaluate and ablate.

pub mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use scout_core::autodiff::CheckpointError;
use scout_core::config::{ConfigError, TrainConfig, Variant};
use scout_core::eval::{eval_csv, evaluate};
use scout_core::trainer::{load_checkpoint, TrainError, Trainer, METRICS_HEADER};

#[derive(Debug, Parser)]
#[command(name = "scout", version, about = "Train and evaluate grouped communicating pursuers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint over independent seeds.
    Eval(EvalArgs),
    /// Train one ablation variant.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Run directory name (default: derived from config, variant and seed).
    #[arg(long)]
    pub name: Option<String>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub variant: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file written by `train`.
    pub checkpoint: PathBuf,
    /// Defaults to the sidecar config written next to the checkpoint.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of evaluation seeds (defaults to `eval.seeds`).
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Output CSV file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 config, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io { .. } | CliError::Checkpoint(_) | CliError::Runtime(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Config(c),
            TrainError::Checkpoint(c) => CliError::Checkpoint(c),
            TrainError::NonFinite { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Effective config: file (or `base`), then overrides, then `--seed`.
pub fn resolve_config(args: &ConfigArgs, base: Option<&Path>) -> Result<TrainConfig, CliError> {
    let mut config = TrainConfig::default();
    if let Some(path) = args.config.as_deref().or(base) {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        config.apply_text(&text)?;
    }
    for o in &args.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn parse_variant(name: &str) -> Result<Variant, CliError> {
    name.parse().map_err(CliError::Usage)
}

fn default_name(args: &RunArgs, config: &TrainConfig) -> String {
    let stem = args
        .config
        .config
        .as_deref()
        .and_then(Path::file_stem)
        .map_or("run".to_string(), |s| s.to_string_lossy().into_owned());
    format!("{stem}_{}_s{}", config.variant, config.seed)
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    if dir.exists() {
        if !overwrite {
            return Err(CliError::Usage(format!(
                "run directory {} exists; pass --overwrite to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<(), CliError> {
    let stem = format!("ckpt_{}", trainer.env_steps());
    trainer.save_checkpoint(&dir.join(format!("{stem}.bin")))?;
    let sidecar = dir.join(format!("{stem}.cfg"));
    fs::write(&sidecar, trainer.config.to_text()).map_err(io_err(&sidecar))
}

/// Train into `<out>/<name>` and return the run directory.
pub fn train(args: &RunArgs, variant: Option<Variant>, log: &mut dyn Write) -> Result<PathBuf, CliError> {
    let mut config = resolve_config(&args.config, None)?;
    if let Some(v) = variant {
        config.variant = v;
    }
    let name = args.name.clone().unwrap_or_else(|| default_name(args, &config));
    let dir = args.out.join(name);
    prepare_dir(&dir, args.overwrite)?;
    let path = dir.join("manifest.cfg");
    fs::write(&path, manifest::render(&config)).map_err(io_err(&path))?;

    let mut trainer = Trainer::new(config)?;
    save_checkpoint(&trainer, &dir)?;
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut episodes = String::from("update,env,team_return,caught,length\n");
    let metrics_path = dir.join("metrics.csv");
    let episodes_path = dir.join("episodes.csv");
    let every = trainer.config.checkpoint_every;
    if trainer.config.frames {
        let frames = dir.join("frames");
        fs::create_dir_all(&frames).map_err(io_err(&frames))?;
    }
    while !trainer.is_finished() {
        let out = trainer.run_update()?;
        let m = &out.metrics;
        metrics.push_str(&m.csv_row());
        metrics.push('\n');
        for e in &out.episodes {
            episodes.push_str(&format!("{},{},{},{},{}\n", m.update, e.env, e.team_return, e.caught, e.length));
        }
        if m.skipped {
            let _ = writeln!(log, "update {}: divergence guard skipped the remaining steps", m.update);
        }
        let _ = writeln!(
            log,
            "update {} steps {} return {} catch {}",
            m.update,
            m.env_steps,
            scout_core::trainer::fmt_metric(m.mean_return),
            scout_core::trainer::fmt_metric(m.catch_frac)
        );
        if trainer.config.frames {
            let path = dir.join("frames").join(format!("update_{:05}.csv", m.update));
            fs::write(&path, out.frames.join("\n") + "\n").map_err(io_err(&path))?;
        }
        fs::write(&metrics_path, &metrics).map_err(io_err(&metrics_path))?;
        fs::write(&episodes_path, &episodes).map_err(io_err(&episodes_path))?;
        if every > 0 && m.update % every == 0 && !trainer.is_finished() {
            save_checkpoint(&trainer, &dir)?;
        }
    }
    if trainer.updates() > 0 {
        save_checkpoint(&trainer, &dir)?;
    }
    Ok(dir)
}

/// `(update, env_steps)` encoded in a `ckpt_<env_steps>.bin` name.
fn checkpoint_steps(path: &Path, config: &TrainConfig) -> Option<(usize, usize)> {
    let stem = path.file_stem()?.to_str()?;
    let steps: usize = stem.strip_prefix("ckpt_")?.parse().ok()?;
    let per = config.horizon * config.n_envs;
    Some((steps.div_ceil(per), steps))
}

/// Evaluate a checkpoint and return the CSV text.
pub fn eval(args: &EvalArgs) -> Result<String, CliError> {
    if !args.checkpoint.is_file() {
        return Err(CliError::Io {
            path: args.checkpoint.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    let sidecar = args.checkpoint.with_extension("cfg");
    let base = sidecar.is_file().then_some(sidecar.as_path());
    let config = resolve_config(&args.config, base)?;
    let (model, normalizer) = load_checkpoint(&config, &args.checkpoint)?;
    let seeds = args.seeds.unwrap_or(config.eval_seeds);
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let records = evaluate(&model, &normalizer, &config, config.seed, seeds)?;
    let lambda_edge = config.lambda_edge_end;
    let csv = eval_csv(&records, config.tau_end, lambda_edge, checkpoint_steps(&args.checkpoint, &config));
    if let Some(out) = &args.out {
        fs::write(out, &csv).map_err(io_err(out))?;
    }
    Ok(csv)
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut stderr = std::io::stderr();
    match cli.command {
        Command::Train(a) => {
            let variant = a.variant.as_deref().map(parse_variant).transpose()?;
            let dir = train(&a.run, variant, &mut stderr)?;
            println!("{}", dir.display());
        }
        Command::Ablate(a) => {
            let variant = parse_variant(&a.variant)?;
            let dir = train(&a.run, Some(variant), &mut stderr)?;
            println!("{}", dir.display());
        }
        Command::Eval(a) => {
            let csv = eval(&a)?;
            if a.out.is_none() {
                print!("{csv}");
            }
        }
    }
    Ok(())
}
