use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory};
use groundrl::toy_env::{train_with, SamplerConfig, DEFAULT_TOY_LR};
use groundrl::{OutputMode, RewardWeights, TrainConfig};
use serde::Deserialize;

use crate::Cli;

/// Fallback seed when neither `--seed` nor the config file sets one.
const SEED_ENV: &str = "SATORI_SEED";

#[derive(Args)]
pub struct TrainArgs {
    /// GRPO updates to run; 0 only evaluates the initial policy.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Rollouts per group (default 16).
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Ratio clip range (default 0.2).
    #[arg(long)]
    pub clip_eps: Option<f64>,
    /// KL penalty coefficient (default 0.05).
    #[arg(long)]
    pub kl_coef: Option<f64>,
    /// Gradient ascent step size (default 30).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Reward weights: four comma-separated values or a preset.
    #[arg(long)]
    pub weights: Option<RewardWeights>,
    /// Output layout: caption-first or bbox-first.
    #[arg(long)]
    pub mode: Option<OutputMode>,
    /// Stop decoding after the answer (bbox-first only).
    #[arg(long)]
    pub early_stop: bool,
    /// Run seed. Falls back to the config file, then SATORI_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the per-step training log (JSONL) here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// JSON file with the same keys as these flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sampling temperature (default 1.0).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Keep only the k most likely tokens when sampling.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Nucleus sampling mass.
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Evaluate every n steps (0 = only at the end).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Held-out tasks per evaluation (default 200).
    #[arg(long)]
    pub eval_tasks: Option<usize>,
    /// Stop once held-out accuracy reaches the target.
    #[arg(long)]
    pub stop_at_target: bool,
    /// Record wall-clock milliseconds in the log (logs stop being reproducible).
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct FileConfig {
    steps: Option<usize>,
    #[serde(alias = "group_size")]
    group_size: Option<usize>,
    #[serde(alias = "clip_eps")]
    clip_eps: Option<f64>,
    #[serde(alias = "kl_coef")]
    kl_coef: Option<f64>,
    lr: Option<f64>,
    weights: Option<WeightsValue>,
    mode: Option<String>,
    #[serde(alias = "early_stop")]
    early_stop: Option<bool>,
    seed: Option<u64>,
    log: Option<PathBuf>,
    temperature: Option<f64>,
    #[serde(alias = "top_k")]
    top_k: Option<usize>,
    #[serde(alias = "top_p")]
    top_p: Option<f64>,
    #[serde(alias = "eval_every")]
    eval_every: Option<usize>,
    #[serde(alias = "eval_tasks")]
    eval_tasks: Option<usize>,
    #[serde(alias = "stop_at_target")]
    stop_at_target: Option<bool>,
    #[serde(alias = "wall_clock")]
    wall_clock: Option<bool>,
}

/// Weights in a config file: the flag string or a JSON array.
#[derive(Deserialize)]
#[serde(untagged)]
enum WeightsValue {
    Text(String),
    List([f64; 4]),
}

impl WeightsValue {
    fn resolve(self) -> Result<RewardWeights> {
        Ok(match self {
            WeightsValue::Text(s) => s.parse()?,
            WeightsValue::List(w) => RewardWeights::new(w)?,
        })
    }
}

fn read_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}='{v}' is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

/// Merged settings: flags, then config file, then defaults.
fn resolve(args: &TrainArgs) -> Result<(TrainConfig, Option<PathBuf>)> {
    let file = match &args.config {
        Some(p) => read_config(p)?,
        None => FileConfig::default(),
    };
    let mut cfg = TrainConfig::default();
    cfg.steps = args.steps.or(file.steps).unwrap_or(cfg.steps);
    cfg.grpo.group_size = args.group_size.or(file.group_size).unwrap_or(cfg.grpo.group_size);
    cfg.grpo.clip_eps = args.clip_eps.or(file.clip_eps).unwrap_or(cfg.grpo.clip_eps);
    cfg.grpo.kl_coef = args.kl_coef.or(file.kl_coef).unwrap_or(cfg.grpo.kl_coef);
    cfg.grpo.learning_rate = args.lr.or(file.lr).unwrap_or(DEFAULT_TOY_LR);
    cfg.weights = match (args.weights, file.weights) {
        (Some(w), _) => w,
        (None, Some(w)) => w.resolve()?,
        (None, None) => cfg.weights,
    };
    cfg.mode = match (args.mode, file.mode) {
        (Some(m), _) => m,
        (None, Some(m)) => m.parse()?,
        (None, None) => cfg.mode,
    };
    cfg.early_stop = args.early_stop || file.early_stop.unwrap_or(false);
    cfg.seed = match args.seed.or(file.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    cfg.sampler = SamplerConfig {
        temperature: args.temperature.or(file.temperature).unwrap_or(1.0),
        top_k: args.top_k.or(file.top_k),
        top_p: args.top_p.or(file.top_p),
    };
    cfg.eval_every = args.eval_every.or(file.eval_every).unwrap_or(cfg.eval_every);
    cfg.eval_tasks = args.eval_tasks.or(file.eval_tasks).unwrap_or(cfg.eval_tasks);
    cfg.stop_at_target = args.stop_at_target || file.stop_at_target.unwrap_or(false);
    cfg.record_elapsed = args.wall_clock || file.wall_clock.unwrap_or(false);
    let log = args.log.clone().or(file.log);
    Ok((cfg, log))
}

pub fn run(args: TrainArgs) -> Result<()> {
    let (cfg, log_path) = resolve(&args)?;
    if let Err(e) = cfg.validate() {
        let mut cmd = Cli::command();
        cmd.build();
        let sub = cmd.find_subcommand_mut("train-toy").expect("train-toy subcommand");
        sub.error(ErrorKind::ArgumentConflict, e.to_string()).exit();
    }

    let mut log = match &log_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => None,
    };
    let (_, summary) = train_with(&cfg, |rec| {
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    if let Some(mut w) = log {
        w.flush()?;
    }

    let e = &summary.final_eval;
    println!(
        "steps {}  seed {}  mode {}  weights {:?}",
        summary.records.len(),
        cfg.seed,
        cfg.mode,
        cfg.weights.as_array()
    );
    match summary.steps_to_target {
        Some(s) => println!("reached {:.2} held-out accuracy at step {s}", cfg.target_accuracy),
        None => println!("did not reach {:.2} held-out accuracy", cfg.target_accuracy),
    }
    println!("mean group reward variance {:.6}", summary.mean_group_reward_variance());
    println!("final held-out accuracy {:.4} ({} tasks, {:.1} tokens per output)", e.accuracy, e.tasks, e.mean_tokens);
    Ok(())
}
