mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Invalid, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "lococo", version, about = "Segment-level KV cache compression experiments")]
struct Cli {
    /// `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a base model on a byte corpus.
    Pretrain(Overrides),
    /// Train conv heads for a compressing policy on a frozen base.
    Calibrate(Overrides),
    /// Perplexity for one policy at each memory size.
    Eval(Overrides),
    /// Greedy continuation of a prompt.
    Generate(Overrides),
    /// Calibrate and evaluate once per value along one axis.
    Ablate(Overrides),
    /// Side-by-side policy comparison with timing.
    Report(Overrides),
}

/// Flags mirror the configuration keys.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    eval_corpus: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    policy: Option<String>,
    /// Comma-separated policy names for `report`.
    #[arg(long)]
    policies: Option<String>,
    /// Memory size M, or a comma-separated list for `eval`.
    #[arg(long)]
    memory: Option<String>,
    #[arg(long)]
    block_size: Option<String>,
    #[arg(long)]
    kernel_size: Option<String>,
    /// post_conv or pre_conv.
    #[arg(long)]
    relu: Option<String>,
    #[arg(long)]
    n_sink: Option<String>,
    /// Sliding window length; sets M to n_sink + window.
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    heavy_fraction: Option<String>,
    #[arg(long)]
    hybrid_heavy: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr_base: Option<String>,
    #[arg(long)]
    lr_conv: Option<String>,
    #[arg(long)]
    linear_decay: Option<String>,
    #[arg(long)]
    detach_cache: Option<String>,
    #[arg(long)]
    seq_len: Option<String>,
    #[arg(long)]
    eval_length: Option<String>,
    /// Fraction of the corpus held out from pretraining for calibration.
    #[arg(long)]
    holdout: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    #[arg(long)]
    n_layers: Option<String>,
    #[arg(long)]
    n_heads: Option<String>,
    #[arg(long)]
    max_context: Option<String>,
    #[arg(long)]
    mlp_ratio: Option<String>,
    #[arg(long)]
    rope_base: Option<String>,
    #[arg(long)]
    interpolation_scale: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    n_new: Option<String>,
    /// kernel_size, memory_size or policy.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated values along the ablation axis.
    #[arg(long)]
    values: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("corpus", &self.corpus),
            ("eval_corpus", &self.eval_corpus),
            ("checkpoint", &self.checkpoint),
            ("output", &self.output),
            ("out_dir", &self.out_dir),
            ("policy", &self.policy),
            ("policies", &self.policies),
            ("memory", &self.memory),
            ("block_size", &self.block_size),
            ("kernel_size", &self.kernel_size),
            ("relu", &self.relu),
            ("n_sink", &self.n_sink),
            ("window", &self.window),
            ("heavy_fraction", &self.heavy_fraction),
            ("hybrid_heavy", &self.hybrid_heavy),
            ("seed", &self.seed),
            ("steps", &self.steps),
            ("batch_size", &self.batch_size),
            ("lr_base", &self.lr_base),
            ("lr_conv", &self.lr_conv),
            ("linear_decay", &self.linear_decay),
            ("detach_cache", &self.detach_cache),
            ("seq_len", &self.seq_len),
            ("eval_length", &self.eval_length),
            ("holdout", &self.holdout),
            ("d_model", &self.d_model),
            ("n_layers", &self.n_layers),
            ("n_heads", &self.n_heads),
            ("max_context", &self.max_context),
            ("mlp_ratio", &self.mlp_ratio),
            ("rope_base", &self.rope_base),
            ("interpolation_scale", &self.interpolation_scale),
            ("prompt", &self.prompt),
            ("n_new", &self.n_new),
            ("axis", &self.axis),
            ("values", &self.values),
        ]
    }
}

fn build(cli: &Cli) -> anyhow::Result<RunConfig> {
    let (name, flags) = match &cli.command {
        Command::Pretrain(o) => ("pretrain", o),
        Command::Calibrate(o) => ("calibrate", o),
        Command::Eval(o) => ("eval", o),
        Command::Generate(o) => ("generate", o),
        Command::Ablate(o) => ("ablate", o),
        Command::Report(o) => ("report", o),
    };
    let mut cfg = RunConfig::defaults(name);
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for (key, value) in flags.pairs() {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.finish()?;
    Ok(cfg)
}

fn is_validation(err: &anyhow::Error) -> bool {
    if err.downcast_ref::<Invalid>().is_some() {
        return true;
    }
    matches!(
        err.downcast_ref::<lococo::Error>(),
        Some(lococo::Error::Config(_) | lococo::Error::EvenKernel(_) | lococo::Error::TokenOutOfRange(_))
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = build(&cli).and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
