use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use lococo::cache::PolicyKind;
use lococo::corpus;
use lococo::instrumentation::{compare_policies, PolicyReport};
use lococo::model::{evaluate, generate, Checkpoint};
use lococo::training::{calibrate_conv_heads, pretrain};

use crate::config::{invalid, Axis, RunConfig};

pub fn run(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.command == "generate" {
        return cmd_generate(cfg);
    }
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(
        cfg.out_dir.join("run_config.json"),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    match cfg.command.as_str() {
        "pretrain" => cmd_pretrain(cfg),
        "calibrate" => cmd_calibrate(cfg),
        "eval" => cmd_eval(cfg),
        "ablate" => cmd_ablate(cfg),
        "report" => cmd_report(cfg),
        other => unreachable!("unknown command {other}"),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn output_path(cfg: &RunConfig, default_name: &str) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| cfg.out_dir.join(default_name))
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = cfg.input("checkpoint", &cfg.checkpoint)?;
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_corpus(cfg: &RunConfig, what: &str, path: &Option<PathBuf>) -> anyhow::Result<Vec<usize>> {
    let path = cfg.input(what, path)?;
    Ok(corpus::load(path)?)
}

/// Splits the training corpus into (pretraining, calibration) parts.
fn split(cfg: &RunConfig, tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    if cfg.holdout == 0.0 {
        return (tokens.to_vec(), tokens.to_vec());
    }
    corpus::split_holdout(tokens, cfg.holdout, cfg.seq_len)
}

/// Evaluation text: `eval_corpus` if given, else the whole training corpus.
fn eval_tokens(cfg: &RunConfig) -> anyhow::Result<Vec<usize>> {
    if cfg.eval_corpus.is_some() {
        load_corpus(cfg, "eval_corpus", &cfg.eval_corpus)
    } else {
        load_corpus(cfg, "corpus", &cfg.corpus)
    }
}

fn cmd_pretrain(cfg: &RunConfig) -> anyhow::Result<()> {
    let tokens = load_corpus(cfg, "corpus", &cfg.corpus)?;
    let (train, _) = split(cfg, &tokens);
    let (ck, trace) = pretrain(&train, &cfg.model, &cfg.train_config(cfg.seed))?;
    let out = output_path(cfg, "base.lckp");
    ck.save(&out)?;
    trace.write_csv(create(&cfg.out_dir.join("pretrain_loss.csv"))?)?;
    println!(
        "pretrained {} steps, final loss {:.4}",
        trace.records.len(),
        trace.last_loss().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", out.display());
    Ok(())
}

/// Calibrates heads for `kind` at memory `m` and kernel `k`.
fn calibrate(
    cfg: &RunConfig,
    base: &Checkpoint,
    tokens: &[usize],
    kind: PolicyKind,
    m: usize,
    k: usize,
    seed: u64,
) -> anyhow::Result<(Checkpoint, lococo::training::LossTrace)> {
    let policy = cfg.policy_config(kind, m)?;
    Ok(calibrate_conv_heads(
        &base.without_conv_heads(),
        tokens,
        &policy,
        &cfg.calibration_setup(k),
        &cfg.train_config(seed),
    )?)
}

fn cmd_calibrate(cfg: &RunConfig) -> anyhow::Result<()> {
    let m = cfg.single_memory()?;
    if !cfg.policy.uses_conv_heads() {
        return Err(invalid(format!("policy {} has no conv heads to calibrate", cfg.policy)));
    }
    let base = load_checkpoint(cfg)?;
    let tokens = load_corpus(cfg, "corpus", &cfg.corpus)?;
    let (_, held) = split(cfg, &tokens);
    let (ck, trace) = calibrate(cfg, &base, &held, cfg.policy, m, cfg.kernel_size, cfg.seed)?;
    let out = output_path(cfg, "calibrated.lckp");
    ck.save(&out)?;
    trace.write_csv(create(&cfg.out_dir.join("calibrate_loss.csv"))?)?;
    println!(
        "calibrated {} at M={m}, final loss {:.4}",
        cfg.policy,
        trace.last_loss().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let ck = load_checkpoint(cfg)?;
    let tokens = eval_tokens(cfg)?;
    let mut out = create(&cfg.out_dir.join("eval.csv"))?;
    writeln!(
        out,
        "policy,memory_size,block_size,eval_length,perplexity,peak_live_entries,peak_attn_entries"
    )?;
    for &m in &cfg.memory {
        let policy = cfg.policy_config(cfg.policy, m)?;
        let s = evaluate(&ck, &tokens, &policy, &cfg.eval_config())?;
        writeln!(
            out,
            "{},{m},{},{},{},{},{}",
            cfg.policy, cfg.block_size, cfg.eval_length, s.perplexity, s.peak_live_entries, s.peak_attn_entries
        )?;
        let name = format!("trace_{}_m{m}.csv", cfg.policy.name().replace('+', "_"));
        s.trace.write_csv(create(&cfg.out_dir.join(name))?)?;
        println!("{} M={m}: perplexity {:.4}", cfg.policy, s.perplexity);
    }
    out.flush()?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.prompt.is_empty() {
        return Err(invalid("generate needs a non-empty prompt"));
    }
    let ck = load_checkpoint(cfg)?;
    let m = cfg.single_memory()?;
    let policy = cfg.policy_config(cfg.policy, m)?;
    let prompt = corpus::tokenize(cfg.prompt.as_bytes());
    let out = generate(&ck, &prompt, cfg.n_new, cfg.block_size, policy)?;
    let text = corpus::detokenize(&out);
    println!("{}", String::from_utf8_lossy(&text));
    Ok(())
}

/// One ablation point: the (policy, M, k) triple a value selects.
fn ablation_point(cfg: &RunConfig, axis: Axis, value: &str) -> anyhow::Result<(PolicyKind, usize, usize)> {
    let m = cfg.single_memory()?;
    let bad = |e: &dyn std::fmt::Display| invalid(format!("bad {axis:?} value '{value}': {e}"));
    Ok(match axis {
        Axis::KernelSize => (cfg.policy, m, value.parse().map_err(|e| bad(&e))?),
        Axis::MemorySize => (cfg.policy, value.parse().map_err(|e| bad(&e))?, cfg.kernel_size),
        Axis::Policy => (value.parse().map_err(|e| bad(&e))?, m, cfg.kernel_size),
    })
}

fn cmd_ablate(cfg: &RunConfig) -> anyhow::Result<()> {
    let axis = cfg.axis.ok_or_else(|| invalid("ablate needs an axis"))?;
    if cfg.values.is_empty() {
        return Err(invalid("ablate needs a non-empty value list"));
    }
    let points = cfg
        .values
        .iter()
        .map(|v| {
            let (kind, m, k) = ablation_point(cfg, axis, v)?;
            if k % 2 == 0 {
                return Err(invalid(format!("kernel_size must be odd, got {k}")));
            }
            cfg.policy_config(kind, m)?;
            Ok((v.clone(), kind, m, k))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let base = load_checkpoint(cfg)?.without_conv_heads();
    let tokens = load_corpus(cfg, "corpus", &cfg.corpus)?;
    let (_, held) = split(cfg, &tokens);
    let eval = eval_tokens(cfg)?;
    let indexed: Vec<_> = points.into_iter().enumerate().collect();
    let results = lococo::exec::map(&indexed, |(i, (value, kind, m, k))| -> anyhow::Result<(String, f64)> {
        let seed = cfg.seed.wrapping_add(*i as u64);
        let ck = if kind.uses_conv_heads() {
            calibrate(cfg, &base, &held, *kind, *m, *k, seed)?.0
        } else {
            base.clone()
        };
        let s = evaluate(&ck, &eval, &cfg.policy_config(*kind, *m)?, &cfg.eval_config())?;
        Ok((value.clone(), s.perplexity))
    });
    let name = match axis {
        Axis::KernelSize => "kernel_size",
        Axis::MemorySize => "memory_size",
        Axis::Policy => "policy",
    };
    let mut out = create(&cfg.out_dir.join(format!("ablate_{name}.csv")))?;
    writeln!(out, "value,perplexity")?;
    for r in results {
        let (value, ppl) = r?;
        writeln!(out, "{value},{ppl}")?;
        println!("{name}={value}: perplexity {ppl:.4}");
    }
    out.flush()?;
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.policies.is_empty() {
        return Err(invalid("report needs at least one policy"));
    }
    let m = cfg.single_memory()?;
    let policies = cfg
        .policies
        .iter()
        .map(|&k| cfg.policy_config(k, m))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let ck = load_checkpoint(cfg)?;
    let tokens = eval_tokens(cfg)?;
    let reports = compare_policies(&ck, &tokens, &policies, &cfg.eval_config(), &cfg.echo())?;
    PolicyReport::write_csv(&reports, create(&cfg.out_dir.join("report.csv"))?)?;
    fs::write(
        cfg.out_dir.join("report.json"),
        serde_json::to_string_pretty(&reports)? + "\n",
    )?;
    for r in &reports {
        println!(
            "{:<12} perplexity {:.4}  peak entries {}",
            r.policy, r.perplexity, r.peak_live_entries
        );
    }
    Ok(())
}
