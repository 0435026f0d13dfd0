use super::checkpoint::Checkpoint;
use super::forward::forward_segmented;
use crate::cache::PolicyConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::instrumentation::MemoryTrace;
use crate::numerics::tape::log_softmax_at;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    /// Window length; the corpus is cut into non-overlapping windows.
    pub context_length: usize,
    pub block_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub predictions: usize,
    pub windows: usize,
    /// Tokens fed through the model.
    pub tokens: usize,
    pub peak_live_entries: usize,
    pub peak_attn_entries: usize,
    /// Traces of every window, merged in corpus order.
    pub trace: MemoryTrace,
}

/// Sum of next-token negative log-likelihoods over one window, with the
/// window's memory trace.
fn window_nll(
    ck: &Checkpoint,
    window: &[usize],
    policy: &PolicyConfig,
    block_size: usize,
) -> Result<(f64, MemoryTrace)> {
    let (logits, trace) = forward_segmented(ck, window, block_size, *policy)?;
    let mut nll = 0.0;
    for t in 0..window.len() - 1 {
        nll -= log_softmax_at(&logits, window[t + 1], t);
    }
    Ok((nll, trace))
}

/// Perplexity over non-overlapping windows. A trailing window shorter than
/// two tokens contributes nothing. Windows are evaluated in parallel and
/// reduced in order.
pub fn evaluate(ck: &Checkpoint, corpus: &[usize], policy: &PolicyConfig, cfg: &EvalConfig) -> Result<EvalSummary> {
    if cfg.context_length < 2 || cfg.block_size == 0 {
        return Err(Error::Config(
            "eval context length must be ≥ 2 and block size ≥ 1".into(),
        ));
    }
    policy.validate(cfg.block_size)?;
    let windows: Vec<&[usize]> = corpus.chunks(cfg.context_length).filter(|w| w.len() >= 2).collect();
    if windows.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let parts = exec::map(&windows, |w| window_nll(ck, w, policy, cfg.block_size));
    let mut total = 0.0;
    let mut trace = MemoryTrace::default();
    for p in parts {
        let (nll, t) = p?;
        total += nll;
        trace.merge(&t);
    }
    let predictions: usize = windows.iter().map(|w| w.len() - 1).sum();
    let mean_nll = total / predictions as f64;
    Ok(EvalSummary {
        perplexity: mean_nll.exp(),
        mean_nll,
        predictions,
        windows: windows.len(),
        tokens: windows.iter().map(|w| w.len()).sum(),
        peak_live_entries: trace.peak_live_entries(),
        peak_attn_entries: trace.peak_attn_entries(),
        trace,
    })
}

pub fn perplexity(ck: &Checkpoint, corpus: &[usize], policy: &PolicyConfig, cfg: &EvalConfig) -> Result<f64> {
    evaluate(ck, corpus, policy, cfg).map(|s| s.perplexity)
}
