//! Forward passes: one block on a tape, inference sessions that carry a
//! policy-managed cache between blocks, and a cache-free reference forward.

use std::rc::Rc;

use super::checkpoint::{Checkpoint, ConvHeadSet};
use super::config::ModelConfig;
use super::weights::WeightVars;
use crate::attention::{self, SegmentStream};
use crate::cache::{KvCache, PolicyConfig};
use crate::error::{Error, Result};
use crate::instrumentation::MemoryTrace;
use crate::numerics::tape::{attend, rms_norm, sigmoid};
use crate::numerics::tensor::matmul;
use crate::numerics::{Tape, Tensor2, Var};

/// How rotary positions are assigned within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    /// Absolute token positions; cached keys are stored already rotated.
    Absolute,
    /// Positions relative to the cache: slot `i` sits at position `i` and the
    /// block follows the last slot. Cached keys are stored unrotated.
    Rolling,
}

/// Per-layer result of [`block_forward`].
pub struct LayerStep<'t> {
    /// Keys of the block in the form the cache stores them.
    pub keys: Var<'t>,
    pub values: Var<'t>,
    /// Attention probabilities (cached + new keys × queries), summed over heads.
    pub probs: Tensor2,
    /// Entries of one head's score matrix.
    pub score_entries: usize,
}

/// Runs one block of `tokens` starting at absolute position `start` through
/// every layer, attending to `caches[l]` (keys, values) where present.
/// Returns the `vocab × B` logits and one [`LayerStep`] per layer.
pub fn block_forward<'t>(
    w: &WeightVars<'t>,
    cfg: &ModelConfig,
    tokens: &[usize],
    start: usize,
    mode: PositionMode,
    caches: &[Option<(Var<'t>, Var<'t>)>],
) -> Result<(Var<'t>, Vec<LayerStep<'t>>)> {
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange(t));
    }
    if tokens.is_empty() {
        return Err(Error::Config("empty block".into()));
    }
    let b = tokens.len();
    let hd = cfg.head_dim;
    let rope = cfg.rope();
    let mut x = w.embedding.select_cols(tokens);
    let mut steps = Vec::with_capacity(cfg.n_layers);

    for (l, lv) in w.layers.iter().enumerate() {
        let cache = caches.get(l).copied().flatten();
        let cache_len = cache.map_or(0, |(k, _)| k.shape().1);
        let first = match mode {
            PositionMode::Absolute => start,
            PositionMode::Rolling => cache_len,
        };
        let qpos: Vec<f64> = (first..first + b).map(|p| p as f64).collect();

        let h = x.rms_norm(lv.attn_norm);
        let q = lv.w_q.matmul(h)?.rope(&qpos, &rope, hd)?;
        let k_raw = lv.w_k.matmul(h)?;
        let k = k_raw.rope(&qpos, &rope, hd)?;
        let v = lv.w_v.matmul(h)?;

        let (k_all, v_all) = match cache {
            None => (k, v),
            Some((ck, cv)) => {
                let ck = match mode {
                    PositionMode::Absolute => ck,
                    PositionMode::Rolling => {
                        let slots: Vec<f64> = (0..cache_len).map(|p| p as f64).collect();
                        ck.rope(&slots, &rope, hd)?
                    }
                };
                (ck.hcat(k)?, cv.hcat(v)?)
            }
        };

        let mut heads: Option<Var<'t>> = None;
        let mut probs: Option<Tensor2> = None;
        for hh in 0..cfg.n_heads {
            let rows = hh * hd..(hh + 1) * hd;
            let (o, p) = attend(
                q.slice_rows(rows.start, rows.end),
                k_all.slice_rows(rows.start, rows.end),
                v_all.slice_rows(rows.start, rows.end),
            )?;
            heads = Some(match heads {
                None => o,
                Some(acc) => acc.vcat(o)?,
            });
            match &mut probs {
                None => probs = Some(Rc::unwrap_or_clone(p)),
                Some(acc) => acc.accumulate(&p),
            }
        }
        let heads = heads.expect("at least one head");
        x = x.add(lv.w_o.matmul(heads)?)?;

        let h2 = x.rms_norm(lv.mlp_norm);
        let up = lv.w_up.matmul(h2)?.silu();
        x = x.add(lv.w_down.matmul(up)?)?;

        steps.push(LayerStep {
            keys: match mode {
                PositionMode::Absolute => k,
                PositionMode::Rolling => k_raw,
            },
            values: v,
            probs: probs.expect("at least one head"),
            score_entries: (cache_len + b) * b,
        });
    }

    let xn = x.rms_norm(w.final_norm);
    let logits = w.embedding.transpose().matmul(xn)?;
    Ok((logits, steps))
}

/// An inference session: feeds blocks through the model and maintains one
/// cache per layer under a policy.
pub struct Session<'m> {
    ck: &'m Checkpoint,
    policy: PolicyConfig,
    caches: Vec<KvCache>,
    position: usize,
    trace: MemoryTrace,
}

impl<'m> Session<'m> {
    pub fn new(ck: &'m Checkpoint, policy: PolicyConfig) -> Result<Self> {
        ck.config.validate()?;
        if let Some(cap) = policy.merge_capacity() {
            let heads = ck
                .conv_heads
                .as_ref()
                .ok_or_else(|| Error::Config(format!("policy {} needs a checkpoint with conv heads", policy.kind)))?;
            if heads.capacity() != cap {
                return Err(Error::Config(format!(
                    "conv heads merge into {} slots but policy {} at M={} needs {cap}",
                    heads.capacity(),
                    policy.kind,
                    policy.capacity
                )));
            }
        }
        Ok(Self {
            ck,
            caches: (0..ck.config.n_layers)
                .map(|_| KvCache::new(ck.config.d_model))
                .collect(),
            policy,
            position: 0,
            trace: MemoryTrace::default(),
        })
    }

    pub fn caches(&self) -> &[KvCache] {
        &self.caches
    }

    pub fn trace(&self) -> &MemoryTrace {
        &self.trace
    }

    pub fn into_trace(self) -> MemoryTrace {
        self.trace
    }

    pub fn position(&self) -> usize {
        self.position
    }

    fn mode(&self) -> PositionMode {
        if self.policy.kind.rolling_positions() {
            PositionMode::Rolling
        } else {
            PositionMode::Absolute
        }
    }

    /// Feeds one block and returns its `vocab × B` logits.
    pub fn feed(&mut self, tokens: &[usize]) -> Result<Tensor2> {
        self.policy.validate(tokens.len())?;
        let tape = Tape::inference();
        let w = self.ck.weights.on_tape(&tape, false);
        let cache_vars: Vec<_> = self
            .caches
            .iter()
            .map(|c| (!c.is_empty()).then(|| (tape.constant(c.keys().clone()), tape.constant(c.values().clone()))))
            .collect();
        let (logits, steps) = block_forward(&w, &self.ck.config, tokens, self.position, self.mode(), &cache_vars)?;

        let heads = self.ck.conv_heads.as_ref().map(|s: &ConvHeadSet| &s.heads);
        let block_index = self.trace.n_blocks();
        for (l, step) in steps.iter().enumerate() {
            let head = heads.and_then(|h| h.get(l));
            let next = self.policy.update(
                &self.caches[l],
                &step.keys.value(),
                &step.values.value(),
                Some(&step.probs),
                head,
            )?;
            self.caches[l] = next;
            self.trace.record_block(
                block_index,
                l,
                self.caches[l].len(),
                step.score_entries,
                self.position + tokens.len(),
            );
        }
        self.position += tokens.len();
        let out = (*logits.value()).clone();
        Ok(out)
    }
}

/// Feeds `tokens` in blocks of `block_size` and returns all logits
/// (`vocab × L`) plus the memory trace.
pub fn forward_segmented(
    ck: &Checkpoint,
    tokens: &[usize],
    block_size: usize,
    policy: PolicyConfig,
) -> Result<(Tensor2, MemoryTrace)> {
    let stream = SegmentStream::new(tokens.len(), block_size)?;
    let mut session = Session::new(ck, policy)?;
    let mut logits = Tensor2::zeros(0, 0);
    for seg in stream.segments() {
        let out = session.feed(&tokens[seg.start..seg.end])?;
        logits = logits.hcat(&out)?;
    }
    Ok((logits, session.into_trace()))
}

/// Reference forward with plain causal attention over the whole sequence
/// and no cache.
pub fn forward_full(ck: &Checkpoint, tokens: &[usize]) -> Result<Tensor2> {
    let cfg = &ck.config;
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange(t));
    }
    let rope = cfg.rope();
    let pos: Vec<f64> = (0..tokens.len()).map(|p| p as f64).collect();
    let w = &ck.weights;
    let mut x = w.embedding.select_cols(tokens);
    for lw in &w.layers {
        let (h, _) = rms_norm(&x, &lw.attn_norm);
        let q = attention::rotate_heads(&matmul(&lw.w_q, &h)?, &pos, &rope, cfg.head_dim)?;
        let k = attention::rotate_heads(&matmul(&lw.w_k, &h)?, &pos, &rope, cfg.head_dim)?;
        let v = matmul(&lw.w_v, &h)?;
        let mut heads = Tensor2::zeros(0, tokens.len());
        for hh in 0..cfg.n_heads {
            let (a, b) = (hh * cfg.head_dim, (hh + 1) * cfg.head_dim);
            let o = attention::full_causal_attention(&q.slice_rows(a, b), &k.slice_rows(a, b), &v.slice_rows(a, b))?;
            heads = heads.vcat(&o)?;
        }
        x = x.add(&matmul(&lw.w_o, &heads)?)?;
        let (h2, _) = rms_norm(&x, &lw.mlp_norm);
        let up = matmul(&lw.w_up, &h2)?.map(|u| u * sigmoid(u));
        x = x.add(&matmul(&lw.w_down, &up)?)?;
    }
    let (xn, _) = rms_norm(&x, &w.final_norm);
    matmul(&w.embedding.transpose(), &xn)
}

/// Greedy decoding: the prompt is pre-filled in blocks of `block_size`, then
/// tokens are produced one at a time.
pub fn generate(
    ck: &Checkpoint,
    prompt: &[usize],
    n_new: usize,
    block_size: usize,
    policy: PolicyConfig,
) -> Result<Vec<usize>> {
    if n_new == 0 {
        return Ok(prompt.to_vec());
    }
    if prompt.is_empty() {
        return Err(Error::Config("generation needs a non-empty prompt".into()));
    }
    let limit = ck.config.context_limit();
    if prompt.len() + n_new > limit {
        return Err(Error::Config(format!(
            "prompt {} + {n_new} new tokens exceeds the context limit {limit}",
            prompt.len()
        )));
    }
    let mut session = Session::new(ck, policy)?;
    let mut last = Tensor2::zeros(0, 0);
    for chunk in prompt.chunks(block_size.max(1)) {
        last = session.feed(chunk)?;
    }
    let mut out = prompt.to_vec();
    for i in 0..n_new {
        let next = last.argmax_col(last.cols() - 1);
        out.push(next);
        if i + 1 < n_new {
            last = session.feed(&[next])?;
        }
    }
    Ok(out)
}
