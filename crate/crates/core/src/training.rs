//! Base-model pretraining and conv-head calibration with a frozen base.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::SegmentStream;
use crate::cache::{plan_hybrid, HybridStep, KvCache, PolicyConfig};
use crate::compressor::{compress_step_var, ConvHeadVars, ReluPlacement};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{block_forward, Checkpoint, ConvHeadSet, ModelConfig, ModelWeights, PositionMode};
use crate::numerics::{Tape, Tensor2, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate_base: f64,
    pub learning_rate_conv: f64,
    pub steps: usize,
    /// Sequences per step; their gradients are averaged.
    pub batch_size: usize,
    /// Decay the learning rate linearly to zero over `steps`.
    pub linear_decay: bool,
    pub seed: u64,
    pub seq_len: usize,
    /// Truncate backpropagation to one block: each compression sees its
    /// inputs as constants, so a block's loss reaches only the heads that
    /// built the cache it attends to.
    pub detach_cache_between_blocks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate_base: 5e-5,
            learning_rate_conv: 5e-2,
            steps: 200,
            batch_size: 4,
            linear_decay: true,
            seed: 0,
            seq_len: 64,
            detach_cache_between_blocks: false,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        if self.linear_decay && self.steps > 0 {
            base * (1.0 - step as f64 / self.steps as f64)
        } else {
            base
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch size and sequence length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            t: 0,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update of every parameter.
    pub fn step(&self, params: &mut [&mut Tensor2], grads: &[Tensor2], state: &mut AdamState, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::Config("parameter, gradient and state counts differ".into()));
        }
        state.t += 1;
        let c1 = 1.0 - self.beta1.powi(state.t as i32);
        let c2 = 1.0 - self.beta2.powi(state.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                });
            }
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Draws `batch` window starts. Windows start on multiples of `seq_len` and
/// span `seq_len + 1` tokens so every input has a target.
fn sample_windows(rng: &mut ChaCha8Rng, corpus_len: usize, seq_len: usize, batch: usize) -> Vec<usize> {
    let n = (corpus_len - 1) / seq_len;
    (0..batch).map(|_| rng.gen_range(0..n) * seq_len).collect()
}

fn effective_seq_len(corpus: &[usize], seq_len: usize) -> Result<usize> {
    if corpus.len() < 2 {
        return Err(Error::Config("corpus needs at least two tokens".into()));
    }
    Ok(seq_len.min(corpus.len() - 1))
}

/// Sums per-sequence `(loss, grads)` in order and averages them.
fn average(parts: Vec<Result<(f64, Vec<Tensor2>)>>) -> Result<(f64, Vec<Tensor2>)> {
    let n = parts.len() as f64;
    let mut loss = 0.0;
    let mut acc: Option<Vec<Tensor2>> = None;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.accumulate(g)),
        }
    }
    let grads = acc.unwrap_or_default().into_iter().map(|g| g.scale(1.0 / n)).collect();
    Ok((loss / n, grads))
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

/// Next-token loss of one window under the concat policy, as a single block.
pub fn sequence_loss_grads(weights: &ModelWeights, cfg: &ModelConfig, window: &[usize]) -> Result<(f64, Vec<Tensor2>)> {
    let tape = Tape::new();
    let w = weights.on_tape(&tape, true);
    let n = window.len() - 1;
    let (logits, _) = block_forward(&w, cfg, &window[..n], 0, PositionMode::Absolute, &[])?;
    let loss = logits.cross_entropy(&window[1..])?;
    let g = tape.backward(loss, 1.0)?;
    Ok((
        loss.value().get(0, 0),
        w.all().iter().map(|&v| g.get_or_zeros(v)).collect(),
    ))
}

/// Trains a fresh model from `seed` on `corpus` with full causal attention.
pub fn pretrain(corpus: &[usize], cfg: &ModelConfig, tc: &TrainConfig) -> Result<(Checkpoint, LossTrace)> {
    cfg.validate()?;
    tc.validate()?;
    let seq_len = effective_seq_len(corpus, tc.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut weights = ModelWeights::init(cfg, &mut rng);
    let shapes: Vec<_> = weights.tensors().iter().map(|t| t.shape()).collect();
    let mut state = AdamState::new(&shapes);
    let adam = Adam::default();
    let mut trace = LossTrace::default();

    for step in 0..tc.steps {
        let starts = sample_windows(&mut rng, corpus.len(), seq_len, tc.batch_size);
        let parts = exec::map(&starts, |&s| {
            sequence_loss_grads(&weights, cfg, &corpus[s..s + seq_len + 1])
        });
        let (loss, grads) = average(parts)?;
        check_loss(step, loss)?;
        let lr = tc.lr_at(tc.learning_rate_base, step);
        adam.step(&mut weights.tensors_mut(), &grads, &mut state, lr)?;
        trace.records.push(LossRecord { step, loss, lr });
    }
    Ok((Checkpoint::new(*cfg, weights), trace))
}

/// One layer's cache during calibration: bookkeeping plus its tape values.
struct TapeCache<'t> {
    state: KvCache,
    vars: Option<(Var<'t>, Var<'t>)>,
}

/// Applies a conv-head policy update on the tape, keeping the bookkeeping
/// cache in step with the differentiable one.
fn update_on_tape<'t>(
    policy: &PolicyConfig,
    cache: TapeCache<'t>,
    k_n: Var<'t>,
    v_n: Var<'t>,
    probs: &Tensor2,
    head: &ConvHeadVars<'t>,
    head_value: &crate::compressor::ConvHead,
) -> Result<TapeCache<'t>> {
    let (kv, vv) = (k_n.value(), v_n.value());
    let state = policy.update(&cache.state, &kv, &vv, Some(probs), Some(head_value))?;
    let vars = match policy.reserve() {
        r if r.count() == 0 => compress_step_var(cache.vars, k_n, v_n, head)?,
        r => {
            let grown = match cache.vars {
                Some((k, v)) => (k.hcat(k_n)?, v.hcat(v_n)?),
                None => (k_n, v_n),
            };
            match plan_hybrid(&cache.state, &kv, &vv, Some(probs), r, head_value.capacity())? {
                HybridStep::Fill(_) => grown,
                HybridStep::Merge(plan) => {
                    let pick =
                        |idx: &[usize]| (!idx.is_empty()).then(|| (grown.0.select_cols(idx), grown.1.select_cols(idx)));
                    let incoming = pick(&plan.incoming)
                        .ok_or_else(|| Error::Config("hybrid merge step with no incoming columns".into()))?;
                    let merged = compress_step_var(pick(&plan.merge_cache), incoming.0, incoming.1, head)?;
                    match pick(&plan.keep) {
                        Some((k, v)) => (k.hcat(merged.0)?, v.hcat(merged.1)?),
                        None => merged,
                    }
                }
            }
        }
    };
    debug_assert_eq!(vars.0.shape().1, state.len());
    Ok(TapeCache {
        state,
        vars: Some(vars),
    })
}

/// Loss of one window through the segmented pipeline with trainable conv
/// heads. Returns the loss and one gradient per head tensor (weight, bias
/// per layer).
pub fn calibration_loss_grads(
    ck: &Checkpoint,
    heads: &ConvHeadSet,
    policy: &PolicyConfig,
    window: &[usize],
    block_size: usize,
    detach: bool,
) -> Result<(f64, Vec<Tensor2>)> {
    let cfg = &ck.config;
    let n = window.len() - 1;
    let stream = SegmentStream::for_training(n, block_size)?;
    let tape = Tape::new();
    let w = ck.weights.on_tape(&tape, false);
    let head_vars: Vec<ConvHeadVars> = heads
        .heads
        .iter()
        .map(|h| ConvHeadVars {
            weight: tape.param(h.weight.clone()),
            bias: tape.param(h.bias.clone()),
            kernel_size: h.kernel_size,
            relu: h.relu,
        })
        .collect();
    let mut caches: Vec<TapeCache> = (0..cfg.n_layers)
        .map(|_| TapeCache {
            state: KvCache::new(cfg.d_model),
            vars: None,
        })
        .collect();
    let mode = if policy.kind.rolling_positions() {
        PositionMode::Rolling
    } else {
        PositionMode::Absolute
    };

    let mut logits: Option<Var> = None;
    for seg in stream.segments() {
        let vars: Vec<_> = caches.iter().map(|c| c.vars).collect();
        let (out, steps) = block_forward(&w, cfg, &window[seg.start..seg.end], seg.start, mode, &vars)?;
        logits = Some(match logits {
            None => out,
            Some(acc) => acc.hcat(out)?,
        });
        let old = std::mem::take(&mut caches);
        for (l, (mut c, step)) in old.into_iter().zip(steps).enumerate() {
            let (mut k_n, mut v_n) = (step.keys, step.values);
            if detach {
                c.vars = c.vars.map(|(k, v)| (k.detach(), v.detach()));
                k_n = k_n.detach();
                v_n = v_n.detach();
            }
            caches.push(update_on_tape(
                policy,
                c,
                k_n,
                v_n,
                &step.probs,
                &head_vars[l],
                &heads.heads[l],
            )?);
        }
    }
    let logits = logits.expect("at least one block");
    let loss = logits.cross_entropy(&window[1..])?;
    let g = tape.backward(loss, 1.0)?;
    let grads = head_vars
        .iter()
        .flat_map(|h| [g.get_or_zeros(h.weight), g.get_or_zeros(h.bias)])
        .collect();
    Ok((loss.value().get(0, 0), grads))
}

/// Conv-head geometry for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationSetup {
    pub block_size: usize,
    pub kernel_size: usize,
    pub relu: ReluPlacement,
}

/// Trains conv heads for `policy` on top of the frozen base in `ck`. Heads
/// start from the seeded initialization; base weights are never modified.
pub fn calibrate_conv_heads(
    ck: &Checkpoint,
    corpus: &[usize],
    policy: &PolicyConfig,
    setup: &CalibrationSetup,
    tc: &TrainConfig,
) -> Result<(Checkpoint, LossTrace)> {
    tc.validate()?;
    let merge_capacity = policy
        .merge_capacity()
        .ok_or_else(|| Error::Config(format!("policy {} has no conv heads to calibrate", policy.kind)))?;
    if policy.capacity < setup.block_size {
        return Err(Error::Config(format!(
            "memory size {} is smaller than block size {}",
            policy.capacity, setup.block_size
        )));
    }
    policy.validate(setup.block_size)?;
    let seq_len = effective_seq_len(corpus, tc.seq_len)?;
    if seq_len % setup.block_size != 0 {
        return Err(Error::Config(format!(
            "sequence length {seq_len} is not a multiple of block size {}",
            setup.block_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut heads = ConvHeadSet::init(&ck.config, merge_capacity, setup.kernel_size, setup.relu, &mut rng)?;
    let shapes: Vec<_> = heads
        .heads
        .iter()
        .flat_map(|h| [h.weight.shape(), h.bias.shape()])
        .collect();
    let mut state = AdamState::new(&shapes);
    let adam = Adam::default();
    let mut trace = LossTrace::default();

    for step in 0..tc.steps {
        let starts = sample_windows(&mut rng, corpus.len(), seq_len, tc.batch_size);
        let parts = exec::map(&starts, |&s| {
            calibration_loss_grads(
                ck,
                &heads,
                policy,
                &corpus[s..s + seq_len + 1],
                setup.block_size,
                tc.detach_cache_between_blocks,
            )
        });
        let (loss, grads) = average(parts)?;
        check_loss(step, loss)?;
        let lr = tc.lr_at(tc.learning_rate_conv, step);
        let mut params: Vec<&mut Tensor2> = heads
            .heads
            .iter_mut()
            .flat_map(|h| [&mut h.weight, &mut h.bias])
            .collect();
        adam.step(&mut params, &grads, &mut state, lr)?;
        trace.records.push(LossRecord { step, loss, lr });
    }
    Ok((ck.with_conv_heads(heads), trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam, written out independently.
    fn scalar_adam(p: &mut [f64], grads: &[Vec<f64>], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut m = vec![0.0; p.len()];
        let mut v = vec![0.0; p.len()];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let init = Tensor2::randn(2, 3, 1.0, &mut rng);
        let grads: Vec<Tensor2> = (0..25).map(|_| Tensor2::randn(2, 3, 1.0, &mut rng)).collect();
        let mut p = init.clone();
        let mut state = AdamState::new(&[(2, 3)]);
        for g in &grads {
            Adam::default()
                .step(&mut [&mut p], std::slice::from_ref(g), &mut state, 1e-2)
                .unwrap();
        }
        let mut q = init.data().to_vec();
        scalar_adam(
            &mut q,
            &grads.iter().map(|g| g.data().to_vec()).collect::<Vec<_>>(),
            1e-2,
        );
        for (a, b) in p.data().iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor2::filled(2, 2, 0.5);
        let mut state = AdamState::new(&[(2, 2)]);
        state.m[0] = Tensor2::filled(2, 2, 0.0);
        Adam::default()
            .step(&mut [&mut p], &[Tensor2::zeros(2, 2)], &mut state, 0.1)
            .unwrap();
        assert_eq!(p, Tensor2::filled(2, 2, 0.5));
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = Tensor2::filled(1, 1, 0.0);
        let mut state = AdamState::new(&[(1, 1)]);
        state.m[0] = Tensor2::filled(1, 1, 1.0);
        state.v[0] = Tensor2::filled(1, 1, 1.0);
        Adam::default()
            .step(&mut [&mut p], &[Tensor2::zeros(1, 1)], &mut state, 0.1)
            .unwrap();
        assert!((state.m[0].get(0, 0) - 0.9).abs() < 1e-15);
        assert!((state.v[0].get(0, 0) - 0.999).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut p = Tensor2::filled(1, 1, 0.0);
        let mut state = AdamState::new(&[(1, 1)]);
        let lr = 1e-3;
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..2000 {
            Adam::default()
                .step(&mut [&mut p], &[Tensor2::filled(1, 1, -3.0)], &mut state, lr)
                .unwrap();
            step = p.get(0, 0) - prev;
            prev = p.get(0, 0);
        }
        assert!((step - lr).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = Tensor2::zeros(1, 1);
        let mut state = AdamState::new(&[(1, 1)]);
        for lr in [0.0, -1.0, f64::NAN] {
            assert!(Adam::default()
                .step(&mut [&mut p], &[Tensor2::zeros(1, 1)], &mut state, lr)
                .is_err());
        }
    }

    #[test]
    fn linear_schedule() {
        let tc = TrainConfig {
            steps: 4,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..4).map(|s| tc.lr_at(1.0, s)).collect();
        assert_eq!(lrs, vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn default_learning_rate_ratio() {
        let tc = TrainConfig::default();
        assert!((tc.learning_rate_conv / tc.learning_rate_base - 1000.0).abs() < 1e-9);
    }
}
