//! Bounded KV caches and the policies that decide what survives an update.
//!
//! Every policy is a pure transition `(cache, K_n, V_n, ...) -> cache`.
//! A cache holds one layer's keys and values with heads stacked along the
//! rows, so a column is one token slot across all heads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compressor::{compress_step, ConvHead};
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor2;

/// What a cache column currently stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOrigin {
    /// The unmodified key/value of the token at this absolute position.
    Token(usize),
    /// A blend of several tokens.
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Tensor2,
    values: Tensor2,
    origins: Vec<SlotOrigin>,
    /// Accumulated attention mass per column; maintained by the score-aware
    /// policies and zero otherwise.
    scores: Vec<f64>,
    tokens_seen: usize,
}

impl KvCache {
    /// Empty cache for `d`-row keys and values.
    pub fn new(d: usize) -> Self {
        Self {
            keys: Tensor2::zeros(d, 0),
            values: Tensor2::zeros(d, 0),
            origins: Vec::new(),
            scores: Vec::new(),
            tokens_seen: 0,
        }
    }

    pub fn keys(&self) -> &Tensor2 {
        &self.keys
    }

    pub fn values(&self) -> &Tensor2 {
        &self.values
    }

    pub fn origins(&self) -> &[SlotOrigin] {
        &self.origins
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.keys.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.rows()
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    /// Live scalars held (keys plus values).
    pub fn live_scalars(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    /// Absolute positions of the verbatim token columns, in column order.
    pub fn token_positions(&self) -> Vec<usize> {
        self.origins
            .iter()
            .filter_map(|o| match o {
                SlotOrigin::Token(p) => Some(*p),
                SlotOrigin::Merged => None,
            })
            .collect()
    }

    /// A cache with new contents after absorbing `added` tokens.
    pub(crate) fn replaced(&self, keys: Tensor2, values: Tensor2, origins: Vec<SlotOrigin>, added: usize) -> Self {
        let n = keys.cols();
        Self {
            keys,
            values,
            origins,
            scores: vec![0.0; n],
            tokens_seen: self.tokens_seen + added,
        }
    }

    fn with_scores(mut self, scores: Vec<f64>) -> Self {
        debug_assert_eq!(scores.len(), self.len());
        self.scores = scores;
        self
    }

    /// Keeps the given columns (in the given order).
    pub(crate) fn select(&self, idx: &[usize]) -> Self {
        Self {
            keys: self.keys.select_cols(idx),
            values: self.values.select_cols(idx),
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            tokens_seen: self.tokens_seen,
        }
    }
}

fn check_block(cache: &KvCache, k_n: &Tensor2, v_n: &Tensor2) -> Result<()> {
    if k_n.shape() != v_n.shape() || k_n.rows() != cache.dim() {
        return shape_err(
            "cache update",
            format!("cache d={}, K_n {:?}, V_n {:?}", cache.dim(), k_n.shape(), v_n.shape()),
        );
    }
    Ok(())
}

/// Appends the block unchanged.
pub fn update_concat(cache: &KvCache, k_n: &Tensor2, v_n: &Tensor2) -> Result<KvCache> {
    check_block(cache, k_n, v_n)?;
    let b = k_n.cols();
    let mut origins = cache.origins.clone();
    origins.extend((0..b).map(|i| SlotOrigin::Token(cache.tokens_seen + i)));
    let mut scores = cache.scores.clone();
    scores.extend(std::iter::repeat_n(0.0, b));
    Ok(KvCache {
        keys: cache.keys.hcat(k_n)?,
        values: cache.values.hcat(v_n)?,
        origins,
        scores,
        tokens_seen: cache.tokens_seen + b,
    })
}

/// Budget for heavy-hitter eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeavyHitterConfig {
    pub capacity: usize,
    pub recent_budget: usize,
    pub heavy_budget: usize,
}

impl HeavyHitterConfig {
    /// Splits `capacity` into heavy and recent parts; `heavy_fraction` of the
    /// slots (rounded down) go to heavy hitters.
    pub fn split(capacity: usize, heavy_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&heavy_fraction) {
            return Err(Error::Config(format!("heavy fraction {heavy_fraction} outside [0, 1]")));
        }
        let heavy_budget = (capacity as f64 * heavy_fraction).floor() as usize;
        Ok(Self {
            capacity,
            recent_budget: capacity - heavy_budget,
            heavy_budget,
        })
    }
}

/// Adds each key's received attention (row sums of `probs`, rows = cached
/// plus new keys) to the running scores.
fn accumulate_scores(base: &[f64], probs: &Tensor2) -> Result<Vec<f64>> {
    if probs.rows() != base.len() {
        return shape_err(
            "accumulate_scores",
            format!("{} probability rows for {} keys", probs.rows(), base.len()),
        );
    }
    Ok(base
        .iter()
        .enumerate()
        .map(|(r, s)| s + probs.row(r).iter().sum::<f64>())
        .collect())
}

/// Columns (ascending) that survive heavy-hitter eviction over `scores`:
/// the `recent` newest plus the `heavy` best-scoring older ones, ties broken
/// toward newer columns.
pub fn heavy_hitter_keep_set(scores: &[f64], recent: usize, heavy: usize) -> Vec<usize> {
    let n = scores.len();
    if recent + heavy >= n {
        return (0..n).collect();
    }
    let recent_start = n - recent;
    let mut older: Vec<usize> = (0..recent_start).collect();
    older.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    let mut keep: Vec<usize> = older.into_iter().take(heavy).collect();
    keep.extend(recent_start..n);
    keep.sort_unstable();
    keep
}

/// Heavy-hitter eviction. `probs` are the attention probabilities of the
/// block that produced `K_n` (rows: cached keys then new keys; columns:
/// queries).
pub fn update_h2o(
    cache: &KvCache,
    k_n: &Tensor2,
    v_n: &Tensor2,
    probs: &Tensor2,
    cfg: &HeavyHitterConfig,
) -> Result<KvCache> {
    if cfg.capacity < k_n.cols() {
        return Err(Error::Config(format!(
            "capacity {} cannot hold a block of {}",
            cfg.capacity,
            k_n.cols()
        )));
    }
    let grown = update_concat(cache, k_n, v_n)?;
    let scores = accumulate_scores(&grown.scores, probs)?;
    let grown = grown.with_scores(scores);
    if grown.len() <= cfg.capacity {
        return Ok(grown);
    }
    let keep = heavy_hitter_keep_set(&grown.scores, cfg.recent_budget, cfg.heavy_budget);
    Ok(grown.select(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SinkWindowConfig {
    pub n_sink: usize,
    pub window: usize,
}

impl SinkWindowConfig {
    pub fn new(capacity: usize, n_sink: usize) -> Result<Self> {
        if n_sink > capacity {
            return Err(Error::Config(format!("{n_sink} sinks exceed capacity {capacity}")));
        }
        Ok(Self {
            n_sink,
            window: capacity - n_sink,
        })
    }

    pub fn capacity(&self) -> usize {
        self.n_sink + self.window
    }
}

/// Keeps the first `n_sink` tokens ever seen plus the newest `window`.
pub fn update_sink_window(cache: &KvCache, k_n: &Tensor2, v_n: &Tensor2, cfg: &SinkWindowConfig) -> Result<KvCache> {
    let grown = update_concat(cache, k_n, v_n)?;
    let n = grown.len();
    if n <= cfg.capacity() {
        return Ok(grown);
    }
    let keep: Vec<usize> = (0..cfg.n_sink).chain(n - cfg.window..n).collect();
    Ok(grown.select(&keep))
}

/// Convolutional merging into `head.capacity()` slots.
pub fn update_lococo(cache: &KvCache, k_n: &Tensor2, v_n: &Tensor2, head: &ConvHead) -> Result<KvCache> {
    check_block(cache, k_n, v_n)?;
    compress_step(cache, k_n, v_n, head)
}

/// Columns held verbatim by a hybrid policy, outside the merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reserve {
    /// The first `n` tokens of the stream.
    Sinks(usize),
    /// The `n` best-scoring verbatim tokens, reselected every update.
    HeavyHitters(usize),
}

impl Reserve {
    pub fn count(&self) -> usize {
        match *self {
            Reserve::Sinks(n) | Reserve::HeavyHitters(n) => n,
        }
    }
}

/// Convolutional merging on top of a reserved set of verbatim columns.
///
/// Reserved columns come first in the cache; the remaining
/// `M - reserved` slots are produced by [`update_lococo`] with
/// `head.capacity() == M - reserved`. `probs` is required for
/// [`Reserve::HeavyHitters`].
pub fn update_hybrid(
    cache: &KvCache,
    k_n: &Tensor2,
    v_n: &Tensor2,
    probs: Option<&Tensor2>,
    head: &ConvHead,
    reserve: Reserve,
) -> Result<KvCache> {
    if reserve.count() == 0 {
        return update_lococo(cache, k_n, v_n, head);
    }
    match plan_hybrid(cache, k_n, v_n, probs, reserve, head.capacity())? {
        HybridStep::Fill(grown) => Ok(grown),
        HybridStep::Merge(plan) => {
            let (merge_cache, incoming) = plan.merge_inputs();
            let merged = update_lococo(&merge_cache, incoming.keys(), incoming.values(), head)?;
            plan.finish(merged.keys, merged.values)
        }
    }
}

/// Outcome of the selection half of a hybrid update.
#[derive(Debug, Clone)]
pub enum HybridStep {
    /// Everything still fits; the grown cache is the result.
    Fill(KvCache),
    Merge(HybridPlan),
}

/// Which columns of the grown cache (`[cache, block]`) are reserved, which
/// already-merged slots form the merge cache, and which verbatim columns are
/// merged in as incoming tokens.
#[derive(Debug, Clone)]
pub struct HybridPlan {
    pub grown: KvCache,
    pub keep: Vec<usize>,
    pub merge_cache: Vec<usize>,
    pub incoming: Vec<usize>,
    pub merge_capacity: usize,
    prior_tokens: usize,
}

pub fn plan_hybrid(
    cache: &KvCache,
    k_n: &Tensor2,
    v_n: &Tensor2,
    probs: Option<&Tensor2>,
    reserve: Reserve,
    merge_capacity: usize,
) -> Result<HybridStep> {
    let capacity = reserve.count() + merge_capacity;
    let mut grown = update_concat(cache, k_n, v_n)?;
    if let Reserve::HeavyHitters(_) = reserve {
        let p = probs.ok_or_else(|| Error::Config("heavy-hitter hybrid needs attention probabilities".into()))?;
        let s = accumulate_scores(&grown.scores, p)?;
        grown = grown.with_scores(s);
    }
    if grown.len() <= capacity {
        return Ok(HybridStep::Fill(grown));
    }

    let verbatim: Vec<usize> = (0..grown.len())
        .filter(|&i| matches!(grown.origins[i], SlotOrigin::Token(_)))
        .collect();
    let keep: Vec<usize> = match reserve {
        Reserve::Sinks(n) => verbatim
            .iter()
            .copied()
            .filter(|&i| matches!(grown.origins[i], SlotOrigin::Token(p) if p < n))
            .collect(),
        Reserve::HeavyHitters(n) => {
            let s: Vec<f64> = verbatim.iter().map(|&i| grown.scores[i]).collect();
            heavy_hitter_keep_set(&s, 0, n)
                .into_iter()
                .map(|j| verbatim[j])
                .collect()
        }
    };

    // Sink hybrid: columns held before this block stay in the merge cache.
    // Heavy-hitter hybrid: a verbatim column that lost its reservation is
    // merged in as a fresh token, so only merged slots form the merge cache.
    let old_len = cache.len();
    let rest: Vec<usize> = (0..grown.len()).filter(|i| !keep.contains(i)).collect();
    let merge_cache: Vec<usize> = rest
        .iter()
        .copied()
        .filter(|&i| {
            i < old_len
                && match reserve {
                    Reserve::Sinks(_) => true,
                    Reserve::HeavyHitters(_) => grown.origins[i] == SlotOrigin::Merged,
                }
        })
        .collect();
    let incoming: Vec<usize> = rest.iter().copied().filter(|i| !merge_cache.contains(i)).collect();
    Ok(HybridStep::Merge(HybridPlan {
        grown,
        keep,
        merge_cache,
        incoming,
        merge_capacity,
        prior_tokens: cache.tokens_seen,
    }))
}

impl HybridPlan {
    /// The merge cache and the incoming columns, as caches.
    pub fn merge_inputs(&self) -> (KvCache, KvCache) {
        let mut merge_cache = self.grown.select(&self.merge_cache);
        merge_cache.tokens_seen = self.prior_tokens;
        (merge_cache, self.grown.select(&self.incoming))
    }

    /// Whether the merge step appends instead of compressing.
    pub fn merge_fills(&self) -> bool {
        self.merge_cache.len() + self.incoming.len() <= self.merge_capacity
    }

    /// Assembles `[reserved, merged]` given the merge step's output.
    pub fn finish(&self, merged_keys: Tensor2, merged_values: Tensor2) -> Result<KvCache> {
        let reserved = self.grown.select(&self.keep);
        let mut origins = reserved.origins.clone();
        let mut scores = reserved.scores.clone();
        if self.merge_fills() {
            let order = self.merge_cache.iter().chain(&self.incoming);
            for &i in order {
                origins.push(self.grown.origins[i]);
                scores.push(self.grown.scores[i]);
            }
        } else {
            origins.extend(std::iter::repeat_n(SlotOrigin::Merged, merged_keys.cols()));
            scores.extend(std::iter::repeat_n(0.0, merged_keys.cols()));
        }
        Ok(KvCache {
            keys: reserved.keys.hcat(&merged_keys)?,
            values: reserved.values.hcat(&merged_values)?,
            origins,
            scores,
            tokens_seen: self.grown.tokens_seen,
        })
    }
}

/// Policy names accepted in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "lococo")]
    Lococo,
    #[serde(rename = "h2o")]
    H2o,
    #[serde(rename = "sink_window")]
    SinkWindow,
    #[serde(rename = "lococo+h2o")]
    LococoH2o,
    #[serde(rename = "lococo+sink")]
    LococoSink,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Concat,
        PolicyKind::Lococo,
        PolicyKind::H2o,
        PolicyKind::SinkWindow,
        PolicyKind::LococoH2o,
        PolicyKind::LococoSink,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Concat => "concat",
            PolicyKind::Lococo => "lococo",
            PolicyKind::H2o => "h2o",
            PolicyKind::SinkWindow => "sink_window",
            PolicyKind::LococoH2o => "lococo+h2o",
            PolicyKind::LococoSink => "lococo+sink",
        }
    }

    pub fn uses_conv_heads(&self) -> bool {
        matches!(
            self,
            PolicyKind::Lococo | PolicyKind::LococoH2o | PolicyKind::LococoSink
        )
    }

    pub fn needs_scores(&self) -> bool {
        matches!(self, PolicyKind::H2o | PolicyKind::LococoH2o)
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, PolicyKind::Concat)
    }

    /// Whether cached keys are stored unrotated and re-encoded at their slot
    /// index on every step.
    pub fn rolling_positions(&self) -> bool {
        matches!(self, PolicyKind::SinkWindow)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown policy '{s}' (expected one of concat, lococo, h2o, sink_window, lococo+h2o, lococo+sink)"
            ))
        })
    }
}

/// A policy with its budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Total slots `M`; ignored by `concat`.
    pub capacity: usize,
    /// Attention sinks for `sink_window` and `lococo+sink`.
    pub n_sink: usize,
    /// Share of `M` given to heavy hitters by `h2o`.
    pub heavy_fraction: f64,
    /// Reserved heavy hitters for `lococo+h2o`.
    pub hybrid_heavy: usize,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, capacity: usize) -> Self {
        Self {
            kind,
            capacity,
            n_sink: 4,
            heavy_fraction: 0.5,
            hybrid_heavy: 4,
        }
    }

    pub fn concat() -> Self {
        Self::new(PolicyKind::Concat, usize::MAX)
    }

    /// Slots left to convolutional merging, for policies that merge.
    pub fn merge_capacity(&self) -> Option<usize> {
        match self.kind {
            PolicyKind::Lococo => Some(self.capacity),
            PolicyKind::LococoSink => Some(self.capacity.saturating_sub(self.n_sink)),
            PolicyKind::LococoH2o => Some(self.capacity.saturating_sub(self.hybrid_heavy)),
            _ => None,
        }
    }

    pub fn reserve(&self) -> Reserve {
        match self.kind {
            PolicyKind::LococoSink => Reserve::Sinks(self.n_sink),
            PolicyKind::LococoH2o => Reserve::HeavyHitters(self.hybrid_heavy),
            _ => Reserve::Sinks(0),
        }
    }

    /// Checks the budget against the block size used to feed the cache.
    pub fn validate(&self, block_size: usize) -> Result<()> {
        if self.kind == PolicyKind::Concat {
            return Ok(());
        }
        if self.capacity == 0 {
            return Err(Error::Config("cache capacity must be positive".into()));
        }
        match self.kind {
            PolicyKind::H2o if self.capacity < block_size => Err(Error::Config(format!(
                "h2o capacity {} is smaller than block size {block_size}",
                self.capacity
            ))),
            PolicyKind::H2o => HeavyHitterConfig::split(self.capacity, self.heavy_fraction).map(|_| ()),
            PolicyKind::SinkWindow => SinkWindowConfig::new(self.capacity, self.n_sink).map(|_| ()),
            PolicyKind::LococoSink | PolicyKind::LococoH2o => {
                let r = self.reserve().count();
                if r >= self.capacity {
                    Err(Error::Config(format!(
                        "{r} reserved slots leave nothing to merge in capacity {}",
                        self.capacity
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Applies one update. `probs` are the block's attention probabilities
    /// summed over heads; `head` is the layer's conv head.
    pub fn update(
        &self,
        cache: &KvCache,
        k_n: &Tensor2,
        v_n: &Tensor2,
        probs: Option<&Tensor2>,
        head: Option<&ConvHead>,
    ) -> Result<KvCache> {
        let need_head = || head.ok_or_else(|| Error::Config(format!("policy {} needs conv heads", self.kind)));
        match self.kind {
            PolicyKind::Concat => update_concat(cache, k_n, v_n),
            PolicyKind::Lococo => update_lococo(cache, k_n, v_n, need_head()?),
            PolicyKind::H2o => {
                let p = probs.ok_or_else(|| Error::Config("h2o needs attention probabilities".into()))?;
                update_h2o(
                    cache,
                    k_n,
                    v_n,
                    p,
                    &HeavyHitterConfig::split(self.capacity, self.heavy_fraction)?,
                )
            }
            PolicyKind::SinkWindow => {
                update_sink_window(cache, k_n, v_n, &SinkWindowConfig::new(self.capacity, self.n_sink)?)
            }
            PolicyKind::LococoH2o | PolicyKind::LococoSink => {
                update_hybrid(cache, k_n, v_n, probs, need_head()?, self.reserve())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Block whose column `j` holds `(first + j)` in every key row and its
    /// negative in every value row, so keys and values can be checked for
    /// consistent bookkeeping.
    fn tagged(d: usize, first: usize, b: usize) -> (Tensor2, Tensor2) {
        let k = Tensor2::from_fn(d, b, |_, j| (first + j) as f64);
        let v = k.scale(-1.0);
        (k, v)
    }

    fn tags(cache: &KvCache) -> Vec<usize> {
        (0..cache.len()).map(|j| cache.keys().get(0, j) as usize).collect()
    }

    #[test]
    fn concat_appends_in_order() {
        let mut c = KvCache::new(2);
        let (k, v) = tagged(2, 0, 2);
        c = update_concat(&c, &k, &v).unwrap();
        assert_eq!(c.keys(), &k);
        let (k2, v2) = tagged(2, 2, 2);
        c = update_concat(&c, &k2, &v2).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(tags(&c), vec![0, 1, 2, 3]);
        assert_eq!(c.token_positions(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn h2o_without_overflow_is_concat() {
        let cfg = HeavyHitterConfig::split(8, 0.5).unwrap();
        let (k, v) = tagged(2, 0, 4);
        let probs = Tensor2::filled(4, 4, 0.25);
        let c = update_h2o(&KvCache::new(2), &k, &v, &probs, &cfg).unwrap();
        let plain = update_concat(&KvCache::new(2), &k, &v).unwrap();
        assert_eq!(c.keys(), plain.keys());
        assert_eq!(c.values(), plain.values());
    }

    #[test]
    fn h2o_evicts_the_unique_zero_score_column() {
        let cfg = HeavyHitterConfig {
            capacity: 4,
            recent_budget: 1,
            heavy_budget: 3,
        };
        let (k, v) = tagged(1, 0, 4);
        let mut probs = Tensor2::filled(4, 1, 0.25);
        probs.set(2, 0, 0.0);
        probs.set(0, 0, 0.5);
        let c = update_h2o(&KvCache::new(1), &k, &v, &probs, &cfg).unwrap();
        let (k1, v1) = tagged(1, 4, 1);
        let p1 = Tensor2::from_rows(&[&[0.3], &[0.3], &[0.0], &[0.2], &[0.2]]);
        let c = update_h2o(&c, &k1, &v1, &p1, &cfg).unwrap();
        assert_eq!(tags(&c), vec![0, 1, 3, 4]);
    }

    #[test]
    fn h2o_rejects_block_larger_than_capacity() {
        let cfg = HeavyHitterConfig::split(2, 0.5).unwrap();
        let (k, v) = tagged(1, 0, 3);
        assert!(update_h2o(&KvCache::new(1), &k, &v, &Tensor2::zeros(3, 3), &cfg).is_err());
    }

    #[test]
    fn keep_set_breaks_ties_toward_newer() {
        let keep = heavy_hitter_keep_set(&[1.0, 1.0, 1.0, 0.0, 0.0], 1, 2);
        assert_eq!(keep, vec![1, 2, 4]);
    }

    #[test]
    fn sink_window_keeps_first_and_latest() {
        let cfg = SinkWindowConfig::new(4, 2).unwrap();
        let mut c = KvCache::new(1);
        for t in 1..=6 {
            let (k, v) = tagged(1, t, 1);
            c = update_sink_window(&c, &k, &v, &cfg).unwrap();
        }
        assert_eq!(tags(&c), vec![1, 2, 5, 6]);
    }

    #[test]
    fn sink_window_matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        for _ in 0..50 {
            let m = rng.gen_range(2..10);
            let n_sink = rng.gen_range(0..=m);
            let cfg = SinkWindowConfig::new(m, n_sink).unwrap();
            let mut c = KvCache::new(1);
            let mut seen = 0;
            for _ in 0..rng.gen_range(1..8) {
                let b = rng.gen_range(1..5);
                let (k, v) = tagged(1, seen, b);
                c = update_sink_window(&c, &k, &v, &cfg).unwrap();
                seen += b;
            }
            let expect: Vec<usize> = if seen <= m {
                (0..seen).collect()
            } else {
                (0..n_sink).chain(seen - (m - n_sink)..seen).collect()
            };
            assert_eq!(tags(&c), expect);
            assert_eq!(c.token_positions(), expect);
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("lococo+streaming".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn hybrid_rejects_full_reservation() {
        let mut p = PolicyConfig::new(PolicyKind::LococoSink, 4);
        p.n_sink = 4;
        assert!(p.validate(1).is_err());
    }
}
