//! Causal attention over column-major token sequences, rotary position
//! encoding, and segment-level attention over a growing KV cache.

use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::error::{shape_err, Error, Result};
use crate::numerics::tensor::{self, matmul, matmul_nt, matmul_tn, softmax_cols, Tensor2};

/// Rotary embedding settings. Positions are divided by
/// `interpolation_scale` before the angles are formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub interpolation_scale: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            base: 10_000.0,
            interpolation_scale: 1.0,
        }
    }
}

impl RopeConfig {
    /// Interpolated config for running a model pretrained on
    /// `pretrained_context` tokens at `target_context`.
    pub fn interpolated(base: f64, pretrained_context: usize, target_context: usize) -> Self {
        let scale = (target_context as f64 / pretrained_context as f64).max(1.0);
        Self {
            base,
            interpolation_scale: scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interpolation_scale.is_nan() || self.interpolation_scale < 1.0 || self.base.is_nan() || self.base <= 0.0
        {
            return Err(Error::Config(format!(
                "rope base must be > 0 and interpolation scale >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    #[inline]
    fn angle(&self, position: f64, pair: usize, head_dim: usize) -> f64 {
        let inv_freq = self.base.powf(-((2 * pair) as f64) / head_dim as f64);
        position / self.interpolation_scale * inv_freq
    }
}

/// Rotates every `head_dim`-row block of `x` pairwise, column `t` by angles
/// derived from `positions[t]`.
pub fn rotate_heads(x: &Tensor2, positions: &[f64], cfg: &RopeConfig, head_dim: usize) -> Result<Tensor2> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!("rotary head dim must be even, got {head_dim}")));
    }
    if head_dim == 0 || !x.rows().is_multiple_of(head_dim) {
        return shape_err("rope", format!("{} rows with head dim {head_dim}", x.rows()));
    }
    if positions.len() != x.cols() {
        return shape_err(
            "rope",
            format!("{} positions for {} columns", positions.len(), x.cols()),
        );
    }
    let mut out = x.clone();
    let n_heads = x.rows() / head_dim;
    for (t, &p) in positions.iter().enumerate() {
        for i in 0..head_dim / 2 {
            let (s, c) = cfg.angle(p, i, head_dim).sin_cos();
            for h in 0..n_heads {
                let r0 = h * head_dim + 2 * i;
                let a = x.get(r0, t);
                let b = x.get(r0 + 1, t);
                out.set(r0, t, a * c - b * s);
                out.set(r0 + 1, t, a * s + b * c);
            }
        }
    }
    Ok(out)
}

/// Rotary encoding of a single head (`d × T`) at integer positions.
pub fn apply_rope(x: &Tensor2, positions: &[usize], cfg: &RopeConfig) -> Result<Tensor2> {
    let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    rotate_heads(x, &pos, cfg, x.rows())
}

/// Projection weights of one attention layer. Rows of `w_q`, `w_k`, `w_v`
/// hold `n_heads` consecutive blocks of `head_dim` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    pub w_o: Tensor2,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn new(w_q: Tensor2, w_k: Tensor2, w_v: Tensor2, w_o: Tensor2, n_heads: usize) -> Result<Self> {
        let inner = w_q.rows();
        if n_heads == 0 || !inner.is_multiple_of(n_heads) {
            return shape_err("attention params", format!("{inner} rows for {n_heads} heads"));
        }
        let d_model = w_q.cols();
        for (name, w) in [("w_k", &w_k), ("w_v", &w_v)] {
            if w.shape() != (inner, d_model) {
                return shape_err("attention params", format!("{name} is {:?}", w.shape()));
            }
        }
        if w_o.shape() != (d_model, inner) {
            return shape_err("attention params", format!("w_o is {:?}", w_o.shape()));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            n_heads,
            head_dim: inner / n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.cols()
    }
}

pub fn project_qkv(x: &Tensor2, params: &AttentionParams) -> Result<(Tensor2, Tensor2, Tensor2)> {
    Ok((
        matmul(&params.w_q, x)?,
        matmul(&params.w_k, x)?,
        matmul(&params.w_v, x)?,
    ))
}

/// Attention of `B` queries over `C ≥ B` keys, where the last `B` keys are
/// the queries' own block. Query `j` sees key `r` iff `r ≤ C - B + j`.
///
/// Returns the `d × B` output and the `C × B` probabilities.
pub fn block_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    let (d, b) = q.shape();
    let c = k.cols();
    if k.rows() != d || v.rows() != d || v.cols() != c {
        return shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        );
    }
    if c < b {
        return shape_err("attention", format!("{c} keys for {b} queries"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = matmul_tn(k, q)?.scale(scale);
    causal_mask(&mut scores, c - b);
    let probs = softmax_cols(&scores)?;
    let out = matmul(v, &probs)?;
    Ok((out, probs))
}

/// Sets `scores[r, j] = -inf` wherever key `r` lies after query `j`.
pub fn causal_mask(scores: &mut Tensor2, offset: usize) {
    let (rows, cols) = scores.shape();
    for j in 0..cols {
        for r in (offset + j + 1)..rows {
            scores.set(r, j, f64::NEG_INFINITY);
        }
    }
}

pub(crate) fn block_attention_backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    probs: &Tensor2,
    scale: f64,
    grad: &Tensor2,
) -> Result<(Tensor2, Tensor2, Tensor2)> {
    let dv = matmul_nt(grad, probs)?;
    let dp = matmul_tn(v, grad)?;
    let ds = tensor::softmax_cols_backward(probs, &dp).scale(scale);
    let dk = matmul_nt(q, &ds)?;
    let dq = matmul(k, &ds)?;
    Ok((dq, dk, dv))
}

/// Standard causal self-attention over one sequence: `K`, `V` and `Q` all
/// cover the same `T` tokens.
pub fn full_causal_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2) -> Result<Tensor2> {
    if k.cols() != q.cols() {
        return shape_err(
            "full_causal_attention",
            format!("{} keys for {} queries", k.cols(), q.cols()),
        );
    }
    Ok(block_attention(q, k, v)?.0)
}

/// Runs [`block_attention`] on each `head_dim` row block and stacks the heads.
/// The returned probabilities are summed over heads.
pub fn multi_head(q: &Tensor2, k: &Tensor2, v: &Tensor2, n_heads: usize) -> Result<(Tensor2, Tensor2)> {
    let hd = q.rows() / n_heads;
    let mut out: Option<Tensor2> = None;
    let mut probs: Option<Tensor2> = None;
    for h in 0..n_heads {
        let (o, p) = block_attention(
            &q.slice_rows(h * hd, (h + 1) * hd),
            &k.slice_rows(h * hd, (h + 1) * hd),
            &v.slice_rows(h * hd, (h + 1) * hd),
        )?;
        out = Some(match out {
            None => o,
            Some(acc) => acc.vcat(&o)?,
        });
        match &mut probs {
            None => probs = Some(p),
            Some(acc) => acc.accumulate(&p),
        }
    }
    Ok((out.expect("n_heads > 0"), probs.expect("n_heads > 0")))
}

/// A token sequence split into consecutive blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentStream {
    pub len: usize,
    pub block_size: usize,
    pub position_base: usize,
}

/// One block of a [`SegmentStream`]: columns `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub position_base: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn positions(&self) -> Vec<usize> {
        (self.start..self.end).map(|p| p + self.position_base).collect()
    }
}

impl SegmentStream {
    /// Inference stream: the last block may be short.
    pub fn new(len: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("block size must be positive".into()));
        }
        Ok(Self {
            len,
            block_size,
            position_base: 0,
        })
    }

    /// Training stream: the length must split into whole blocks.
    pub fn for_training(len: usize, block_size: usize) -> Result<Self> {
        let s = Self::new(len, block_size)?;
        if !len.is_multiple_of(block_size) {
            return Err(Error::Config(format!(
                "training length {len} is not a multiple of block size {block_size}"
            )));
        }
        Ok(s)
    }

    pub fn n_blocks(&self) -> usize {
        self.len.div_ceil(self.block_size)
    }

    pub fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        (0..self.n_blocks()).map(move |index| Segment {
            index,
            start: index * self.block_size,
            end: ((index + 1) * self.block_size).min(self.len),
            position_base: self.position_base,
        })
    }
}

/// Result of [`segment_attention`].
#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub blocks: Vec<Tensor2>,
    /// Largest attention-score matrix built for any single head and block.
    pub peak_score_entries: usize,
}

impl SegmentOutput {
    pub fn concat(&self) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(0, 0);
        for b in &self.blocks {
            out = out.hcat(b)?;
        }
        Ok(out)
    }
}

/// Segment-level attention: each block attends to the cached keys plus its
/// own causal prefix, then its keys and values are appended to the cache.
///
/// `x` is `d_model × L`; `rope`, when given, rotates queries and keys at
/// their absolute positions before caching.
pub fn segment_attention(
    x: &Tensor2,
    stream: &SegmentStream,
    params: &AttentionParams,
    rope: Option<&RopeConfig>,
    cache: &mut KvCache,
) -> Result<SegmentOutput> {
    if !cache.is_empty() {
        return Err(Error::Config("segment attention needs an empty cache".into()));
    }
    if x.cols() != stream.len {
        return shape_err(
            "segment_attention",
            format!("{} columns, stream of {}", x.cols(), stream.len),
        );
    }
    let mut blocks = Vec::with_capacity(stream.n_blocks());
    let mut peak = 0;
    for seg in stream.segments() {
        let xb = x.slice_cols(seg.start, seg.end);
        let (mut q, mut k, v) = project_qkv(&xb, params)?;
        if let Some(cfg) = rope {
            let pos: Vec<f64> = seg.positions().iter().map(|&p| p as f64).collect();
            q = rotate_heads(&q, &pos, cfg, params.head_dim)?;
            k = rotate_heads(&k, &pos, cfg, params.head_dim)?;
        }
        let k_all = cache.keys().hcat(&k)?;
        let v_all = cache.values().hcat(&v)?;
        peak = peak.max(k_all.cols() * seg.len());
        let (o, _) = multi_head(&q, &k_all, &v_all, params.n_heads)?;
        blocks.push(matmul(&params.w_o, &o)?);
        *cache = crate::cache::update_concat(cache, &k, &v)?;
    }
    Ok(SegmentOutput {
        blocks,
        peak_score_entries: peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2) -> Tensor2 {
        let (d, t) = q.shape();
        let mut out = Tensor2::zeros(d, t);
        for j in 0..t {
            let mut s: Vec<f64> = (0..=j)
                .map(|r| (0..d).map(|i| k.get(i, r) * q.get(i, j)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            s.iter_mut().for_each(|x| *x = (*x - m).exp());
            let z: f64 = s.iter().sum();
            for i in 0..d {
                out.set(i, j, (0..=j).map(|r| v.get(i, r) * s[r] / z).sum());
            }
        }
        out
    }

    #[test]
    fn single_token_attends_to_itself() {
        let q = Tensor2::from_rows(&[&[0.3], &[-1.0]]);
        let k = Tensor2::from_rows(&[&[2.0], &[0.5]]);
        let v = Tensor2::from_rows(&[&[7.0], &[-3.0]]);
        assert_eq!(full_causal_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_return_the_shared_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor2::randn(4, 6, 1.0, &mut rng);
        let k = Tensor2::from_fn(4, 6, |i, _| i as f64 * 0.1);
        let v = Tensor2::from_fn(4, 6, |i, _| 1.0 + i as f64);
        let out = full_causal_attention(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-14);
    }

    #[test]
    fn matches_scalar_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor2::randn(4, 16, 1.0, &mut rng);
        let k = Tensor2::randn(4, 16, 1.0, &mut rng);
        let v = Tensor2::randn(4, 16, 1.0, &mut rng);
        let out = full_causal_attention(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&scalar_attention(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor2::randn(8, 3, 1.0, &mut rng);
        let out = apply_rope(&x, &[0, 0, 0], &RopeConfig::default()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn rope_interpolation_halves_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor2::randn(8, 1, 1.0, &mut rng);
        let scaled = RopeConfig {
            interpolation_scale: 2.0,
            ..RopeConfig::default()
        };
        let a = apply_rope(&x, &[14], &scaled).unwrap();
        let b = apply_rope(&x, &[7], &RopeConfig::default()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn rope_matches_scalar_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor2::randn(6, 1, 1.0, &mut rng);
        let cfg = RopeConfig::default();
        let out = apply_rope(&x, &[5], &cfg).unwrap();
        for i in 0..3 {
            let theta = 5.0 / 10_000f64.powf(2.0 * i as f64 / 6.0);
            let (a, b) = (x.get(2 * i, 0), x.get(2 * i + 1, 0));
            assert!((out.get(2 * i, 0) - (a * theta.cos() - b * theta.sin())).abs() < 1e-14);
            assert!((out.get(2 * i + 1, 0) - (a * theta.sin() + b * theta.cos())).abs() < 1e-14);
        }
    }

    #[test]
    fn rope_rejects_odd_dim() {
        let x = Tensor2::zeros(3, 2);
        assert!(apply_rope(&x, &[0, 1], &RopeConfig::default()).is_err());
    }

    #[test]
    fn project_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor2::randn(4, 5, 1.0, &mut rng);
        let id = Tensor2::identity(4);
        let p = AttentionParams::new(id.clone(), id.clone(), id.clone(), id, 1).unwrap();
        let (q, k, v) = project_qkv(&x, &p).unwrap();
        assert_eq!(k, x);
        assert_eq!(q, x);
        assert_eq!(v, x);
        let (q0, k0, v0) = project_qkv(&Tensor2::zeros(4, 5), &p).unwrap();
        assert_eq!(q0.max_abs() + k0.max_abs() + v0.max_abs(), 0.0);
    }

    #[test]
    fn training_stream_rejects_ragged_length() {
        assert!(SegmentStream::for_training(10, 4).is_err());
        let s = SegmentStream::new(10, 4).unwrap();
        let lens: Vec<usize> = s.segments().map(|g| g.len()).collect();
        assert_eq!(lens, vec![4, 4, 2]);
    }

    #[test]
    fn segment_attention_rejects_nonempty_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = || Tensor2::identity(4);
        let p = AttentionParams::new(w(), w(), w(), w(), 1).unwrap();
        let x = Tensor2::randn(4, 4, 1.0, &mut rng);
        let mut cache = KvCache::new(4);
        cache = crate::cache::update_concat(&cache, &x.slice_cols(0, 1), &x.slice_cols(0, 1)).unwrap();
        let s = SegmentStream::new(4, 2).unwrap();
        assert!(segment_attention(&x, &s, &p, None, &mut cache).is_err());
    }
}
