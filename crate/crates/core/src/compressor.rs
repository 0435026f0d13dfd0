//! Convolutional token merging.
//!
//! A per-layer [`ConvHead`] reads the channel stack `[K_n K̃; V_n Ṽ]`
//! (new block first, then the cache) and emits, for every output slot, a
//! nonnegative score per input column. Row-normalised, those scores are the
//! blending weights that fold the cache and the incoming block into exactly
//! `M` slots. Keys and values share the weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{update_concat, KvCache, SlotOrigin};
use crate::error::{shape_err, Error, Result};
use crate::numerics::tensor::{self, matmul, relu, Tensor2};
use crate::numerics::{conv, Var};

/// Default kernel width of the conv head.
pub const DEFAULT_KERNEL_SIZE: usize = 21;

/// Where the ReLU sits relative to the convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReluPlacement {
    /// `relu(conv(x) + b)`.
    #[default]
    PostConv,
    /// `relu(conv(relu(x)) + b)`: rectified input, output still clamped at
    /// zero so the weights stay nonnegative.
    PreConv,
}

/// Conv parameters for one transformer layer, shared by all of its heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvHead {
    /// `M × (2d · k)`.
    pub weight: Tensor2,
    /// `M × 1`.
    pub bias: Tensor2,
    pub kernel_size: usize,
    pub relu: ReluPlacement,
    pub layer_index: usize,
}

/// Standard deviation of the kernel noise at initialisation.
pub const INIT_NOISE: f64 = 1e-3;

impl ConvHead {
    pub fn new(
        weight: Tensor2,
        bias: Tensor2,
        kernel_size: usize,
        relu: ReluPlacement,
        layer_index: usize,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel_size));
        }
        if !weight.cols().is_multiple_of(2 * kernel_size) || bias.shape() != (weight.rows(), 1) {
            return shape_err(
                "conv head",
                format!("weight {:?}, bias {:?}, k={kernel_size}", weight.shape(), bias.shape()),
            );
        }
        Ok(Self {
            weight,
            bias,
            kernel_size,
            relu,
            layer_index,
        })
    }

    /// Near-uniform initialisation: unit bias and tiny kernel noise, so the
    /// fresh head averages its inputs while every ReLU is active.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        capacity: usize,
        kernel_size: usize,
        relu: ReluPlacement,
        layer_index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("conv head capacity must be positive".into()));
        }
        let weight = Tensor2::randn(capacity, 2 * d * kernel_size, INIT_NOISE, rng);
        Self::new(
            weight,
            Tensor2::filled(capacity, 1, 1.0),
            kernel_size,
            relu,
            layer_index,
        )
    }

    /// Number of output slots `M`.
    pub fn capacity(&self) -> usize {
        self.weight.rows()
    }

    /// Key/value width `d` the head was built for.
    pub fn key_dim(&self) -> usize {
        self.weight.cols() / (2 * self.kernel_size)
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Blending weights: `w` (M × B) for the new block, `w_tilde` (M × C) for
/// the existing cache.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub w: Tensor2,
    pub w_tilde: Tensor2,
    /// Rows whose raw scores summed below the floor and were made uniform.
    pub floored_rows: Vec<bool>,
}

impl FusionWeights {
    /// `[w w̃]`, M × (B + C).
    pub fn joined(&self) -> Result<Tensor2> {
        self.w.hcat(&self.w_tilde)
    }

    /// Selection weights: slot `i` copies token `keep[i]`, indexed in
    /// cache-then-block order. Eviction policies are fusions of this form.
    pub fn one_hot(keep: &[usize], cache_len: usize, b: usize) -> Self {
        let m = keep.len();
        let mut w = Tensor2::zeros(m, b);
        let mut w_tilde = Tensor2::zeros(m, cache_len);
        for (slot, &src) in keep.iter().enumerate() {
            if src < cache_len {
                w_tilde.set(slot, src, 1.0);
            } else {
                w.set(slot, src - cache_len, 1.0);
            }
        }
        Self {
            w,
            w_tilde,
            floored_rows: vec![false; m],
        }
    }
}

fn check_inputs(k_n: &Tensor2, v_n: &Tensor2, k_c: &Tensor2, v_c: &Tensor2, head: &ConvHead) -> Result<()> {
    let d = head.key_dim();
    let ok = k_n.rows() == d && v_n.shape() == k_n.shape() && k_c.rows() == d && v_c.shape() == k_c.shape();
    if !ok {
        return shape_err(
            "synthesize_weights",
            format!(
                "head expects d={d}; got K_n {:?}, V_n {:?}, K~ {:?}, V~ {:?}",
                k_n.shape(),
                v_n.shape(),
                k_c.shape(),
                v_c.shape()
            ),
        );
    }
    Ok(())
}

/// Raw nonnegative scores `W` (M × (B + C)) before row normalisation.
pub fn raw_scores(k_n: &Tensor2, v_n: &Tensor2, k_c: &Tensor2, v_c: &Tensor2, head: &ConvHead) -> Result<Tensor2> {
    check_inputs(k_n, v_n, k_c, v_c, head)?;
    let stack = k_n.hcat(k_c)?.vcat(&v_n.hcat(v_c)?)?;
    let stack = match head.relu {
        ReluPlacement::PostConv => stack,
        ReluPlacement::PreConv => relu(&stack),
    };
    let w = conv::conv1d(&stack, &head.weight, head.kernel_size)?.add_col_broadcast(&head.bias)?;
    Ok(relu(&w))
}

pub fn synthesize_weights(
    k_n: &Tensor2,
    v_n: &Tensor2,
    k_c: &Tensor2,
    v_c: &Tensor2,
    head: &ConvHead,
) -> Result<FusionWeights> {
    let w = raw_scores(k_n, v_n, k_c, v_c, head)?;
    let (norm, floored_rows) = tensor::row_normalize(&w);
    let b = k_n.cols();
    Ok(FusionWeights {
        w: norm.slice_cols(0, b),
        w_tilde: norm.slice_cols(b, norm.cols()),
        floored_rows,
    })
}

/// Merges keys and values with the same weights into `M` slots each.
pub fn fuse(
    weights: &FusionWeights,
    k_n: &Tensor2,
    v_n: &Tensor2,
    k_c: &Tensor2,
    v_c: &Tensor2,
) -> Result<(Tensor2, Tensor2)> {
    if weights.w.cols() != k_n.cols() || weights.w_tilde.cols() != k_c.cols() {
        return shape_err(
            "fuse",
            format!(
                "weights cover {}+{} columns, inputs {}+{}",
                weights.w.cols(),
                weights.w_tilde.cols(),
                k_n.cols(),
                k_c.cols()
            ),
        );
    }
    let wt = weights.joined()?.transpose();
    let keys = matmul(&k_n.hcat(k_c)?, &wt)?;
    let values = matmul(&v_n.hcat(v_c)?, &wt)?;
    Ok((keys, values))
}

/// One cache update: append while the block fits, otherwise merge into
/// exactly `M = head.capacity()` slots.
pub fn compress_step(cache: &KvCache, k_n: &Tensor2, v_n: &Tensor2, head: &ConvHead) -> Result<KvCache> {
    let m = head.capacity();
    if cache.len() + k_n.cols() <= m {
        return update_concat(cache, k_n, v_n);
    }
    let weights = synthesize_weights(k_n, v_n, cache.keys(), cache.values(), head)?;
    let (keys, values) = fuse(&weights, k_n, v_n, cache.keys(), cache.values())?;
    Ok(cache.replaced(keys, values, vec![SlotOrigin::Merged; m], k_n.cols()))
}

/// Trainable conv head on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvHeadVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
    pub kernel_size: usize,
    pub relu: ReluPlacement,
}

/// Differentiable [`compress_step`]: same arithmetic, recorded on the tape.
/// `cache` is `None` when empty.
pub fn compress_step_var<'t>(
    cache: Option<(Var<'t>, Var<'t>)>,
    k_n: Var<'t>,
    v_n: Var<'t>,
    head: &ConvHeadVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let m = head.weight.shape().0;
    let cache_len = cache.map_or(0, |(k, _)| k.shape().1);
    if cache_len + k_n.shape().1 <= m {
        // Fill branch keeps temporal order: cache first, then the block.
        return Ok(match cache {
            Some((k, v)) => (k.hcat(k_n)?, v.hcat(v_n)?),
            None => (k_n, v_n),
        });
    }
    let (keys_all, values_all) = match cache {
        Some((k, v)) => (k_n.hcat(k)?, v_n.hcat(v)?),
        None => (k_n, v_n),
    };
    let stack = keys_all.vcat(values_all)?;
    let stack = match head.relu {
        ReluPlacement::PostConv => stack,
        ReluPlacement::PreConv => stack.relu(),
    };
    let w = stack
        .conv1d(head.weight, head.kernel_size)?
        .add_col_broadcast(head.bias)?
        .relu()
        .row_normalize();
    let wt = w.transpose();
    Ok((keys_all.matmul(wt)?, values_all.matmul(wt)?))
}
