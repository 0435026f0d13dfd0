//! Length-preserving 1-D multi-channel convolution along the token axis.
//!
//! Weights are stored as a `C_out × (C_in · k)` tensor: entry
//! `(o, c * k + j)` is tap `j` of the filter from input channel `c` to output
//! channel `o`. Tap `j` reads input position `t + j - (k - 1) / 2`; positions
//! outside `0..T` read zero.

use super::tensor::Tensor2;
use crate::error::{shape_err, Error, Result};
use crate::exec;

fn check(input: &Tensor2, weight: &Tensor2, k: usize) -> Result<usize> {
    if k.is_multiple_of(2) {
        return Err(Error::EvenKernel(k));
    }
    if weight.cols() != input.rows() * k {
        return shape_err(
            "conv1d",
            format!(
                "weight {:?} does not match {} input channels with kernel {k}",
                weight.shape(),
                input.rows()
            ),
        );
    }
    Ok((k - 1) / 2)
}

/// Valid range of output positions `t` for which `t + j - half` is in `0..len`.
#[inline]
fn tap_range(j: usize, half: usize, len: usize) -> (usize, usize) {
    let lo = half.saturating_sub(j);
    let hi = (len + half).saturating_sub(j).min(len);
    (lo, hi.max(lo))
}

pub fn conv1d(input: &Tensor2, weight: &Tensor2, k: usize) -> Result<Tensor2> {
    let half = check(input, weight, k)?;
    let (c_in, t_len) = input.shape();
    let c_out = weight.rows();
    let mut out = Tensor2::zeros(c_out, t_len);
    let x = input.data();
    let w = weight.data();
    exec::for_each_chunk(out.data_mut(), t_len, c_out * c_in * k * t_len, |o, row| {
        let w_row = &w[o * c_in * k..(o + 1) * c_in * k];
        for c in 0..c_in {
            let x_row = &x[c * t_len..(c + 1) * t_len];
            for j in 0..k {
                let wv = w_row[c * k + j];
                let (lo, hi) = tap_range(j, half, t_len);
                for t in lo..hi {
                    row[t] += wv * x_row[t + j - half];
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of the loss with respect to the convolution input.
pub fn conv1d_backward_input(grad: &Tensor2, weight: &Tensor2, c_in: usize, k: usize) -> Tensor2 {
    let half = (k - 1) / 2;
    let (c_out, t_len) = grad.shape();
    let mut out = Tensor2::zeros(c_in, t_len);
    let g = grad.data();
    let w = weight.data();
    exec::for_each_chunk(out.data_mut(), t_len, c_out * c_in * k * t_len, |c, row| {
        for o in 0..c_out {
            let g_row = &g[o * t_len..(o + 1) * t_len];
            for j in 0..k {
                let wv = w[o * c_in * k + c * k + j];
                let (lo, hi) = tap_range(j, half, t_len);
                for t in lo..hi {
                    row[t + j - half] += wv * g_row[t];
                }
            }
        }
    });
    out
}

/// Gradient of the loss with respect to the weight tensor.
pub fn conv1d_backward_weight(grad: &Tensor2, input: &Tensor2, k: usize) -> Tensor2 {
    let half = (k - 1) / 2;
    let (c_out, t_len) = grad.shape();
    let c_in = input.rows();
    let mut out = Tensor2::zeros(c_out, c_in * k);
    let g = grad.data();
    let x = input.data();
    exec::for_each_chunk(out.data_mut(), c_in * k, c_out * c_in * k * t_len, |o, row| {
        let g_row = &g[o * t_len..(o + 1) * t_len];
        for c in 0..c_in {
            let x_row = &x[c * t_len..(c + 1) * t_len];
            for j in 0..k {
                let (lo, hi) = tap_range(j, half, t_len);
                let mut acc = 0.0;
                for t in lo..hi {
                    acc += g_row[t] * x_row[t + j - half];
                }
                row[c * k + j] = acc;
            }
        }
    });
    out
}
