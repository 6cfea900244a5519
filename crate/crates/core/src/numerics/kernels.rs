//! Slice-level kernels shared by the tape ops and the eager helpers.
//!
//! Every kernel here is a single-threaded reference path with a fixed summation order,
//! so results are bit-reproducible for identical inputs. `matmul_into` may split rows
//! across a thread pool; each output row is still computed by one thread in the same
//! order, which keeps the result bitwise identical.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Additive magnitude marking a forbidden attention position.
pub const NEG_LARGE: f64 = 1e9;

/// Entries at or below this value are treated as forbidden.
pub(crate) const FORBIDDEN_THRESHOLD: f64 = -0.5 * NEG_LARGE;

const PAR_MIN_ROWS: usize = 64;

/// `c[m, n] += a[m, k] * b[k, n]`.
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m >= PAR_MIN_ROWS && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m, k] += a[m, n] * b[k, n]^T`.
pub fn matmul_nt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(arow, brow);
        }
    }
}

/// `c[k, n] += a[m, k]^T * b[m, n]`.
pub fn matmul_tn_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Dense 2-D product with shape checking.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// In-place stable softmax of one row; returns an error if every entry is forbidden.
pub(crate) fn softmax_row(row: &mut [f64], bias_row: impl Iterator<Item = f64>, row_index: usize) -> Result<()> {
    let mut any_permitted = false;
    for (x, b) in row.iter_mut().zip(bias_row) {
        if b > FORBIDDEN_THRESHOLD {
            any_permitted = true;
        }
        *x += b;
    }
    if !any_permitted {
        return Err(Error::AllMaskedRow { row: row_index });
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

/// Normalize one row in place, returning `1 / sqrt(var + eps)`.
pub(crate) fn layer_norm_row(row: &mut [f64], eps: f64) -> f64 {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    for x in row.iter_mut() {
        *x = (*x - mean) * rstd;
    }
    rstd
}

/// Maps each index of `out_shape` to an index of a same-rank `small` shape whose
/// dimensions are either equal or 1.
pub(crate) struct Broadcast {
    pub small_index: Vec<usize>,
}

impl Broadcast {
    pub fn new(out_shape: &[usize], small: &[usize], op: &'static str) -> Result<Broadcast> {
        if out_shape.len() != small.len()
            || out_shape
                .iter()
                .zip(small)
                .any(|(&o, &s)| s != o && s != 1)
        {
            return Err(Error::shape(op, out_shape, small));
        }
        let n: usize = out_shape.iter().product();
        let small_strides = super::tensor::strides(small);
        let eff: Vec<usize> = small_strides
            .iter()
            .zip(small)
            .map(|(&st, &d)| if d == 1 { 0 } else { st })
            .collect();
        let rank = out_shape.len();
        let mut small_index = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            small_index.push(off);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += eff[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Broadcast { small_index })
    }
}

/// Eager softmax of `logits + bias` over the last axis; `bias` broadcasts with
/// same-rank size-1 axes.
pub fn softmax_with_bias(logits: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = *logits.shape().last().ok_or_else(|| Error::BadShape {
        op: "softmax_with_bias",
        detail: "scalar input".into(),
    })?;
    let bc = Broadcast::new(logits.shape(), bias.shape(), "softmax_with_bias")?;
    let mut out = logits.data().to_vec();
    for (r, row) in out.chunks_mut(n).enumerate() {
        let bias_row = (0..n).map(|j| bias.data()[bc.small_index[r * n + j]]);
        softmax_row(row, bias_row, r)?;
    }
    Tensor::new(logits.shape(), out)
}

/// Eager normalization over the last axis, without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 || eps <= 0.0 {
        return Err(Error::BadShape {
            op: "layer_norm",
            detail: format!("d = {d}, eps = {eps}"),
        });
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        layer_norm_row(row, eps);
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
