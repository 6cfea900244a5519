//! Transformer building blocks shared by both branches.
//!
//! Activations are token-major `(batch, tokens, d_model)`. Every function here takes
//! the parameter store and a name prefix; weights live in the store under
//! `{prefix}.{component}.{weight}`.

use crate::error::{Error, Result};
use crate::layout::AttentionBiasSet;
use crate::numerics::{AttnBias, ParameterStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

/// Number of rows in a block's modulation table.
pub const ADALN_ROWS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub has_ffn: bool,
    pub mlp_ratio: usize,
}

impl BlockConfig {
    pub fn new(d_model: usize, n_heads: usize, has_ffn: bool) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(BlockConfig {
            d_model,
            n_heads,
            has_ffn,
            mlp_ratio: 4,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-row modulation vectors, each `(rows, 1, d_model)`.
#[derive(Clone, Copy, Debug)]
pub struct AdaLNParams {
    pub beta1: Var,
    pub beta2: Var,
    pub gamma1: Var,
    pub gamma2: Var,
    pub alpha1: Var,
    pub alpha2: Var,
}

fn xavier(store: &ParameterStore, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, &mut store.init_rng(name))
}

pub(crate) fn insert_linear(store: &mut ParameterStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    let w = xavier(store, &format!("{prefix}.w"), fan_in, fan_out);
    store.insert(format!("{prefix}.w"), w)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

pub(crate) fn apply_linear(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.linear(x, w, Some(b))
}

/// Sinusoidal embedding `(n, dim)` of (possibly fractional) timesteps.
pub fn timestep_embedding(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[t.len(), dim], |idx| {
        let (r, c) = (idx / dim, idx % dim);
        if c >= 2 * half {
            return 0.0;
        }
        let j = c % half;
        let freq = (-(10_000f64).ln() * j as f64 / half as f64).exp();
        let a = t[r] * freq;
        if c < half {
            a.cos()
        } else {
            a.sin()
        }
    })
}

/// Weights of the shared timestep trunk: an MLP to `d`, then SiLU and a projection to `6 d`.
pub fn init_timestep_trunk(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    insert_linear(store, &format!("{prefix}.t_embed.fc1"), d, d)?;
    insert_linear(store, &format!("{prefix}.t_embed.fc2"), d, d)?;
    insert_linear(store, &format!("{prefix}.t_block"), d, ADALN_ROWS * d)
}

/// Timestep vector `(n, d)` and the shared six-row modulation `(n, 6, d)`.
pub fn timestep_trunk(tape: &mut Tape, store: &ParameterStore, prefix: &str, t: &[f64], d: usize) -> Result<(Var, Var)> {
    let e = tape.constant(timestep_embedding(t, d));
    let h = apply_linear(tape, store, &format!("{prefix}.t_embed.fc1"), e)?;
    let h = tape.silu(h);
    let temb = apply_linear(tape, store, &format!("{prefix}.t_embed.fc2"), h)?;
    let s = tape.silu(temb);
    let t6 = apply_linear(tape, store, &format!("{prefix}.t_block"), s)?;
    let t6 = tape.reshape(t6, &[t.len(), ADALN_ROWS, d])?;
    Ok((temb, t6))
}

/// Six modulation vectors for one block: the shared trunk output plus the block's
/// own table, whose rows are ordered `[beta1, beta2, gamma1, gamma2, alpha1, alpha2]`.
pub fn adaln_single(tape: &mut Tape, store: &ParameterStore, table: &str, t6: Var) -> Result<AdaLNParams> {
    let tab = tape.param(store, table)?;
    let d = tape.shape(tab)[1];
    let tab = tape.reshape(tab, &[1, ADALN_ROWS, d])?;
    let all = tape.add(t6, tab)?;
    let mut rows = Vec::with_capacity(ADALN_ROWS);
    for i in 0..ADALN_ROWS {
        rows.push(tape.narrow(all, 1, i, 1)?);
    }
    Ok(AdaLNParams {
        beta1: rows[0],
        beta2: rows[1],
        gamma1: rows[2],
        gamma2: rows[3],
        alpha1: rows[4],
        alpha2: rows[5],
    })
}

/// `x (1 + gamma) + beta` with `gamma`, `beta` broadcast over tokens.
pub fn modulate(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let d = *tape.shape(gamma).last().unwrap_or(&0);
    let one = tape.constant(Tensor::ones(&[1, 1, d]));
    let scale = tape.add(gamma, one)?;
    let y = tape.mul(x, scale)?;
    tape.add(y, beta)
}

pub fn init_attention(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        insert_linear(store, &format!("{prefix}.{p}"), d, d)?;
    }
    Ok(())
}

/// Projected multi-head attention: per head `softmax(Q K^T / sqrt(d_k) + bias) V`,
/// heads concatenated and passed through the output projection. The bias is shared
/// by every head.
pub fn masked_attention(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    bias: &AttnBias,
    n_heads: usize,
    group: usize,
) -> Result<Var> {
    let q = apply_linear(tape, store, &format!("{prefix}.q"), x_q)?;
    let k = apply_linear(tape, store, &format!("{prefix}.k"), x_kv)?;
    let v = apply_linear(tape, store, &format!("{prefix}.v"), x_kv)?;
    let a = tape.attention(q, k, v, bias, n_heads, group)?;
    apply_linear(tape, store, &format!("{prefix}.o"), a)
}

pub fn init_ffn(store: &mut ParameterStore, prefix: &str, d: usize, ratio: usize) -> Result<()> {
    insert_linear(store, &format!("{prefix}.fc1"), d, ratio * d)?;
    insert_linear(store, &format!("{prefix}.fc2"), ratio * d, d)
}

fn ffn(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let h = apply_linear(tape, store, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h);
    apply_linear(tape, store, &format!("{prefix}.fc2"), h)
}

fn init_table(store: &mut ParameterStore, name: &str, d: usize) -> Result<()> {
    let t = Tensor::randn(&[ADALN_ROWS, d], (d as f64).powf(-0.5), &mut store.init_rng(name));
    store.insert(name, t)
}

pub fn init_global_block(store: &mut ParameterStore, prefix: &str, cfg: &BlockConfig) -> Result<()> {
    let d = cfg.d_model;
    init_table(store, &format!("{prefix}.table"), d)?;
    init_attention(store, &format!("{prefix}.attn"), d)?;
    init_attention(store, &format!("{prefix}.cross"), d)?;
    if cfg.has_ffn {
        init_ffn(store, &format!("{prefix}.ffn"), d, cfg.mlp_ratio)?;
    }
    Ok(())
}

/// Global block on `z: (n, hw, d)`.
///
/// `text: (n / group, l, d)` is shared by each run of `group` consecutive rows of `z`;
/// `text_bias` masks caption padding. `t6: (n, 6, d)` is the shared timestep trunk output.
#[allow(clippy::too_many_arguments)]
pub fn global_block(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    z: Var,
    text: Var,
    text_bias: &AttnBias,
    group: usize,
    t6: Var,
    cfg: &BlockConfig,
) -> Result<Var> {
    let m = adaln_single(tape, store, &format!("{prefix}.table"), t6)?;
    let h = tape.layer_norm(z, LN_EPS)?;
    let h = modulate(tape, h, m.gamma1, m.beta1)?;
    let a = masked_attention(tape, store, &format!("{prefix}.attn"), h, h, &AttnBias::None, cfg.n_heads, 1)?;
    let a = tape.mul(a, m.alpha1)?;
    let z = tape.add(z, a)?;

    let h = tape.layer_norm(z, LN_EPS)?;
    let c = masked_attention(tape, store, &format!("{prefix}.cross"), h, text, text_bias, cfg.n_heads, group)?;
    let z = tape.add(z, c)?;

    if !cfg.has_ffn {
        return Ok(z);
    }
    let h = tape.layer_norm(z, LN_EPS)?;
    let h = modulate(tape, h, m.gamma2, m.beta2)?;
    let f = ffn(tape, store, &format!("{prefix}.ffn"), h)?;
    let f = tape.mul(f, m.alpha2)?;
    tape.add(z, f)
}

pub fn init_subject_block(store: &mut ParameterStore, prefix: &str, cfg: &BlockConfig) -> Result<()> {
    let d = cfg.d_model;
    init_table(store, &format!("{prefix}.table"), d)?;
    init_attention(store, &format!("{prefix}.attn"), d)?;
    init_attention(store, &format!("{prefix}.cross"), d)?;
    init_attention(store, &format!("{prefix}.attn3d"), d)
}

/// Subject block on `z: (b * f, hw, d)` with frames of one sample contiguous.
///
/// Order: gated masked self-attention per frame, masked cross-attention against the
/// per-frame caption `text: (b * f, l, d)` with its residual zeroed outside the box,
/// then gated masked attention over all `f * hw` tokens of a sample.
/// `t6: (b * f, 6, d)` repeats each sample's timestep once per frame.
#[allow(clippy::too_many_arguments)]
pub fn subject_block(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    z: Var,
    text: Var,
    text_bias: &AttnBias,
    biases: &AttentionBiasSet,
    t6: Var,
    cfg: &BlockConfig,
) -> Result<Var> {
    let (b, f, hw, d) = (biases.b, biases.f, biases.hw(), cfg.d_model);
    if tape.shape(z) != [b * f, hw, d] {
        return Err(Error::shape("subject_block", tape.shape(z), &[b * f, hw, d]));
    }
    let m = adaln_single(tape, store, &format!("{prefix}.table"), t6)?;

    let h = tape.layer_norm(z, LN_EPS)?;
    let h = modulate(tape, h, m.gamma1, m.beta1)?;
    let self_bias = AttnBias::Keys(biases.self_keys());
    let a = masked_attention(tape, store, &format!("{prefix}.attn"), h, h, &self_bias, cfg.n_heads, 1)?;
    let a = tape.mul(a, m.alpha1)?;
    let z = tape.add(z, a)?;

    let h = tape.layer_norm(z, LN_EPS)?;
    let c = masked_attention(tape, store, &format!("{prefix}.cross"), h, text, text_bias, cfg.n_heads, 1)?;
    let in_box = tape.constant(biases.in_box().reshape(&[b * f, hw, 1])?);
    let c = tape.mul(c, in_box)?;
    let z = tape.add(z, c)?;

    let z3 = tape.reshape(z, &[b, f * hw, d])?;
    let h = tape.layer_norm(z3, LN_EPS)?;
    let per_sample = |tape: &mut Tape, v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[b, f, d])?;
        let v = tape.narrow(v, 1, 0, 1)?;
        tape.reshape(v, &[b, 1, d])
    };
    let g2 = per_sample(tape, m.gamma2)?;
    let b2 = per_sample(tape, m.beta2)?;
    let a2 = per_sample(tape, m.alpha2)?;
    let h = modulate(tape, h, g2, b2)?;
    let temporal = AttnBias::Keys(biases.temporal_keys());
    let a = masked_attention(tape, store, &format!("{prefix}.attn3d"), h, h, &temporal, cfg.n_heads, 1)?;
    let a = tape.mul(a, a2)?;
    let z3 = tape.add(z3, a)?;
    tape.reshape(z3, &[b * f, hw, d])
}

/// A `d x d` linear layer initialized to exactly zero.
pub fn init_zero_linear(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[d, d]))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
}

/// `z_global + F(z_sub)` where `F` is the zero-initialized linear layer at `prefix`.
pub fn zero_inject(tape: &mut Tape, store: &ParameterStore, prefix: &str, z_global: Var, z_sub: Var) -> Result<Var> {
    if tape.shape(z_global) != tape.shape(z_sub) {
        return Err(Error::shape("zero_inject", tape.shape(z_global), tape.shape(z_sub)));
    }
    let f = apply_linear(tape, store, prefix, z_sub)?;
    tape.add(z_global, f)
}
