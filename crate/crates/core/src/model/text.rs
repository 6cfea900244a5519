//! Hash-embedding text encoder.
//!
//! Captions are lowercased and split on whitespace; each token is hashed to a fixed
//! pseudo-random base vector, and one trainable linear layer maps base vectors to
//! `d_model`. Only the projection is learned.

use crate::error::{Error, Result};
use crate::layout::TOKEN_CAP;
use crate::numerics::{AttnBias, ParameterStore, RngStream, Tape, Tensor, Var, NEG_LARGE};

/// Caption of the unconditional branch used for guidance.
pub const EMPTY_CAPTION: &str = "<empty>";

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    /// `(len, d_model)`.
    pub tokens: Tensor,
    pub len: usize,
}

pub fn tokenize(caption: &str) -> Vec<String> {
    caption.split_whitespace().take(TOKEN_CAP).map(str::to_lowercase).collect()
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn token_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Unit-variance base vector of one token, scaled by `1 / sqrt(dim)`.
pub fn base_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, format!("token/{:016x}", token_hash(token)));
    let s = (dim as f64).powf(-0.5);
    (0..dim).map(|_| rng.normal() * s).collect()
}

/// Base vectors `(len, dim)` of a caption, truncated at the token cap.
pub fn base_vectors(caption: &str, dim: usize, seed: u64) -> Result<Tensor> {
    let toks = tokenize(caption);
    if toks.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let data = toks.iter().flat_map(|t| base_vector(t, dim, seed)).collect();
    Tensor::new(&[toks.len(), dim], data)
}

pub fn init_projection(store: &mut ParameterStore, prefix: &str, vocab_dim: usize, d: usize) -> Result<()> {
    crate::blocks::insert_linear(store, prefix, vocab_dim, d)
}

/// Embed one caption with the projection at `prefix`.
pub fn encode_text(caption: &str, store: &ParameterStore, prefix: &str, seed: u64) -> Result<TextEmbedding> {
    let w = store.value(&format!("{prefix}.w"))?;
    let base = base_vectors(caption, w.shape()[0], seed)?;
    let mut tape = Tape::inference();
    let x = tape.constant(base);
    let y = crate::blocks::apply_linear(&mut tape, store, prefix, x)?;
    let tokens = tape.value(y).clone();
    let len = tokens.shape()[0];
    Ok(TextEmbedding { tokens, len })
}

/// Embed a batch of captions on a tape: `(n, l_max, d)` plus a key bias `(n, l_max)`
/// that forbids padding positions.
pub fn encode_batch(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    captions: &[&str],
    seed: u64,
) -> Result<(Var, AttnBias)> {
    let dim = store.value(&format!("{prefix}.w"))?.shape()[0];
    let bases = captions
        .iter()
        .map(|c| base_vectors(c, dim, seed))
        .collect::<Result<Vec<_>>>()?;
    let l = bases.iter().map(|b| b.shape()[0]).max().unwrap_or(1);
    let n = captions.len();
    let mut data = vec![0.0; n * l * dim];
    let mut keys = vec![-NEG_LARGE; n * l];
    for (i, b) in bases.iter().enumerate() {
        let len = b.shape()[0];
        data[i * l * dim..i * l * dim + len * dim].copy_from_slice(b.data());
        keys[i * l..i * l + len].iter_mut().for_each(|k| *k = 0.0);
    }
    let x = tape.constant(Tensor::new(&[n, l, dim], data)?);
    let y = crate::blocks::apply_linear(tape, store, prefix, x)?;
    let bias = if bases.iter().all(|b| b.shape()[0] == l) {
        AttnBias::None
    } else {
        AttnBias::Keys(Tensor::new(&[n, l], keys)?)
    };
    Ok((y, bias))
}
