//! Forward and backward passes of the reference encoder.
//!
//! `t` is the mean of the token embeddings and the index vector of level j
//! is `m_j = tanh(A_j t + b_j)`.

use super::{EncoderParams, IndexerError};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub tokens: Vec<u32>,
    /// Mean token embedding.
    pub pooled: Vec<f64>,
    /// One index vector per level, level 1 first.
    pub index: Vec<Vec<f64>>,
}

impl EncoderOutput {
    /// Per-token hidden states `h_i`; for this encoder, the token embeddings.
    pub fn hidden<'a>(&'a self, params: &'a EncoderParams) -> impl Iterator<Item = &'a [f64]> + 'a {
        self.tokens.iter().map(|&t| params.embedding_row(t))
    }

    /// Index vectors narrowed to the stored precision.
    pub fn index_f32(&self) -> Vec<Vec<f32>> {
        self.index.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect()
    }
}

pub(crate) fn check_tokens(tokens: &[u32], params: &EncoderParams) -> Result<(), IndexerError> {
    if tokens.is_empty() {
        return Err(IndexerError::EmptyInput);
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= params.vocab) {
        return Err(IndexerError::TokenOutOfRange { token: t, vocab: params.vocab });
    }
    Ok(())
}

pub(crate) fn mean_embedding(tokens: &[u32], params: &EncoderParams) -> Vec<f64> {
    let mut t = vec![0.0; params.dim];
    for &tok in tokens {
        for (acc, &e) in t.iter_mut().zip(params.embedding_row(tok)) {
            *acc += e;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    t.iter_mut().for_each(|x| *x *= inv);
    t
}

pub fn encode(tokens: &[u32], params: &EncoderParams) -> Result<EncoderOutput, IndexerError> {
    check_tokens(tokens, params)?;
    let d = params.dim;
    let pooled = mean_embedding(tokens, params);
    let index = params
        .levels
        .iter()
        .map(|level| {
            (0..d)
                .map(|r| {
                    let row = &level.proj[r * d..(r + 1) * d];
                    let z: f64 = row.iter().zip(&pooled).map(|(a, t)| a * t).sum::<f64>() + level.bias[r];
                    z.tanh()
                })
                .collect()
        })
        .collect();
    Ok(EncoderOutput { tokens: tokens.to_vec(), pooled, index })
}

/// Accumulate into `grads` the gradient of a loss whose derivative with
/// respect to the index vectors is `d_index`.
pub fn backward(out: &EncoderOutput, d_index: &[Vec<f64>], params: &EncoderParams, grads: &mut EncoderParams) {
    let d = params.dim;
    let mut d_pooled = vec![0.0; d];
    for (j, level) in params.levels.iter().enumerate() {
        let m = &out.index[j];
        let g = &mut grads.levels[j];
        for r in 0..d {
            let dz = d_index[j][r] * (1.0 - m[r] * m[r]);
            if dz == 0.0 {
                continue;
            }
            g.bias[r] += dz;
            let row = &level.proj[r * d..(r + 1) * d];
            let grow = &mut g.proj[r * d..(r + 1) * d];
            for c in 0..d {
                grow[c] += dz * out.pooled[c];
                d_pooled[c] += dz * row[c];
            }
        }
    }
    add_pooled_grad(&out.tokens, &d_pooled, grads);
}

/// Spread a gradient on the mean embedding back to the token rows.
pub(crate) fn add_pooled_grad(tokens: &[u32], d_pooled: &[f64], grads: &mut EncoderParams) {
    let d = grads.dim;
    let inv = 1.0 / tokens.len() as f64;
    for &tok in tokens {
        let row = &mut grads.embedding[tok as usize * d..(tok as usize + 1) * d];
        for (g, &x) in row.iter_mut().zip(d_pooled) {
            *g += x * inv;
        }
    }
}
