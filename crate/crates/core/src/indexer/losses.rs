//! Training objectives with hand-derived gradients.

use rand::Rng;

use super::contrastive::ContrastiveGroup;
use super::encoder::{add_pooled_grad, backward, check_tokens, encode, mean_embedding, EncoderOutput};
use super::{EncoderParams, IndexerError, TrainConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: EncoderParams,
}

/// Loss terms of one multi-task step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub mlm: f64,
    pub cls: f64,
    pub con: f64,
    pub total: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Mask `ceil(rate * n)` positions, never all of them. Needs `n >= 2`.
pub fn choose_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Result<Vec<bool>, IndexerError> {
    if n < 2 {
        return Err(IndexerError::TooShortForMasking(n));
    }
    let count = ((rate * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut mask = vec![false; n];
    for i in rng::sample_indices(rng, n, count) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Masked-token loss for a fixed mask, accumulated into `grad` with weight `scale`.
///
/// Each masked token is predicted from the mean of the unmasked embeddings
/// through the tied output layer: `logits = E t_rest`.
pub fn accumulate_mlm(
    tokens: &[u32],
    mask: &[bool],
    params: &EncoderParams,
    scale: f64,
    grad: &mut EncoderParams,
) -> Result<f64, IndexerError> {
    check_tokens(tokens, params)?;
    if mask.len() != tokens.len() {
        return Err(IndexerError::Shape(format!("mask of {} for {} tokens", mask.len(), tokens.len())));
    }
    let visible: Vec<u32> = tokens.iter().zip(mask).filter(|(_, &m)| !m).map(|(&t, _)| t).collect();
    let targets: Vec<u32> = tokens.iter().zip(mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
    if visible.is_empty() || targets.is_empty() {
        return Err(IndexerError::Shape("mask must hide at least one and keep at least one token".into()));
    }
    let d = params.dim;
    let rest = mean_embedding(&visible, params);
    let logits: Vec<f64> = params
        .embedding
        .chunks_exact(d)
        .map(|row| row.iter().zip(&rest).map(|(a, b)| a * b).sum())
        .collect();
    let lse = log_sum_exp(&logits);
    let inv_m = 1.0 / targets.len() as f64;
    let loss = lse - targets.iter().map(|&t| logits[t as usize]).sum::<f64>() * inv_m;

    if scale != 0.0 {
        // dL/dlogits = softmax - mean of target one-hots
        let mut dlogits: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
        for &t in &targets {
            dlogits[t as usize] -= inv_m;
        }
        let mut d_rest = vec![0.0; d];
        for (v, &dl) in dlogits.iter().enumerate() {
            let row = &params.embedding[v * d..(v + 1) * d];
            let grow = &mut grad.embedding[v * d..(v + 1) * d];
            for c in 0..d {
                grow[c] += scale * dl * rest[c];
                d_rest[c] += dl * row[c];
            }
        }
        d_rest.iter_mut().for_each(|x| *x *= scale);
        add_pooled_grad(&visible, &d_rest, grad);
    }
    Ok(loss)
}

/// Masked-token loss with a freshly drawn mask.
pub fn mlm_loss<R: Rng + ?Sized>(
    tokens: &[u32],
    params: &EncoderParams,
    mask_rate: f64,
    rng: &mut R,
) -> Result<LossGrad, IndexerError> {
    let mask = choose_mask(tokens.len(), mask_rate, rng)?;
    let mut grad = params.zeros_like();
    let loss = accumulate_mlm(tokens, &mask, params, 1.0, &mut grad)?;
    Ok(LossGrad { loss, grad })
}

/// Sum over levels of softmax cross-entropy of `W_j m_j` against the gold
/// class index at that level.
pub fn accumulate_cls(
    out: &EncoderOutput,
    targets: &[usize],
    params: &EncoderParams,
    scale: f64,
    grad: &mut EncoderParams,
) -> Result<f64, IndexerError> {
    if targets.len() != params.depth() || out.index.len() != params.depth() {
        return Err(IndexerError::LevelMismatch(format!(
            "{} targets, {} index vectors, {} levels",
            targets.len(),
            out.index.len(),
            params.depth()
        )));
    }
    let d = params.dim;
    let mut loss = 0.0;
    let mut d_index = vec![vec![0.0; d]; params.depth()];
    for (j, level) in params.levels.iter().enumerate() {
        let target = targets[j];
        if target >= level.width {
            return Err(IndexerError::LevelMismatch(format!(
                "class {target} at level {} of width {}",
                j + 1,
                level.width
            )));
        }
        let m = &out.index[j];
        let logits: Vec<f64> = level
            .head
            .chunks_exact(d)
            .map(|row| row.iter().zip(m).map(|(w, x)| w * x).sum())
            .collect();
        let p = softmax(&logits);
        loss += log_sum_exp(&logits) - logits[target];
        if scale == 0.0 {
            continue;
        }
        let g = &mut grad.levels[j];
        for (k, &pk) in p.iter().enumerate() {
            let dl = scale * (pk - if k == target { 1.0 } else { 0.0 });
            let row = &level.head[k * d..(k + 1) * d];
            for c in 0..d {
                g.head[k * d + c] += dl * m[c];
                d_index[j][c] += dl * row[c];
            }
        }
    }
    if scale != 0.0 {
        backward(out, &d_index, params, grad);
    }
    Ok(loss)
}

pub fn cls_loss(tokens: &[u32], targets: &[usize], params: &EncoderParams) -> Result<LossGrad, IndexerError> {
    let out = encode(tokens, params)?;
    let mut grad = params.zeros_like();
    let loss = accumulate_cls(&out, targets, params, 1.0, &mut grad)?;
    Ok(LossGrad { loss, grad })
}

/// The contrastive objective over precomputed cosines.
///
/// `positive[j]` is cos(m_j, m_j+) and `negatives[j][k]` is cos(m_j, m_{j,k}-).
/// Per level: `-log(exp(pos/tau) / sum_k exp(neg_k/tau))`; with
/// `infonce` the positive term joins the denominator.
pub fn contrastive_objective(positive: &[f64], negatives: &[Vec<f64>], tau: f64, infonce: bool) -> f64 {
    positive
        .iter()
        .zip(negatives)
        .map(|(&pos, negs)| {
            let mut terms: Vec<f64> = negs.iter().map(|c| c / tau).collect();
            if infonce {
                terms.push(pos / tau);
            }
            log_sum_exp(&terms) - pos / tau
        })
        .sum()
}

/// Gradient of `cos(x, y)` with respect to `x`.
fn cos_and_grads(x: &[f64], y: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let cos = dot / (nx * ny);
    let gx = x.iter().zip(y).map(|(a, b)| b / (nx * ny) - cos * a / (nx * nx)).collect();
    let gy = x.iter().zip(y).map(|(a, b)| a / (nx * ny) - cos * b / (ny * ny)).collect();
    Some((cos, gx, gy))
}

pub fn accumulate_dcl(
    group: &ContrastiveGroup,
    params: &EncoderParams,
    tau: f64,
    infonce: bool,
    scale: f64,
    grad: &mut EncoderParams,
) -> Result<f64, IndexerError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(IndexerError::Config(format!("temperature must be positive, got {tau}")));
    }
    if group.negatives.is_empty() {
        return Err(IndexerError::NoNegatives);
    }
    let members = group.members();
    let outs = members
        .iter()
        .map(|m| encode(&m.tokens, params))
        .collect::<Result<Vec<_>, _>>()?;
    let c = params.depth();
    let d = params.dim;
    let anchor = &outs[0];
    let mut d_index: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; d]; c]; outs.len()];
    let mut positive = Vec::with_capacity(c);
    let mut negatives = Vec::with_capacity(c);
    for j in 0..c {
        let mut cosines = Vec::with_capacity(outs.len() - 1);
        let mut grads = Vec::with_capacity(outs.len() - 1);
        for (i, out) in outs.iter().enumerate().skip(1) {
            let (cos, ga, gb) = cos_and_grads(&anchor.index[j], &out.index[j]).ok_or_else(|| {
                let who = if anchor.index[j].iter().all(|&x| x == 0.0) { &members[0] } else { &members[i] };
                IndexerError::ZeroNorm { member: who.label(), level: j + 1 }
            })?;
            cosines.push(cos);
            grads.push((ga, gb));
        }
        let pos = cosines[0];
        let negs = cosines[1..].to_vec();
        // dL/dcos: positive gets -1/tau (+ its softmax share under InfoNCE),
        // negatives get their softmax weight / tau.
        let mut terms: Vec<f64> = negs.iter().map(|x| x / tau).collect();
        if infonce {
            terms.push(pos / tau);
        }
        let w = softmax(&terms);
        let mut dcos = Vec::with_capacity(cosines.len());
        dcos.push(-1.0 / tau + if infonce { w[w.len() - 1] / tau } else { 0.0 });
        dcos.extend(w[..negs.len()].iter().map(|x| x / tau));
        for (k, (ga, gb)) in grads.iter().enumerate() {
            let s = scale * dcos[k];
            for r in 0..d {
                d_index[0][j][r] += s * ga[r];
                d_index[k + 1][j][r] += s * gb[r];
            }
        }
        positive.push(pos);
        negatives.push(negs);
    }
    let loss = contrastive_objective(&positive, &negatives, tau, infonce);
    if scale != 0.0 {
        for (out, di) in outs.iter().zip(&d_index) {
            backward(out, di, params, grad);
        }
    }
    Ok(loss)
}

pub fn dcl_loss(group: &ContrastiveGroup, params: &EncoderParams, tau: f64, infonce: bool) -> Result<LossGrad, IndexerError> {
    let mut grad = params.zeros_like();
    let loss = accumulate_dcl(group, params, tau, infonce, 1.0, &mut grad)?;
    Ok(LossGrad { loss, grad })
}

/// `L_mlm + alpha L_cls + beta L_con` for one anchor with a fixed mask.
/// Anchors with a single token skip the masked-token term.
pub fn total_loss_masked(
    tokens: &[u32],
    mask: Option<&[bool]>,
    targets: &[usize],
    group: Option<&ContrastiveGroup>,
    params: &EncoderParams,
    cfg: &TrainConfig,
    grad: &mut EncoderParams,
) -> Result<LossParts, IndexerError> {
    let mut parts = LossParts::default();
    if let Some(mask) = mask {
        parts.mlm = accumulate_mlm(tokens, mask, params, 1.0, grad)?;
    }
    if cfg.alpha != 0.0 {
        let out = encode(tokens, params)?;
        parts.cls = accumulate_cls(&out, targets, params, cfg.alpha, grad)?;
    }
    if cfg.beta != 0.0 {
        if let Some(group) = group {
            parts.con = accumulate_dcl(group, params, cfg.tau, cfg.infonce_denominator, cfg.beta, grad)?;
        }
    }
    parts.total = parts.mlm + cfg.alpha * parts.cls + cfg.beta * parts.con;
    Ok(parts)
}

pub fn total_loss<R: Rng + ?Sized>(
    tokens: &[u32],
    targets: &[usize],
    group: Option<&ContrastiveGroup>,
    params: &EncoderParams,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossParts, EncoderParams), IndexerError> {
    let mask = if tokens.len() >= 2 { Some(choose_mask(tokens.len(), cfg.mask_rate, rng)?) } else { None };
    let mut grad = params.zeros_like();
    let parts = total_loss_masked(tokens, mask.as_deref(), targets, group, params, cfg, &mut grad)?;
    Ok((parts, grad))
}
