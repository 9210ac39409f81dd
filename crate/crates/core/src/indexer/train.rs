use log::info;
use rand::seq::SliceRandom;

use super::contrastive::{build_desc_similarity, ContrastiveSampler};
use super::losses::{choose_mask, total_loss_masked, LossParts};
use super::{EncoderParams, IndexerError, TrainConfig};
use crate::corpus::{Document, VOCAB_SIZE};
use crate::rng;
use crate::taxonomy::Taxonomy;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with a learning rate that decays linearly to zero over `total_steps`.
pub struct Adam {
    lr: f64,
    total_steps: usize,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64, total_steps: usize) -> Self {
        Self { lr, total_steps, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn current_lr(&self) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        self.lr * (1.0 - self.step as f64 / self.total_steps as f64).max(0.0)
    }

    pub fn step(&mut self, params: &mut EncoderParams, grad: &EncoderParams) {
        let lr = self.current_lr();
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let mut offset = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grad.tensors()) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
            offset += p.len();
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean loss terms per epoch.
    pub epoch_losses: Vec<LossParts>,
}

/// Class index of every level of `doc`'s path.
pub fn level_targets(taxonomy: &Taxonomy, doc: &Document) -> Vec<usize> {
    doc.gold.nodes().iter().map(|&n| taxonomy.level_index(n)).collect()
}

/// Train from a seeded initialization: one contrastive group per anchor per
/// step, anchors visited in a seeded shuffle each epoch.
pub fn train_indexer(trainset: &[Document], taxonomy: &Taxonomy, cfg: &TrainConfig) -> Result<TrainOutcome, IndexerError> {
    cfg.validate()?;
    if trainset.is_empty() {
        return Err(IndexerError::EmptyTrainset);
    }
    let init = EncoderParams::init(VOCAB_SIZE, cfg.dim, &taxonomy.level_widths(), cfg.seed);
    train_from(init, trainset, taxonomy, cfg)
}

pub fn train_from(
    mut params: EncoderParams,
    trainset: &[Document],
    taxonomy: &Taxonomy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, IndexerError> {
    cfg.validate()?;
    if trainset.is_empty() {
        return Err(IndexerError::EmptyTrainset);
    }
    if params.widths() != taxonomy.level_widths() {
        return Err(IndexerError::LevelMismatch(format!(
            "params widths {:?} vs taxonomy {:?}",
            params.widths(),
            taxonomy.level_widths()
        )));
    }
    let similarity = if cfg.beta != 0.0 { Some(build_desc_similarity(taxonomy, cfg.label_text)?) } else { None };
    let sampler = similarity.as_ref().map(|s| ContrastiveSampler::new(trainset, taxonomy, s));
    let targets: Vec<Vec<usize>> = trainset.iter().map(|d| level_targets(taxonomy, d)).collect();

    let total_steps = cfg.epochs * trainset.len();
    let mut adam = Adam::new(params.num_params(), cfg.lr, total_steps);
    let mut order_rng = rng::derive(cfg.seed, "train-order");
    let mut step_rng = rng::derive(cfg.seed, "train-steps");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..trainset.len()).collect();
    let mut grad = params.zeros_like();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = LossParts::default();
        for &i in &order {
            let doc = &trainset[i];
            let group = match &sampler {
                Some(s) => Some(s.group(i, &mut step_rng)?),
                None => None,
            };
            let mask = if doc.tokens.len() >= 2 {
                Some(choose_mask(doc.tokens.len(), cfg.mask_rate, &mut step_rng)?)
            } else {
                None
            };
            grad.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
            let parts =
                total_loss_masked(&doc.tokens, mask.as_deref(), &targets[i], group.as_ref(), &params, cfg, &mut grad)?;
            if !parts.total.is_finite() {
                return Err(IndexerError::NonFinite(format!("loss at epoch {}", epoch + 1)));
            }
            adam.step(&mut params, &grad);
            sum.mlm += parts.mlm;
            sum.cls += parts.cls;
            sum.con += parts.con;
            sum.total += parts.total;
        }
        let n = trainset.len() as f64;
        let mean = LossParts { mlm: sum.mlm / n, cls: sum.cls / n, con: sum.con / n, total: sum.total / n };
        info!(
            "epoch {}/{}: loss {:.5} (mlm {:.5}, cls {:.5}, con {:.5})",
            epoch + 1,
            cfg.epochs,
            mean.total,
            mean.mlm,
            mean.cls,
            mean.con
        );
        epoch_losses.push(mean);
    }
    if !params.is_finite() {
        return Err(IndexerError::NonFinite("parameters after training".into()));
    }
    Ok(TrainOutcome { params, epoch_losses })
}
