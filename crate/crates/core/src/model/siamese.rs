//! Two weight-shared towers and the batch gradient of the pair objective.

use super::loss::{classification_grad, contrastive_grad, LossConfig};
use super::recurrent::{backward, forward};
use super::{class_logits, encode, EncoderParams, MotionSignature};
use crate::error::{Error, Result};
use crate::features::{EncoderInput, PairLabel};
use crate::par::{self, Parallelism};

/// Both towers borrow one parameter set, so they cannot drift apart.
pub struct SiameseEncoder<'a> {
    params: &'a EncoderParams,
}

impl<'a> SiameseEncoder<'a> {
    pub fn new(params: &'a EncoderParams) -> Self {
        Self { params }
    }

    pub fn tower_a(&self) -> &'a EncoderParams {
        self.params
    }

    pub fn tower_b(&self) -> &'a EncoderParams {
        self.params
    }

    pub fn encode_pair(&self, a: &EncoderInput, b: &EncoderInput) -> Result<(MotionSignature, MotionSignature)> {
        Ok((encode(self.tower_a(), a)?, encode(self.tower_b(), b)?))
    }
}

/// A labeled pair of indices into an input pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRef {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub classification: f64,
    pub total: f64,
}

/// Exact gradient of
/// `contrastive_weight * mean(L_contrastive) + classification_weight * mean(L_ce)`
/// over `pairs`. `inputs[i]` and `classes[i]` describe pool item `i`; the
/// classification term of a pair averages its labeled sides.
pub fn loss_gradients(
    params: &EncoderParams,
    inputs: &[EncoderInput],
    classes: &[Option<usize>],
    pairs: &[PairRef],
    config: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    loss_gradients_with(params, inputs, classes, pairs, config, Parallelism::default())
}

pub fn loss_gradients_with(
    params: &EncoderParams,
    inputs: &[EncoderInput],
    classes: &[Option<usize>],
    pairs: &[PairRef],
    config: &LossConfig,
    mode: Parallelism,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    config.validate()?;
    if inputs.len() != classes.len() {
        return Err(Error::Shape {
            expected: inputs.len(),
            actual: classes.len(),
        });
    }
    let use_classes = config.classification_weight > 0.0;
    if use_classes && params.config().class_count.is_none() {
        return Err(Error::Config("classification weight set but the encoder has no class head".into()));
    }

    let mut keys: Vec<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    keys.sort_unstable();
    keys.dedup();
    if let Some(&bad) = keys.iter().find(|&&k| k >= inputs.len()) {
        return Err(Error::Argument(format!("pair references item {bad} of {}", inputs.len())));
    }
    for &k in &keys {
        params.check_input(&inputs[k])?;
    }
    let slot = |k: usize| keys.binary_search(&k).expect("key collected above");
    let traces = par::map(mode, &keys, |&k| forward(params, &inputs[k]));

    let mut grads = vec![0.0; params.len()];
    let dim = params.config().embedding_dim;
    let mut d_emb = vec![vec![0.0; dim]; keys.len()];
    let n = pairs.len() as f64;
    let wc = config.contrastive_weight / n;
    let wcls = config.classification_weight / n;
    let mut sum_con = 0.0;
    let mut sum_cls = 0.0;

    let head = params.layout().iter().find(|s| s.name == "classifier.w").map(|s| s.range());
    let head_b = params.layout().iter().find(|s| s.name == "classifier.b").map(|s| s.range());

    for pair in pairs {
        let (ia, ib) = (slot(pair.a), slot(pair.b));
        let (loss, d_a) = contrastive_grad(&traces[ia].embedding, &traces[ib].embedding, pair.label, config.margin)?;
        sum_con += loss;
        for (k, g) in d_a.iter().enumerate() {
            d_emb[ia][k] += wc * g;
            d_emb[ib][k] -= wc * g;
        }

        if !use_classes {
            continue;
        }
        let sides: Vec<(usize, usize)> = [(ia, pair.a), (ib, pair.b)]
            .into_iter()
            .filter_map(|(i, item)| classes[item].map(|c| (i, c)))
            .collect();
        if sides.is_empty() {
            continue;
        }
        let share = wcls / sides.len() as f64;
        let (w_range, b_range) = (head.clone().expect("class head"), head_b.clone().expect("class head"));
        for (i, class) in sides.iter().copied() {
            let emb = &traces[i].embedding;
            let logits = class_logits(params, emb).expect("class head");
            let (ce, d_logits) = classification_grad(&logits, class)?;
            sum_cls += ce / sides.len() as f64;
            let w = &params.values()[w_range.clone()];
            for (c, &dl) in d_logits.iter().enumerate() {
                let g = share * dl;
                grads[b_range.start + c] += g;
                let row = w_range.start + c * dim;
                for k in 0..dim {
                    grads[row + k] += g * emb[k];
                    d_emb[i][k] += g * w[c * dim + k];
                }
            }
        }
    }

    let per_item = par::map_range(mode, keys.len(), |i| {
        let mut g = vec![0.0; params.len()];
        backward(params, &inputs[keys[i]], &traces[i], &d_emb[i], &mut g);
        g
    });
    for g in per_item {
        for (acc, v) in grads.iter_mut().zip(g) {
            *acc += v;
        }
    }

    let contrastive = sum_con / n;
    let classification = sum_cls / n;
    let breakdown = LossBreakdown {
        contrastive,
        classification,
        total: config.contrastive_weight * contrastive + config.classification_weight * classification,
    };
    Ok((breakdown, grads))
}
