//! Sub-sequence retrieval: a second encoder regressed onto the frozen
//! full-sequence signatures of the parents its windows were cut from.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::EncoderInput;
use crate::index::{query_with, EmbeddingIndex, QueryResult};
use crate::model::{backward, encode, encode_sequences, encoder_input_for, forward, EncoderParams};
use crate::motion_data::SkeletonSequence;
use crate::par::{self, Parallelism};
use crate::training::{Adam, TrainConfig};

/// Shortest window worth encoding.
pub const MIN_WINDOW: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct SubsequenceSample {
    pub parent_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    /// The extracted frames `[start_frame, end_frame)`, id `parent@start-end`.
    pub frames: SkeletonSequence,
}

/// Sliding windows of `round(f * N)` frames for each fraction `f`, advanced
/// by `stride_fraction` of the window. Windows shorter than [`MIN_WINDOW`]
/// are skipped.
pub fn sample_subsequences(seq: &SkeletonSequence, window_fractions: &[f64], stride_fraction: f64) -> Result<Vec<SubsequenceSample>> {
    if let Some(f) = window_fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Error::Argument(format!("window fraction {f} is outside (0, 1)")));
    }
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(Error::Argument(format!("stride fraction {stride_fraction} is outside (0, 1]")));
    }
    let n = seq.len();
    let mut out = Vec::new();
    for &f in window_fractions {
        let w = (f * n as f64).round() as usize;
        if w < MIN_WINDOW || w > n {
            continue;
        }
        let stride = ((stride_fraction * w as f64).round() as usize).max(1);
        let mut start = 0;
        while start + w <= n {
            let end = start + w;
            out.push(SubsequenceSample {
                parent_id: seq.id.clone(),
                start_frame: start,
                end_frame: end,
                frames: seq.window(format!("{}@{start}-{end}", seq.id), start, end)?,
            });
            start += stride;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmotionConfig {
    pub window_fractions: Vec<f64>,
    pub stride_fraction: f64,
    /// Also train on each whole parent sequence.
    pub include_full: bool,
    /// Start from a copy of the full encoder instead of fresh weights.
    pub init_from_full: bool,
}

impl Default for SubmotionConfig {
    fn default() -> Self {
        Self {
            window_fractions: vec![0.25, 0.5, 0.75],
            stride_fraction: 0.5,
            include_full: true,
            init_from_full: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmotionRecord {
    pub epoch: usize,
    pub mean_l2: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubmotionLog {
    pub epochs: Vec<SubmotionRecord>,
}

impl SubmotionLog {
    pub const HEADER: &'static str = "epoch,mean_l2,wall_seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.epochs {
            s.push_str(&format!("{},{},{:.3}\n", r.epoch, r.mean_l2, r.wall_seconds));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SubmotionOutcome {
    pub params: EncoderParams,
    pub log: SubmotionLog,
    pub sample_count: usize,
}

fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared-Euclidean target loss over `samples` and its gradient.
fn regression_gradients(
    params: &EncoderParams,
    inputs: &[EncoderInput],
    targets: &[Vec<f64>],
    samples: &[usize],
    mode: Parallelism,
) -> (f64, Vec<f64>) {
    let scale = 1.0 / samples.len() as f64;
    let parts = par::map(mode, samples, |&i| {
        let trace = forward(params, &inputs[i]);
        let t = &targets[i];
        let loss = squared_l2(&trace.embedding, t);
        let d: Vec<f64> = trace.embedding.iter().zip(t).map(|(e, y)| 2.0 * (e - y) * scale).collect();
        let mut g = vec![0.0; params.len()];
        backward(params, &inputs[i], &trace, &d, &mut g);
        (loss, g)
    });
    let mut grads = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (loss * scale, grads)
}

/// Squared distance between the window's signature and a parent signature.
pub fn submotion_loss(params: &EncoderParams, window: &SkeletonSequence, target: &[f32]) -> Result<f64> {
    let sig = encode(params, &encoder_input_for(params.config(), window)?)?;
    if sig.dim() != target.len() {
        return Err(Error::Shape {
            expected: sig.dim(),
            actual: target.len(),
        });
    }
    let t: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    Ok(squared_l2(&sig.to_f64(), &t))
}

/// Trains a fresh encoder (same architecture, no class head) so that windows
/// of `parents` land on the parent's signature under `full`. `full` is only
/// read.
pub fn train_submotion(
    full: &EncoderParams,
    parents: &[SkeletonSequence],
    train: &TrainConfig,
    config: &SubmotionConfig,
) -> Result<SubmotionOutcome> {
    train_submotion_with(full, parents, train, config, Parallelism::default(), &mut |_| {})
}

pub fn train_submotion_with(
    full: &EncoderParams,
    parents: &[SkeletonSequence],
    train: &TrainConfig,
    config: &SubmotionConfig,
    mode: Parallelism,
    observer: &mut dyn FnMut(&SubmotionRecord),
) -> Result<SubmotionOutcome> {
    if full.is_submotion() {
        return Err(Error::Config("the target encoder is itself a sub-motion encoder".into()));
    }
    if full.epochs_trained() == 0 {
        return Err(Error::Config("the full-sequence encoder has not been trained".into()));
    }
    if train.batch_size == 0 || !(train.learning_rate > 0.0) {
        return Err(Error::Config("batch_size and learning_rate must be positive".into()));
    }
    if parents.is_empty() {
        return Err(Error::Dataset("no parent sequences".into()));
    }
    let targets_by_parent: Vec<Vec<f64>> = encode_sequences(full, parents, mode)?.iter().map(|s| s.to_f64()).collect();
    let sub_config = {
        let mut c = full.config().clone();
        c.class_count = None;
        c
    };
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (p, target) in parents.iter().zip(&targets_by_parent) {
        if config.include_full {
            inputs.push(encoder_input_for(&sub_config, p)?);
            targets.push(target.clone());
        }
        for w in sample_subsequences(p, &config.window_fractions, config.stride_fraction)? {
            inputs.push(encoder_input_for(&sub_config, &w.frames)?);
            targets.push(target.clone());
        }
    }
    if inputs.is_empty() {
        return Err(Error::Dataset("parents are too short to yield any window".into()));
    }

    let mut params = if config.init_from_full {
        full.without_classifier()
    } else {
        EncoderParams::init(&sub_config, train.seed)?
    };
    params.set_submotion(true);
    params.set_epochs_trained(0);
    let mut adam = Adam::new(params.len(), train.learning_rate, train.adam_beta1, train.adam_beta2, train.adam_eps);
    let mut log = SubmotionLog::default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let start = Instant::now();
    for epoch in 1..=train.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(train.batch_size).enumerate() {
            let (loss, mut grads) = regression_gradients(&params, &inputs, &targets, batch, mode);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite loss {loss} in epoch {epoch}, batch {}", b + 1)));
            }
            if let Some(clip) = train.grad_clip {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    grads.iter_mut().for_each(|g| *g *= clip / norm);
                }
            }
            adam.step(&mut params, &grads);
            total += loss * batch.len() as f64;
        }
        let record = SubmotionRecord {
            epoch,
            mean_l2: total / inputs.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        log.epochs.push(record);
        params.set_epochs_trained(epoch);
    }
    Ok(SubmotionOutcome {
        params,
        log,
        sample_count: inputs.len(),
    })
}

/// Encodes `window` with the sub-motion encoder and searches the
/// full-sequence index.
pub fn query_submotion(params: &EncoderParams, window: &SkeletonSequence, index: &EmbeddingIndex, k: usize) -> Result<QueryResult> {
    let sig = encode(params, &encoder_input_for(params.config(), window)?)?;
    query_with(index, &sig, k, Parallelism::default())
}
