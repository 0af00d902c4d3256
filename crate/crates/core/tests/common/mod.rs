//! Test-side oracles shared by the integration suites. Each one is a plain
//! brute-force restatement of a definition, written without reference to the
//! library's implementation.
#![allow(dead_code)]

use std::sync::Arc;

use motion_signature::features::{EncoderInput, PairLabel};
use motion_signature::index::EmbeddingIndex;
use motion_signature::model::{loss_gradients, CellKind, EncoderConfig, EncoderParams, LossConfig, MotionSignature, PairRef, Readout};
use motion_signature::motion_data::{Frame, SkeletonSequence, SkeletonTopology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn star(j: usize) -> Arc<SkeletonTopology> {
    Arc::new(SkeletonTopology::new(j, (1..j).map(|c| (0, c)).collect(), 0).unwrap())
}

/// Coordinates uniform in [-1, 1]. With `dyadic`, every coordinate is a
/// multiple of 2^-20, so midpoints and differences are exact in `f64`.
pub fn random_sequence(rng: &mut ChaCha8Rng, id: &str, j: usize, n: usize, dyadic: bool) -> SkeletonSequence {
    let coord = |rng: &mut ChaCha8Rng| {
        if dyadic {
            rng.random_range(-(1i64 << 20)..=(1i64 << 20)) as f64 / (1u64 << 20) as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    };
    let frames = (0..n)
        .map(|_| Frame::new((0..j).map(|_| [coord(rng), coord(rng), coord(rng)]).collect()))
        .collect();
    SkeletonSequence::new(id, frames, star(j), 30.0).unwrap()
}

pub fn brute_motion_field(seq: &SkeletonSequence, i: usize, j: usize) -> Vec<[f64; 3]> {
    let (a, b) = (&seq.frames()[i].joints, &seq.frames()[j].joints);
    a.iter().zip(b).map(|(p, q)| [q[0] - p[0], q[1] - p[1], q[2] - p[2]]).collect()
}

pub fn brute_motion_distance(seq: &SkeletonSequence) -> Vec<f64> {
    let frames = seq.frames();
    (0..seq.joint_count())
        .map(|k| {
            let mut total = 0.0;
            for t in 1..frames.len() {
                let (p, q) = (frames[t - 1].joints[k], frames[t].joints[k]);
                total += ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
            }
            total
        })
        .collect()
}

fn frame_cost(a: &Frame, b: &Frame) -> f64 {
    let mut s = 0.0;
    for (p, q) in a.joints.iter().zip(&b.joints) {
        s += ((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2])).sqrt();
    }
    s / a.joints.len() as f64
}

/// Enumerates every monotone alignment path and returns the per-frame cost
/// in mm of the cheapest one (shortest among equal-cost paths).
pub fn brute_dtw_mm(a: &[Frame], b: &[Frame]) -> f64 {
    fn walk(a: &[Frame], b: &[Frame], i: usize, j: usize, acc: f64, len: usize, best: &mut (f64, usize)) {
        let acc = acc + frame_cost(&a[i], &b[j]);
        let len = len + 1;
        if i + 1 == a.len() && j + 1 == b.len() {
            if acc < best.0 || (acc == best.0 && len < best.1) {
                *best = (acc, len);
            }
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, len, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, len, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, len, best);
        }
    }
    let mut best = (f64::INFINITY, usize::MAX);
    walk(a, b, 0, 0, 0.0, 0, &mut best);
    best.0 / best.1 as f64 * 1000.0
}

/// Full scan sorted by (distance, id).
pub fn brute_knn(index: &EmbeddingIndex, sig: &MotionSignature, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = index
        .entries()
        .iter()
        .map(|e| {
            let d2: f64 = e
                .signature
                .0
                .iter()
                .zip(&sig.0)
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum();
            (e.id.clone(), d2.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares `loss_gradients` with central differences (step 1e-5) on every
/// parameter of a random encoder over two joints. Entries whose magnitude is
/// below 1e-6 on both sides are compared absolutely (1e-10) since their
/// relative error is dominated by rounding in the difference quotient.
pub fn gradient_check(seed: u64, cell: CellKind, readout: Readout, layers: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = EncoderConfig {
        input_width: 12,
        hidden_size: 8,
        num_recurrent_layers: layers,
        embedding_dim: 4,
        class_count: Some(3),
        cell,
        readout,
    };
    let params = EncoderParams::init(&config, seed).unwrap();
    let inputs: Vec<EncoderInput> = (0..4)
        .map(|i| {
            let n = rng.random_range(2..7);
            EncoderInput::from_sequence(&random_sequence(&mut rng, &format!("s{i}"), 2, n, false), false)
        })
        .collect();
    let classes = vec![Some(0), Some(1), Some(2), None];
    let pairs = vec![
        PairRef { a: 0, b: 1, label: PairLabel::Similar },
        PairRef { a: 1, b: 2, label: PairLabel::Dissimilar },
        PairRef { a: 2, b: 3, label: PairLabel::Similar },
        PairRef { a: 3, b: 0, label: PairLabel::Dissimilar },
    ];
    let loss = LossConfig {
        margin: 2.0,
        contrastive_weight: 1.0,
        classification_weight: 0.5,
    };
    let (_, analytic) = loss_gradients(&params, &inputs, &classes, &pairs, &loss).unwrap();
    let eval = |p: &EncoderParams| loss_gradients(p, &inputs, &classes, &pairs, &loss).unwrap().0.total;
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let up = eval(&probe);
        probe.values_mut()[i] = orig - step;
        let down = eval(&probe);
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let err = if scale < 1e-6 {
            if (a - numeric).abs() <= 1e-10 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (a - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    GradCheck {
        max_rel_error: worst,
        checked: params.len(),
    }
}
