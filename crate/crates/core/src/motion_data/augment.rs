use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io::fill_missing;
use super::{Frame, Point3, SkeletonSequence};
use crate::error::{Error, Result};

/// Keeps frames 0, 2, 4, ... (and therefore the last frame when N is odd).
/// Playback rate is unchanged, so the motion plays twice as fast.
pub fn speed_double(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    if seq.len() < 3 {
        return Err(Error::TooShort { min: 3, actual: seq.len() });
    }
    let j = seq.joint_count();
    let frames = seq.frames().iter().step_by(2).cloned().collect();
    let mask = seq.missing_mask().map(|m| {
        m.chunks_exact(j)
            .step_by(2)
            .flatten()
            .copied()
            .collect::<Vec<_>>()
    });
    seq.derive(format!("{}_fast", seq.id), frames, seq.fps(), mask)
}

/// Inserts the joint-wise midpoint between every pair of frames: 2N - 1
/// frames, originals at even indices.
pub fn speed_half(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    let src = seq.frames();
    let mut frames = Vec::with_capacity(2 * src.len() - 1);
    for pair in src.windows(2) {
        frames.push(pair[0].clone());
        frames.push(Frame::new(
            pair[0]
                .joints
                .iter()
                .zip(&pair[1].joints)
                .map(|(a, b)| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])])
                .collect(),
        ));
    }
    frames.push(src[src.len() - 1].clone());

    let j = seq.joint_count();
    let mask = seq.missing_mask().map(|m| {
        let rows: Vec<&[bool]> = m.chunks_exact(j).collect();
        let mut out = Vec::with_capacity((2 * rows.len() - 1) * j);
        for pair in rows.windows(2) {
            out.extend_from_slice(pair[0]);
            out.extend(pair[0].iter().zip(pair[1]).map(|(a, b)| *a || *b));
        }
        out.extend_from_slice(rows[rows.len() - 1]);
        out
    });
    seq.derive(format!("{}_slow", seq.id), frames, seq.fps(), mask)
}

/// Flags `round(fraction * J)` joints as missing in every frame and fills
/// them per the loader's policy. The root is never dropped. Deterministic in
/// `seed`.
pub fn drop_joints(seq: &SkeletonSequence, fraction: f64, seed: u64) -> Result<SkeletonSequence> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!("dropout fraction must be in (0, 1), got {fraction}")));
    }
    let j = seq.joint_count();
    let count = (fraction * j as f64).round() as usize;
    if count == 0 {
        return Err(Error::Argument(format!(
            "fraction {fraction} of {j} joints rounds to zero"
        )));
    }
    let root = seq.topology().root();
    let candidates: Vec<usize> = (0..j).filter(|&k| k != root).collect();
    if count > candidates.len() {
        return Err(Error::Argument(format!("cannot drop {count} of {j} joints")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped: Vec<usize> = sample(&mut rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    dropped.sort_unstable();

    let mut mask = seq
        .missing_mask()
        .map(<[bool]>::to_vec)
        .unwrap_or_else(|| vec![false; seq.len() * j]);
    let mut frames = seq.frames().to_vec();
    for (t, frame) in frames.iter_mut().enumerate() {
        for &k in &dropped {
            mask[t * j + k] = true;
            frame.joints[k] = [f64::NAN; 3];
        }
    }
    fill_missing(&mut frames, &mask, seq.topology())?;
    seq.derive(seq.id.clone(), frames, seq.fps(), Some(mask))
}

/// Scales every coordinate about the origin.
pub fn uniform_scale(seq: &SkeletonSequence, s: f64) -> SkeletonSequence {
    map_points(seq, |p| [p[0] * s, p[1] * s, p[2] * s])
}

pub fn translate(seq: &SkeletonSequence, v: Point3) -> SkeletonSequence {
    map_points(seq, |p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
}

fn map_points(seq: &SkeletonSequence, f: impl Fn(Point3) -> Point3) -> SkeletonSequence {
    let frames = seq
        .frames()
        .iter()
        .map(|fr| Frame::new(fr.joints.iter().map(|&p| f(p)).collect()))
        .collect();
    seq.derive(seq.id.clone(), frames, seq.fps(), seq.missing_mask().map(<[bool]>::to_vec))
        .expect("finite affine image of a valid sequence")
}
