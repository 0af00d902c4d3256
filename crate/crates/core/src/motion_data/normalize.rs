//! Bone-length normalization.
//!
//! Bones are re-targeted breadth-first from the root: each bone keeps its
//! direction and is rescaled to its canonical length, the root stays where it
//! was. Canonical lengths default to the per-bone mean over a corpus.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Frame, SkeletonSequence, SkeletonTopology};
use crate::error::{Error, Result};

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Per-bone mean length over every frame of `sequences`, indexed like
/// `topology.bone_edges()`. Bones touching a missing joint are skipped.
pub fn canonical_bone_lengths(topology: &SkeletonTopology, sequences: &[SkeletonSequence]) -> Result<Vec<f64>> {
    let bones = topology.bone_edges();
    let mut sums = vec![0.0; bones.len()];
    let mut counts = vec![0usize; bones.len()];
    for seq in sequences {
        if seq.joint_count() != topology.joint_count() {
            return Err(Error::Validation(format!(
                "sequence {} has {} joints, topology has {}",
                seq.id,
                seq.joint_count(),
                topology.joint_count()
            )));
        }
        for (t, frame) in seq.frames().iter().enumerate() {
            for (b, &(p, c)) in bones.iter().enumerate() {
                if seq.is_missing(t, p) || seq.is_missing(t, c) {
                    continue;
                }
                sums[b] += norm(sub(frame.joints[c], frame.joints[p]));
                counts[b] += 1;
            }
        }
    }
    bones
        .iter()
        .enumerate()
        .map(|(b, &(p, c))| {
            if counts[b] == 0 {
                return Err(Error::Dataset(format!("no observations of bone {p}->{c}")));
            }
            let mean = sums[b] / counts[b] as f64;
            if mean > 0.0 {
                Ok(mean)
            } else {
                Err(Error::DegenerateBone { parent: p, child: c, frame: 0 })
            }
        })
        .collect()
}

pub fn normalize_bone_lengths(seq: &SkeletonSequence, canonical_lengths: &[f64]) -> Result<SkeletonSequence> {
    let topology = seq.topology();
    if canonical_lengths.len() != topology.bone_edges().len() {
        return Err(Error::Shape {
            expected: topology.bone_edges().len(),
            actual: canonical_lengths.len(),
        });
    }
    if let Some(&bad) = canonical_lengths.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Argument(format!("canonical bone length must be positive, got {bad}")));
    }
    if seq.has_missing() {
        return Err(Error::Validation(format!(
            "sequence {} has missing joints; normalize before dropout",
            seq.id
        )));
    }
    let frames = seq
        .frames()
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            let mut out = frame.joints.clone();
            for (b, (p, c)) in topology.bones_breadth_first() {
                let dir = sub(frame.joints[c], frame.joints[p]);
                let len = norm(dir);
                if len == 0.0 {
                    return Err(Error::DegenerateBone { parent: p, child: c, frame: t });
                }
                let s = canonical_lengths[b] / len;
                out[c] = [
                    out[p][0] + dir[0] * s,
                    out[p][1] + dir[1] * s,
                    out[p][2] + dir[2] * s,
                ];
            }
            Ok(Frame::new(out))
        })
        .collect::<Result<Vec<_>>>()?;
    seq.derive(seq.id.clone(), frames, seq.fps(), None)
}

/// One `parent child length` line per bone.
pub fn save_bone_lengths(path: impl AsRef<Path>, topology: &SkeletonTopology, lengths: &[f64]) -> Result<()> {
    let mut out = String::new();
    for (&(p, c), l) in topology.bone_edges().iter().zip(lengths) {
        writeln!(out, "{p} {c} {l}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_bone_lengths(path: impl AsRef<Path>, topology: &SkeletonTopology) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lengths = vec![None; topology.bone_edges().len()];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let parsed = match toks.as_slice() {
            [p, c, l] => p
                .parse::<usize>()
                .ok()
                .zip(c.parse::<usize>().ok())
                .zip(l.parse::<f64>().ok()),
            _ => None,
        };
        let ((p, c), l) = parsed.ok_or_else(|| Error::parse(path, i + 1, "expected `parent child length`"))?;
        let b = topology
            .bone_edges()
            .iter()
            .position(|&e| e == (p, c))
            .ok_or_else(|| Error::parse(path, i + 1, format!("bone {p}->{c} not in topology")))?;
        lengths[b] = Some(l);
    }
    lengths
        .into_iter()
        .zip(topology.bone_edges())
        .map(|(l, (p, c))| l.ok_or_else(|| Error::Validation(format!("no length for bone {p}->{c}"))))
        .collect()
}
