//! Skeleton sequences: topology, validation, file formats, bone-length
//! normalization, augmentation, and a synthetic motion generator.

mod augment;
mod io;
mod normalize;
mod synth;

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use augment::{drop_joints, speed_double, speed_half, translate, uniform_scale};
pub use io::{
    load_manifest, load_sequence, load_topology, parse_sequence, save_manifest, save_sequence,
    save_topology, DatasetManifest, ManifestEntry, Split,
};
pub use normalize::{canonical_bone_lengths, load_bone_lengths, normalize_bone_lengths, save_bone_lengths};
pub use synth::{synth_generate, ClassMotion, JitterSpec, SynthSpec};

pub type Point3 = [f64; 3];

/// Kinematic tree over `joint_count` joints.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    joint_count: usize,
    bone_edges: Vec<(usize, usize)>,
    root: usize,
    joint_names: Option<Vec<String>>,
    // edge indices in breadth-first order from the root
    bfs: Vec<usize>,
}

impl SkeletonTopology {
    pub fn new(joint_count: usize, bone_edges: Vec<(usize, usize)>, root: usize) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::Validation("topology needs at least one joint".into()));
        }
        if root >= joint_count {
            return Err(Error::Validation(format!(
                "root {root} out of range for {joint_count} joints"
            )));
        }
        if bone_edges.len() != joint_count - 1 {
            return Err(Error::Validation(format!(
                "a tree over {joint_count} joints has {} bones, got {}",
                joint_count - 1,
                bone_edges.len()
            )));
        }
        let mut children = vec![Vec::new(); joint_count];
        let mut has_parent = vec![false; joint_count];
        for (edge, &(p, c)) in bone_edges.iter().enumerate() {
            if p >= joint_count || c >= joint_count {
                return Err(Error::Validation(format!(
                    "bone {p}->{c} references a joint outside [0, {joint_count})"
                )));
            }
            if c == root || has_parent[c] || p == c {
                return Err(Error::Validation(format!("bone {p}->{c} breaks the tree")));
            }
            has_parent[c] = true;
            children[p].push(edge);
        }
        let mut bfs = Vec::with_capacity(bone_edges.len());
        let mut seen = vec![false; joint_count];
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(j) = queue.pop_front() {
            for &edge in &children[j] {
                let child = bone_edges[edge].1;
                if seen[child] {
                    return Err(Error::Validation(format!("joint {child} reached twice")));
                }
                seen[child] = true;
                bfs.push(edge);
                queue.push_back(child);
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "joint {j} is not connected to root {root}"
            )));
        }
        Ok(Self {
            joint_count,
            bone_edges,
            root,
            joint_names: None,
            bfs,
        })
    }

    pub fn with_joint_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.joint_count {
            return Err(Error::Validation(format!(
                "{} joint names for {} joints",
                names.len(),
                self.joint_count
            )));
        }
        self.joint_names = Some(names);
        Ok(self)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn bone_edges(&self) -> &[(usize, usize)] {
        &self.bone_edges
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn joint_names(&self) -> Option<&[String]> {
        self.joint_names.as_deref()
    }

    /// Bone indices ordered so every parent joint is placed before its child.
    pub fn bones_breadth_first(&self) -> impl Iterator<Item = (usize, (usize, usize))> + '_ {
        self.bfs.iter().map(move |&e| (e, self.bone_edges[e]))
    }

    /// A 15-joint humanoid used by the synthetic generator and the examples.
    ///
    /// Joints: 0 pelvis, 1 neck, 2 head, 3-5 left shoulder/elbow/hand,
    /// 6-8 right shoulder/elbow/hand, 9-11 left hip/knee/foot,
    /// 12-14 right hip/knee/foot.
    pub fn toy15() -> Self {
        let edges = vec![
            (0, 1),
            (1, 2),
            (1, 3),
            (3, 4),
            (4, 5),
            (1, 6),
            (6, 7),
            (7, 8),
            (0, 9),
            (9, 10),
            (10, 11),
            (0, 12),
            (12, 13),
            (13, 14),
        ];
        let names = [
            "pelvis", "neck", "head", "l_shoulder", "l_elbow", "l_hand", "r_shoulder", "r_elbow",
            "r_hand", "l_hip", "l_knee", "l_foot", "r_hip", "r_knee", "r_foot",
        ];
        Self::new(15, edges, 0)
            .and_then(|t| t.with_joint_names(names.iter().map(|s| s.to_string()).collect()))
            .expect("toy topology is a valid tree")
    }

    /// Rest pose for [`Self::toy15`], in meters, y up, facing +z.
    pub fn toy15_rest_pose() -> Vec<Point3> {
        vec![
            [0.0, 1.0, 0.0],
            [0.0, 1.5, 0.0],
            [0.0, 1.7, 0.0],
            [0.18, 1.45, 0.0],
            [0.45, 1.45, 0.0],
            [0.7, 1.45, 0.0],
            [-0.18, 1.45, 0.0],
            [-0.45, 1.45, 0.0],
            [-0.7, 1.45, 0.0],
            [0.1, 0.95, 0.0],
            [0.1, 0.5, 0.0],
            [0.1, 0.05, 0.05],
            [-0.1, 0.95, 0.0],
            [-0.1, 0.5, 0.0],
            [-0.1, 0.05, 0.05],
        ]
    }
}

/// One skeleton pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub joints: Vec<Point3>,
}

impl Frame {
    pub fn new(joints: Vec<Point3>) -> Self {
        Self { joints }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }
}

/// An ordered list of frames over a fixed topology.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    frames: Vec<Frame>,
    topology: Arc<SkeletonTopology>,
    fps: f64,
    pub class_label: Option<usize>,
    pub performer_id: Option<String>,
    // row-major frames x joints
    missing_mask: Option<Vec<bool>>,
}

impl SkeletonSequence {
    pub fn new(
        id: impl Into<String>,
        frames: Vec<Frame>,
        topology: Arc<SkeletonTopology>,
        fps: f64,
    ) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            frames,
            topology,
            fps,
            class_label: None,
            performer_id: None,
            missing_mask: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.class_label = label;
        self
    }

    pub fn with_performer(mut self, performer: Option<String>) -> Self {
        self.performer_id = performer;
        self
    }

    /// Attaches a frames x joints missing mask. Masked joints may hold any
    /// finite fill value.
    pub fn with_missing_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.frames.len() * self.joint_count() {
            return Err(Error::Validation(format!(
                "missing mask has {} entries, expected {}",
                mask.len(),
                self.frames.len() * self.joint_count()
            )));
        }
        self.missing_mask = if mask.iter().any(|&m| m) { Some(mask) } else { None };
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::TooShort {
                min: 2,
                actual: self.frames.len(),
            });
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Validation(format!("fps must be positive, got {}", self.fps)));
        }
        let j = self.topology.joint_count();
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.joint_count() != j {
                return Err(Error::Validation(format!(
                    "frame {t} has {} joints, topology has {j}",
                    frame.joint_count()
                )));
            }
            for (k, p) in frame.joints.iter().enumerate() {
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "non-finite coordinate at frame {t}, joint {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn topology(&self) -> &Arc<SkeletonTopology> {
        &self.topology
    }

    pub fn joint_count(&self) -> usize {
        self.topology.joint_count()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn missing_mask(&self) -> Option<&[bool]> {
        self.missing_mask.as_deref()
    }

    pub fn is_missing(&self, frame: usize, joint: usize) -> bool {
        self.missing_mask
            .as_ref()
            .is_some_and(|m| m[frame * self.joint_count() + joint])
    }

    pub fn has_missing(&self) -> bool {
        self.missing_mask.is_some()
    }

    /// Same metadata, new frames (and optionally a new mask). Used by the
    /// augmentation operators.
    pub(crate) fn derive(
        &self,
        id: String,
        frames: Vec<Frame>,
        fps: f64,
        missing_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let seq = Self {
            id,
            frames,
            topology: Arc::clone(&self.topology),
            fps,
            class_label: self.class_label,
            performer_id: self.performer_id.clone(),
            missing_mask: missing_mask.filter(|m| m.iter().any(|&x| x)),
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Frames `start..end` as a new sequence with the given id.
    pub fn window(&self, id: impl Into<String>, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Argument(format!(
                "window [{start}, {end}) outside a {}-frame sequence",
                self.len()
            )));
        }
        let j = self.joint_count();
        let mask = self
            .missing_mask
            .as_ref()
            .map(|m| m[start * j..end * j].to_vec());
        self.derive(id.into(), self.frames[start..end].to_vec(), self.fps, mask)
    }
}
