//! Trajectory features: per-frame motion fields, per-joint motion distance,
//! encoder inputs, and the trajectory similarity used to label pairs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::motion_data::{Point3, SkeletonSequence};

/// Joint-wise displacement between two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub displacements: Vec<Point3>,
}

impl MotionField {
    pub fn zeros(joints: usize) -> Self {
        Self {
            displacements: vec![[0.0; 3]; joints],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.displacements.len()
    }
}

/// `F[i] - F[j]`, joint by joint.
pub fn frame_motion_field(seq: &SkeletonSequence, i: usize, j: usize) -> Result<MotionField> {
    let n = seq.len();
    if i >= n || j >= n {
        return Err(Error::Argument(format!(
            "frame index ({i}, {j}) out of range for {n} frames"
        )));
    }
    let (fi, fj) = (&seq.frames()[i], &seq.frames()[j]);
    Ok(MotionField {
        displacements: fi
            .joints
            .iter()
            .zip(&fj.joints)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
            .collect(),
    })
}

// Path lengths accumulate in fixed point with 2^-90 m resolution. Every f64
// segment length above ~4e-12 m is represented exactly, so sums are exact and
// independent of grouping; the f64 view rounds once.
const FIXED_SHIFT: i32 = 90;

fn to_fixed(v: f64) -> i128 {
    (v * 2f64.powi(FIXED_SHIFT)).round() as i128
}

fn from_fixed(v: i128) -> f64 {
    v as f64 * 2f64.powi(-FIXED_SHIFT)
}

fn norm3(v: Point3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Total distance travelled by each joint.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionDistanceProfile {
    pub distances: Vec<f64>,
    exact: Vec<i128>,
}

impl MotionDistanceProfile {
    fn from_exact(exact: Vec<i128>) -> Self {
        Self {
            distances: exact.iter().map(|&v| from_fixed(v)).collect(),
            exact,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.distances.len()
    }

    /// Profile of two sequences joined at a shared frame: the exact sum of
    /// both path lengths.
    pub fn concatenate(&self, next: &Self) -> Result<Self> {
        if self.exact.len() != next.exact.len() {
            return Err(Error::Shape {
                expected: self.exact.len(),
                actual: next.exact.len(),
            });
        }
        Ok(Self::from_exact(
            self.exact.iter().zip(&next.exact).map(|(a, b)| a + b).collect(),
        ))
    }
}

/// `MD[j] = sum_i |F[i+1][j] - F[i][j]|`.
pub fn motion_distance_profile(seq: &SkeletonSequence) -> MotionDistanceProfile {
    let mut exact = vec![0i128; seq.joint_count()];
    for pair in seq.frames().windows(2) {
        for (acc, (a, b)) in exact.iter_mut().zip(pair[1].joints.iter().zip(&pair[0].joints)) {
            *acc += to_fixed(norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]]));
        }
    }
    MotionDistanceProfile::from_exact(exact)
}

/// Whole-sequence trajectory cues compared when labeling pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySummary {
    /// Last frame minus first frame.
    pub whole_video_mf: MotionField,
    pub md_profile: MotionDistanceProfile,
}

pub fn trajectory_summary(seq: &SkeletonSequence) -> TrajectorySummary {
    let last = seq.len() - 1;
    TrajectorySummary {
        whole_video_mf: frame_motion_field(seq, last, 0).expect("indices in range"),
        md_profile: motion_distance_profile(seq),
    }
}

/// Weights of the motion-field and motion-distance terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

/// `alpha * |mf_a - mf_b|_F / J + beta * |md_a - md_b|_1 / J`. Zero for
/// identical summaries, symmetric, and satisfies the triangle inequality.
pub fn trajectory_similarity(a: &TrajectorySummary, b: &TrajectorySummary, w: SimilarityWeights) -> Result<f64> {
    let j = a.whole_video_mf.joint_count();
    if j != b.whole_video_mf.joint_count() || j != a.md_profile.joint_count() || j != b.md_profile.joint_count() {
        return Err(Error::Argument(format!(
            "joint count mismatch: {} vs {}",
            a.whole_video_mf.joint_count(),
            b.whole_video_mf.joint_count()
        )));
    }
    let mf: f64 = a
        .whole_video_mf
        .displacements
        .iter()
        .zip(&b.whole_video_mf.displacements)
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]) * (p[k] - q[k])))
        .sum::<f64>()
        .sqrt();
    let md: f64 = a
        .md_profile
        .distances
        .iter()
        .zip(&b.md_profile.distances)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok((w.alpha * mf + w.beta * md) / j as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

/// Similarity thresholds; scores between them abstain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairThresholds {
    pub similar: f64,
    pub dissimilar: f64,
    pub weights: SimilarityWeights,
}

impl PairThresholds {
    pub fn new(similar: f64, dissimilar: f64) -> Result<Self> {
        if !(similar < dissimilar) {
            return Err(Error::Argument(format!(
                "similar threshold {similar} must be below dissimilar threshold {dissimilar}"
            )));
        }
        Ok(Self {
            similar,
            dissimilar,
            weights: SimilarityWeights::default(),
        })
    }

    pub fn classify(&self, score: f64) -> Option<PairLabel> {
        if score <= self.similar {
            Some(PairLabel::Similar)
        } else if score >= self.dissimilar {
            Some(PairLabel::Dissimilar)
        } else {
            None
        }
    }

    /// Percentile thresholds (10th and 50th by default) over the scores of
    /// `pairs` random distinct pairs.
    pub fn calibrate(
        summaries: &[TrajectorySummary],
        pairs: usize,
        percentiles: (f64, f64),
        weights: SimilarityWeights,
        seed: u64,
    ) -> Result<Self> {
        if summaries.len() < 2 {
            return Err(Error::Dataset("need at least two sequences to calibrate thresholds".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scores = Vec::with_capacity(pairs);
        for _ in 0..pairs.max(1) {
            let a = rng.random_range(0..summaries.len());
            let mut b = rng.random_range(0..summaries.len() - 1);
            if b >= a {
                b += 1;
            }
            scores.push(trajectory_similarity(&summaries[a], &summaries[b], weights)?);
        }
        scores.sort_by(f64::total_cmp);
        let at = |p: f64| {
            let idx = ((p / 100.0) * (scores.len() - 1) as f64).round() as usize;
            scores[idx.min(scores.len() - 1)]
        };
        let (lo, hi) = (at(percentiles.0), at(percentiles.1));
        let mut t = if lo < hi {
            Self::new(lo, hi)?
        } else {
            // flat score distribution: keep the band empty but ordered
            Self::new(lo, lo + f64::EPSILON.max(lo.abs() * 1e-12))?
        };
        t.weights = weights;
        Ok(t)
    }
}

/// `Some(Similar)` below `similar`, `Some(Dissimilar)` above `dissimilar`,
/// `None` (abstain) in between.
pub fn pair_label(a: &SkeletonSequence, b: &SkeletonSequence, thresholds: &PairThresholds) -> Result<Option<PairLabel>> {
    let score = trajectory_similarity(&trajectory_summary(a), &trajectory_summary(b), thresholds.weights)?;
    Ok(thresholds.classify(score))
}

/// Per-frame encoder features, row-major `rows x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    rows: usize,
    width: usize,
    data: Vec<f64>,
}

impl EncoderInput {
    pub fn new(rows: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * width {
            return Err(Error::Shape {
                expected: rows * width,
                actual: data.len(),
            });
        }
        Ok(Self { rows, width, data })
    }

    /// Row `t` is the frame's joints, then `F[t+1] - F[t]` (zero on the last
    /// row), then one missing bit per joint when `with_mask`.
    pub fn from_sequence(seq: &SkeletonSequence, with_mask: bool) -> Self {
        let j = seq.joint_count();
        let n = seq.len();
        let width = if with_mask { 7 * j } else { 6 * j };
        let mut data = Vec::with_capacity(n * width);
        let frames = seq.frames();
        for t in 0..n {
            for p in &frames[t].joints {
                data.extend_from_slice(p);
            }
            if t + 1 < n {
                for (a, b) in frames[t + 1].joints.iter().zip(&frames[t].joints) {
                    data.extend_from_slice(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
                }
            } else {
                data.extend(std::iter::repeat_n(0.0, 3 * j));
            }
            if with_mask {
                data.extend((0..j).map(|k| if seq.is_missing(t, k) { 1.0 } else { 0.0 }));
            }
        }
        Self { rows: n, width, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Frames in reverse order; rows are copied verbatim.
    pub fn reversed(&self) -> Self {
        let data = (0..self.rows).rev().flat_map(|t| self.row(t).iter().copied()).collect();
        Self {
            rows: self.rows,
            width: self.width,
            data,
        }
    }
}

/// Encoder features with mask bits appended only when the sequence has
/// missing joints.
pub fn build_encoder_input(seq: &SkeletonSequence) -> EncoderInput {
    EncoderInput::from_sequence(seq, seq.has_missing())
}

/// Debug dump: one row per frame, columns `x0,y0,z0,...,mfx0,mfy0,mfz0,...`
/// and `m0,...` when mask bits are present.
pub fn write_feature_csv(path: impl AsRef<Path>, input: &EncoderInput, joints: usize) -> Result<()> {
    let mut out = String::new();
    let mut cols = Vec::new();
    for k in 0..joints {
        cols.extend([format!("x{k}"), format!("y{k}"), format!("z{k}")]);
    }
    for k in 0..joints {
        cols.extend([format!("mfx{k}"), format!("mfy{k}"), format!("mfz{k}")]);
    }
    if input.width() == 7 * joints {
        cols.extend((0..joints).map(|k| format!("m{k}")));
    } else if input.width() != 6 * joints {
        return Err(Error::Shape {
            expected: 6 * joints,
            actual: input.width(),
        });
    }
    out.push_str(&cols.join(","));
    out.push('\n');
    for t in 0..input.rows() {
        let row: Vec<String> = input.row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Debug dump: one row per joint, columns `mfx,mfy,mfz,md`.
pub fn write_summary_csv(path: impl AsRef<Path>, summary: &TrajectorySummary) -> Result<()> {
    let mut out = String::from("mfx,mfy,mfz,md\n");
    for (mf, md) in summary.whole_video_mf.displacements.iter().zip(&summary.md_profile.distances) {
        writeln!(out, "{},{},{},{}", mf[0], mf[1], mf[2], md).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::motion_data::{speed_half, Frame, SkeletonTopology};

    fn topo(j: usize) -> Arc<SkeletonTopology> {
        Arc::new(SkeletonTopology::new(j, (1..j).map(|c| (c - 1, c)).collect(), 0).unwrap())
    }

    fn seq(frames: Vec<Vec<Point3>>) -> SkeletonSequence {
        let j = frames[0].len();
        SkeletonSequence::new("s", frames.into_iter().map(Frame::new).collect(), topo(j), 30.0).unwrap()
    }

    #[test]
    fn motion_field_definition() {
        let s = seq(vec![vec![[0.0; 3]; 3], vec![[1.0, 0.0, 0.0]; 3]]);
        assert_eq!(frame_motion_field(&s, 1, 1).unwrap(), MotionField::zeros(3));
        assert_eq!(frame_motion_field(&s, 1, 0).unwrap().displacements, vec![[1.0, 0.0, 0.0]; 3]);
        assert!(frame_motion_field(&s, 2, 0).is_err());
    }

    #[test]
    fn periodic_sequence_has_zero_whole_video_field() {
        let frames = (0..21)
            .map(|t| {
                let a = t as f64 / 20.0 * std::f64::consts::TAU;
                vec![[0.0; 3], [a.cos(), a.sin(), 0.0]]
            })
            .collect::<Vec<_>>();
        let mut frames = frames;
        frames[20] = frames[0].clone();
        let summary = trajectory_summary(&seq(frames));
        assert_eq!(summary.whole_video_mf, MotionField::zeros(2));
        assert!(summary.md_profile.distances[1] > 6.0);
    }

    #[test]
    fn motion_distance_straight_line() {
        let s = seq(vec![
            vec![[0.0; 3], [0.0; 3]],
            vec![[0.0; 3], [0.3, 0.0, 0.0]],
            vec![[0.0; 3], [1.0, 0.0, 0.0]],
        ]);
        let md = motion_distance_profile(&s);
        assert_eq!(md.distances[0], 0.0);
        assert!((md.distances[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_translation_summary() {
        let v = [0.3, -0.4, 1.2];
        let base = [[0.1, 0.2, 0.3], [1.0, 1.0, 1.0], [-0.5, 0.0, 2.0]];
        let frames = (0..5)
            .map(|t| {
                let s = t as f64 / 4.0;
                base.iter().map(|p| [p[0] + s * v[0], p[1] + s * v[1], p[2] + s * v[2]]).collect()
            })
            .collect();
        let summary = trajectory_summary(&seq(frames));
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        for (mf, md) in summary.whole_video_mf.displacements.iter().zip(&summary.md_profile.distances) {
            for k in 0..3 {
                assert!((mf[k] - v[k]).abs() < 1e-12);
            }
            assert!((md - len).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_input_layout() {
        let still = seq(vec![vec![[1.0, 2.0, 3.0]; 25]; 3]);
        let input = build_encoder_input(&still);
        assert_eq!((input.rows(), input.width()), (3, 150));
        assert!((0..3).all(|t| input.row(t)[75..].iter().all(|&v| v == 0.0)));

        let two = seq(vec![vec![[0.0; 3]; 2], vec![[1.0, 0.5, 0.0]; 2]]);
        let input = build_encoder_input(&two);
        assert_eq!(&input.row(0)[6..12], &[1.0, 0.5, 0.0, 1.0, 0.5, 0.0]);
        assert!(input.row(1)[6..].iter().all(|&v| v == 0.0));

        let masked = two.clone().with_missing_mask(vec![false, true, false, true]).unwrap();
        let input = build_encoder_input(&masked);
        assert_eq!(input.width(), 14);
        assert_eq!(&input.row(0)[12..], &[0.0, 1.0]);
        assert_eq!(EncoderInput::from_sequence(&two, true).row(0)[12..], [0.0, 0.0]);
    }

    #[test]
    fn similarity_and_labels() {
        let moving = seq((0..6).map(|t| vec![[0.0; 3], [t as f64 * 0.1, 0.0, 0.0]]).collect());
        let a = trajectory_summary(&moving);
        assert_eq!(trajectory_similarity(&a, &a, SimilarityWeights::default()).unwrap(), 0.0);
        let slow = trajectory_summary(&speed_half(&moving).unwrap());
        assert_eq!(trajectory_similarity(&a, &slow, SimilarityWeights::default()).unwrap(), 0.0);

        let t = PairThresholds::new(0.01, 0.5).unwrap();
        assert_eq!(pair_label(&moving, &speed_half(&moving).unwrap(), &t).unwrap(), Some(PairLabel::Similar));
        // two static sequences in different poses look identical to the metric
        let s1 = seq(vec![vec![[0.0; 3], [1.0; 3]]; 3]);
        let s2 = seq(vec![vec![[5.0; 3], [-1.0; 3]]; 3]);
        assert_eq!(pair_label(&s1, &s2, &t).unwrap(), Some(PairLabel::Similar));
        assert_eq!(t.classify(0.2), None);
        assert_eq!(t.classify(0.5), Some(PairLabel::Dissimilar));
        assert!(PairThresholds::new(0.5, 0.5).is_err());

        let other = trajectory_summary(&seq(vec![vec![[0.0; 3]; 3]; 2]));
        assert!(trajectory_similarity(&a, &other, SimilarityWeights::default()).is_err());
    }

    #[test]
    fn calibration_orders_thresholds() {
        let sums: Vec<_> = (0..20)
            .map(|i| trajectory_summary(&seq((0..4).map(|t| vec![[0.0; 3], [(i * t) as f64 * 0.01, 0.0, 0.0]]).collect())))
            .collect();
        let t = PairThresholds::calibrate(&sums, 1000, (10.0, 50.0), SimilarityWeights::default(), 3).unwrap();
        assert!(t.similar < t.dissimilar);
        assert!(PairThresholds::calibrate(&sums[..1], 10, (10.0, 50.0), SimilarityWeights::default(), 3).is_err());
    }

    #[test]
    fn csv_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let s = seq(vec![vec![[0.0; 3]; 2], vec![[1.0, 0.5, 0.0]; 2]]);
        write_feature_csv(dir.path().join("f.csv"), &build_encoder_input(&s), 2).unwrap();
        let text = fs::read_to_string(dir.path().join("f.csv")).unwrap();
        assert!(text.starts_with("x0,y0,z0,x1,y1,z1,mfx0,"));
        assert_eq!(text.lines().count(), 3);
        write_summary_csv(dir.path().join("s.csv"), &trajectory_summary(&s)).unwrap();
        let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    fn arb_seq_with(j: usize) -> impl Strategy<Value = SkeletonSequence> {
        (2usize..12).prop_flat_map(move |n| {
            prop::collection::vec(prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), j), n).prop_map(seq)
        })
    }

    fn arb_seq() -> impl Strategy<Value = SkeletonSequence> {
        (1usize..5).prop_flat_map(arb_seq_with)
    }

    fn arb_triple() -> impl Strategy<Value = (SkeletonSequence, SkeletonSequence, SkeletonSequence)> {
        (1usize..5).prop_flat_map(|j| (arb_seq_with(j), arb_seq_with(j), arb_seq_with(j)))
    }

    proptest! {
        #[test]
        fn antisymmetry(s in arb_seq(), i in 0usize..12, j in 0usize..12) {
            let (i, j) = (i % s.len(), j % s.len());
            let ij = frame_motion_field(&s, i, j).unwrap();
            let ji = frame_motion_field(&s, j, i).unwrap();
            for (a, b) in ij.displacements.iter().zip(&ji.displacements) {
                prop_assert_eq!(*a, [-b[0], -b[1], -b[2]]);
            }
        }

        #[test]
        fn path_length_bounds_chord(s in arb_seq()) {
            let summary = trajectory_summary(&s);
            for (mf, md) in summary.whole_video_mf.displacements.iter().zip(&summary.md_profile.distances) {
                prop_assert!(*md >= norm3(*mf));
            }
        }

        #[test]
        fn similarity_is_pseudometric((a, b, c) in arb_triple()) {
            let w = SimilarityWeights::default();
            let (sa, sb, sc) = (trajectory_summary(&a), trajectory_summary(&b), trajectory_summary(&c));
            let ab = trajectory_similarity(&sa, &sb, w).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, trajectory_similarity(&sb, &sa, w).unwrap());
            let bc = trajectory_similarity(&sb, &sc, w).unwrap();
            let ac = trajectory_similarity(&sa, &sc, w).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
