//! Parametric motion classes for desk-scale experiments.
//!
//! Every class is a set of sinusoidal bone rotations (composed down the
//! kinematic tree) plus optional root drift and bob, defined over normalized
//! time `u in [0, 1]`. A sequence samples that motion at its own frame count,
//! so sequences of one class differ in length, performer scale, and the
//! jittered amplitude, frequency, and phase of each swing.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Frame, Point3, SkeletonSequence, SkeletonTopology};
use crate::error::{Error, Result};

/// Sinusoidal rotation of one bone about a fixed axis:
/// `angle(u) = offset + amplitude * sin(2 pi cycles u + phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneSwing {
    pub bone: usize,
    pub axis: Point3,
    pub amplitude: f64,
    pub cycles: f64,
    pub phase: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMotion {
    pub name: String,
    pub swings: Vec<BoneSwing>,
    /// Total root displacement over the sequence.
    pub root_drift: Point3,
    /// Vertical root oscillation (amplitude in meters, cycles).
    pub root_bob: (f64, f64),
}

/// Relative or absolute ranges of per-sequence variation. Each factor is
/// drawn uniformly from `[-x, x]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterSpec {
    /// Relative amplitude jitter.
    pub amplitude: f64,
    /// Relative frequency jitter.
    pub frequency: f64,
    /// Absolute phase jitter, radians.
    pub phase: f64,
    /// Relative performer bone-scale jitter.
    pub performer_scale: f64,
    /// Gaussian coordinate noise, meters.
    pub noise: f64,
}

impl JitterSpec {
    pub fn none() -> Self {
        Self {
            amplitude: 0.0,
            frequency: 0.0,
            phase: 0.0,
            performer_scale: 0.0,
            noise: 0.0,
        }
    }
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            amplitude: 0.15,
            frequency: 0.1,
            phase: 0.3,
            performer_scale: 0.15,
            noise: 0.0005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub topology: Arc<SkeletonTopology>,
    pub rest_pose: Vec<Point3>,
    pub classes: Vec<ClassMotion>,
    pub jitter: JitterSpec,
    /// Inclusive frame-count range.
    pub length_range: (usize, usize),
    pub fps: f64,
    pub performers: usize,
}

const X: Point3 = [1.0, 0.0, 0.0];
const Y: Point3 = [0.0, 1.0, 0.0];
const Z: Point3 = [0.0, 0.0, 1.0];

fn swing(bone: usize, axis: Point3, amplitude: f64, cycles: f64, phase: f64, offset: f64) -> BoneSwing {
    BoneSwing {
        bone,
        axis,
        amplitude,
        cycles,
        phase,
        offset,
    }
}

impl SynthSpec {
    /// Eight action classes on [`SkeletonTopology::toy15`]: right wave, left
    /// wave, raise both arms, walk, right kick, squat, bow, jumping jack.
    pub fn toy(length_range: (usize, usize)) -> Self {
        // bone indices follow SkeletonTopology::toy15 edge order
        const SPINE: usize = 0;
        const HEAD: usize = 1;
        const L_UPPER: usize = 3;
        const L_FORE: usize = 4;
        const R_UPPER: usize = 6;
        const R_FORE: usize = 7;
        const L_THIGH: usize = 9;
        const L_SHIN: usize = 10;
        const R_THIGH: usize = 12;
        const R_SHIN: usize = 13;
        let class = |name: &str, swings, root_drift, root_bob| ClassMotion {
            name: name.to_string(),
            swings,
            root_drift,
            root_bob,
        };
        let classes = vec![
            class(
                "wave_right",
                vec![
                    swing(R_UPPER, Z, 0.1, 1.0, 0.0, -1.2),
                    swing(R_FORE, Z, 0.6, 3.0, 0.0, -0.8),
                ],
                [0.0; 3],
                (0.0, 0.0),
            ),
            class(
                "wave_left",
                vec![
                    swing(L_UPPER, Z, 0.1, 1.0, 0.0, 1.2),
                    swing(L_FORE, Z, 0.6, 3.0, 0.0, 0.8),
                ],
                [0.0; 3],
                (0.0, 0.0),
            ),
            class(
                "raise_arms",
                vec![
                    swing(L_UPPER, Z, 0.9, 1.0, -PI / 2.0, 0.9),
                    swing(R_UPPER, Z, -0.9, 1.0, -PI / 2.0, -0.9),
                ],
                [0.0; 3],
                (0.0, 0.0),
            ),
            class(
                "walk",
                vec![
                    swing(L_THIGH, X, 0.45, 2.0, 0.0, 0.0),
                    swing(R_THIGH, X, 0.45, 2.0, PI, 0.0),
                    swing(L_SHIN, X, 0.3, 2.0, PI / 2.0, -0.3),
                    swing(R_SHIN, X, 0.3, 2.0, 3.0 * PI / 2.0, -0.3),
                    swing(L_UPPER, Y, 0.3, 2.0, PI, 0.0),
                    swing(R_UPPER, Y, 0.3, 2.0, 0.0, 0.0),
                ],
                [0.0, 0.0, 1.6],
                (0.02, 4.0),
            ),
            class(
                "kick_right",
                vec![
                    swing(R_THIGH, X, -0.7, 1.5, 0.0, -0.4),
                    swing(R_SHIN, X, 0.5, 1.5, PI / 2.0, 0.3),
                    swing(SPINE, X, 0.1, 1.5, PI, 0.0),
                ],
                [0.0; 3],
                (0.0, 0.0),
            ),
            class(
                "squat",
                vec![
                    swing(L_THIGH, X, -0.6, 2.0, -PI / 2.0, -0.6),
                    swing(R_THIGH, X, -0.6, 2.0, -PI / 2.0, -0.6),
                    swing(L_SHIN, X, 0.6, 2.0, -PI / 2.0, 0.6),
                    swing(R_SHIN, X, 0.6, 2.0, -PI / 2.0, 0.6),
                    swing(L_UPPER, Y, 0.5, 2.0, -PI / 2.0, 0.5),
                    swing(R_UPPER, Y, -0.5, 2.0, -PI / 2.0, -0.5),
                ],
                [0.0; 3],
                (-0.12, 2.0),
            ),
            class(
                "bow",
                vec![
                    swing(SPINE, X, 0.45, 1.5, -PI / 2.0, 0.45),
                    swing(HEAD, X, 0.2, 1.5, -PI / 2.0, 0.2),
                ],
                [0.0; 3],
                (0.0, 0.0),
            ),
            class(
                "jumping_jack",
                vec![
                    swing(L_UPPER, Z, 0.8, 3.0, -PI / 2.0, 0.8),
                    swing(R_UPPER, Z, -0.8, 3.0, -PI / 2.0, -0.8),
                    swing(L_THIGH, Z, 0.2, 3.0, -PI / 2.0, 0.2),
                    swing(R_THIGH, Z, -0.2, 3.0, -PI / 2.0, -0.2),
                ],
                [0.0; 3],
                (0.06, 6.0),
            ),
        ];
        Self {
            topology: Arc::new(SkeletonTopology::toy15()),
            rest_pose: SkeletonTopology::toy15_rest_pose(),
            classes,
            jitter: JitterSpec::default(),
            length_range,
            fps: 30.0,
            performers: 10,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Argument("synthetic spec has no classes".into()));
        }
        if self.rest_pose.len() != self.topology.joint_count() {
            return Err(Error::Argument("rest pose does not match topology".into()));
        }
        let (lo, hi) = self.length_range;
        if lo < 2 || lo > hi {
            return Err(Error::Argument(format!("bad length range [{lo}, {hi}]")));
        }
        if self.performers == 0 {
            return Err(Error::Argument("need at least one performer".into()));
        }
        let bones = self.topology.bone_edges().len();
        for class in &self.classes {
            if let Some(s) = class.swings.iter().find(|s| s.bone >= bones) {
                return Err(Error::Argument(format!(
                    "class {} swings bone {} of {bones}",
                    class.name, s.bone
                )));
            }
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn rotation(axis: Point3, angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &Mat3, v: Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn jitter(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range > 0.0 {
        rng.random_range(-range..=range)
    } else {
        0.0
    }
}

/// Generates `count` sequences per class, labeled by class index, ids
/// `c<class>_<n>`, performers assigned round-robin. Deterministic in `seed`.
pub fn synth_generate(spec: &SynthSpec, count: usize, seed: u64) -> Result<Vec<SkeletonSequence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let performer_scales: Vec<f64> = (0..spec.performers)
        .map(|_| 1.0 + jitter(&mut rng, spec.jitter.performer_scale))
        .collect();
    let topo = &spec.topology;
    let rest_dirs: Vec<Point3> = topo
        .bone_edges()
        .iter()
        .map(|&(p, c)| {
            [
                spec.rest_pose[c][0] - spec.rest_pose[p][0],
                spec.rest_pose[c][1] - spec.rest_pose[p][1],
                spec.rest_pose[c][2] - spec.rest_pose[p][2],
            ]
        })
        .collect();
    let noise = (spec.jitter.noise > 0.0).then(|| Normal::new(0.0, spec.jitter.noise).expect("positive std"));

    let mut out = Vec::with_capacity(count * spec.classes.len());
    for (label, class) in spec.classes.iter().enumerate() {
        for n in 0..count {
            let len = rng.random_range(spec.length_range.0..=spec.length_range.1);
            let swings: Vec<BoneSwing> = class
                .swings
                .iter()
                .map(|s| BoneSwing {
                    amplitude: s.amplitude * (1.0 + jitter(&mut rng, spec.jitter.amplitude)),
                    cycles: s.cycles * (1.0 + jitter(&mut rng, spec.jitter.frequency)),
                    phase: s.phase + jitter(&mut rng, spec.jitter.phase),
                    ..s.clone()
                })
                .collect();
            let performer = n % spec.performers;
            let scale = performer_scales[performer];

            let mut frames = Vec::with_capacity(len);
            for t in 0..len {
                let u = t as f64 / (len - 1) as f64;
                let mut local = vec![IDENTITY; rest_dirs.len()];
                for s in &swings {
                    let angle = s.offset + s.amplitude * (2.0 * PI * s.cycles * u + s.phase).sin();
                    local[s.bone] = matmul(&rotation(s.axis, angle), &local[s.bone]);
                }
                let mut joint_rot = vec![IDENTITY; topo.joint_count()];
                let mut pos = vec![[0.0; 3]; topo.joint_count()];
                let root = topo.root();
                let bob = class.root_bob.0 * (2.0 * PI * class.root_bob.1 * u).sin();
                pos[root] = [
                    spec.rest_pose[root][0] + class.root_drift[0] * u,
                    spec.rest_pose[root][1] * scale + class.root_drift[1] * u + bob,
                    spec.rest_pose[root][2] + class.root_drift[2] * u,
                ];
                for (b, (p, c)) in topo.bones_breadth_first() {
                    let r = matmul(&joint_rot[p], &local[b]);
                    let d = apply(&r, rest_dirs[b]);
                    pos[c] = [
                        pos[p][0] + d[0] * scale,
                        pos[p][1] + d[1] * scale,
                        pos[p][2] + d[2] * scale,
                    ];
                    joint_rot[c] = r;
                }
                if let Some(noise) = &noise {
                    for p in &mut pos {
                        for v in p.iter_mut() {
                            *v += noise.sample(&mut rng);
                        }
                    }
                }
                frames.push(Frame::new(pos));
            }
            let seq = SkeletonSequence::new(format!("c{label}_{n:03}"), frames, Arc::clone(topo), spec.fps)?
                .with_label(Some(label))
                .with_performer(Some(format!("p{performer}")));
            out.push(seq);
        }
    }
    Ok(out)
}
