//! The recurrent sequence encoder, its parameters, and the Siamese training
//! objective.

mod io;
mod loss;
mod recurrent;
mod siamese;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::EncoderInput;
use crate::motion_data::SkeletonSequence;
use crate::par::{self, Parallelism};

pub use loss::{classification_loss, contrastive_loss, LossConfig};
pub use recurrent::ForwardTrace;
pub use siamese::{loss_gradients, loss_gradients_with, LossBreakdown, PairRef, SiameseEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    /// Gated recurrent unit.
    Gru,
    /// Independently recurrent ReLU cell (element-wise recurrent weights).
    IndRnn,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::IndRnn => "indrnn",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(CellKind::Gru),
            "indrnn" => Ok(CellKind::IndRnn),
            _ => Err(Error::Config(format!("unknown cell `{s}` (expected gru or indrnn)"))),
        }
    }
}

/// How the recurrent states become the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Top-layer state after the last frame.
    Final,
    /// Mean of the top-layer states over all frames.
    Mean,
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::Final => "final",
            Readout::Mean => "mean",
        })
    }
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Readout::Final),
            "mean" => Ok(Readout::Mean),
            _ => Err(Error::Config(format!("unknown readout `{s}` (expected final or mean)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_width: usize,
    pub hidden_size: usize,
    pub num_recurrent_layers: usize,
    pub embedding_dim: usize,
    /// Adds a linear classification head on the embedding when set.
    pub class_count: Option<usize>,
    pub cell: CellKind,
    pub readout: Readout,
}

impl EncoderConfig {
    /// Default sizes for a skeleton with `joints` joints; `with_mask` adds one
    /// missing bit per joint to the input.
    pub fn for_joints(joints: usize, with_mask: bool) -> Self {
        Self {
            input_width: if with_mask { 7 * joints } else { 6 * joints },
            hidden_size: 256,
            num_recurrent_layers: 2,
            embedding_dim: 512,
            class_count: None,
            cell: CellKind::Gru,
            readout: Readout::Final,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_width", self.input_width),
            ("hidden_size", self.hidden_size),
            ("num_recurrent_layers", self.num_recurrent_layers),
            ("embedding_dim", self.embedding_dim),
            ("class_count", self.class_count.unwrap_or(1)),
        ];
        match sizes.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }

    /// Whether inputs carry missing-joint bits (width is a multiple of 7
    /// rather than 6 per joint).
    pub fn joints_and_mask(&self) -> Option<(usize, bool)> {
        if self.input_width.is_multiple_of(6) {
            Some((self.input_width / 6, false))
        } else if self.input_width.is_multiple_of(7) {
            Some((self.input_width / 7, true))
        } else {
            None
        }
    }
}

/// Name, shape, and offset of one parameter tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

fn layout(config: &EncoderConfig) -> Vec<TensorSpec> {
    let h = config.hidden_size;
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let spec = TensorSpec { name, shape, offset };
        offset += spec.len();
        specs.push(spec);
    };
    for l in 0..config.num_recurrent_layers {
        let input = if l == 0 { config.input_width } else { h };
        match config.cell {
            CellKind::Gru => {
                push(format!("rnn.{l}.w_x"), vec![3 * h, input]);
                push(format!("rnn.{l}.w_h"), vec![3 * h, h]);
                push(format!("rnn.{l}.b_x"), vec![3 * h]);
                push(format!("rnn.{l}.b_h"), vec![3 * h]);
            }
            CellKind::IndRnn => {
                push(format!("rnn.{l}.w_x"), vec![h, input]);
                push(format!("rnn.{l}.u"), vec![h]);
                push(format!("rnn.{l}.b"), vec![h]);
            }
        }
    }
    push("readout.w".into(), vec![config.embedding_dim, h]);
    push("readout.b".into(), vec![config.embedding_dim]);
    if let Some(c) = config.class_count {
        push("classifier.w".into(), vec![c, config.embedding_dim]);
        push("classifier.b".into(), vec![c]);
    }
    specs
}

/// Encoder weights. Values are held as `f64` but every value produced by
/// [`EncoderParams::init`] or the optimizer is exactly representable as
/// `f32`, the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    layout: Vec<TensorSpec>,
    values: Vec<f64>,
    submotion: bool,
    epochs_trained: usize,
}

impl EncoderParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases except
    /// the GRU update gate (bias 1, favouring carry-over early in training)
    /// and IndRNN recurrent weights in `[0, 1]`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = layout(config);
        let total = layout.last().map_or(0, |s| s.offset + s.len());
        let mut values = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        for spec in &layout {
            let slot = &mut values[spec.range()];
            let kind = spec.name.rsplit('.').next().unwrap_or("");
            match kind {
                "w_x" | "w_h" | "w" => {
                    let bound = 1.0 / (spec.shape[1] as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                "u" => {
                    for v in slot.iter_mut() {
                        *v = rng.random_range(0.0..1.0);
                    }
                }
                "b_x" if config.cell == CellKind::Gru => {
                    slot[..h].fill(1.0);
                }
                _ => {}
            }
        }
        let mut params = Self {
            config: config.clone(),
            layout,
            values,
            submotion: false,
            epochs_trained: 0,
        };
        params.round_to_storage();
        Ok(params)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Raw access for optimizers and gradient checks. Values that are not
    /// `f32`-exact are rounded when saved.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_submotion(&self) -> bool {
        self.submotion
    }

    pub fn set_submotion(&mut self, flag: bool) {
        self.submotion = flag;
    }

    /// Optimizer epochs behind these values; zero for fresh initialization.
    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    pub fn set_epochs_trained(&mut self, epochs: usize) {
        self.epochs_trained = epochs;
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    pub(crate) fn round_to_storage(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    /// Copy with the classification head removed (or absent already).
    pub fn without_classifier(&self) -> Self {
        let mut config = self.config.clone();
        config.class_count = None;
        let layout = layout(&config);
        let total = layout.last().map_or(0, |s| s.offset + s.len());
        Self {
            config,
            layout,
            values: self.values[..total].to_vec(),
            submotion: self.submotion,
            epochs_trained: self.epochs_trained,
        }
    }

    pub(crate) fn from_parts(config: EncoderConfig, values: Vec<f64>, submotion: bool, epochs_trained: usize) -> Result<Self> {
        config.validate()?;
        let layout = layout(&config);
        let total = layout.last().map_or(0, |s| s.offset + s.len());
        if values.len() != total {
            return Err(Error::Shape {
                expected: total,
                actual: values.len(),
            });
        }
        Ok(Self {
            config,
            layout,
            values,
            submotion,
            epochs_trained,
        })
    }

    /// Embedding in full precision, for training.
    pub fn embed(&self, input: &EncoderInput) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(recurrent::forward(self, input).embedding)
    }

    pub(crate) fn check_input(&self, input: &EncoderInput) -> Result<()> {
        if input.width() != self.config.input_width {
            return Err(Error::Shape {
                expected: self.config.input_width,
                actual: input.width(),
            });
        }
        if input.rows() < 2 {
            return Err(Error::TooShort {
                min: 2,
                actual: input.rows(),
            });
        }
        if !input.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("encoder input has non-finite values".into()));
        }
        Ok(())
    }
}

/// Fixed-length retrieval key, stored at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSignature(pub Vec<f32>);

impl MotionSignature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    pub fn from_f64(v: &[f64]) -> Self {
        Self(v.iter().map(|&x| x as f32).collect())
    }
}

/// Runs the encoder on one input. Deterministic; accepts any length >= 2.
pub fn encode(params: &EncoderParams, input: &EncoderInput) -> Result<MotionSignature> {
    params.embed(input).map(|e| MotionSignature::from_f64(&e))
}

pub fn encode_batch(params: &EncoderParams, inputs: &[EncoderInput]) -> Result<Vec<MotionSignature>> {
    encode_batch_with(params, inputs, Parallelism::default())
}

pub fn encode_batch_with(params: &EncoderParams, inputs: &[EncoderInput], mode: Parallelism) -> Result<Vec<MotionSignature>> {
    par::map(mode, inputs, |x| encode(params, x)).into_iter().collect()
}

/// Logits of the classification head for a full-precision embedding.
pub fn class_logits(params: &EncoderParams, embedding: &[f64]) -> Option<Vec<f64>> {
    let c = params.config.class_count?;
    let w = params.tensor("classifier.w")?;
    let b = params.tensor("classifier.b")?;
    let e = embedding.len();
    Some((0..c).map(|i| b[i] + dot(&w[i * e..(i + 1) * e], embedding)).collect())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) use io::check_crc;
pub(crate) use recurrent::{backward, forward};
pub use io::{load_params, load_params_expecting, save_params};

/// Builds the encoder input for `seq` in the layout `config` expects.
pub fn encoder_input_for(config: &EncoderConfig, seq: &SkeletonSequence) -> Result<EncoderInput> {
    let (joints, with_mask) = config
        .joints_and_mask()
        .ok_or_else(|| Error::Config(format!("input width {} is not 6 or 7 per joint", config.input_width)))?;
    if joints != seq.joint_count() {
        return Err(Error::Shape {
            expected: joints,
            actual: seq.joint_count(),
        });
    }
    Ok(EncoderInput::from_sequence(seq, with_mask))
}

/// Encodes every sequence; output order matches input order.
pub fn encode_sequences(params: &EncoderParams, seqs: &[SkeletonSequence], mode: Parallelism) -> Result<Vec<MotionSignature>> {
    par::map(mode, seqs, |s| encode(params, &encoder_input_for(params.config(), s)?))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cell: CellKind) -> EncoderConfig {
        EncoderConfig {
            input_width: 12,
            hidden_size: 8,
            num_recurrent_layers: 2,
            embedding_dim: 4,
            class_count: Some(3),
            cell,
            readout: Readout::Final,
        }
    }

    fn ramp_input(rows: usize, width: usize) -> EncoderInput {
        let data = (0..rows * width).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        EncoderInput::new(rows, width, data).unwrap()
    }

    #[test]
    fn layout_covers_buffer() {
        for cell in [CellKind::Gru, CellKind::IndRnn] {
            let p = EncoderParams::init(&small(cell), 1).unwrap();
            let mut end = 0;
            for s in p.layout() {
                assert_eq!(s.offset, end);
                end += s.len();
            }
            assert_eq!(end, p.len());
            assert!(p.values().iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn encode_is_deterministic_and_variable_length() {
        let mut config = EncoderConfig::for_joints(2, false);
        config.hidden_size = 16;
        config.embedding_dim = 32;
        let p = EncoderParams::init(&config, 3).unwrap();
        let x = ramp_input(15, 12);
        assert_eq!(encode(&p, &x).unwrap(), encode(&p, &x).unwrap());
        assert_eq!(encode(&p, &x).unwrap().dim(), 32);
        assert_eq!(encode(&p, &ramp_input(600, 12)).unwrap().dim(), 32);
        assert_eq!(encode(&p, &ramp_input(2, 12)).unwrap().dim(), 32);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let p = EncoderParams::init(&small(CellKind::Gru), 3).unwrap();
        assert!(matches!(encode(&p, &ramp_input(5, 13)), Err(Error::Shape { .. })));
        let mut data = ramp_input(5, 12).as_slice().to_vec();
        data[7] = f64::NAN;
        let bad = EncoderInput::new(5, 12, data).unwrap();
        assert!(matches!(encode(&p, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn frame_order_matters() {
        for cell in [CellKind::Gru, CellKind::IndRnn] {
            let p = EncoderParams::init(&small(cell), 9).unwrap();
            let x = ramp_input(10, 12);
            assert_ne!(encode(&p, &x).unwrap(), encode(&p, &x.reversed()).unwrap());
        }
    }

    #[test]
    fn batch_modes_agree() {
        let p = EncoderParams::init(&small(CellKind::Gru), 2).unwrap();
        let inputs: Vec<_> = (2..12).map(|n| ramp_input(n, 12)).collect();
        assert_eq!(
            encode_batch_with(&p, &inputs, Parallelism::Sequential).unwrap(),
            encode_batch_with(&p, &inputs, Parallelism::Parallel).unwrap()
        );
    }

    #[test]
    fn zero_sizes_rejected() {
        let mut c = small(CellKind::Gru);
        c.hidden_size = 0;
        assert!(EncoderParams::init(&c, 0).is_err());
        c = small(CellKind::Gru);
        c.class_count = Some(0);
        assert!(EncoderParams::init(&c, 0).is_err());
    }
}
