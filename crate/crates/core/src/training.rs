//! Pair construction and the optimization loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{trajectory_similarity, trajectory_summary, EncoderInput, PairLabel, PairThresholds, SimilarityWeights, TrajectorySummary};
use crate::index::{build_index_with, query_excluding_with};
use crate::model::{encoder_input_for, loss_gradients_with, EncoderConfig, EncoderParams, LossConfig, PairRef};
use crate::motion_data::{speed_double, speed_half, DatasetManifest, SkeletonSequence, SkeletonTopology, Split};
use crate::par::Parallelism;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Supervised,
    SelfSupervised,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Supervised => "supervised",
            Regime::SelfSupervised => "self",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Regime::Supervised),
            "self" | "self_supervised" | "self-supervised" => Ok(Regime::SelfSupervised),
            _ => Err(Error::Config(format!("unknown regime `{s}` (expected supervised or self)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairSource {
    ClassLabels,
    Trajectory,
    Augmentation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSample {
    pub seq_a_id: String,
    pub seq_b_id: String,
    pub label: PairLabel,
    pub source: PairSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm clip, off when `None`.
    pub grad_clip: Option<f64>,
    pub validation_fraction: f64,
    /// Supervised only: also draw same-class positives from trajectory
    /// similarity (source `Trajectory`).
    pub trajectory_positives: bool,
    /// Percentiles of random-pair trajectory scores used as the similar and
    /// dissimilar thresholds when none are supplied.
    pub threshold_percentiles: (f64, f64),
}

impl TrainConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 50,
            seed: 0,
            loss: match regime {
                Regime::Supervised => LossConfig::supervised(),
                Regime::SelfSupervised => LossConfig::self_supervised(),
            },
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            grad_clip: None,
            validation_fraction: 0.1,
            trajectory_positives: true,
            threshold_percentiles: (10.0, 50.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps positive".into()));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 0.5)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        let (lo, hi) = self.threshold_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::Config("threshold percentiles must satisfy 0 <= lo < hi <= 100".into()));
        }
        self.loss.validate()?;
        if self.regime == Regime::SelfSupervised && self.loss.classification_weight > 0.0 {
            return Err(Error::Config("the self-supervised regime has no class labels; set classification_weight = 0".into()));
        }
        Ok(())
    }

    /// Sets one field from its config-file key. Returns `Ok(false)` for keys
    /// this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        match key {
            "regime" => {
                let regime: Regime = value.parse()?;
                if regime != self.regime {
                    self.loss = match regime {
                        Regime::Supervised => LossConfig::supervised(),
                        Regime::SelfSupervised => LossConfig::self_supervised(),
                    };
                    self.regime = regime;
                }
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "margin" => self.loss.margin = num(key, value)?,
            "contrastive_weight" => self.loss.contrastive_weight = num(key, value)?,
            "classification_weight" => self.loss.classification_weight = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "grad_clip" => self.grad_clip = if value == "none" { None } else { Some(num(key, value)?) },
            "validation_fraction" => self.validation_fraction = num(key, value)?,
            "trajectory_positives" => self.trajectory_positives = num(key, value)?,
            "similar_percentile" => self.threshold_percentiles.0 = num(key, value)?,
            "dissimilar_percentile" => self.threshold_percentiles.1 = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Flat `key = value` lines accepted by [`TrainConfig::set`].
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let out = vec![
            ("regime", self.regime.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("margin", self.loss.margin.to_string()),
            ("contrastive_weight", self.loss.contrastive_weight.to_string()),
            ("classification_weight", self.loss.classification_weight.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("patience", self.patience.to_string()),
            ("grad_clip", self.grad_clip.map_or("none".into(), |c| c.to_string())),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("trajectory_positives", self.trajectory_positives.to_string()),
            ("similar_percentile", self.threshold_percentiles.0.to_string()),
            ("dissimilar_percentile", self.threshold_percentiles.1.to_string()),
        ];
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Parses flat `key = value` text; `#` starts a comment. Later keys win.
pub fn parse_kv(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, n + 1, format!("expected key = value, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(origin, n + 1, "empty key"));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

/// Reads a config file, rejecting keys that belong to neither the training
/// nor the encoder configuration.
pub fn load_train_config(path: impl AsRef<Path>, base: TrainConfig, encoder: &mut EncoderConfig) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut cfg = base;
    for (k, v) in parse_kv(&text, path)? {
        if !cfg.set(&k, &v)? && !set_encoder_key(encoder, &k, &v)? {
            return Err(Error::Config(format!("{}: unknown key `{k}`", path.display())));
        }
    }
    Ok(cfg)
}

/// Encoder keys that may appear in a training config file.
pub fn set_encoder_key(encoder: &mut EncoderConfig, key: &str, value: &str) -> Result<bool> {
    let num = |v: &str| -> Result<usize> { v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}"))) };
    match key {
        "hidden_size" => encoder.hidden_size = num(value)?,
        "num_recurrent_layers" => encoder.num_recurrent_layers = num(value)?,
        "embedding_dim" => encoder.embedding_dim = num(value)?,
        "cell" => encoder.cell = value.parse()?,
        "readout" => encoder.readout = value.parse()?,
        "class_count" => encoder.class_count = if value == "none" { None } else { Some(num(value)?) },
        _ => return Ok(false),
    }
    Ok(true)
}

/// Adam with bias correction and no weight decay. Parameters are rounded to
/// `f32` after every step so the stored file reproduces them exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        params.round_to_storage();
    }
}

// Pool layout: sequence i occupies items 3i (original), 3i+1 (slow), 3i+2 (fast).
const ORIG: usize = 0;
const SLOW: usize = 1;
const FAST: usize = 2;
const VARIANT_SUFFIX: [&str; 3] = ["", "_slow", "_fast"];

#[derive(Debug, Clone, Copy, PartialEq)]
struct Planned {
    a: usize,
    b: usize,
    label: PairLabel,
    source: PairSource,
}

/// Precomputed partner lists for one training set.
struct PairPlan {
    ids: Vec<String>,
    positives: Vec<Vec<(usize, PairSource)>>,
    trajectory_positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<(usize, PairSource)>>,
    regime: Regime,
}

fn summaries_matrix(summaries: &[TrajectorySummary], weights: SimilarityWeights) -> Result<Vec<Vec<f64>>> {
    let n = summaries.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = trajectory_similarity(&summaries[i], &summaries[j], weights)?;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

impl PairPlan {
    fn build(seqs: &[SkeletonSequence], regime: Regime, thresholds: Option<&PairThresholds>, trajectory: bool) -> Result<Self> {
        let n = seqs.len();
        if n == 0 {
            return Err(Error::Dataset("training split is empty".into()));
        }
        if regime == Regime::SelfSupervised && n < 2 {
            return Err(Error::Dataset("self-supervised pairing needs at least two sequences".into()));
        }
        let labels: Vec<Option<usize>> = seqs.iter().map(|s| s.class_label).collect();
        if regime == Regime::Supervised {
            if let Some(s) = seqs.iter().find(|s| s.class_label.is_none()) {
                return Err(Error::Config(format!("supervised regime needs class labels; `{}` has none", s.id)));
            }
        }
        let needs_traj = regime == Regime::SelfSupervised || trajectory;
        let traj: Option<(Vec<Vec<f64>>, PairThresholds)> = match (needs_traj, thresholds) {
            (false, _) => None,
            (true, Some(t)) => {
                let sums: Vec<_> = seqs.iter().map(trajectory_summary).collect();
                Some((summaries_matrix(&sums, t.weights)?, *t))
            }
            (true, None) => return Err(Error::Config("trajectory pairing requires thresholds".into())),
        };

        let mut positives = vec![Vec::new(); n];
        let mut trajectory_positives = vec![Vec::new(); n];
        let mut negatives = vec![Vec::new(); n];
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let tl = traj.as_ref().and_then(|(m, t)| t.classify(m[i][j]));
                match regime {
                    Regime::Supervised => {
                        if labels[i] == labels[j] {
                            positives[i].push((j, PairSource::ClassLabels));
                            if tl == Some(PairLabel::Similar) {
                                trajectory_positives[i].push(j);
                            }
                        } else {
                            negatives[i].push((j, PairSource::ClassLabels));
                        }
                    }
                    Regime::SelfSupervised => match tl {
                        Some(PairLabel::Similar) => positives[i].push((j, PairSource::Trajectory)),
                        Some(PairLabel::Dissimilar) => negatives[i].push((j, PairSource::Trajectory)),
                        None => {}
                    },
                }
            }
        }
        if negatives.iter().all(|v| v.is_empty()) {
            return Err(Error::Dataset(match regime {
                Regime::Supervised => "supervised pairing needs at least two classes".into(),
                Regime::SelfSupervised => "no pair crosses the dissimilar threshold".into(),
            }));
        }
        Ok(Self {
            ids: seqs.iter().map(|s| s.id.clone()).collect(),
            positives,
            trajectory_positives,
            negatives,
            regime,
        })
    }

    /// One epoch: per sequence two augmentation positives, one partner
    /// positive, and three negatives, interleaved so that every prefix is
    /// balanced within one pair.
    fn epoch(&self, rng: &mut ChaCha8Rng) -> Vec<Planned> {
        let n = self.ids.len();
        let mut pos = Vec::with_capacity(3 * n);
        for i in 0..n {
            let item = |v: usize| 3 * i + v;
            for v in [SLOW, FAST] {
                pos.push(Planned {
                    a: item(ORIG),
                    b: item(v),
                    label: PairLabel::Similar,
                    source: PairSource::Augmentation,
                });
            }
            let traj = &self.trajectory_positives[i];
            let partner = if self.regime == Regime::Supervised && !traj.is_empty() && rng.random_bool(0.5) {
                Some((traj[rng.random_range(0..traj.len())], PairSource::Trajectory))
            } else if !self.positives[i].is_empty() {
                Some(self.positives[i][rng.random_range(0..self.positives[i].len())])
            } else {
                None
            };
            pos.push(match partner {
                Some((j, source)) => Planned {
                    a: item(rng.random_range(0..3)),
                    b: 3 * j + rng.random_range(0..3),
                    label: PairLabel::Similar,
                    source,
                },
                None => Planned {
                    a: item(SLOW),
                    b: item(FAST),
                    label: PairLabel::Similar,
                    source: PairSource::Augmentation,
                },
            });
        }
        let anchors: Vec<usize> = (0..n).filter(|&i| !self.negatives[i].is_empty()).collect();
        let mut neg = Vec::with_capacity(pos.len());
        for k in 0..pos.len() {
            let mut i = k / 3;
            if self.negatives[i].is_empty() {
                i = anchors[rng.random_range(0..anchors.len())];
            }
            let (j, source) = self.negatives[i][rng.random_range(0..self.negatives[i].len())];
            neg.push(Planned {
                a: 3 * i + rng.random_range(0..3),
                b: 3 * j + ORIG,
                label: PairLabel::Dissimilar,
                source,
            });
        }
        pos.shuffle(rng);
        neg.shuffle(rng);
        pos.into_iter().zip(neg).flat_map(|(p, q)| [p, q]).collect()
    }

    fn sample(&self, p: &Planned) -> PairSample {
        let name = |item: usize| format!("{}{}", self.ids[item / 3], VARIANT_SUFFIX[item % 3]);
        PairSample {
            seq_a_id: name(p.a),
            seq_b_id: name(p.b),
            label: p.label,
            source: p.source,
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Thresholds calibrated on the trajectory summaries of `seqs`.
pub fn calibrate_thresholds(seqs: &[SkeletonSequence], percentiles: (f64, f64), seed: u64) -> Result<PairThresholds> {
    let sums: Vec<_> = seqs.iter().map(trajectory_summary).collect();
    let pairs = (sums.len() * sums.len().saturating_sub(1) / 2).clamp(1, 20_000);
    PairThresholds::calibrate(&sums, pairs, percentiles, SimilarityWeights::default(), seed)
}

/// The pair stream of one epoch. Speed variants are named `<id>_slow` and
/// `<id>_fast`. Self-supervised pairing calibrates thresholds from `seqs`
/// when `thresholds` is `None`.
pub fn sample_pairs(
    seqs: &[SkeletonSequence],
    regime: Regime,
    thresholds: Option<&PairThresholds>,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let calibrated;
    let thresholds = match (regime, thresholds) {
        (Regime::SelfSupervised, None) => {
            if seqs.len() < 2 {
                return Err(Error::Dataset("self-supervised pairing needs at least two sequences".into()));
            }
            calibrated = calibrate_thresholds(seqs, (10.0, 50.0), seed)?;
            Some(&calibrated)
        }
        (_, t) => t,
    };
    let plan = PairPlan::build(seqs, regime, thresholds, thresholds.is_some())?;
    let mut rng = epoch_rng(seed, 0);
    Ok(plan.epoch(&mut rng).iter().map(|p| plan.sample(p)).collect())
}

/// Loads the train split of `manifest` and samples its pair stream.
pub fn sample_pairs_from_manifest(
    manifest: &DatasetManifest,
    topology: &Arc<SkeletonTopology>,
    regime: Regime,
    thresholds: Option<&PairThresholds>,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let seqs = manifest.split(Split::Train).load_sequences(topology)?;
    sample_pairs(&seqs, regime, thresholds, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_contrastive: f64,
    pub mean_classification: f64,
    pub val_top1: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,mean_contrastive,mean_classification,val_top1,wall_seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.epoch,
                r.mean_contrastive,
                r.mean_classification,
                r.val_top1.map_or(String::new(), |v| v.to_string()),
                r.wall_seconds
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Best validation accuracy seen up to and including each epoch.
    pub fn best_so_far(&self) -> Vec<Option<f64>> {
        let mut best: Option<f64> = None;
        self.epochs
            .iter()
            .map(|r| {
                if let Some(v) = r.val_top1 {
                    best = Some(best.map_or(v, |b| b.max(v)));
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: TrainingLog,
    /// Epoch whose parameters were returned (1-based), `None` for zero epochs.
    pub best_epoch: Option<usize>,
    pub thresholds: Option<PairThresholds>,
    pub validation_ids: Vec<String>,
}

/// Splits off a validation slice of about `fraction` of the sequences,
/// keeping performers disjoint when performer ids exist. Returns
/// `(train, validation)` index lists; the validation list is empty when the
/// set is too small to spare two sequences.
pub fn validation_split(seqs: &[SkeletonSequence], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..seqs.len()).collect();
    let want = (fraction * seqs.len() as f64).ceil() as usize;
    if fraction <= 0.0 || seqs.len() < 4 {
        return (all, Vec::new());
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        let key = match &s.performer_id {
            Some(p) => format!("p:{p}"),
            None => format!("s:{}", s.id),
        };
        groups.entry(key).or_default().push(i);
    }
    let mut keys: Vec<&String> = groups.keys().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_0a11));
    let mut val = BTreeSet::new();
    for k in keys {
        if val.len() >= want.max(2) {
            break;
        }
        val.extend(groups[k].iter().copied());
    }
    if val.len() < 2 || seqs.len() - val.len() < 2 {
        return (all, Vec::new());
    }
    let train = all.into_iter().filter(|i| !val.contains(i)).collect();
    (train, val.into_iter().collect())
}

/// Leave-one-out top-1 accuracy of the signatures of `seqs`. With
/// `pseudo` set, a hit is a nearest neighbour whose trajectory score falls
/// under the similar threshold; otherwise it is a class-label match.
pub fn evaluate_validation(params: &EncoderParams, seqs: &[SkeletonSequence], pseudo: Option<&PairThresholds>) -> Result<f64> {
    evaluate_validation_with(params, seqs, pseudo, Parallelism::default())
}

pub fn evaluate_validation_with(
    params: &EncoderParams,
    seqs: &[SkeletonSequence],
    pseudo: Option<&PairThresholds>,
    mode: Parallelism,
) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(Error::Dataset(format!("validation needs at least two sequences, got {}", seqs.len())));
    }
    if pseudo.is_none() && seqs.iter().any(|s| s.class_label.is_none()) {
        return Err(Error::Metric("validation by class needs labeled sequences".into()));
    }
    let index = build_index_with(params, seqs, mode)?;
    let sums: Vec<_> = match pseudo {
        Some(_) => seqs.iter().map(trajectory_summary).collect(),
        None => Vec::new(),
    };
    let mut hits = 0usize;
    for (qi, s) in seqs.iter().enumerate() {
        let sig = &index.get(&s.id).expect("indexed above").signature;
        let r = query_excluding_with(&index, sig, 1, &s.id, mode)?;
        let nn = &r.neighbors[0];
        let hit = match pseudo {
            None => nn.label == s.class_label,
            Some(t) => {
                let j = seqs.iter().position(|x| x.id == nn.id).expect("neighbour comes from seqs");
                t.classify(trajectory_similarity(&sums[qi], &sums[j], t.weights)?) == Some(PairLabel::Similar)
            }
        };
        hits += hit as usize;
    }
    Ok(hits as f64 / seqs.len() as f64)
}

/// Trains on the train split of `manifest`.
pub fn train(
    manifest: &DatasetManifest,
    topology: &Arc<SkeletonTopology>,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let seqs = manifest.split(Split::Train).load_sequences(topology)?;
    train_sequences(&seqs, encoder, config)
}

pub fn train_sequences(seqs: &[SkeletonSequence], encoder: &EncoderConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(seqs, encoder, config, Parallelism::default(), &mut |_| {})
}

/// Full training loop. `observer` sees each epoch record as it is produced.
/// Results do not depend on `mode`: per-batch gradients are reduced in a
/// fixed order.
pub fn train_with(
    seqs: &[SkeletonSequence],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    mode: Parallelism,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    encoder.validate()?;
    if seqs.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let uses_classes = config.regime == Regime::Supervised && config.loss.classification_weight > 0.0;
    if config.regime == Regime::Supervised {
        if let Some(s) = seqs.iter().find(|s| s.class_label.is_none()) {
            return Err(Error::Config(format!("supervised regime needs class labels; `{}` has none", s.id)));
        }
    }
    if uses_classes {
        let count = encoder
            .class_count
            .ok_or_else(|| Error::Config("classification weight set but class_count is none".into()))?;
        if let Some(s) = seqs.iter().find(|s| s.class_label.is_some_and(|c| c >= count)) {
            return Err(Error::Config(format!("`{}` has class {:?} outside 0..{count}", s.id, s.class_label)));
        }
    }
    let mut params = EncoderParams::init(encoder, config.seed)?;
    if config.max_epochs == 0 {
        return Ok(TrainOutcome {
            params,
            log: TrainingLog::default(),
            best_epoch: None,
            thresholds: None,
            validation_ids: Vec::new(),
        });
    }

    let (train_idx, val_idx) = validation_split(seqs, config.validation_fraction, config.seed);
    let train_set: Vec<SkeletonSequence> = train_idx.iter().map(|&i| seqs[i].clone()).collect();
    let val_set: Vec<SkeletonSequence> = val_idx.iter().map(|&i| seqs[i].clone()).collect();

    let wants_traj = config.regime == Regime::SelfSupervised || config.trajectory_positives;
    let thresholds = if wants_traj && train_set.len() >= 2 {
        Some(calibrate_thresholds(&train_set, config.threshold_percentiles, config.seed)?)
    } else {
        None
    };
    let plan = PairPlan::build(&train_set, config.regime, thresholds.as_ref(), wants_traj && thresholds.is_some())?;

    let mut inputs: Vec<EncoderInput> = Vec::with_capacity(3 * train_set.len());
    let mut classes = Vec::with_capacity(3 * train_set.len());
    for s in &train_set {
        if s.len() < 3 {
            return Err(Error::Dataset(format!("`{}` has {} frames; speed variants need at least 3", s.id, s.len())));
        }
        for variant in [s.clone(), speed_half(s)?, speed_double(s)?] {
            inputs.push(encoder_input_for(encoder, &variant)?);
            classes.push(if uses_classes { s.class_label } else { None });
        }
    }
    let pseudo = match config.regime {
        Regime::Supervised => None,
        Regime::SelfSupervised => thresholds.as_ref(),
    };

    let mut adam = Adam::new(params.len(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut since_best = 0usize;
    let start = Instant::now();
    for epoch in 1..=config.max_epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let pairs = plan.epoch(&mut rng);
        let mut sum_con = 0.0;
        let mut sum_cls = 0.0;
        for (b, batch) in pairs.chunks(config.batch_size).enumerate() {
            let refs: Vec<PairRef> = batch
                .iter()
                .map(|p| PairRef {
                    a: p.a,
                    b: p.b,
                    label: p.label,
                })
                .collect();
            let (loss, mut grads) = loss_gradients_with(&params, &inputs, &classes, &refs, &config.loss, mode)?;
            if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss {} in epoch {epoch}, batch {} (pairs {}..{})",
                    loss.total,
                    b + 1,
                    b * config.batch_size,
                    b * config.batch_size + batch.len()
                )));
            }
            if let Some(clip) = config.grad_clip {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grads.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam.step(&mut params, &grads);
            sum_con += loss.contrastive * batch.len() as f64;
            sum_cls += loss.classification * batch.len() as f64;
        }
        let val_top1 = if val_set.len() >= 2 {
            Some(evaluate_validation_with(&params, &val_set, pseudo, mode)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            mean_contrastive: sum_con / pairs.len() as f64,
            mean_classification: sum_cls / pairs.len() as f64,
            val_top1,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        log.epochs.push(record);

        // without a validation slice the latest epoch counts as best
        let score = val_top1.unwrap_or(f64::NEG_INFINITY);
        let improved = best.as_ref().is_none_or(|(b, _, _)| score >= *b);
        if improved {
            if best.as_ref().is_some_and(|(b, _, _)| score > *b) {
                since_best = 0;
            }
            best = Some((score, epoch, params.clone()));
        } else {
            since_best += 1;
        }
        if val_top1.is_some() && since_best >= config.patience {
            break;
        }
    }
    let (_, best_epoch, mut params) = best.expect("at least one epoch ran");
    params.set_epochs_trained(best_epoch);
    Ok(TrainOutcome {
        params,
        log,
        best_epoch: Some(best_epoch),
        thresholds,
        validation_ids: val_set.iter().map(|s| s.id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CellKind, Readout};
    use crate::motion_data::{synth_generate, SynthSpec};

    fn toy(count: usize, seed: u64) -> Vec<SkeletonSequence> {
        synth_generate(&SynthSpec::toy((15, 30)), count, seed).unwrap()
    }

    fn small_encoder(classes: Option<usize>) -> EncoderConfig {
        EncoderConfig {
            input_width: 90,
            hidden_size: 8,
            num_recurrent_layers: 1,
            embedding_dim: 4,
            class_count: classes,
            cell: CellKind::Gru,
            readout: Readout::Final,
        }
    }

    #[test]
    fn supervised_stream_rules() {
        let seqs = toy(3, 1);
        let pairs = sample_pairs(&seqs, Regime::Supervised, None, 7).unwrap();
        let label_of = |id: &str| {
            let base = id.trim_end_matches("_slow").trim_end_matches("_fast");
            seqs.iter().find(|s| s.id == base).unwrap().class_label
        };
        for p in &pairs {
            let same = label_of(&p.seq_a_id) == label_of(&p.seq_b_id);
            assert_eq!(same, p.label == PairLabel::Similar, "{p:?}");
            if p.source != PairSource::Augmentation {
                assert_ne!(p.seq_a_id, p.seq_b_id);
            }
        }
        for s in &seqs {
            for suffix in ["_slow", "_fast"] {
                assert!(pairs.iter().any(|p| p.source == PairSource::Augmentation
                    && p.seq_a_id == s.id
                    && p.seq_b_id == format!("{}{suffix}", s.id)));
            }
        }
        let mut diff = 0i64;
        for p in &pairs {
            diff += if p.label == PairLabel::Similar { 1 } else { -1 };
            assert!(diff.abs() <= 1);
        }
        assert_eq!(diff, 0);
        assert_eq!(pairs, sample_pairs(&seqs, Regime::Supervised, None, 7).unwrap());
    }

    #[test]
    fn self_supervised_stream_uses_thresholds() {
        let seqs = toy(3, 2);
        let t = calibrate_thresholds(&seqs, (10.0, 50.0), 1).unwrap();
        let pairs = sample_pairs(&seqs, Regime::SelfSupervised, Some(&t), 3).unwrap();
        let find = |id: &str| {
            let base = id.trim_end_matches("_slow").trim_end_matches("_fast");
            seqs.iter().find(|s| s.id == base).unwrap()
        };
        for p in pairs.iter().filter(|p| p.source == PairSource::Trajectory) {
            let a = find(&p.seq_a_id);
            let b = find(&p.seq_b_id);
            assert_eq!(crate::features::pair_label(a, b, &t).unwrap(), Some(p.label));
        }
        assert!(matches!(
            sample_pairs(&seqs[..1], Regime::SelfSupervised, None, 0),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let seqs = toy(1, 3);
        let mut cfg = TrainConfig::new(Regime::Supervised);
        cfg.max_epochs = 0;
        let enc = small_encoder(Some(8));
        let out = train_sequences(&seqs, &enc, &cfg).unwrap();
        assert!(out.log.epochs.is_empty());
        assert_eq!(out.params, EncoderParams::init(&enc, cfg.seed).unwrap());
    }

    #[test]
    fn supervised_needs_labels() {
        let seqs: Vec<_> = toy(1, 3).into_iter().map(|s| s.with_label(None)).collect();
        let cfg = TrainConfig::new(Regime::Supervised);
        assert!(matches!(train_sequences(&seqs, &small_encoder(Some(8)), &cfg), Err(Error::Config(_))));
        let mut bad = TrainConfig::new(Regime::SelfSupervised);
        bad.loss.classification_weight = 1.0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn runs_deterministically() {
        let seqs = toy(2, 4);
        let mut cfg = TrainConfig::new(Regime::Supervised);
        cfg.max_epochs = 2;
        cfg.batch_size = 16;
        let enc = small_encoder(Some(8));
        let a = train_with(&seqs, &enc, &cfg, Parallelism::Sequential, &mut |_| {}).unwrap();
        let b = train_with(&seqs, &enc, &cfg, Parallelism::Parallel, &mut |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.epochs.len(), 2);
        for (x, y) in a.log.epochs.iter().zip(&b.log.epochs) {
            assert_eq!((x.mean_contrastive, x.mean_classification, x.val_top1), (y.mean_contrastive, y.mean_classification, y.val_top1));
        }
        assert!(a.log.to_csv().starts_with(TrainingLog::HEADER));
    }

    #[test]
    fn validation_edge_cases() {
        let seqs = toy(1, 5);
        let params = EncoderParams::init(&small_encoder(None), 0).unwrap();
        let two = vec![seqs[0].clone(), seqs[1].clone()];
        assert_eq!(evaluate_validation(&params, &two, None).unwrap(), 0.0);
        let mut twins = Vec::new();
        for s in &seqs[..4] {
            twins.push(s.clone());
            let mut t = s.clone();
            t.id = format!("{}_twin", s.id);
            twins.push(t);
        }
        assert_eq!(evaluate_validation(&params, &twins, None).unwrap(), 1.0);
        assert!(matches!(evaluate_validation(&params, &seqs[..1], None), Err(Error::Dataset(_))));
    }

    #[test]
    fn validation_split_is_performer_disjoint() {
        let seqs = toy(10, 6);
        let (tr, va) = validation_split(&seqs, 0.1, 3);
        assert!(va.len() >= 8);
        let perf = |i: &usize| seqs[*i].performer_id.clone();
        let vp: BTreeSet<_> = va.iter().map(perf).collect();
        assert!(tr.iter().all(|i| !vp.contains(&perf(i))));
        assert_eq!(tr.len() + va.len(), seqs.len());
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        let mut cfg = TrainConfig::new(Regime::SelfSupervised);
        cfg.batch_size = 8;
        cfg.grad_clip = Some(2.5);
        let mut text: String = cfg.to_kv().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        text.push_str("# comment\nhidden_size = 32\n");
        fs::write(&path, text).unwrap();
        let mut enc = small_encoder(None);
        let back = load_train_config(&path, TrainConfig::new(Regime::Supervised), &mut enc).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(enc.hidden_size, 32);
        fs::write(&path, "bogus = 1\n").unwrap();
        assert!(load_train_config(&path, TrainConfig::new(Regime::Supervised), &mut enc).is_err());
        fs::write(&path, "no equals sign\n").unwrap();
        assert!(matches!(
            load_train_config(&path, TrainConfig::new(Regime::Supervised), &mut enc),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
