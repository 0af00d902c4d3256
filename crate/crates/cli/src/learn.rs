use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use motion_signature::model::{load_params, save_params, EncoderConfig};
use motion_signature::motion_data::{SkeletonSequence, Split};
use motion_signature::submotion::{train_submotion_with, SubmotionConfig};
use motion_signature::training::{parse_kv, set_encoder_key, train_with, Regime, TrainConfig};
use motion_signature::{Error, Result};

use crate::run::{load_dataset, lock_for_file, parse_override, refuse_overwrite, require_file, resolve_seed, Context, RunLock};
use crate::DatasetArgs;

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// `supervised` (class labels) or `self` (trajectory similarity).
    #[arg(long)]
    regime: Regime,
    /// `key = value` file of training and encoder settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parameter file to write.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing parameter file.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key; may repeat. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
pub struct SubmotionTrainArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Trained full-sequence parameter file (read only).
    #[arg(long)]
    full: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

/// Config file pairs first, then `--set` pairs, in order.
fn settings(config: Option<&Path>, overrides: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    if let Some(p) = config {
        require_file(p, "config file")?;
        pairs.extend(parse_kv(&fs::read_to_string(p)?, p)?);
    }
    for o in overrides {
        pairs.push(parse_override(o)?);
    }
    Ok(pairs)
}

fn encoder_kv(e: &EncoderConfig) -> Vec<(String, String)> {
    [
        ("input_width", e.input_width.to_string()),
        ("hidden_size", e.hidden_size.to_string()),
        ("num_recurrent_layers", e.num_recurrent_layers.to_string()),
        ("embedding_dim", e.embedding_dim.to_string()),
        ("class_count", e.class_count.map_or("none".into(), |c| c.to_string())),
        ("cell", e.cell.to_string()),
        ("readout", e.readout.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn train_split(args: &DatasetArgs) -> Result<Vec<SkeletonSequence>> {
    let (manifest, topology) = load_dataset(args)?;
    let seqs = manifest.split(Split::Train).load_sequences(&topology)?;
    if seqs.is_empty() {
        return Err(Error::Dataset("the manifest has no train-split entries".into()));
    }
    Ok(seqs)
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    refuse_overwrite(&a.out, a.force)?;
    let seqs = train_split(&a.dataset)?;
    let with_mask = seqs.iter().any(SkeletonSequence::has_missing);
    let mut encoder = EncoderConfig::for_joints(seqs[0].joint_count(), with_mask);
    let mut cfg = TrainConfig::new(a.regime);
    cfg.seed = resolve_seed(None)?;
    for (k, v) in settings(a.config.as_deref(), &a.overrides)? {
        if !cfg.set(&k, &v)? && !set_encoder_key(&mut encoder, &k, &v)? {
            return Err(Error::Config(format!("unknown setting `{k}`")));
        }
    }
    cfg.set("regime", &a.regime.to_string())?;
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if cfg.regime == Regime::Supervised && cfg.loss.classification_weight > 0.0 && encoder.class_count.is_none() {
        if let Some(s) = seqs.iter().find(|s| s.class_label.is_none()) {
            return Err(Error::Config(format!("supervised regime needs class labels; `{}` has none", s.id)));
        }
        encoder.class_count = seqs.iter().filter_map(|s| s.class_label).max().map(|m| m + 1);
    }

    let mut lock = RunLock::new(ctx, "train");
    lock.path("manifest", &a.dataset.manifest);
    lock.path("topology", &a.dataset.topology);
    lock.path("out", &a.out);
    lock.set("train_sequences", seqs.len());
    lock.extend(cfg.to_kv());
    lock.extend(encoder_kv(&encoder));

    let out = train_with(&seqs, &encoder, &cfg, ctx.mode, &mut |r| {
        eprintln!(
            "epoch {:>3}  contrastive {:.6}  classification {:.6}  val_top1 {}",
            r.epoch,
            r.mean_contrastive,
            r.mean_classification,
            r.val_top1.map_or("-".into(), |v| format!("{v:.4}"))
        );
    })?;
    save_params(&a.out, &out.params)?;
    out.log.write_csv(sibling(&a.out, ".log.csv"))?;
    lock.write(&lock_for_file(&a.out))?;
    match out.best_epoch {
        Some(e) => println!("kept epoch {e} of {}; wrote {}", out.log.epochs.len(), a.out.display()),
        None => println!("no epochs run; wrote initial parameters to {}", a.out.display()),
    }
    Ok(())
}

fn set_submotion_key(cfg: &mut SubmotionConfig, key: &str, value: &str) -> Result<bool> {
    let bad = || Error::Config(format!("bad value `{value}` for {key}"));
    match key {
        "window_fractions" => {
            cfg.window_fractions = value
                .split(',')
                .map(|f| f.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?
        }
        "stride_fraction" => cfg.stride_fraction = value.parse().map_err(|_| bad())?,
        "include_full" => cfg.include_full = value.parse().map_err(|_| bad())?,
        "init_from_full" => cfg.init_from_full = value.parse().map_err(|_| bad())?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn submotion_train(ctx: &Context, a: SubmotionTrainArgs) -> Result<()> {
    refuse_overwrite(&a.out, a.force)?;
    require_file(&a.full, "full-sequence parameter file")?;
    let full = load_params(&a.full)?;
    let parents = train_split(&a.dataset)?;
    let mut cfg = TrainConfig::new(Regime::SelfSupervised);
    cfg.seed = resolve_seed(None)?;
    cfg.batch_size = 32;
    cfg.max_epochs = 20;
    let mut sub = SubmotionConfig::default();
    for (k, v) in settings(a.config.as_deref(), &a.overrides)? {
        if !cfg.set(&k, &v)? && !set_submotion_key(&mut sub, &k, &v)? {
            return Err(Error::Config(format!("unknown setting `{k}`")));
        }
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }

    let mut lock = RunLock::new(ctx, "submotion train");
    lock.path("manifest", &a.dataset.manifest);
    lock.path("topology", &a.dataset.topology);
    lock.path("full", &a.full);
    lock.path("out", &a.out);
    for (k, v) in cfg.to_kv() {
        if matches!(k.as_str(), "batch_size" | "learning_rate" | "max_epochs" | "seed" | "adam_beta1" | "adam_beta2" | "adam_eps" | "grad_clip") {
            lock.set(&k, v);
        }
    }
    lock.set(
        "window_fractions",
        sub.window_fractions.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    );
    lock.set("stride_fraction", sub.stride_fraction);
    lock.set("include_full", sub.include_full);
    lock.set("init_from_full", sub.init_from_full);

    let out = train_submotion_with(&full, &parents, &cfg, &sub, ctx.mode, &mut |r| {
        eprintln!("epoch {:>3}  mean_l2 {:.6}", r.epoch, r.mean_l2);
    })?;
    save_params(&a.out, &out.params)?;
    out.log.write_csv(sibling(&a.out, ".log.csv"))?;
    lock.write(&lock_for_file(&a.out))?;
    println!(
        "trained on {} windows for {} epochs; wrote {}",
        out.sample_count,
        out.log.epochs.len(),
        a.out.display()
    );
    Ok(())
}
