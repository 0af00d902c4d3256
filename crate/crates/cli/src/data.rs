use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use motion_signature::motion_data::{
    canonical_bone_lengths, drop_joints, load_bone_lengths, normalize_bone_lengths, save_bone_lengths, save_manifest,
    save_sequence, save_topology, speed_double, speed_half, synth_generate, DatasetManifest, ManifestEntry,
    SkeletonSequence, Split, SynthSpec,
};
use motion_signature::{Error, Result};

use crate::run::{create_dir, load_dataset, require_file, resolve_seed, Context, RunLock};
use crate::DatasetArgs;

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Sequences per class.
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 15)]
    min_len: usize,
    #[arg(long, default_value_t = 120)]
    max_len: usize,
    /// Performers whose sequences form the test split.
    #[arg(long, value_delimiter = ',', default_value = "p8,p9")]
    test_performers: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct IngestArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Output directory for the validated copy.
    #[arg(long)]
    out: PathBuf,
    /// Retarget every bone to canonical lengths.
    #[arg(long)]
    normalize: bool,
    /// Bone-length file to normalize against (implies --normalize); the
    /// default is the per-bone mean over the train split.
    #[arg(long)]
    canonical_lengths: Option<PathBuf>,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Add `_fast` (every other frame) and `_slow` (midpoint) variants.
    #[arg(long)]
    speeds: bool,
    /// Add a `_noisy` variant with this fraction of joints missing.
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

const SEQ_DIR: &str = "seqs";

struct DatasetWriter {
    out: PathBuf,
    entries: Vec<ManifestEntry>,
    errors: Vec<(String, String)>,
}

impl DatasetWriter {
    fn new(out: &Path) -> Result<Self> {
        create_dir(&out.join(SEQ_DIR))?;
        Ok(Self {
            out: out.to_path_buf(),
            entries: Vec::new(),
            errors: Vec::new(),
        })
    }

    fn add(&mut self, seq: &SkeletonSequence, split: Split, provenance: Option<&str>) -> Result<()> {
        let rel = Path::new(SEQ_DIR).join(format!("{}.skel", seq.id));
        save_sequence(self.out.join(&rel), seq)?;
        self.entries.push(ManifestEntry {
            path: rel,
            id: seq.id.clone(),
            label: seq.class_label,
            performer: seq.performer_id.clone(),
            split,
            provenance: provenance.map(str::to_string),
        });
        Ok(())
    }

    fn reject(&mut self, id: &str, err: &Error) {
        self.errors.push((id.to_string(), err.to_string()));
    }

    /// Writes the manifest and the errors file; fails when anything was
    /// rejected.
    fn finish(self, lock: &RunLock) -> Result<usize> {
        let count = self.entries.len();
        save_manifest(self.out.join("manifest.tsv"), &DatasetManifest::new(self.entries, &self.out)?)?;
        let mut text = String::from("id\terror\n");
        for (id, e) in &self.errors {
            text.push_str(&format!("{id}\t{}\n", e.replace(['\t', '\n'], " ")));
        }
        let errors_path = self.out.join("errors.txt");
        fs::write(&errors_path, text)?;
        lock.write(&self.out.join("run.lock"))?;
        if !self.errors.is_empty() {
            return Err(Error::Validation(format!(
                "{} sequence(s) rejected; see {}",
                self.errors.len(),
                errors_path.display()
            )));
        }
        Ok(count)
    }
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let spec = SynthSpec::toy((a.min_len, a.max_len));
    let seqs = synth_generate(&spec, a.per_class, seed)?;
    let mut lock = RunLock::new(ctx, "synth");
    lock.set("seed", seed);
    lock.set("per_class", a.per_class);
    lock.set("length_range", format!("{}..={}", a.min_len, a.max_len));
    lock.set("test_performers", a.test_performers.join(","));
    let mut w = DatasetWriter::new(&a.out)?;
    save_topology(a.out.join("topology.txt"), &spec.topology)?;
    for s in &seqs {
        let test = s.performer_id.as_ref().is_some_and(|p| a.test_performers.contains(p));
        w.add(s, if test { Split::Test } else { Split::Train }, None)?;
    }
    let n = w.finish(&lock)?;
    println!("wrote {n} sequences of {} classes to {}", spec.classes.len(), a.out.display());
    Ok(())
}

pub fn ingest(ctx: &Context, a: IngestArgs) -> Result<()> {
    let (manifest, topology) = load_dataset(&a.dataset)?;
    let mut lock = RunLock::new(ctx, "ingest");
    lock.path("manifest", &a.dataset.manifest);
    lock.path("topology", &a.dataset.topology);
    let mut w = DatasetWriter::new(&a.out)?;
    let mut loaded = Vec::new();
    for e in &manifest.entries {
        match manifest.load_entry(e, &topology) {
            Ok(s) => loaded.push((e, s)),
            Err(err) => w.reject(&e.id, &err),
        }
    }
    let normalize = a.normalize || a.canonical_lengths.is_some();
    lock.set("normalize", normalize);
    if normalize {
        let lengths = match &a.canonical_lengths {
            Some(p) => {
                require_file(p, "canonical lengths file")?;
                lock.path("canonical_lengths", p);
                load_bone_lengths(p, &topology)?
            }
            None => {
                let train: Vec<SkeletonSequence> = loaded
                    .iter()
                    .filter(|(e, s)| e.split == Split::Train && !s.has_missing())
                    .map(|(_, s)| s.clone())
                    .collect();
                lock.set("canonical_lengths", "train-split mean");
                canonical_bone_lengths(&topology, &train)?
            }
        };
        save_bone_lengths(a.out.join("bone_lengths.txt"), &topology, &lengths)?;
        let mut kept = Vec::new();
        for (e, s) in loaded {
            match normalize_bone_lengths(&s, &lengths) {
                Ok(n) => kept.push((e, n)),
                Err(err) => w.reject(&e.id, &err),
            }
        }
        loaded = kept;
    }
    for (e, s) in &loaded {
        w.add(s, e.split, e.provenance.as_deref())?;
    }
    let n = w.finish(&lock)?;
    println!("ingested {n} of {} sequences into {}", manifest.len(), a.out.display());
    Ok(())
}

/// Per-sequence dropout seed; depends on the manifest position only.
fn entry_seed(seed: u64, position: usize) -> u64 {
    seed ^ (position as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn augment(ctx: &Context, a: AugmentArgs) -> Result<()> {
    if !a.speeds && a.dropout.is_none() {
        return Err(Error::Argument("nothing to do: pass --speeds and/or --dropout".into()));
    }
    let seed = resolve_seed(a.seed)?;
    let (manifest, topology) = load_dataset(&a.dataset)?;
    let mut lock = RunLock::new(ctx, "augment");
    lock.path("manifest", &a.dataset.manifest);
    lock.path("topology", &a.dataset.topology);
    lock.set("speeds", a.speeds);
    lock.set("dropout", a.dropout.map_or("none".into(), |d| d.to_string()));
    lock.set("seed", seed);
    let mut w = DatasetWriter::new(&a.out)?;
    for (i, e) in manifest.entries.iter().enumerate() {
        let seq = match manifest.load_entry(e, &topology) {
            Ok(s) => s,
            Err(err) => {
                w.reject(&e.id, &err);
                continue;
            }
        };
        let mut variants: Vec<(Result<SkeletonSequence>, &str)> = vec![(Ok(seq.clone()), "orig")];
        if a.speeds {
            variants.push((speed_double(&seq), "fast"));
            variants.push((speed_half(&seq), "slow"));
        }
        if let Some(f) = a.dropout {
            let noisy = drop_joints(&seq, f, entry_seed(seed, i)).map(|mut s| {
                s.id = format!("{}_noisy", seq.id);
                s
            });
            variants.push((noisy, "noisy"));
        }
        for (v, provenance) in variants {
            match v {
                Ok(s) => w.add(&s, e.split, Some(provenance))?,
                Err(err) => w.reject(&format!("{}_{provenance}", seq.id), &err),
            }
        }
    }
    let n = w.finish(&lock)?;
    println!("wrote {n} entries from {} inputs to {}", manifest.len(), a.out.display());
    Ok(())
}
