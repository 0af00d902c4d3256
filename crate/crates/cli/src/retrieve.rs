use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, ValueEnum};
use motion_signature::evaluation::{emit_report, evaluate_retrieval, pr_curve_with, sig6, ReportOptions};
use motion_signature::index::{benchmark_query_latency, build_index_with, load_index, query_with, save_index, EmbeddingIndex, QueryResult};
use motion_signature::model::{encode_sequences, load_params, EncoderParams};
use motion_signature::motion_data::{load_sequence, load_topology, SkeletonTopology, Split};
use motion_signature::{Error, Result};

use crate::run::{create_dir, load_dataset, lock_for_file, require_file, Context, RunLock};
use crate::DatasetArgs;

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            Self::Train => Some(Split::Train),
            Self::Test => Some(Split::Test),
            Self::All => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
            Self::All => "all",
        }
    }
}

#[derive(Args)]
pub struct IndexArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Trained full-sequence parameter file.
    #[arg(long)]
    params: PathBuf,
    /// Manifest split to encode.
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Index file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    topology: PathBuf,
    /// Sequence file (`#skeleton v1`) to query with.
    #[arg(long)]
    sequence: PathBuf,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Results CSV.
    #[arg(long, default_value = "query_results.csv")]
    out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// Split whose sequences are the queries.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Cutoff for the top-n column.
    #[arg(short, long, default_value_t = 10)]
    n: usize,
    /// Neighbours per query that enter the DTW error.
    #[arg(long, default_value_t = 10)]
    dtw_k: usize,
    /// Sakoe-Chiba band half-width in frames; unbanded when absent.
    #[arg(long)]
    dtw_band: Option<usize>,
}

#[derive(Args)]
pub struct SubmotionQueryArgs {
    /// Sub-motion parameter file.
    #[arg(long)]
    params: PathBuf,
    /// Index built with the matching full-sequence encoder.
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    sequence: PathBuf,
    /// First frame of the window.
    #[arg(long)]
    start: usize,
    /// One past the last frame of the window.
    #[arg(long)]
    end: usize,
    #[arg(short, long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value = "submotion_results.csv")]
    out: PathBuf,
}

fn params_at(path: &PathBuf) -> Result<EncoderParams> {
    require_file(path, "parameter file")?;
    load_params(path)
}

fn index_for(path: &PathBuf, params: &EncoderParams) -> Result<EmbeddingIndex> {
    require_file(path, "index file")?;
    let index = load_index(path)?;
    if index.dim() != params.config().embedding_dim {
        return Err(Error::Config(format!(
            "index `{}` holds {}-d signatures but the encoder produces {}-d ones",
            path.display(),
            index.dim(),
            params.config().embedding_dim
        )));
    }
    Ok(index)
}

fn topology_at(path: &PathBuf) -> Result<Arc<SkeletonTopology>> {
    require_file(path, "topology file")?;
    Ok(Arc::new(load_topology(path)?))
}

fn write_results(result: &QueryResult, out: &PathBuf) -> Result<()> {
    let mut csv = String::from("rank,id,distance,label\n");
    let mut shown = String::new();
    for (r, n) in result.neighbors.iter().enumerate() {
        let label = n.label.map_or(String::new(), |l| l.to_string());
        writeln!(csv, "{},{},{},{label}", r + 1, n.id, sig6(n.distance)).unwrap();
        writeln!(shown, "{:>3}  {}  {}", r + 1, n.id, sig6(n.distance)).unwrap();
    }
    fs::write(out, csv)?;
    // a closed pipe (`| head`) is not a failure
    match io::stdout().lock().write_all(shown.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn index(ctx: &Context, a: IndexArgs) -> Result<()> {
    let params = params_at(&a.params)?;
    if params.is_submotion() {
        return Err(Error::Config("index needs a full-sequence encoder, not a sub-motion one".into()));
    }
    let (manifest, topology) = load_dataset(&a.dataset)?;
    let manifest = match a.split.split() {
        Some(s) => manifest.split(s),
        None => manifest,
    };
    let seqs = manifest.load_sequences(&topology)?;
    let index = build_index_with(&params, &seqs, ctx.mode)?;
    save_index(&a.out, &index)?;
    let mut lock = RunLock::new(ctx, "index");
    lock.path("manifest", &a.dataset.manifest);
    lock.path("topology", &a.dataset.topology);
    lock.path("params", &a.params);
    lock.set("split", a.split.name());
    lock.set("entries", index.len());
    lock.set("dim", index.dim());
    lock.write(&lock_for_file(&a.out))?;
    println!("indexed {} sequences ({}-d) into {}", index.len(), index.dim(), a.out.display());
    Ok(())
}

pub fn query(ctx: &Context, a: QueryArgs) -> Result<()> {
    let params = params_at(&a.params)?;
    let index = index_for(&a.index, &params)?;
    let topology = topology_at(&a.topology)?;
    require_file(&a.sequence, "sequence file")?;
    let seq = load_sequence(&a.sequence, &topology)?;
    let sig = encode_sequences(&params, std::slice::from_ref(&seq), ctx.mode)?.remove(0);
    let result = query_with(&index, &sig, a.k, ctx.mode)?;
    write_results(&result, &a.out)
}

pub fn evaluate(ctx: &Context, a: EvaluateArgs) -> Result<()> {
    let params = params_at(&a.params)?;
    let index = index_for(&a.index, &params)?;
    let (manifest, topology) = load_dataset(&a.dataset)?;
    let queries = match a.split.split() {
        Some(s) => manifest.split(s),
        None => manifest.clone(),
    }
    .load_sequences(&topology)?;
    // Sequences behind the indexed ids, for the DTW column.
    let pool: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| index.get(&e.id).is_some())
        .map(|e| manifest.load_entry(e, &topology))
        .collect::<Result<_>>()?;
    let options = ReportOptions {
        n: a.n,
        dtw_k: a.dtw_k,
        dtw_band: a.dtw_band,
    };
    let report = evaluate_retrieval(&index, &params, &queries, &pool, options, ctx.mode)?;
    create_dir(&a.out)?;
    let latency_path = a.out.join("latency.txt");
    if queries.is_empty() {
        emit_report(&report, None, &a.out)?;
        fs::write(&latency_path, "queries: 0\n")?;
    } else {
        let pr = pr_curve_with(&index, &params, &queries, ctx.mode)?;
        emit_report(&report, Some(&pr), &a.out)?;
        let sigs = encode_sequences(&params, &queries, ctx.mode)?;
        let lat = benchmark_query_latency(&index, &sigs, a.n)?;
        fs::write(
            &latency_path,
            format!(
                "index_size: {}\ntimed_queries: {}\nmean_ms: {}\np95_ms: {}\n",
                lat.index_size,
                lat.per_query_ms.len(),
                sig6(lat.mean_ms),
                sig6(lat.p95_ms)
            ),
        )?;
    }
    let mut lock = RunLock::new(ctx, "evaluate");
    lock.path("manifest", &a.dataset.manifest);
    lock.path("topology", &a.dataset.topology);
    lock.path("index", &a.index);
    lock.path("params", &a.params);
    lock.set("split", a.split.name());
    lock.set("n", a.n);
    lock.set("dtw_k", a.dtw_k);
    lock.set("dtw_band", a.dtw_band.map_or("none".into(), |b| b.to_string()));
    lock.write(&a.out.join("run.lock"))?;
    print!("{}", fs::read_to_string(a.out.join("summary.txt"))?);
    Ok(())
}

pub fn submotion_query(ctx: &Context, a: SubmotionQueryArgs) -> Result<()> {
    let params = params_at(&a.params)?;
    if !params.is_submotion() {
        return Err(Error::Config(format!("`{}` is not a sub-motion encoder", a.params.display())));
    }
    let index = index_for(&a.index, &params)?;
    let topology = topology_at(&a.topology)?;
    require_file(&a.sequence, "sequence file")?;
    let seq = load_sequence(&a.sequence, &topology)?;
    let window = seq.window(format!("{}[{}..{}]", seq.id, a.start, a.end), a.start, a.end)?;
    let sig = encode_sequences(&params, std::slice::from_ref(&window), ctx.mode)?.remove(0);
    let result = query_with(&index, &sig, a.k, ctx.mode)?;
    write_results(&result, &a.out)
}
