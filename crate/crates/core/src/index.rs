//! Exact nearest-neighbour index over motion signatures.
//!
//! File layout:
//!
//! ```text
//! magic    8 bytes  "MSIGIDX\0"
//! version  u32 LE
//! dim      u32 LE
//! count    u32 LE
//! entries  count x (u32 LE id length, UTF-8 id, i32 LE label or i32::MIN, dim x f32 LE)
//! checksum u32 LE CRC-32 of everything above
//! ```

use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{encode_sequences, EncoderParams, MotionSignature};
use crate::motion_data::SkeletonSequence;
use crate::par::{self, Parallelism};

const MAGIC: &[u8; 8] = b"MSIGIDX\0";
pub const INDEX_VERSION: u32 = 1;
const NO_LABEL: i32 = i32::MIN;
const SCAN_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub signature: MotionSignature,
    pub label: Option<usize>,
}

/// Immutable after construction. Entries are kept sorted by id, which is
/// also the tie-break order of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
    pub label: Option<usize>,
}

/// Neighbours by non-decreasing distance, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryResult {
    pub neighbors: Vec<Neighbor>,
}

impl QueryResult {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.neighbors.iter().map(|n| n.id.as_str()).collect()
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.neighbors.iter().position(|n| n.id == id).map(|p| p + 1)
    }
}

impl EmbeddingIndex {
    pub fn new(dim: usize, mut entries: Vec<IndexEntry>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Build("index dimension must be positive".into()));
        }
        if let Some(e) = entries.iter().find(|e| e.signature.dim() != dim) {
            return Err(Error::Shape {
                expected: dim,
                actual: e.signature.dim(),
            });
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Build(format!("duplicate id `{}`", w[0].id)));
        }
        if let Some(e) = entries.iter().find(|e| e.label.is_some_and(|l| l > i32::MAX as usize)) {
            return Err(Error::Build(format!("label of `{}` does not fit the index format", e.id)));
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Encodes each sequence and stores it under its id and class label.
pub fn build_index(params: &EncoderParams, seqs: &[SkeletonSequence]) -> Result<EmbeddingIndex> {
    build_index_with(params, seqs, Parallelism::default())
}

pub fn build_index_with(params: &EncoderParams, seqs: &[SkeletonSequence], mode: Parallelism) -> Result<EmbeddingIndex> {
    let sigs = encode_sequences(params, seqs, mode)?;
    let entries = seqs
        .iter()
        .zip(sigs)
        .map(|(s, signature)| IndexEntry {
            id: s.id.clone(),
            signature,
            label: s.class_label,
        })
        .collect();
    EmbeddingIndex::new(params.config().embedding_dim, entries)
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn ranked(index: &EmbeddingIndex, sig: &MotionSignature, k: usize, exclude: Option<&str>, mode: Parallelism) -> Result<QueryResult> {
    if sig.dim() != index.dim {
        return Err(Error::Shape {
            expected: index.dim,
            actual: sig.dim(),
        });
    }
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let q = sig.as_slice();
    let chunks = index.entries.len().div_ceil(SCAN_CHUNK);
    let dists: Vec<f64> = par::map_range(mode, chunks, |c| {
        let lo = c * SCAN_CHUNK;
        let hi = (lo + SCAN_CHUNK).min(index.entries.len());
        index.entries[lo..hi]
            .iter()
            .map(|e| squared_distance(q, e.signature.as_slice()))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();

    let mut order: Vec<usize> = (0..index.entries.len())
        .filter(|&i| exclude != Some(index.entries[i].id.as_str()))
        .collect();
    // entries are id-sorted, so position order is id order
    let cmp = |a: &usize, b: &usize| dists[*a].total_cmp(&dists[*b]).then(a.cmp(b));
    let k = k.min(order.len());
    if k > 0 && k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(QueryResult {
        neighbors: order
            .into_iter()
            .map(|i| Neighbor {
                id: index.entries[i].id.clone(),
                distance: dists[i].sqrt(),
                label: index.entries[i].label,
            })
            .collect(),
    })
}

/// Exact `k` nearest entries by Euclidean distance.
pub fn query(index: &EmbeddingIndex, sig: &MotionSignature, k: usize) -> Result<QueryResult> {
    ranked(index, sig, k, None, Parallelism::default())
}

pub fn query_with(index: &EmbeddingIndex, sig: &MotionSignature, k: usize, mode: Parallelism) -> Result<QueryResult> {
    ranked(index, sig, k, None, mode)
}

/// Like [`query`] but skips the entry named `exclude` (leave-one-out).
pub fn query_excluding(index: &EmbeddingIndex, sig: &MotionSignature, k: usize, exclude: &str) -> Result<QueryResult> {
    ranked(index, sig, k, Some(exclude), Parallelism::default())
}

pub fn query_excluding_with(
    index: &EmbeddingIndex,
    sig: &MotionSignature,
    k: usize,
    exclude: &str,
    mode: Parallelism,
) -> Result<QueryResult> {
    ranked(index, sig, k, Some(exclude), mode)
}

pub fn save_index(path: impl AsRef<Path>, index: &EmbeddingIndex) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + index.len() * (16 + 4 * index.dim));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(index.len() as u32).to_le_bytes());
    for e in &index.entries {
        buf.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.id.as_bytes());
        let label = e.label.map_or(NO_LABEL, |l| l as i32);
        buf.extend_from_slice(&label.to_le_bytes());
        for v in e.signature.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let bytes = buf
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::Load("unexpected end of index payload".into()))?;
    *pos += 4;
    Ok(u32::from_le_bytes(bytes.try_into().unwrap()))
}

pub fn load_index(path: impl AsRef<Path>) -> Result<EmbeddingIndex> {
    let raw = fs::read(path)?;
    let body = crate::model::check_crc(&raw)?;
    if body.len() < 20 || &body[..8] != MAGIC {
        return Err(Error::Load("not an index file".into()));
    }
    let mut pos = 8;
    let version = read_u32(body, &mut pos)?;
    if version != INDEX_VERSION {
        return Err(Error::Load(format!("index format version {version}, expected {INDEX_VERSION}")));
    }
    let dim = read_u32(body, &mut pos)? as usize;
    let count = read_u32(body, &mut pos)? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = read_u32(body, &mut pos)? as usize;
        let id = body
            .get(pos..pos + len)
            .ok_or_else(|| Error::Load("unexpected end of index payload".into()))?;
        let id = String::from_utf8(id.to_vec()).map_err(|_| Error::Load("entry id is not UTF-8".into()))?;
        pos += len;
        let label = read_u32(body, &mut pos)? as i32;
        let label = match label {
            NO_LABEL => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Load(format!("negative label {l}"))),
        };
        let mut sig = Vec::with_capacity(dim);
        for _ in 0..dim {
            sig.push(f32::from_bits(read_u32(body, &mut pos)?));
        }
        entries.push(IndexEntry {
            id,
            signature: MotionSignature(sig),
            label,
        });
    }
    if pos != body.len() {
        return Err(Error::Load(format!("payload holds more than the {count} entries in the header")));
    }
    EmbeddingIndex::new(dim, entries).map_err(|e| Error::Load(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub index_size: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub per_query_ms: Vec<f64>,
}

/// Minimum number of timed queries; shorter query sets are cycled.
pub const MIN_TIMED_QUERIES: usize = 100;

/// Times `query(index, q, k)` for each query, one query at a time.
pub fn benchmark_query_latency(index: &EmbeddingIndex, queries: &[MotionSignature], k: usize) -> Result<LatencyStats> {
    if queries.is_empty() {
        return Err(Error::Argument("empty query set".into()));
    }
    if index.is_empty() {
        return Err(Error::Argument("cannot benchmark an empty index".into()));
    }
    let runs = queries.len().max(MIN_TIMED_QUERIES);
    let mut per_query_ms = Vec::with_capacity(runs);
    for i in 0..runs {
        let q = &queries[i % queries.len()];
        let start = Instant::now();
        let result = query(index, q, k)?;
        per_query_ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(result);
    }
    let mean_ms = per_query_ms.iter().sum::<f64>() / runs as f64;
    let mut sorted = per_query_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let p95_ms = sorted[((0.95 * runs as f64).ceil() as usize).clamp(1, runs) - 1];
    Ok(LatencyStats {
        index_size: index.len(),
        mean_ms,
        p95_ms,
        per_query_ms,
    })
}
