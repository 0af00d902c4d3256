//! Retrieval metrics and report files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::index::{query_excluding_with, query_with, EmbeddingIndex, QueryResult};
use crate::model::{encode_sequences, EncoderParams, MotionSignature};
use crate::motion_data::{Frame, SkeletonSequence};
use crate::par::{self, Parallelism};

fn frame_cost(a: &Frame, b: &Frame) -> f64 {
    let j = a.joints.len();
    let sum: f64 = a
        .joints
        .iter()
        .zip(&b.joints)
        .map(|(p, q)| {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    sum / j as f64
}

/// Optimal alignment of two frame lists: the minimum total cost, and among
/// equal-cost paths the shortest. Returns `(total_cost_m, path_length)`.
pub fn dtw_align(a: &[Frame], b: &[Frame], band: Option<usize>) -> Result<(f64, usize)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("DTW needs at least one frame on each side".into()));
    }
    let ja = a[0].joints.len();
    if let Some(f) = a.iter().chain(b).find(|f| f.joints.len() != ja) {
        return Err(Error::Argument(format!(
            "joint count mismatch: {ja} vs {}",
            f.joints.len()
        )));
    }
    if band == Some(0) {
        return Err(Error::Argument("band width must be at least 1".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let slope = if nb > 1 { (na - 1) as f64 / (nb - 1) as f64 } else { 0.0 };
    let allowed = |i: usize, j: usize| match band {
        None => true,
        Some(w) => (i as f64 - j as f64 * slope).abs() <= w as f64,
    };
    const UNREACHED: (f64, usize) = (f64::INFINITY, usize::MAX);
    let better = |x: (f64, usize), y: (f64, usize)| if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x };
    let mut prev = vec![UNREACHED; nb];
    let mut cur = vec![UNREACHED; nb];
    for i in 0..na {
        for j in 0..nb {
            if !allowed(i, j) {
                cur[j] = UNREACHED;
                continue;
            }
            let c = frame_cost(&a[i], &b[j]);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut m = UNREACHED;
                if i > 0 {
                    m = better(m, prev[j]);
                }
                if j > 0 {
                    m = better(m, cur[j - 1]);
                }
                if i > 0 && j > 0 {
                    m = better(m, prev[j - 1]);
                }
                m
            };
            cur[j] = if best.0.is_finite() { (best.0 + c, best.1 + 1) } else { UNREACHED };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let end = prev[nb - 1];
    if !end.0.is_finite() {
        return Err(Error::Argument("band too narrow to connect the sequence ends".into()));
    }
    Ok(end)
}

/// Mean per-frame joint error in millimetres after DTW alignment of two
/// frame lists (coordinates in metres).
pub fn dtw_frames(a: &[Frame], b: &[Frame], band: Option<usize>) -> Result<f64> {
    let (cost, len) = dtw_align(a, b, band)?;
    Ok(cost / len as f64 * 1000.0)
}

/// [`dtw_frames`] over two sequences without a band.
pub fn dtw_distance(a: &SkeletonSequence, b: &SkeletonSequence) -> Result<f64> {
    dtw_frames(a.frames(), b.frames(), None)
}

pub fn dtw_distance_banded(a: &SkeletonSequence, b: &SkeletonSequence, band: Option<usize>) -> Result<f64> {
    dtw_frames(a.frames(), b.frames(), band)
}

fn require_labels(index: &EmbeddingIndex, queries: &[SkeletonSequence]) -> Result<()> {
    if let Some(q) = queries.iter().find(|q| q.class_label.is_none()) {
        return Err(Error::Metric(format!("query `{}` has no class label", q.id)));
    }
    if let Some(e) = index.entries().iter().find(|e| e.label.is_none()) {
        return Err(Error::Metric(format!("index entry `{}` has no class label", e.id)));
    }
    Ok(())
}

/// A query never retrieves its own id, so queries drawn from the indexed set
/// are scored leave-one-out.
fn run_queries(
    index: &EmbeddingIndex,
    sigs: &[MotionSignature],
    queries: &[SkeletonSequence],
    k: usize,
    mode: Parallelism,
) -> Result<Vec<QueryResult>> {
    par::map_range(mode, queries.len(), |i| {
        let id = &queries[i].id;
        if index.get(id).is_some() {
            query_excluding_with(index, &sigs[i], k, id, Parallelism::Sequential)
        } else {
            query_with(index, &sigs[i], k, Parallelism::Sequential)
        }
    })
    .into_iter()
    .collect()
}

fn same_class_fraction(result: &QueryResult, label: Option<usize>, n: usize) -> f64 {
    let top = &result.neighbors[..n.min(result.len())];
    if top.is_empty() {
        return 0.0;
    }
    top.iter().filter(|x| x.label == label).count() as f64 / top.len() as f64
}

/// Mean over queries of the same-class share of the `n` nearest items.
pub fn topn_accuracy(index: &EmbeddingIndex, params: &EncoderParams, queries: &[SkeletonSequence], n: usize) -> Result<f64> {
    topn_accuracy_with(index, params, queries, n, Parallelism::default())
}

pub fn topn_accuracy_with(
    index: &EmbeddingIndex,
    params: &EncoderParams,
    queries: &[SkeletonSequence],
    n: usize,
    mode: Parallelism,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    if queries.is_empty() {
        return Err(Error::Metric("empty query set".into()));
    }
    require_labels(index, queries)?;
    let sigs = encode_sequences(params, queries, mode)?;
    let results = run_queries(index, &sigs, queries, n, mode)?;
    let total: f64 = results
        .iter()
        .zip(queries)
        .map(|(r, q)| same_class_fraction(r, q.class_label, n))
        .sum();
    Ok(total / queries.len() as f64)
}

/// Ordered `(recall, precision)` points, one per rank cutoff.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
}

impl PrCurve {
    /// Trapezoidal area under the curve, anchored at recall 0 with the first
    /// precision.
    pub fn area(&self) -> f64 {
        let mut area = 0.0;
        let mut last = match self.points.first() {
            Some(&(_, p)) => (0.0, p),
            None => return 0.0,
        };
        for &(r, p) in &self.points {
            area += (r - last.0) * (p + last.1) / 2.0;
            last = (r, p);
        }
        area
    }
}

/// Micro-averaged precision and recall at every rank cutoff, from
/// per-query relevance lists (true = same class) and relevant-item counts.
pub fn pr_curve_from_relevance(relevance: &[Vec<bool>], relevant_totals: &[usize]) -> Result<PrCurve> {
    let total_relevant: usize = relevant_totals.iter().sum();
    if total_relevant == 0 {
        return Err(Error::Metric("no query has a relevant item in the index".into()));
    }
    let depth = relevance.iter().map(Vec::len).max().unwrap_or(0);
    let mut hits = vec![0usize; relevance.len()];
    let mut points = Vec::with_capacity(depth);
    for c in 0..depth {
        let mut retrieved = 0usize;
        for (q, rel) in relevance.iter().enumerate() {
            if c < rel.len() && rel[c] {
                hits[q] += 1;
            }
            retrieved += (c + 1).min(rel.len());
        }
        let tp: usize = hits.iter().sum();
        points.push((tp as f64 / total_relevant as f64, tp as f64 / retrieved as f64));
    }
    Ok(PrCurve { points })
}

pub fn pr_curve(index: &EmbeddingIndex, params: &EncoderParams, queries: &[SkeletonSequence]) -> Result<PrCurve> {
    pr_curve_with(index, params, queries, Parallelism::default())
}

pub fn pr_curve_with(index: &EmbeddingIndex, params: &EncoderParams, queries: &[SkeletonSequence], mode: Parallelism) -> Result<PrCurve> {
    if queries.is_empty() {
        return Err(Error::Metric("empty query set".into()));
    }
    require_labels(index, queries)?;
    let sigs = encode_sequences(params, queries, mode)?;
    let results = run_queries(index, &sigs, queries, index.len().max(1), mode)?;
    let relevance: Vec<Vec<bool>> = results
        .iter()
        .zip(queries)
        .map(|(r, q)| r.neighbors.iter().map(|n| n.label == q.class_label).collect())
        .collect();
    let totals: Vec<usize> = relevance.iter().map(|r| r.iter().filter(|&&x| x).count()).collect();
    pr_curve_from_relevance(&relevance, &totals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRow {
    pub query_id: String,
    pub retrieved_ids: Vec<String>,
    pub top1_correct: bool,
    pub topn_fraction: f64,
    /// Mean DTW error to the `dtw_k` nearest items, when their sequences
    /// were available.
    pub mean_dtw_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalReport {
    pub n: usize,
    pub rows: Vec<QueryRow>,
}

impl RetrievalReport {
    pub fn top1(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| if r.top1_correct { 1.0 } else { 0.0 }))
    }

    pub fn topn(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.topn_fraction))
    }

    pub fn mean_dtw_mm(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.mean_dtw_mm))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub n: usize,
    pub dtw_k: usize,
    pub dtw_band: Option<usize>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            n: 10,
            dtw_k: 10,
            dtw_band: None,
        }
    }
}

/// Per-query retrieval rows. `pool` supplies the sequences behind index ids
/// for the DTW column; ids missing from it are skipped.
pub fn evaluate_retrieval(
    index: &EmbeddingIndex,
    params: &EncoderParams,
    queries: &[SkeletonSequence],
    pool: &[SkeletonSequence],
    options: ReportOptions,
    mode: Parallelism,
) -> Result<RetrievalReport> {
    if options.n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    if queries.is_empty() {
        return Ok(RetrievalReport {
            n: options.n,
            rows: Vec::new(),
        });
    }
    require_labels(index, queries)?;
    let sigs = encode_sequences(params, queries, mode)?;
    let k = options.n.max(options.dtw_k);
    let results = run_queries(index, &sigs, queries, k, mode)?;
    let by_id: HashMap<&str, &SkeletonSequence> = pool.iter().map(|s| (s.id.as_str(), s)).collect();
    let rows = par::map_range(mode, queries.len(), |i| -> Result<QueryRow> {
        let q = &queries[i];
        let r = &results[i];
        let dtw: Vec<f64> = r
            .neighbors
            .iter()
            .take(options.dtw_k)
            .filter_map(|n| by_id.get(n.id.as_str()))
            .map(|s| dtw_distance_banded(q, s, options.dtw_band))
            .collect::<Result<_>>()?;
        Ok(QueryRow {
            query_id: q.id.clone(),
            retrieved_ids: r.neighbors.iter().take(options.n).map(|n| n.id.clone()).collect(),
            top1_correct: r.neighbors.first().is_some_and(|n| n.label == q.class_label),
            topn_fraction: same_class_fraction(r, q.class_label, options.n),
            mean_dtw_mm: mean(dtw.into_iter()),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport { n: options.n, rows })
}

/// Six significant digits; exponent form outside `[1e-5, 1e6)`.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci.split_once('e').map_or(0, |(_, e)| e.parse().unwrap_or(0));
    if (-5..6).contains(&exp) {
        let rounded: f64 = sci.parse().unwrap_or(x);
        format!("{:.*}", (5 - exp) as usize, rounded)
    } else {
        sci
    }
}

fn opt6(x: Option<f64>) -> String {
    x.map_or_else(String::new, sig6)
}

/// Writes `report.csv`, `pr_curve.csv` and `summary.txt` into `dir`.
pub fn emit_report(report: &RetrievalReport, pr: Option<&PrCurve>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut csv = String::from("query_id,retrieved_ids,top1_correct,topn_fraction,mean_dtw_mm\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.query_id,
            r.retrieved_ids.join(";"),
            r.top1_correct as u8,
            sig6(r.topn_fraction),
            opt6(r.mean_dtw_mm)
        ));
    }
    fs::write(dir.join("report.csv"), csv)?;

    let mut pr_csv = String::from("recall,precision\n");
    for &(r, p) in pr.map_or(&[][..], |c| &c.points) {
        pr_csv.push_str(&format!("{},{}\n", sig6(r), sig6(p)));
    }
    fs::write(dir.join("pr_curve.csv"), pr_csv)?;

    let summary = format!(
        "queries: {}\ntop1: {}\ntop{}: {}\nmean_dtw_mm: {}\npr_auc: {}\n",
        report.rows.len(),
        opt6(report.top1()),
        report.n,
        opt6(report.topn()),
        opt6(report.mean_dtw_mm()),
        opt6(pr.filter(|c| !c.points.is_empty()).map(PrCurve::area)),
    );
    fs::write(dir.join("summary.txt"), summary)?;
    Ok(())
}
