//! Text formats for sequences, topologies, and dataset manifests.
//!
//! Sequence file:
//!
//! ```text
//! #skeleton v1 joints=<J> fps=<f> [label=<int>] [performer=<str>]
//! #missing <frame>:<joint> ...        (optional, may repeat)
//! x0 y0 z0 x1 y1 z1 ...               (one line per frame, 3*J reals)
//! ```
//!
//! Missing joints are written either as `nan nan nan` or as finite fill
//! values; in both cases they must be listed on a `#missing` line.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use super::{Frame, SkeletonSequence, SkeletonTopology};
use crate::error::{Error, Result};

fn header_fields<'a>(
    path: &Path,
    line_no: usize,
    rest: impl Iterator<Item = &'a str>,
) -> Result<Vec<(&'a str, &'a str)>> {
    rest.map(|tok| {
        tok.split_once('=')
            .ok_or_else(|| Error::parse(path, line_no, format!("expected key=value, got `{tok}`")))
    })
    .collect()
}

fn parse_num<T: FromStr>(path: &Path, line_no: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(path, line_no, format!("bad value `{value}` for {key}")))
}

pub fn load_sequence(path: impl AsRef<Path>, topology: &Arc<SkeletonTopology>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_sequence(&text, path, id, topology)
}

/// Parses sequence text; `origin` is only used in error messages.
pub fn parse_sequence(
    text: &str,
    origin: &Path,
    id: String,
    topology: &Arc<SkeletonTopology>,
) -> Result<SkeletonSequence> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (header_no, header) = lines
        .by_ref()
        .find(|(_, l)| !l.is_empty())
        .ok_or_else(|| Error::parse(origin, 1, "empty file"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("#skeleton") || toks.next() != Some("v1") {
        return Err(Error::parse(origin, header_no, "expected `#skeleton v1` header"));
    }
    let mut joints = None;
    let mut fps = None;
    let mut label = None;
    let mut performer = None;
    for (key, value) in header_fields(origin, header_no, toks)? {
        match key {
            "joints" => joints = Some(parse_num::<usize>(origin, header_no, key, value)?),
            "fps" => fps = Some(parse_num::<f64>(origin, header_no, key, value)?),
            "label" => label = Some(parse_num::<usize>(origin, header_no, key, value)?),
            "performer" => performer = Some(value.to_string()),
            _ => return Err(Error::parse(origin, header_no, format!("unknown header key `{key}`"))),
        }
    }
    let joints = joints.ok_or_else(|| Error::parse(origin, header_no, "header lacks joints="))?;
    let fps = fps.ok_or_else(|| Error::parse(origin, header_no, "header lacks fps="))?;
    let j = topology.joint_count();
    if joints != j {
        return Err(Error::Validation(format!(
            "{}: header declares {joints} joints, topology has {j}",
            origin.display()
        )));
    }

    let mut frames = Vec::new();
    let mut frame_lines = Vec::new();
    let mut flagged: Vec<(usize, usize, usize)> = Vec::new();
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#missing") {
            for tok in rest.split_whitespace() {
                let (f, k) = tok
                    .split_once(':')
                    .ok_or_else(|| Error::parse(origin, no, format!("expected frame:joint, got `{tok}`")))?;
                flagged.push((
                    parse_num(origin, no, "frame", f)?,
                    parse_num(origin, no, "joint", k)?,
                    no,
                ));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(origin, no, format!("bad coordinate `{tok}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() % 3 != 0 {
            return Err(Error::parse(
                origin,
                no,
                format!("{} values is not a whole number of joints", values.len()),
            ));
        }
        if values.len() != 3 * j {
            return Err(Error::Validation(format!(
                "{}:{no}: frame has {} joints, topology has {j}",
                origin.display(),
                values.len() / 3
            )));
        }
        frames.push(Frame::new(
            values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        ));
        frame_lines.push(no);
    }

    let n = frames.len();
    let mut mask = vec![false; n * j];
    for (f, k, no) in flagged {
        if f >= n || k >= j {
            return Err(Error::parse(origin, no, format!("missing entry {f}:{k} out of range")));
        }
        mask[f * j + k] = true;
    }
    for (t, frame) in frames.iter().enumerate() {
        for (k, p) in frame.joints.iter().enumerate() {
            if !mask[t * j + k] && !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!(
                    "{}:{}: non-finite coordinate for joint {k} not flagged missing",
                    origin.display(),
                    frame_lines[t]
                )));
            }
        }
    }
    fill_missing(&mut frames, &mask, topology)?;

    let seq = SkeletonSequence::new(id, frames, Arc::clone(topology), fps)?
        .with_label(label)
        .with_performer(performer)
        .with_missing_mask(mask)?;
    Ok(seq)
}

/// Replaces non-finite masked coordinates with the joint's last observed
/// value, or the frame's root position when nothing was observed yet.
/// Finite masked values are kept as written.
pub(crate) fn fill_missing(frames: &mut [Frame], mask: &[bool], topology: &SkeletonTopology) -> Result<()> {
    let j = topology.joint_count();
    let root = topology.root();
    let mut last: Vec<Option<[f64; 3]>> = vec![None; j];
    for (t, frame) in frames.iter_mut().enumerate() {
        let finite = |p: &[f64; 3]| p.iter().all(|v| v.is_finite());
        if mask[t * j + root] && !finite(&frame.joints[root]) {
            frame.joints[root] = last[root].ok_or_else(|| {
                Error::Validation(format!("root joint missing at frame {t} with no earlier observation"))
            })?;
        }
        let root_pos = frame.joints[root];
        for k in 0..j {
            if mask[t * j + k] {
                if !finite(&frame.joints[k]) {
                    frame.joints[k] = last[k].unwrap_or(root_pos);
                }
            } else {
                last[k] = Some(frame.joints[k]);
            }
        }
        // carry fills forward so a joint missing everywhere stays put
        for k in 0..j {
            if mask[t * j + k] && last[k].is_none() {
                last[k] = Some(frame.joints[k]);
            }
        }
    }
    Ok(())
}

pub fn save_sequence(path: impl AsRef<Path>, seq: &SkeletonSequence) -> Result<()> {
    let mut out = String::new();
    write!(out, "#skeleton v1 joints={} fps={}", seq.joint_count(), seq.fps()).unwrap();
    if let Some(label) = seq.class_label {
        write!(out, " label={label}").unwrap();
    }
    if let Some(p) = &seq.performer_id {
        write!(out, " performer={p}").unwrap();
    }
    out.push('\n');
    if let Some(mask) = seq.missing_mask() {
        let j = seq.joint_count();
        let mut line = String::from("#missing");
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            write!(line, " {}:{}", i / j, i % j).unwrap();
            if line.len() > 4000 {
                out.push_str(&line);
                out.push('\n');
                line = String::from("#missing");
            }
        }
        if line.len() > "#missing".len() {
            out.push_str(&line);
            out.push('\n');
        }
    }
    for frame in seq.frames() {
        let mut first = true;
        for p in &frame.joints {
            for v in p {
                if !first {
                    out.push(' ');
                }
                first = false;
                // Display for f64 is the shortest string that round-trips
                write!(out, "{v}").unwrap();
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_topology(path: impl AsRef<Path>) -> Result<SkeletonTopology> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (no, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty topology file"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("#topology") || toks.next() != Some("v1") {
        return Err(Error::parse(path, no, "expected `#topology v1` header"));
    }
    let mut joints = None;
    let mut root = None;
    for (key, value) in header_fields(path, no, toks)? {
        match key {
            "joints" => joints = Some(parse_num::<usize>(path, no, key, value)?),
            "root" => root = Some(parse_num::<usize>(path, no, key, value)?),
            _ => return Err(Error::parse(path, no, format!("unknown header key `{key}`"))),
        }
    }
    let joints = joints.ok_or_else(|| Error::parse(path, no, "header lacks joints="))?;
    let root = root.ok_or_else(|| Error::parse(path, no, "header lacks root="))?;
    let mut edges = Vec::new();
    for (no, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(p), Some(c), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::parse(path, no, "expected `parent child`"));
        };
        edges.push((parse_num(path, no, "parent", p)?, parse_num(path, no, "child", c)?));
    }
    SkeletonTopology::new(joints, edges, root)
}

pub fn save_topology(path: impl AsRef<Path>, topology: &SkeletonTopology) -> Result<()> {
    let mut out = format!(
        "#topology v1 joints={} root={}\n",
        topology.joint_count(),
        topology.root()
    );
    for (p, c) in topology.bone_edges() {
        writeln!(out, "{p} {c}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Argument(format!("unknown split `{s}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub id: String,
    pub label: Option<usize>,
    pub performer: Option<String>,
    pub split: Split,
    /// Augmentation provenance (`orig`, `fast`, `slow`, `noisy`), when recorded.
    pub provenance: Option<String>,
}

/// Tab-separated `path id label performer split [provenance]`, one entry per
/// line. `-` stands for an absent label or performer. Relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id `{}` in manifest", e.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn split(&self, split: Split) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.entries.iter().all(|e| e.label.is_some())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every entry; manifest id, label, and performer override the
    /// sequence file header.
    pub fn load_sequences(&self, topology: &Arc<SkeletonTopology>) -> Result<Vec<SkeletonSequence>> {
        self.entries.iter().map(|e| self.load_entry(e, topology)).collect()
    }

    pub fn load_entry(&self, entry: &ManifestEntry, topology: &Arc<SkeletonTopology>) -> Result<SkeletonSequence> {
        let mut seq = load_sequence(self.resolve(entry), topology)?;
        seq.id = entry.id.clone();
        if entry.label.is_some() {
            seq.class_label = entry.label;
        }
        if entry.performer.is_some() {
            seq.performer_id = entry.performer.clone();
        }
        Ok(seq)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 && cols.len() != 6 {
            return Err(Error::parse(
                path,
                no,
                format!("expected 5 or 6 tab-separated columns, got {}", cols.len()),
            ));
        }
        let label = match cols[2] {
            "-" | "" => None,
            v => Some(parse_num(path, no, "label", v)?),
        };
        let performer = match cols[3] {
            "-" | "" => None,
            v => Some(v.to_string()),
        };
        let split = cols[4]
            .parse()
            .map_err(|_| Error::parse(path, no, format!("split must be train or test, got `{}`", cols[4])))?;
        entries.push(ManifestEntry {
            path: PathBuf::from(cols[0]),
            id: cols[1].to_string(),
            label,
            performer,
            split,
            provenance: cols.get(5).map(|s| s.to_string()),
        });
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(entries, base)
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let mut out = String::new();
    for e in &manifest.entries {
        let label = e.label.map_or("-".to_string(), |l| l.to_string());
        write!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.path.display(),
            e.id,
            label,
            e.performer.as_deref().unwrap_or("-"),
            e.split
        )
        .unwrap();
        if let Some(p) = &e.provenance {
            write!(out, "\t{p}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
