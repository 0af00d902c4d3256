//! Pieces shared by every command: seed resolution, input checks, and the
//! `run.lock` snapshot.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use motion_signature::motion_data::{load_manifest, load_topology, DatasetManifest, SkeletonTopology};
use motion_signature::par::Parallelism;
use motion_signature::{Error, Result};

use crate::DatasetArgs;

pub const SEED_VAR: &str = "DEEPHUMS_SEED";

pub struct Context {
    pub mode: Parallelism,
    pub threads: Option<usize>,
}

/// `--seed`, else the environment default, else 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_VAR} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

/// Missing inputs are usage errors rather than I/O failures.
pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Argument(format!("{what} `{}` does not exist", path.display())))
    }
}

pub fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "`{}` already exists; pass --force to overwrite it",
            path.display()
        )));
    }
    Ok(())
}

pub fn load_dataset(args: &DatasetArgs) -> Result<(DatasetManifest, Arc<SkeletonTopology>)> {
    require_file(&args.topology, "topology file")?;
    require_file(&args.manifest, "manifest")?;
    let topology = Arc::new(load_topology(&args.topology)?);
    Ok((load_manifest(&args.manifest)?, topology))
}

/// The resolved settings of one run, written as `key = value` lines.
pub struct RunLock {
    lines: Vec<(String, String)>,
}

impl RunLock {
    pub fn new(ctx: &Context, command: &str) -> Self {
        let mut lock = Self { lines: Vec::new() };
        lock.set("command", command);
        lock.set("mosig_version", env!("CARGO_PKG_VERSION"));
        lock.set("threads", ctx.threads.map_or("default".into(), |t| t.to_string()));
        lock
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn path(&mut self, key: &str, value: &Path) {
        self.set(key, value.display());
    }

    pub fn extend(&mut self, pairs: impl IntoIterator<Item = (String, String)>) {
        self.lines.extend(pairs);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.lines {
            text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(path, text)?;
        Ok(())
    }
}

/// Lock file for a run whose primary output is the file `out`.
pub fn lock_for_file(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.lock");
    out.with_file_name(name)
}

/// Splits `key=value` override flags.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    text.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Argument(format!("--set expects key=value, got `{text}`")))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}
