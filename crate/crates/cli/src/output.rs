//! Staged output: nothing reaches its final path until every artifact of a
//! run has been produced.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fnv::FnvHasher;
use serde::Serialize;
use std::hash::Hasher;
use tempfile::NamedTempFile;

/// Files produced by one command, committed together at the end.
#[derive(Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    pub fn add_json<T: Serialize>(&mut self, path: impl Into<PathBuf>, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(path, bytes);
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    /// Writes every file through a temporary sibling and renames it into place.
    pub fn commit(self) -> Result<()> {
        let mut pending = Vec::with_capacity(self.files.len());
        for (path, bytes) in &self.files {
            let dir = parent_dir(path);
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut tmp = NamedTempFile::new_in(dir).with_context(|| format!("staging {}", path.display()))?;
            tmp.write_all(bytes)?;
            tmp.as_file().sync_all()?;
            pending.push((tmp, path));
        }
        for (tmp, path) in pending {
            tmp.persist(path)
                .map_err(|e| e.error)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    /// FNV-1a 64 of the file contents, hex.
    pub fnv64: String,
    pub bytes: u64,
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub inputs: Vec<InputRecord>,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            seed: None,
            config: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let mut h = FnvHasher::default();
        h.write(&bytes);
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            fnv64: format!("{:016x}", h.finish()),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn config(&mut self, entries: Vec<(&'static str, String)>) {
        self.config
            .extend(entries.into_iter().map(|(k, v)| (k.to_string(), v)));
    }

    /// Records the staged outputs by file name (relative to `base`) and
    /// stages the manifest itself at `path`.
    pub fn stage(mut self, staged: &mut Staged, base: &Path, path: PathBuf) -> Result<()> {
        self.outputs = staged
            .paths()
            .map(|p| p.strip_prefix(base).unwrap_or(p).display().to_string())
            .collect();
        staged.add_json(path, &self)
    }
}

/// Manifest path for a single-file output: `<name>.manifest.json` beside it.
pub fn manifest_beside(output: &Path) -> PathBuf {
    let name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    parent_dir(output).join(format!("{name}.manifest.json"))
}
