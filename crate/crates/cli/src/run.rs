//! Run directory bookkeeping: append-only outputs, partial-output markers
//! and per-command manifests.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct CommandManifest<'a> {
    command: &'a str,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    config: &'a str,
}

/// One command's view of the run directory.
pub struct RunDir {
    root: PathBuf,
    command: &'static str,
    force: bool,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Every regular file under `path` (or `path` itself), sorted.
fn files_under(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
            let p = entry.map_err(|e| CliError::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

impl RunDir {
    pub fn open(root: &Path, command: &'static str, force: bool) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            command,
            force,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn marker(&self) -> PathBuf {
        self.path(&format!("{}.partial", self.command))
    }

    fn manifest_path(&self) -> PathBuf {
        self.path(&format!("{}.manifest.json", self.command))
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Claims the named outputs. Existing ones are an error unless forced,
    /// in which case they are removed first.
    pub fn claim(&mut self, names: &[&str]) -> Result<Vec<PathBuf>, CliError> {
        let paths: Vec<PathBuf> = names.iter().map(|n| self.path(n)).collect();
        let manifest = self.manifest_path();
        let existing: Vec<&PathBuf> = paths.iter().chain([&manifest]).filter(|p| p.exists()).collect();
        if !existing.is_empty() {
            if !self.force {
                return Err(CliError::user(
                    "ArtifactExists",
                    format!(
                        "{} already exists; run directories are append-only (pass --force to replace)",
                        existing[0].display()
                    ),
                ));
            }
            for p in existing {
                let r = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
                r.map_err(|e| CliError::io(p, e))?;
            }
        }
        let listing: String = paths.iter().map(|p| format!("{}\n", p.display())).collect();
        let marker = self.marker();
        fs::write(&marker, listing).map_err(|e| CliError::io(&marker, e))?;
        self.outputs.extend(paths.iter().cloned());
        Ok(paths)
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<Vec<FileHash>, CliError> {
        let mut out = Vec::new();
        for p in paths {
            if !p.exists() {
                continue;
            }
            for f in files_under(p)? {
                let shown = f.strip_prefix(&self.root).unwrap_or(&f);
                out.push(FileHash {
                    path: shown.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_file(&f)?,
                });
            }
        }
        Ok(out)
    }

    /// Writes `<command>.manifest.json` and clears the partial marker.
    pub fn finish(self, config_toml: &str) -> Result<(), CliError> {
        let manifest = CommandManifest {
            command: self.command,
            inputs: self.hashes(&self.inputs)?,
            outputs: self.hashes(&self.outputs)?,
            config: config_toml,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.manifest_path();
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        let marker = self.marker();
        fs::remove_file(&marker).map_err(|e| CliError::io(&marker, e))?;
        Ok(())
    }
}
