use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
/// Wall-clock record; deliberately not hashed.
pub const TIMING: &str = "timing.json";

/// Collects the files of one run inside its working directory.
#[derive(Debug)]
pub struct ArtifactSink {
    root: PathBuf,
    files: Vec<String>,
}

impl ArtifactSink {
    pub fn new(root: PathBuf) -> Self {
        ArtifactSink { root, files: Vec::new() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` (a `/`-separated path) and records it.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        if rel == MANIFEST || rel == TIMING || rel.starts_with('/') || rel.split('/').any(|p| p == "..") {
            return Err(Error::invalid(format!("reserved or unsafe artifact path {rel:?}")));
        }
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let value = serde_json::to_value(value)?;
        let text = serde_json::to_string_pretty(&value)? + "\n";
        self.write(rel, text.as_bytes())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub root_seed: u64,
    pub streams: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

pub fn build_manifest(root: &Path, files: &[String], root_seed: u64) -> Result<Manifest> {
    let mut sorted: Vec<&String> = files.iter().collect();
    sorted.sort();
    let files = sorted
        .into_iter()
        .map(|rel| {
            let (sha256, bytes) = sha256_file(&root.join(rel))?;
            Ok(ManifestEntry {
                path: rel.clone(),
                sha256,
                bytes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest {
        root_seed,
        streams: crate::rng::streams::ALL.iter().map(|s| s.to_string()).collect(),
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub checked: usize,
    /// Files whose digest or size differs, or that are missing.
    pub mismatches: Vec<String>,
    /// Files on disk not listed in the manifest.
    pub unlisted: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty() && self.unlisted.is_empty()
    }
}

fn walk(dir: &Path, prefix: &str, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name().to_string_lossy().into_owned();
        let rel = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
        if entry.path().is_dir() {
            walk(&entry.path(), &rel, out)?;
        } else {
            out.push(rel);
        }
    }
    Ok(())
}

/// Recomputes every digest in `dir/manifest.json`.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut mismatches = Vec::new();
    let listed: BTreeMap<&str, &ManifestEntry> = manifest.files.iter().map(|e| (e.path.as_str(), e)).collect();
    for entry in &manifest.files {
        match sha256_file(&dir.join(&entry.path)) {
            Ok((digest, bytes)) if digest == entry.sha256 && bytes == entry.bytes => {}
            _ => mismatches.push(entry.path.clone()),
        }
    }
    let mut on_disk = Vec::new();
    walk(dir, "", &mut on_disk)?;
    let unlisted = on_disk
        .into_iter()
        .filter(|f| f != MANIFEST && f != TIMING && !listed.contains_key(f.as_str()))
        .collect();
    Ok(VerifyReport {
        checked: manifest.files.len(),
        mismatches,
        unlisted,
    })
}

/// First free `base`, `base-2`, `base-3`, ... under `parent`.
pub fn fresh_dir(parent: &Path, base: &str) -> PathBuf {
    let first = parent.join(base);
    if !first.exists() {
        return first;
    }
    (2..)
        .map(|i| parent.join(format!("{base}-{i}")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}
