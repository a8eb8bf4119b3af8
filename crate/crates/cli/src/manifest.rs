//! Per-run manifests: arguments, config hash and content hashes of every input
//! and output.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sofa_core::io::{read_json, write_json_file, FORMAT_VERSION};

use crate::config::RunConfig;

pub const RUN_MANIFEST: &str = "run.json";

/// Content hash of a file: SHA-256 over `blob <len>\0<bytes>`, as git hashes
/// blobs.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Content hash of a file or directory. A directory hashes its sorted
/// `(relative path, blob hash)` listing; run manifests inside it are skipped so
/// a directory can be hashed before and after its own manifest is written.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        return Ok(blob_hash(&bytes));
    }
    let mut entries = Vec::new();
    walk(path, path, &mut entries)?;
    entries.sort();
    let mut h = Sha256::new();
    for (rel, digest) in entries {
        h.update(format!("{digest} {rel}\n").as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    let listing = std::fs::read_dir(dir).with_context(|| format!("hashing {}", dir.display()))?;
    for entry in listing {
        let path = entry?.path();
        let rel = path
            .strip_prefix(root)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        if path.is_dir() {
            walk(root, &path, out)?;
        } else if rel != RUN_MANIFEST {
            out.push((rel, blob_hash(&std::fs::read(&path)?)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub config_hash: String,
    pub config: RunConfig,
    /// Argument name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Path relative to the output directory to content hash.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config: &RunConfig) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: args.to_vec(),
            config_hash: config.hash()?,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_string(), content_hash(path)?);
        Ok(())
    }

    /// Hashes each top-level entry of `out_dir` and writes the manifest there.
    pub fn finish(mut self, out_dir: &Path) -> Result<Self> {
        for entry in std::fs::read_dir(out_dir)? {
            let path = entry?.path();
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if name != RUN_MANIFEST {
                self.outputs.insert(name, content_hash(&path)?);
            }
        }
        write_json_file(&out_dir.join(RUN_MANIFEST), &self)?;
        Ok(self)
    }

    pub fn read(out_dir: &Path) -> Result<Self> {
        Ok(read_json(&out_dir.join(RUN_MANIFEST))?)
    }
}
