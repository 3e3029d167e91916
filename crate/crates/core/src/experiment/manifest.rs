use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// What one pipeline stage declared, read and wrote. Paths are relative to
/// the artifact directory with `/` separators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub declared_inputs: Vec<String>,
    pub reads: Vec<String>,
    pub outputs: Vec<String>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    /// SHA-256 of every produced file.
    pub files: BTreeMap<String, String>,
    pub complete: bool,
}

impl Manifest {
    pub(crate) fn new(config: &ExperimentConfig, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            format: "cfsim-manifest".into(),
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            seeds,
            stages: Vec::new(),
            files: BTreeMap::new(),
            complete: false,
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let m: Manifest = read_json(dir.as_ref().join(MANIFEST_FILE))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub(crate) fn save(&self, dir: &Path) -> Result<()> {
        write_json(self, dir.join(MANIFEST_FILE))
    }
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// File access for one stage. Reads of undeclared paths are refused.
pub(crate) struct StageIo<'a> {
    root: &'a Path,
    pub(crate) record: StageRecord,
}

impl<'a> StageIo<'a> {
    pub(crate) fn new(root: &'a Path, name: impl Into<String>, declared: &[String]) -> Self {
        Self {
            root,
            record: StageRecord {
                name: name.into(),
                declared_inputs: declared.to_vec(),
                reads: Vec::new(),
                outputs: Vec::new(),
                complete: false,
                error: None,
            },
        }
    }

    /// Path of a declared input, recording the read.
    pub(crate) fn input(&mut self, rel: &str) -> Result<PathBuf> {
        if !self.record.declared_inputs.iter().any(|d| d == rel) {
            return Err(Error::Contract(format!(
                "stage `{}` read undeclared input `{rel}`",
                self.record.name
            )));
        }
        if !self.record.reads.iter().any(|r| r == rel) {
            self.record.reads.push(rel.to_string());
        }
        Ok(self.root.join(rel))
    }

    /// Path of an output, recording it for hashing.
    pub(crate) fn output(&mut self, rel: &str) -> PathBuf {
        self.record.outputs.push(rel.to_string());
        self.root.join(rel)
    }
}

/// Result of re-hashing an artifact directory against its manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub checked: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
    /// Files on disk that the manifest does not list.
    pub unlisted: Vec<String>,
    /// `stage: path` reads outside the stage's declared inputs.
    pub undeclared_reads: Vec<String>,
    pub complete: bool,
}

impl Verification {
    pub fn is_ok(&self) -> bool {
        self.complete
            && self.mismatched.is_empty()
            && self.missing.is_empty()
            && self.unlisted.is_empty()
            && self.undeclared_reads.is_empty()
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

pub fn verify_manifest(dir: impl AsRef<Path>) -> Result<Verification> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    let mut v = Verification {
        complete: manifest.complete,
        ..Default::default()
    };
    for (rel, expected) in &manifest.files {
        let path = dir.join(rel);
        if !path.is_file() {
            v.missing.push(rel.clone());
            continue;
        }
        v.checked += 1;
        if &hash_file(&path)? != expected {
            v.mismatched.push(rel.clone());
        }
    }
    let mut on_disk = Vec::new();
    walk(dir, dir, &mut on_disk)?;
    on_disk.sort();
    v.unlisted = on_disk
        .into_iter()
        .filter(|f| f != MANIFEST_FILE && !manifest.files.contains_key(f))
        .collect();
    for stage in &manifest.stages {
        for r in &stage.reads {
            if !stage.declared_inputs.contains(r) {
                v.undeclared_reads.push(format!("{}: {r}", stage.name));
            }
        }
    }
    Ok(v)
}
