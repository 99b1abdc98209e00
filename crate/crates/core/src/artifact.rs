//! Versioned JSON artifact files, content checksums and the pipeline
//! manifest that ties stage outputs to the inputs they were built from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::encoder::EncoderParams;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    payload: T,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes raw bytes, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `payload` wrapped in a `{kind, version, payload}` envelope and
/// returns the file checksum.
pub fn write_artifact<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<String> {
    let env = Envelope { kind: kind.to_string(), version: FORMAT_VERSION, payload };
    let bytes = serde_json::to_vec(&env)?;
    write_file(path, &bytes)?;
    Ok(sha256_bytes(&bytes))
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<T> =
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })?;
    if env.kind != kind {
        return Err(Error::Invalid(format!("{} holds a {} artifact, expected {kind}", path.display(), env.kind)));
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::Invalid(format!("{} has format version {}, expected {FORMAT_VERSION}", path.display(), env.version)));
    }
    Ok(env.payload)
}

/// Encoder parameters plus the vocabulary they were trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub vocab_fingerprint: String,
    pub param_checksum: String,
}

impl Checkpoint {
    pub fn new(params: EncoderParams, vocab: &Vocabulary) -> Self {
        let param_checksum = params.checksum();
        Checkpoint { params, vocab_fingerprint: vocab.fingerprint(), param_checksum }
    }

    /// Checks the stored checksum and the vocabulary match.
    pub fn verify(&self, vocab: &Vocabulary) -> Result<()> {
        let found = self.params.checksum();
        if found != self.param_checksum {
            return Err(Error::Checksum { artifact: "checkpoint parameters".into(), expected: self.param_checksum.clone(), found });
        }
        let fp = vocab.fingerprint();
        if fp != self.vocab_fingerprint {
            return Err(Error::Checksum { artifact: "vocabulary".into(), expected: self.vocab_fingerprint.clone(), found: fp });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
    /// Checksums of the upstream stages this output was computed from.
    pub inputs: BTreeMap<String, String>,
}

/// Stage outputs of one pipeline directory with their checksums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl PipelineManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        PipelineManifest { version: FORMAT_VERSION, config_hash: config_hash.into(), seed, stages: BTreeMap::new() }
    }

    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(Self::FILE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map(Some).map_err(|e| Error::Parse { path, line: e.line(), msg: e.to_string() })
    }

    /// Loads the manifest in `root`, or starts a new one. An existing
    /// manifest must have been created with the same config and seed.
    pub fn open(root: &Path, config_hash: &str, seed: u64) -> Result<Self> {
        match Self::load(root)? {
            Some(m) if m.config_hash != config_hash || m.seed != seed => Err(Error::Config(format!(
                "{} was produced with config {} and seed {}, now config {config_hash} and seed {seed}; use a fresh output directory",
                root.display(),
                short(&m.config_hash),
                m.seed
            ))),
            Some(m) => Ok(m),
            None => Ok(Self::new(config_hash, seed)),
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_file(&root.join(Self::FILE), &serde_json::to_vec_pretty(self)?)
    }

    /// Records `rel_path` as the output of `stage`, built from `inputs`.
    pub fn record(&mut self, root: &Path, stage: &str, rel_path: &Path, inputs: &[&str]) -> Result<String> {
        let sha = sha256_file(&root.join(rel_path))?;
        let mut ins = BTreeMap::new();
        for &i in inputs {
            let r = self.stages.get(i).ok_or_else(|| Error::MissingArtifact { stage: i.into(), path: root.into() })?;
            ins.insert(i.to_string(), r.sha256.clone());
        }
        self.stages.insert(stage.into(), StageRecord { path: rel_path.into(), sha256: sha.clone(), inputs: ins });
        Ok(sha)
    }

    /// Verifies `stage` and, transitively, everything it was built from:
    /// files exist, contents match their checksums, and every recorded
    /// input checksum is the current one. Returns the stage's file path.
    pub fn require(&self, root: &Path, stage: &str) -> Result<PathBuf> {
        let rec = self.stages.get(stage).ok_or_else(|| Error::MissingArtifact { stage: stage.into(), path: root.join(Self::FILE) })?;
        let path = root.join(&rec.path);
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: stage.into(), path });
        }
        let found = sha256_file(&path)?;
        if found != rec.sha256 {
            return Err(Error::Checksum { artifact: format!("{stage} ({})", path.display()), expected: rec.sha256.clone(), found });
        }
        for (input, sha) in &rec.inputs {
            self.require(root, input)?;
            let current = &self.stages[input].sha256;
            if current != sha {
                return Err(Error::Checksum {
                    artifact: format!("{input} as used by {stage} (stale; rerun {stage})"),
                    expected: sha.clone(),
                    found: current.clone(),
                });
            }
        }
        Ok(path)
    }

    /// True when `stage` verifies and was built from exactly the current
    /// checksums of `inputs`.
    pub fn is_fresh(&self, root: &Path, stage: &str, inputs: &[&str]) -> bool {
        let Some(rec) = self.stages.get(stage) else { return false };
        self.require(root, stage).is_ok()
            && rec.inputs.len() == inputs.len()
            && inputs.iter().all(|i| match (rec.inputs.get(*i), self.stages.get(*i)) {
                (Some(a), Some(b)) => *a == b.sha256,
                _ => false,
            })
    }
}

fn short(sha: &str) -> &str {
    &sha[..sha.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        let sha = write_artifact(&p, "numbers", &vec![1.5f64, 2.0]).unwrap();
        assert_eq!(sha, sha256_file(&p).unwrap());
        let back: Vec<f64> = read_artifact(&p, "numbers").unwrap();
        assert_eq!(back, vec![1.5, 2.0]);
        assert!(read_artifact::<Vec<f64>>(&p, "other").is_err());
        assert!(matches!(read_artifact::<Vec<f64>>(&dir.path().join("none"), "numbers"), Err(Error::Io { .. })));
    }

    #[test]
    fn manifest_detects_mutation_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mut m = PipelineManifest::new("cfg", 3);
        write_file(&root.join("a.txt"), b"one").unwrap();
        m.record(root, "a", Path::new("a.txt"), &[]).unwrap();
        write_file(&root.join("b.txt"), b"two").unwrap();
        m.record(root, "b", Path::new("b.txt"), &["a"]).unwrap();
        assert!(m.require(root, "b").is_ok());
        assert!(m.is_fresh(root, "b", &["a"]));
        assert!(!m.is_fresh(root, "b", &[]));

        // editing the upstream file breaks every dependent stage
        write_file(&root.join("a.txt"), b"uno").unwrap();
        assert!(matches!(m.require(root, "b"), Err(Error::Checksum { .. })));
        // re-recording the upstream leaves the downstream stale
        m.record(root, "a", Path::new("a.txt"), &[]).unwrap();
        assert!(matches!(m.require(root, "b"), Err(Error::Checksum { .. })));
        assert!(!m.is_fresh(root, "b", &["a"]));
        assert!(matches!(m.require(root, "c"), Err(Error::MissingArtifact { .. })));

        m.save(root).unwrap();
        assert_eq!(PipelineManifest::open(root, "cfg", 3).unwrap(), m);
        assert!(PipelineManifest::open(root, "cfg", 4).is_err());
        assert!(PipelineManifest::open(root, "other", 3).is_err());
    }
}
