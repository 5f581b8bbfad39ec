//! Run-directory layout, content hashes and per-stage manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use brainsbi_core::params::{Dimension, ScoreBin, Topic};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, StageSeeds};
use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    FitSummary,
    Train,
    Sample,
    Evaluate,
    CycleCheck,
    Pipeline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::FitSummary => "fit-summary",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
            Stage::CycleCheck => "cycle-check",
            Stage::Pipeline => "pipeline",
        }
    }
}

/// Where every artifact of one run lives.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train")
    }

    pub fn validation_data(&self) -> PathBuf {
        self.root.join("data").join("validation")
    }

    pub fn preprocessor(&self) -> PathBuf {
        self.root.join("preprocessor")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    /// Copy of the preprocessor stored with the network weights.
    pub fn checkpoint_preprocessor(&self) -> PathBuf {
        self.checkpoint().join("preprocessor")
    }

    pub fn training(&self) -> PathBuf {
        self.root.join("training")
    }

    pub fn posterior(&self) -> PathBuf {
        self.root.join("posterior")
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }

    pub fn cycle(&self) -> PathBuf {
        self.root.join("cycle")
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", stage.name()))
    }
}

/// Fixed vocabularies, echoed for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub dimensions: Vec<String>,
    pub topics: Vec<String>,
    pub bins: BTreeMap<String, (f64, f64)>,
}

impl Constants {
    pub fn current() -> Self {
        Constants {
            dimensions: Dimension::ALL.iter().map(|d| d.key().to_string()).collect(),
            topics: Topic::ALL.iter().map(|t| t.label().to_string()).collect(),
            bins: ScoreBin::ALL.iter().map(|b| (b.name().to_string(), b.range())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema_version: u32,
    pub command: Stage,
    pub tool_version: String,
    pub config: RunConfig,
    pub seeds: StageSeeds,
    pub constants: Constants,
    /// Hashes of the artifacts this stage consumed.
    pub inputs: BTreeMap<String, String>,
    /// Hashes of the artifacts this stage produced.
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn new(command: Stage, config: &RunConfig) -> Self {
        StageManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds: config.seeds(),
            constants: Constants::current(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn write(&self, layout: &Layout) -> CliResult<PathBuf> {
        let path = layout.manifest(self.command);
        let dir = path.parent().expect("manifest path has a parent");
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let manifest: StageManifest = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{} is not a stage manifest: {e}", path.display())))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "{}: unsupported manifest schema version {}",
                path.display(),
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 over every file below `dir`, in sorted relative-path order.
/// Each file contributes its relative path, its length and its bytes.
pub fn hash_dir(dir: &Path) -> CliResult<String> {
    if !dir.is_dir() {
        return Err(CliError::Dependency(format!("{} does not exist", dir.display())));
    }
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let name = rel.to_string_lossy().replace('\\', "/");
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Replaces `dir` with an empty directory so no earlier output survives.
pub fn fresh_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_hash_depends_on_names_and_contents_only() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for root in [a.path(), b.path()] {
            fs::create_dir_all(root.join("x")).unwrap();
            fs::write(root.join("x/one.bin"), [1u8, 2, 3]).unwrap();
            fs::write(root.join("two.txt"), "hello").unwrap();
        }
        assert_eq!(hash_dir(a.path()).unwrap(), hash_dir(b.path()).unwrap());
        fs::write(b.path().join("two.txt"), "hellO").unwrap();
        assert_ne!(hash_dir(a.path()).unwrap(), hash_dir(b.path()).unwrap());
        fs::rename(a.path().join("two.txt"), a.path().join("three.txt")).unwrap();
        fs::write(b.path().join("two.txt"), "hello").unwrap();
        assert_ne!(hash_dir(a.path()).unwrap(), hash_dir(b.path()).unwrap());
        assert!(matches!(hash_dir(&a.path().join("missing")), Err(CliError::Dependency(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let mut m = StageManifest::new(Stage::Train, &RunConfig::default());
        m.inputs.insert("train_dataset".into(), "abc".into());
        let path = m.write(&layout).unwrap();
        assert_eq!(StageManifest::read(&path).unwrap(), m);
        assert_eq!(m.constants.topics.len(), 10);
        assert_eq!(m.constants.bins.len(), 3);
    }
}
