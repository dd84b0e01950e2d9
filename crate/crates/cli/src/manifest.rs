//! Run directory layout, per-stage manifests and the hash chain between
//! them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use mrgr_core::checkpoint::{file_hash, write_atomic};
use mrgr_core::eval::BaselineKind;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    PrepareData,
    TrainBackbone,
    BuildMemory,
    Annotate,
    TrainRetriever,
    Evaluate(BaselineKind),
}

impl Stage {
    /// Manifest file stem.
    pub fn name(self) -> String {
        match self {
            Stage::PrepareData => "prepare-data".into(),
            Stage::TrainBackbone => "train-backbone".into(),
            Stage::BuildMemory => "build-memory".into(),
            Stage::Annotate => "annotate".into(),
            Stage::TrainRetriever => "train-retriever".into(),
            Stage::Evaluate(v) => format!("evaluate-{v}"),
        }
    }

    /// How a user reruns the stage.
    pub fn command(self) -> String {
        match self {
            Stage::Evaluate(v) => format!("mrgr evaluate --variant {v}"),
            other => format!("mrgr {}", other.name()),
        }
    }

    /// Config sections whose values shape this stage's outputs.
    pub fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::PrepareData => &["seed", "data", "synthetic"],
            Stage::TrainBackbone => &["seed", "model", "memory", "backbone"],
            Stage::BuildMemory => &["seed", "memory"],
            Stage::Annotate => &["seed", "annotate"],
            Stage::TrainRetriever => &["seed", "retriever"],
            Stage::Evaluate(_) => &["seed", "eval"],
        }
    }

    /// Artifacts the stage reads.
    pub fn inputs(self) -> Vec<Artifact> {
        use Artifact::*;
        match self {
            Stage::PrepareData => vec![],
            Stage::TrainBackbone => vec![Split, Vocab],
            Stage::BuildMemory => vec![Split, Vocab, Backbone],
            Stage::Annotate => vec![Split, Vocab, Backbone, Memory],
            Stage::TrainRetriever => vec![Split, Vocab, Backbone, Memory, Annotations],
            Stage::Evaluate(BaselineKind::Learned) => {
                vec![Split, Vocab, Backbone, Memory, Retriever]
            }
            Stage::Evaluate(_) => vec![Split, Vocab, Backbone, Memory],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Artifact {
    Split,
    Vocab,
    Plans,
    Backbone,
    BackboneLog,
    Memory,
    Annotations,
    Retriever,
    RetrieverLog,
    Report(BaselineKind),
}

impl Artifact {
    pub fn key(self) -> String {
        match self {
            Artifact::Split => "split".into(),
            Artifact::Vocab => "vocab".into(),
            Artifact::Plans => "plans".into(),
            Artifact::Backbone => "backbone".into(),
            Artifact::BackboneLog => "backbone_log".into(),
            Artifact::Memory => "memory".into(),
            Artifact::Annotations => "annotations".into(),
            Artifact::Retriever => "retriever".into(),
            Artifact::RetrieverLog => "retriever_log".into(),
            Artifact::Report(v) => format!("report_{v}"),
        }
    }

    /// Location relative to the run directory.
    pub fn relative_path(self) -> String {
        match self {
            Artifact::Split => "data/split.json".into(),
            Artifact::Vocab => "data/vocab.json".into(),
            Artifact::Plans => "data/plans.json".into(),
            Artifact::Backbone => "checkpoints/backbone.ckpt".into(),
            Artifact::BackboneLog => "checkpoints/backbone_log.json".into(),
            Artifact::Memory => "memory/memory.bin".into(),
            Artifact::Annotations => "annotations/annotations.jsonl".into(),
            Artifact::Retriever => "checkpoints/retriever.ckpt".into(),
            Artifact::RetrieverLog => "checkpoints/retriever_log.json".into(),
            Artifact::Report(v) => format!("reports/{v}.json"),
        }
    }

    pub fn producer(self) -> Stage {
        match self {
            Artifact::Split | Artifact::Vocab | Artifact::Plans => Stage::PrepareData,
            Artifact::Backbone | Artifact::BackboneLog => Stage::TrainBackbone,
            Artifact::Memory => Stage::BuildMemory,
            Artifact::Annotations => Stage::Annotate,
            Artifact::Retriever | Artifact::RetrieverLog => Stage::TrainRetriever,
            Artifact::Report(v) => Stage::Evaluate(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    /// Hash of the config sections this stage depends on.
    pub section_hash: String,
    pub config: Value,
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: BTreeMap<String, FileRecord>,
    pub timings_ms: BTreeMap<String, u64>,
    /// Upper-decoder passes spent by annotation (annotate stage only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_passes: Option<usize>,
    #[serde(default)]
    pub details: Value,
}

/// A run directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.root.join(a.relative_path())
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.root
            .join("manifests")
            .join(format!("{}.json", stage.name()))
    }

    pub fn compare_dir(&self) -> PathBuf {
        self.root.join("compare")
    }

    /// Annotation cache directory: `MRGR_CACHE_DIR`, then `paths.cache`,
    /// then `cache/` inside the run.
    pub fn cache_dir(&self, cfg: &RunConfig) -> PathBuf {
        if let Some(dir) = std::env::var_os("MRGR_CACHE_DIR").filter(|d| !d.is_empty()) {
            return PathBuf::from(dir);
        }
        cfg.paths
            .cache
            .clone()
            .unwrap_or_else(|| self.root.join("cache"))
    }

    pub fn record(&self, a: Artifact) -> Result<FileRecord> {
        Ok(FileRecord {
            path: a.relative_path(),
            sha256: file_hash(self.path(a))?,
        })
    }

    pub fn read_manifest(&self, stage: Stage) -> Result<Option<RunManifest>> {
        read_manifest_file(&self.manifest_path(stage))
    }

    pub fn write_manifest(&self, stage: Stage, m: &RunManifest) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(m).expect("manifest serializes");
        Ok(write_atomic(self.manifest_path(stage), &bytes)?)
    }

    /// Confirms every input of `stage` exists, matches the hash its
    /// producer recorded, was produced under the current config, and is
    /// the same file the other inputs were built from. Returns the input
    /// records for the new manifest.
    pub fn check_inputs(
        &self,
        stage: Stage,
        cfg: &RunConfig,
    ) -> Result<BTreeMap<String, FileRecord>> {
        let mut records = BTreeMap::new();
        let mut producers: BTreeMap<Stage, RunManifest> = BTreeMap::new();
        for a in stage.inputs() {
            let p = a.producer();
            if !producers.contains_key(&p) {
                let m = self.read_manifest(p)?.ok_or_else(|| {
                    CliError::Dependency(format!(
                        "{} needs `{}`, which has not been produced; run `{}` first",
                        stage,
                        a.key(),
                        p.command()
                    ))
                })?;
                if m.section_hash != cfg.section_hash(p.sections()) {
                    return Err(CliError::Stale(format!(
                        "settings [{}] changed since {} ran; rerun `{}`",
                        p.sections().join(", "),
                        p,
                        p.command()
                    )));
                }
                producers.insert(p, m);
            }
            if !self.path(a).exists() {
                return Err(CliError::Dependency(format!(
                    "{} is missing; rerun `{}`",
                    self.path(a).display(),
                    p.command()
                )));
            }
            let rec = self.record(a)?;
            let expected = producers[&p].outputs.get(&a.key()).map(|r| &r.sha256);
            if expected != Some(&rec.sha256) {
                return Err(CliError::Stale(format!(
                    "`{}` changed after {} wrote it; rerun `{}`",
                    a.key(),
                    p,
                    p.command()
                )));
            }
            records.insert(a.key(), rec);
        }
        for (p, m) in &producers {
            for (key, used) in &m.inputs {
                if let Some(current) = records.get(key) {
                    if current.sha256 != used.sha256 {
                        return Err(CliError::Stale(format!(
                            "{} was built from an older `{key}`; rerun `{}`",
                            p,
                            p.command()
                        )));
                    }
                }
            }
        }
        Ok(records)
    }
}

pub fn read_manifest_file(path: &Path) -> Result<Option<RunManifest>> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| CliError::Usage(format!("corrupt manifest {}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(mrgr_core::Error::io(path, e).into()),
    }
}

/// One broken link found by [`verify`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainProblem {
    pub stage: String,
    pub message: String,
}

/// Re-hashes every file named by every manifest under `root`. Inputs must
/// still match the files on disk and, when another manifest produced them,
/// that manifest's recorded output.
pub fn verify(root: &Path) -> Result<(usize, Vec<ChainProblem>)> {
    let dir = root.join("manifests");
    let mut manifests = Vec::new();
    let entries = std::fs::read_dir(&dir).map_err(|e| {
        CliError::Dependency(format!(
            "no manifests under {} ({e}); nothing to verify",
            dir.display()
        ))
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in &paths {
        if let Some(m) = read_manifest_file(p)? {
            manifests.push(m);
        }
    }
    let mut produced: BTreeMap<String, (String, String)> = BTreeMap::new();
    for m in &manifests {
        for r in m.outputs.values() {
            produced.insert(r.path.clone(), (m.stage.clone(), r.sha256.clone()));
        }
    }
    let current = |rel: &str| -> Option<String> {
        let p = Path::new(rel);
        let full = if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        };
        file_hash(full).ok()
    };
    let mut problems = Vec::new();
    for m in &manifests {
        let mut flag = |message: String| {
            problems.push(ChainProblem {
                stage: m.stage.clone(),
                message,
            })
        };
        for (key, r) in &m.outputs {
            match current(&r.path) {
                None => flag(format!("output `{key}` ({}) is missing", r.path)),
                Some(h) if h != r.sha256 => {
                    flag(format!("output `{key}` ({}) was modified", r.path))
                }
                _ => {}
            }
        }
        for (key, r) in &m.inputs {
            if let Some((producer, h)) = produced.get(&r.path) {
                if *h != r.sha256 {
                    flag(format!(
                        "input `{key}` was since rewritten by {producer}; rerun {}",
                        m.stage
                    ));
                }
            } else if current(&r.path).as_deref() != Some(r.sha256.as_str()) {
                flag(format!(
                    "input `{key}` ({}) no longer matches; rerun {}",
                    r.path, m.stage
                ));
            }
        }
    }
    Ok((manifests.len(), problems))
}
