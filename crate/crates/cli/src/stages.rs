//! Pipeline stages. Each reads its inputs from a run directory, checks
//! them against the hash chain, writes its artifacts and then its
//! manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Serialize};
use serde_json::{json, Value};

use mrgr_core::annotate::{annotate_dataset, read_cache};
use mrgr_core::backbone::{self, Backbone, ModelConfig};
use mrgr_core::checkpoint::{file_hash, write_atomic, Checkpoint};
use mrgr_core::data::{
    filter_and_sequence, generate_synthetic, ingest, split_chronological, DatasetSplit, UserPlan,
};
use mrgr_core::eval::{
    audit_csv, compare, comparison_csv, run_eval, validate_audit_csv, BaselineKind, Comparison,
    EvalModels, MetricsReport,
};
use mrgr_core::memory::MemoryStore;
use mrgr_core::retriever::{self, Retriever};
use mrgr_core::vocab::ItemVocabulary;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{Artifact, FileRecord, RunManifest, Stage, Workspace};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Input(PathBuf),
    Synthetic,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    Ok(write_atomic(path, &bytes)?)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| mrgr_core::Error::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| mrgr_core::Error::Format(format!("{}: {e}", path.display())).into())
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn finish(
    ws: &Workspace,
    stage: Stage,
    cfg: &RunConfig,
    inputs: BTreeMap<String, FileRecord>,
    outputs: &[Artifact],
    started: Instant,
    annotation_passes: Option<usize>,
    details: Value,
) -> Result<RunManifest> {
    let outputs = outputs
        .iter()
        .map(|&a| Ok((a.key(), ws.record(a)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let m = RunManifest {
        stage: stage.name(),
        config_hash: cfg.hash(),
        section_hash: cfg.section_hash(stage.sections()),
        config: cfg.to_json(),
        inputs,
        outputs,
        timings_ms: BTreeMap::from([("total".to_string(), elapsed_ms(started))]),
        annotation_passes,
        details,
    };
    ws.write_manifest(stage, &m)?;
    log::info!(
        "{stage} finished in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    Ok(m)
}

pub fn load_split(ws: &Workspace) -> Result<DatasetSplit> {
    read_json(&ws.path(Artifact::Split))
}

pub fn load_vocab(ws: &Workspace) -> Result<ItemVocabulary> {
    read_json(&ws.path(Artifact::Vocab))
}

/// Anchor plans of a synthetic run, if it has them.
pub fn load_plans(ws: &Workspace) -> Result<Option<Vec<UserPlan>>> {
    let p = ws.path(Artifact::Plans);
    if p.exists() {
        Ok(Some(read_json(&p)?))
    } else {
        Ok(None)
    }
}

/// The frozen backbone and its checkpoint hash.
pub fn load_backbone(ws: &Workspace) -> Result<(Backbone, String)> {
    let (ckpt, hash) = Checkpoint::load(ws.path(Artifact::Backbone))?;
    let mut b = Backbone::from_checkpoint(ckpt)?;
    b.freeze();
    Ok((b, hash))
}

pub fn load_memory(ws: &Workspace, backbone_hash: &str) -> Result<MemoryStore> {
    Ok(MemoryStore::load(ws.path(Artifact::Memory), backbone_hash)?)
}

pub fn load_retriever(ws: &Workspace) -> Result<(Retriever, String)> {
    let (ckpt, hash) = Checkpoint::load(ws.path(Artifact::Retriever))?;
    Ok((Retriever::from_checkpoint(ckpt)?, hash))
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    read_json(path)
}

/// Ingests or generates events, filters them and writes the split,
/// vocabulary and resolved config.
pub fn prepare_data(cfg: &RunConfig, source: &DataSource, ws: &Workspace) -> Result<RunManifest> {
    let started = Instant::now();
    let stage = Stage::PrepareData;
    let rule = cfg.data.rule();
    let mut inputs = BTreeMap::new();
    let mut outputs = vec![Artifact::Split, Artifact::Vocab];
    let (events, boundaries, plans) = match source {
        DataSource::Input(path) => {
            if !path.is_file() {
                return Err(CliError::Usage(format!(
                    "input file {} does not exist",
                    path.display()
                )));
            }
            let boundaries = cfg.data.boundaries()?.ok_or_else(|| {
                CliError::Usage(
                    "ingested logs need data.train_end, data.val_end and data.test_end".into(),
                )
            })?;
            let events = ingest(path)?;
            let abs = std::fs::canonicalize(path).map_err(|e| mrgr_core::Error::io(path, e))?;
            inputs.insert(
                "events".to_string(),
                FileRecord {
                    path: abs.display().to_string(),
                    sha256: file_hash(path)?,
                },
            );
            (events, boundaries, None)
        }
        DataSource::Synthetic => {
            let data = generate_synthetic(&cfg.synthetic, rule)?;
            let boundaries = cfg.data.boundaries()?.unwrap_or(cfg.synthetic.boundaries());
            outputs.push(Artifact::Plans);
            (data.events, boundaries, Some(data.plans))
        }
    };
    let n_events = events.len();
    let (sequences, vocab) = filter_and_sequence(&events, cfg.data.filters())?;
    drop(events);
    let split = split_chronological(sequences, boundaries, rule)?;
    write_json(&ws.path(Artifact::Split), &split)?;
    write_json(&ws.path(Artifact::Vocab), &vocab)?;
    if let Some(p) = &plans {
        write_json(&ws.path(Artifact::Plans), p)?;
    }
    write_json(&ws.config_path(), &cfg.to_json())?;
    let details = json!({
        "source": match source { DataSource::Input(_) => "input", DataSource::Synthetic => "synthetic" },
        "events": n_events,
        "users": split.sequences.len(),
        "items": vocab.len(),
        "train": split.train.len(),
        "val": split.val.len(),
        "test": split.test.len(),
    });
    log::info!(
        "{} users, {} items; {} train / {} val / {} test samples",
        split.sequences.len(),
        vocab.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    finish(ws, stage, cfg, inputs, &outputs, started, None, details)
}

pub fn train_backbone(cfg: &RunConfig, ws: &Workspace) -> Result<RunManifest> {
    let started = Instant::now();
    let stage = Stage::TrainBackbone;
    let inputs = ws.check_inputs(stage, cfg)?;
    let split = load_split(ws)?;
    let vocab = load_vocab(ws)?;
    let model = ModelConfig {
        vocab_size: vocab.vocab_size(),
        ..cfg.model.clone()
    };
    let out = backbone::train_backbone(&split, &vocab, model, cfg.memory, &cfg.backbone)?;
    out.backbone
        .to_checkpoint()
        .save(ws.path(Artifact::Backbone))?;
    write_json(&ws.path(Artifact::BackboneLog), &out.epochs)?;
    let details = json!({
        "epochs_run": out.epochs.len(),
        "best_epoch": out.best_epoch,
        "best_val_recall1": out.best_val_recall1,
    });
    finish(
        ws,
        stage,
        cfg,
        inputs,
        &[Artifact::Backbone, Artifact::BackboneLog],
        started,
        None,
        details,
    )
}

pub fn build_memory(cfg: &RunConfig, ws: &Workspace) -> Result<RunManifest> {
    let started = Instant::now();
    let stage = Stage::BuildMemory;
    let inputs = ws.check_inputs(stage, cfg)?;
    let split = load_split(ws)?;
    let vocab = load_vocab(ws)?;
    let (backbone, hash) = load_backbone(ws)?;
    let store = MemoryStore::build(&split, &backbone, &hash, &vocab, cfg.memory)?;
    store.save(ws.path(Artifact::Memory))?;
    let details = json!({
        "users": store.bank_count(),
        "encoded_elements": store.encoded_elements(),
    });
    finish(
        ws,
        stage,
        cfg,
        inputs,
        &[Artifact::Memory],
        started,
        None,
        details,
    )
}

pub fn annotate(cfg: &RunConfig, ws: &Workspace) -> Result<RunManifest> {
    let started = Instant::now();
    let stage = Stage::Annotate;
    let inputs = ws.check_inputs(stage, cfg)?;
    let split = load_split(ws)?;
    let vocab = load_vocab(ws)?;
    let (backbone, hash) = load_backbone(ws)?;
    let store = load_memory(ws, &hash)?;
    let cache_dir = ws.cache_dir(cfg);
    std::fs::create_dir_all(&cache_dir).map_err(|e| mrgr_core::Error::io(&cache_dir, e))?;
    let cache = cache_dir.join("annotations.jsonl");
    let set = annotate_dataset(
        &split,
        &store,
        &backbone,
        &vocab,
        cfg.annotate,
        &hash,
        Some(&cache),
    )?;
    mrgr_core::annotate::write_cache(&ws.path(Artifact::Annotations), &set.records)?;
    let cost: usize = set.records.iter().map(|r| r.deltas.len() + 1).sum();
    log::info!(
        "annotated {} samples ({} from cache, {} skipped), {} upper passes",
        set.records.len(),
        set.cache_hits,
        set.skipped.len(),
        set.upper_passes
    );
    let details = json!({
        "records": set.records.len(),
        "skipped": set.skipped.len(),
        "cache_hits": set.cache_hits,
        "full_cost_passes": cost,
        "cache": cache.display().to_string(),
    });
    finish(
        ws,
        stage,
        cfg,
        inputs,
        &[Artifact::Annotations],
        started,
        Some(set.upper_passes),
        details,
    )
}

pub fn train_retriever(cfg: &RunConfig, ws: &Workspace) -> Result<RunManifest> {
    let started = Instant::now();
    let stage = Stage::TrainRetriever;
    let inputs = ws.check_inputs(stage, cfg)?;
    let split = load_split(ws)?;
    let vocab = load_vocab(ws)?;
    let (backbone, hash) = load_backbone(ws)?;
    let store = load_memory(ws, &hash)?;
    let records = read_cache(&ws.path(Artifact::Annotations))?;
    if let Some(r) = records.iter().find(|r| r.checkpoint != hash) {
        return Err(CliError::Stale(format!(
            "annotation of {} used another backbone; rerun `mrgr annotate`",
            r.sample_id
        )));
    }
    let pooling = cfg.memory.pooling;
    let examples =
        retriever::training_examples(&split, &store, &backbone, &vocab, &records, pooling)?;
    let val = retriever::validation_problems(&split, &split.val, &store, &backbone, &vocab)?;
    let out = retriever::train_retriever(&examples, &val, &backbone, pooling, &cfg.retriever)?;
    out.retriever
        .to_checkpoint()
        .save(ws.path(Artifact::Retriever))?;
    write_json(&ws.path(Artifact::RetrieverLog), &out.epochs)?;
    let details = json!({
        "examples": examples.len(),
        "epochs_run": out.epochs.len(),
        "best_epoch": out.best_epoch,
    });
    finish(
        ws,
        stage,
        cfg,
        inputs,
        &[Artifact::Retriever, Artifact::RetrieverLog],
        started,
        None,
        details,
    )
}

/// Scores the test split under one prefix policy.
pub fn evaluate(cfg: &RunConfig, ws: &Workspace, variant: BaselineKind) -> Result<RunManifest> {
    let started = Instant::now();
    let stage = Stage::Evaluate(variant);
    if variant == BaselineKind::Learned && ws.read_manifest(Stage::TrainRetriever)?.is_none() {
        return Err(CliError::Dependency(
            "the learned variant needs a retriever checkpoint; run `mrgr train-retriever` first"
                .into(),
        ));
    }
    let inputs = ws.check_inputs(stage, cfg)?;
    let split = load_split(ws)?;
    let vocab = load_vocab(ws)?;
    let (backbone, hash) = load_backbone(ws)?;
    let store = load_memory(ws, &hash)?;
    let retriever = match variant {
        BaselineKind::Learned => Some(load_retriever(ws)?),
        _ => None,
    };
    let models = EvalModels {
        backbone: &backbone,
        store: &store,
        vocab: &vocab,
        retriever: retriever.as_ref().map(|(r, _)| r),
        pooling: cfg.memory.pooling,
        delta_space: cfg.annotate.space,
    };
    let mut report = run_eval(&split, &split.test, variant, &models, &cfg.eval)?;
    report.config_hash = cfg.hash();
    report.split_hash = inputs["split"].sha256.clone();
    report.checkpoints.insert("backbone".into(), hash);
    if variant.uses_memory() {
        report
            .checkpoints
            .insert("memory".into(), inputs["memory"].sha256.clone());
    }
    if let Some((_, h)) = &retriever {
        report.checkpoints.insert("retriever".into(), h.clone());
    }
    write_json(&ws.path(Artifact::Report(variant)), &report)?;
    let details = json!({
        "samples": report.n_samples,
        "metrics": report.metrics,
    });
    for m in &report.metrics {
        log::info!(
            "{variant}: recall@{} {:.4}, ndcg@{} {:.4}",
            m.k,
            m.recall,
            m.k,
            m.ndcg
        );
    }
    finish(
        ws,
        stage,
        cfg,
        inputs,
        &[Artifact::Report(variant)],
        started,
        None,
        details,
    )
}

/// Files written by [`compare_reports`].
#[derive(Clone, Debug)]
pub struct CompareOutput {
    pub comparison: Comparison,
    pub json: PathBuf,
    pub table: PathBuf,
    pub audit: PathBuf,
}

/// Aligns two or more reports and writes the comparison JSON, the metric
/// table and the timestamp audit into `out_dir`.
pub fn compare_reports(reports: &[PathBuf], out_dir: &Path) -> Result<CompareOutput> {
    if reports.len() < 2 {
        return Err(CliError::Usage(format!(
            "compare needs at least two reports, got {}",
            reports.len()
        )));
    }
    let loaded = reports
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>>>()?;
    let comparison = compare(&loaded)?;
    let audit = audit_csv(&loaded);
    validate_audit_csv(&audit)
        .map_err(|e| CliError::Internal(format!("audit export failed its own schema: {e}")))?;
    let out = CompareOutput {
        json: out_dir.join("comparison.json"),
        table: out_dir.join("comparison.csv"),
        audit: out_dir.join("audit.csv"),
        comparison,
    };
    write_json(&out.json, &out.comparison)?;
    write_atomic(&out.table, comparison_csv(&out.comparison).as_bytes())?;
    write_atomic(&out.audit, audit.as_bytes())?;
    Ok(out)
}

/// Every report present in a run directory, in variant order.
pub fn run_reports(ws: &Workspace) -> Vec<PathBuf> {
    BaselineKind::ALL
        .iter()
        .map(|&v| ws.path(Artifact::Report(v)))
        .filter(|p| p.exists())
        .collect()
}

/// All stages, every variant and the comparison, in order.
pub fn run_all(cfg: &RunConfig, source: &DataSource, ws: &Workspace) -> Result<CompareOutput> {
    prepare_data(cfg, source, ws)?;
    train_backbone(cfg, ws)?;
    build_memory(cfg, ws)?;
    annotate(cfg, ws)?;
    train_retriever(cfg, ws)?;
    for v in BaselineKind::ALL {
        evaluate(cfg, ws, v)?;
    }
    compare_reports(&run_reports(ws), &ws.compare_dir())
}
