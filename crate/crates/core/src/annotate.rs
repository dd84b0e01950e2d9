//! Relevance labels from probability deltas.
//!
//! For every memory element, `δ_m` is the target's teacher-forced
//! probability with the element injected minus the probability with the
//! null prefix; labels are `softmax(δ / τ)`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mrgr_numerics::{kernels, Tensor};

use crate::backbone::{teacher_forced, tokenize_prompt, Backbone, HiddenSeq};
use crate::checkpoint::write_atomic;
use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::memory::MemoryStore;
use crate::vocab::{ItemVocabulary, TokenId};

/// Grid searched for the label temperature.
pub const TAU_GRID: [f64; 4] = [10.0, 1.0, 0.1, 0.01];

/// Per-token target probabilities under a given prefix (`None` = null).
pub trait TargetProbability {
    fn token_probs(&self, prefix: Option<&[f64]>) -> Result<Vec<f64>>;
}

/// Product of per-token probabilities.
pub fn sequence_probability(token_probs: &[f64]) -> f64 {
    token_probs.iter().product()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSpace {
    /// Differences of raw sequence probabilities.
    #[default]
    Probability,
    /// Differences of log-probabilities, for long targets where products
    /// underflow.
    Log,
}

fn sequence_value(token_probs: &[f64], space: DeltaSpace) -> f64 {
    match space {
        DeltaSpace::Probability => sequence_probability(token_probs),
        DeltaSpace::Log => token_probs
            .iter()
            .map(|p| p.max(mrgr_numerics::PROB_FLOOR).ln())
            .sum(),
    }
}

/// `δ_m` for one element against a precomputed baseline.
pub fn delta_for_element(
    source: &dyn TargetProbability,
    z_m: &[f64],
    baseline: f64,
    space: DeltaSpace,
) -> Result<f64> {
    Ok(sequence_value(&source.token_probs(Some(z_m))?, space) - baseline)
}

/// `softmax(δ / τ)`.
pub fn labels_from_deltas(deltas: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "label temperature must be positive, got {tau}"
        )));
    }
    Ok(kernels::softmax(&Tensor::vector(deltas.to_vec())?, tau)?.into_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub sample_id: String,
    pub user: String,
    pub cut: usize,
    pub target: String,
    pub checkpoint: String,
    pub tau: f64,
    #[serde(default)]
    pub space: DeltaSpace,
    pub baseline: f64,
    pub deltas: Vec<f64>,
    pub labels: Vec<f64>,
}

impl AnnotatedSample {
    pub fn argmax_delta(&self) -> Option<usize> {
        crate::retriever::select_top(&self.deltas).ok()
    }
}

/// Annotation of one sample whose bank vectors are `bank`.
pub fn annotate_sample(
    sample: &Sample,
    bank: &[&[f64]],
    source: &dyn TargetProbability,
    tau: f64,
    space: DeltaSpace,
    checkpoint: &str,
) -> Result<AnnotatedSample> {
    if bank.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let baseline = sequence_value(&source.token_probs(None)?, space);
    let deltas = bank
        .iter()
        .map(|z| delta_for_element(source, z, baseline, space))
        .collect::<Result<Vec<_>>>()?;
    let labels = labels_from_deltas(&deltas, tau)?;
    Ok(AnnotatedSample {
        sample_id: sample.id.clone(),
        user: sample.user.clone(),
        cut: sample.history,
        target: sample.target.clone(),
        checkpoint: checkpoint.to_string(),
        tau,
        space,
        baseline,
        deltas,
        labels,
    })
}

/// Target probabilities read from the backbone's upper stack. Lower states
/// do not depend on the prefix, so they are encoded once and every query
/// costs exactly one upper pass.
pub struct BackboneTarget<'a> {
    backbone: &'a Backbone,
    states: HiddenSeq,
    target: Vec<TokenId>,
    passes: AtomicUsize,
}

impl<'a> BackboneTarget<'a> {
    pub fn new(backbone: &'a Backbone, prompt: &[TokenId], target: &[TokenId]) -> Result<Self> {
        let states = backbone.encode_lower(&teacher_forced(prompt, target), None)?;
        Ok(Self {
            backbone,
            states,
            target: target.to_vec(),
            passes: AtomicUsize::new(0),
        })
    }

    pub fn upper_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }
}

impl TargetProbability for BackboneTarget<'_> {
    fn token_probs(&self, prefix: Option<&[f64]>) -> Result<Vec<f64>> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let states = match prefix {
            Some(p) => self.states.with_prefix(p)?,
            None => self.states.clone(),
        };
        let first = states.len() - self.target.len();
        let rows: Vec<usize> = (first..states.len()).collect();
        let logits = self.backbone.decode_upper_rows(&states, &rows)?;
        let probs = kernels::softmax(&logits, 1.0)?;
        Ok(self
            .target
            .iter()
            .enumerate()
            .map(|(i, &t)| probs.row(i)[t])
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub records: Vec<AnnotatedSample>,
    pub skipped: Vec<SkippedSample>,
    /// Upper-stack passes spent in this invocation (cache hits cost none).
    pub upper_passes: usize,
    pub cache_hits: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotateConfig {
    pub tau: f64,
    #[serde(default)]
    pub space: DeltaSpace,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            space: DeltaSpace::Probability,
        }
    }
}

/// Reads a JSON-lines annotation cache. A missing file is an empty cache.
pub fn read_cache(path: &Path) -> Result<Vec<AnnotatedSample>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotatedSample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if rec.deltas.len() != rec.labels.len() {
            return Err(Error::Format(format!(
                "{} line {}: label and delta lengths differ",
                path.display(),
                i + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_cache(path: &Path, records: &[AnnotatedSample]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Annotates every training sample that has memory. Records whose key
/// `(sample id, checkpoint, τ, space)` is already cached are reused;
/// anything else in the cache is stale and recomputed.
pub fn annotate_dataset(
    split: &DatasetSplit,
    store: &MemoryStore,
    backbone: &Backbone,
    vocab: &ItemVocabulary,
    cfg: AnnotateConfig,
    checkpoint: &str,
    cache: Option<&Path>,
) -> Result<AnnotationSet> {
    if store.checkpoint() != checkpoint {
        return Err(Error::Stale(
            "memory bank was built with a different backbone; rerun build-memory".into(),
        ));
    }
    let cached = match cache {
        Some(p) => read_cache(p)?,
        None => Vec::new(),
    };
    let mut hits: HashMap<&str, &AnnotatedSample> = HashMap::new();
    for r in &cached {
        if r.checkpoint == checkpoint && r.tau == cfg.tau && r.space == cfg.space {
            hits.insert(r.sample_id.as_str(), r);
        }
    }

    let results = split
        .train
        .par_iter()
        .map(
            |s| -> Result<(Option<AnnotatedSample>, Option<SkippedSample>, usize, bool)> {
                let bank = store.bank_for(s)?;
                if bank.is_empty() {
                    return Ok((
                        None,
                        Some(SkippedSample {
                            sample_id: s.id.clone(),
                            reason: "empty memory bank".into(),
                        }),
                        0,
                        false,
                    ));
                }
                if let Some(r) = hits.get(s.id.as_str()) {
                    if r.deltas.len() == bank.len() {
                        return Ok((Some((*r).clone()), None, 0, true));
                    }
                }
                let prompt = tokenize_prompt(&s.window, vocab, split.rule.short)?;
                let source = BackboneTarget::new(backbone, &prompt, vocab.tokens_of(&s.target)?)?;
                let rec =
                    annotate_sample(s, &bank.vectors(), &source, cfg.tau, cfg.space, checkpoint)?;
                Ok((Some(rec), None, source.upper_passes(), false))
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let mut set = AnnotationSet {
        records: Vec::new(),
        skipped: Vec::new(),
        upper_passes: 0,
        cache_hits: 0,
    };
    for (rec, skip, passes, hit) in results {
        if let Some(r) = rec {
            set.records.push(r);
        }
        if let Some(k) = skip {
            log::debug!("skipping {}: {}", k.sample_id, k.reason);
            set.skipped.push(k);
        }
        set.upper_passes += passes;
        set.cache_hits += hit as usize;
    }
    if let Some(p) = cache {
        write_cache(p, &set.records)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_shift_invariant() {
        let a = labels_from_deltas(&[0.1, -0.2, 0.3], 0.5).unwrap();
        let b = labels_from_deltas(&[1.1, 0.8, 1.3], 0.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(labels_from_deltas(&[0.1], 0.0).is_err());
    }

    #[test]
    fn log_space_uses_sums() {
        assert!((sequence_value(&[0.5, 0.25], DeltaSpace::Log) - (0.125f64).ln()).abs() < 1e-15);
        assert_eq!(sequence_value(&[0.5, 0.25], DeltaSpace::Probability), 0.125);
    }
}
