use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{cosine, item_scores, ndcg_at_k, rank_of, recall_at_k};
use crate::annotate::{annotate_sample, BackboneTarget, DeltaSpace};
use crate::backbone::{tokenize_prompt, Backbone};
use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::memory::{pool_states, MemoryStore, Pooling};
use crate::retriever::{recommend_from_states, select_top, Retriever};
use crate::vocab::ItemVocabulary;

/// How the prefix slot is filled at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Always the null prefix.
    NoMemory,
    /// A uniformly drawn bank entry.
    Random,
    /// The entry most cosine-similar to the query state.
    Semantic,
    /// The entry with the largest probability delta for the true target.
    Oracle,
    /// The trained retriever's top entry.
    Learned,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::NoMemory,
        BaselineKind::Random,
        BaselineKind::Semantic,
        BaselineKind::Oracle,
        BaselineKind::Learned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::NoMemory => "no_memory",
            BaselineKind::Random => "random",
            BaselineKind::Semantic => "semantic",
            BaselineKind::Oracle => "oracle",
            BaselineKind::Learned => "learned",
        }
    }

    pub fn uses_memory(self) -> bool {
        self != BaselineKind::NoMemory
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant `{s}` (expected one of no_memory, random, semantic, oracle, learned)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub sample_id: String,
    pub user: String,
    pub target: String,
    pub target_rank: usize,
    pub baseline_rank: usize,
    /// 1-based interaction index of the injected element.
    pub retrieved_index: Option<usize>,
    pub retrieved_ts: Option<i64>,
    pub history_len: usize,
    pub bank_size: usize,
    /// Target ranked strictly better than with the null prefix.
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: BaselineKind,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub split_hash: String,
    #[serde(default)]
    pub checkpoints: BTreeMap<String, String>,
    pub n_samples: usize,
    pub metrics: Vec<KMetrics>,
    pub audit: Vec<AuditRow>,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.ndcg)
    }
}

/// Models an evaluation may draw on.
pub struct EvalModels<'a> {
    pub backbone: &'a Backbone,
    pub store: &'a MemoryStore,
    pub vocab: &'a ItemVocabulary,
    pub retriever: Option<&'a Retriever>,
    pub pooling: Pooling,
    pub delta_space: DeltaSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5],
            seed: 0,
        }
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    crate::derive_seed(seed, index as u64)
}

/// Ranks every sample's target over the full catalog under `variant`.
pub fn run_eval(
    split: &DatasetSplit,
    samples: &[Sample],
    variant: BaselineKind,
    models: &EvalModels<'_>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(Error::Config("K list must be non-empty with K >= 1".into()));
    }
    if variant == BaselineKind::Learned && models.retriever.is_none() {
        return Err(Error::Invalid(
            "the learned variant needs a retriever checkpoint".into(),
        ));
    }
    if samples.is_empty() {
        log::warn!("evaluating {variant} on an empty sample list");
    }
    let backbone = models.backbone;
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let prompt = tokenize_prompt(&s.window, models.vocab, split.rule.short)?;
            let target = models.vocab.index_of(&s.target)?;
            let states = backbone.encode_lower(&prompt, None)?;
            let base_logits = backbone.decode_upper(&states)?;
            let baseline_rank = rank_of(&item_scores(&base_logits, models.vocab), target);
            let bank = models.store.bank_for(s)?;
            let pick = if bank.is_empty() || !variant.uses_memory() {
                None
            } else {
                match variant {
                    BaselineKind::NoMemory => None,
                    BaselineKind::Random => {
                        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, i));
                        Some(rng.gen_range(0..bank.len()))
                    }
                    BaselineKind::Semantic => {
                        let z_t = pool_states(&states, models.pooling)?;
                        let sims: Vec<f64> = bank
                            .entries
                            .iter()
                            .map(|e| cosine(&z_t, &e.vector))
                            .collect();
                        Some(select_top(&sims)?)
                    }
                    BaselineKind::Oracle => {
                        let source = BackboneTarget::new(
                            backbone,
                            &prompt,
                            models.vocab.tokens_of(&s.target)?,
                        )?;
                        let ann = annotate_sample(
                            s,
                            &bank.vectors(),
                            &source,
                            1.0,
                            models.delta_space,
                            "",
                        )?;
                        Some(select_top(&ann.deltas)?)
                    }
                    BaselineKind::Learned => {
                        let r = models.retriever.expect("checked above");
                        recommend_from_states(&states, &bank, backbone, r, models.pooling)?
                            .retrieved
                    }
                }
            };
            let target_rank = match pick {
                None => baseline_rank,
                Some(m) => {
                    let logits =
                        backbone.decode_upper(&states.with_prefix(&bank.entries[m].vector)?)?;
                    rank_of(&item_scores(&logits, models.vocab), target)
                }
            };
            Ok(AuditRow {
                sample_id: s.id.clone(),
                user: s.user.clone(),
                target: s.target.clone(),
                target_rank,
                baseline_rank,
                retrieved_index: pick.map(|m| bank.entries[m].index),
                retrieved_ts: pick.map(|m| bank.entries[m].ts),
                history_len: s.history,
                bank_size: bank.len(),
                improved: target_rank < baseline_rank,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = rows.len();
    let metrics = cfg
        .ks
        .iter()
        .map(|&k| {
            let (mut r, mut g) = (0.0, 0.0);
            for row in &rows {
                r += recall_at_k(row.target_rank, k)?;
                g += ndcg_at_k(row.target_rank, k)?;
            }
            let denom = n.max(1) as f64;
            Ok(KMetrics {
                k,
                recall: r / denom,
                ndcg: g / denom,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        variant,
        seed: cfg.seed,
        config_hash: String::new(),
        split_hash: String::new(),
        checkpoints: BTreeMap::new(),
        n_samples: n,
        metrics,
        audit: rows,
    })
}
