//! Memory banks: pooled layer-`L` encodings of past interactions.
//!
//! Entry `m` (1-based) encodes the window of up to `short` items ending at
//! interaction `m`. Encodings depend only on the user's sequence and the
//! backbone, so each user's vectors are computed once and every cut of that
//! user slices into them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{tokenize_prompt, Backbone, HiddenSeq};
use crate::checkpoint::{decode_container, encode_container, sha256_hex, write_atomic};
use crate::data::{DatasetSplit, Sample, UserSequence, WindowRule};
use crate::error::{Error, Result};
use crate::vocab::{ItemVocabulary, TokenId};

pub const BANK_MAGIC: &[u8; 8] = b"MRGRMEMB";
pub const BANK_VERSION: u32 = 1;

/// What a memory element encodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryEncoding {
    /// The window `h_m` of up to `short` items ending at interaction `m`.
    #[default]
    Window,
    /// Interaction `m` alone.
    SingleItem,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// State at the last (`PRED`) position.
    #[default]
    Last,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    #[serde(default)]
    pub encoding: MemoryEncoding,
    #[serde(default)]
    pub pooling: Pooling,
}

pub fn pool_states(states: &HiddenSeq, pooling: Pooling) -> Result<Vec<f64>> {
    if states.is_empty() {
        return Err(Error::Invalid("cannot pool an empty state sequence".into()));
    }
    Ok(match pooling {
        Pooling::Last => states.last().to_vec(),
        Pooling::Mean => {
            let n = states.len() as f64;
            let mut acc = vec![0.0; states.states.cols()];
            for r in 0..states.len() {
                for (a, v) in acc.iter_mut().zip(states.states.row(r)) {
                    *a += v;
                }
            }
            acc.into_iter().map(|a| a / n).collect()
        }
    })
}

/// Items encoded by element `m` (0-based position in the sequence).
pub fn element_items(
    seq: &UserSequence,
    m: usize,
    short: usize,
    encoding: MemoryEncoding,
) -> &[String] {
    match encoding {
        MemoryEncoding::Window => &seq.items[(m + 1).saturating_sub(short)..=m],
        MemoryEncoding::SingleItem => &seq.items[m..=m],
    }
}

pub fn element_tokens(
    seq: &UserSequence,
    m: usize,
    rule: WindowRule,
    cfg: MemoryConfig,
    vocab: &ItemVocabulary,
) -> Result<Vec<TokenId>> {
    tokenize_prompt(
        element_items(seq, m, rule.short, cfg.encoding),
        vocab,
        rule.short,
    )
}

/// `z` for a prompt: lower pass with the null prefix, then pooling.
pub fn encode_pooled(
    backbone: &Backbone,
    tokens: &[TokenId],
    pooling: Pooling,
) -> Result<Vec<f64>> {
    pool_states(&backbone.encode_lower(tokens, None)?, pooling)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    /// 1-based interaction index within the user's history.
    pub index: usize,
    pub ts: i64,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub user: String,
    /// Number of history events before the cut.
    pub cut: usize,
    pub entries: Vec<MemoryEntry>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.entries.iter().map(|e| e.vector.as_slice()).collect()
    }
}

/// Builds the bank for a cut directly (no cache); `candidates` is the
/// 0-based candidate range from the window rule.
pub fn build_bank(
    seq: &UserSequence,
    cut: usize,
    backbone: &Backbone,
    vocab: &ItemVocabulary,
    rule: WindowRule,
    cfg: MemoryConfig,
) -> Result<MemoryBank> {
    if cut > seq.len() {
        return Err(Error::Invalid(format!(
            "cut {cut} beyond sequence of length {}",
            seq.len()
        )));
    }
    let candidates = if cut == 0 {
        0..0
    } else {
        crate::data::window(cut, rule)?.candidates
    };
    let entries = candidates
        .map(|m| {
            let tokens = element_tokens(seq, m, rule, cfg, vocab)?;
            Ok(MemoryEntry {
                index: m + 1,
                ts: seq.timestamps[m],
                vector: encode_pooled(backbone, &tokens, cfg.pooling)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MemoryBank {
        user: seq.user.clone(),
        cut,
        entries,
    })
}

/// Encodings for one user over the positions any of its cuts need.
#[derive(Clone, Debug, PartialEq)]
struct UserMemory {
    user: String,
    /// 0-based position of the first encoded element.
    first: usize,
    timestamps: Vec<i64>,
    vectors: Vec<Vec<f64>>,
    /// Cut -> 0-based candidate range.
    cuts: BTreeMap<usize, (usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    checkpoint: String,
    d_model: usize,
    users: Vec<StoreUser>,
}

#[derive(Serialize, Deserialize)]
struct StoreUser {
    user: String,
    first: usize,
    count: usize,
    timestamps: Vec<i64>,
    cuts: Vec<StoreCut>,
}

#[derive(Serialize, Deserialize)]
struct StoreCut {
    cut: usize,
    start: usize,
    end: usize,
}

/// All banks needed by a dataset, tied to the backbone checkpoint they
/// were encoded with.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryStore {
    checkpoint: String,
    d_model: usize,
    users: Vec<UserMemory>,
    by_user: HashMap<String, usize>,
}

impl MemoryStore {
    /// Encodes every element referenced by a sample of `split`, in parallel
    /// across users.
    pub fn build(
        split: &DatasetSplit,
        backbone: &Backbone,
        checkpoint: &str,
        vocab: &ItemVocabulary,
        cfg: MemoryConfig,
    ) -> Result<Self> {
        let mut cuts: BTreeMap<&str, BTreeMap<usize, (usize, usize)>> = BTreeMap::new();
        for s in split.train.iter().chain(&split.val).chain(&split.test) {
            cuts.entry(s.user.as_str())
                .or_default()
                .insert(s.history, s.candidates);
        }
        let seqs = split.user_index();
        let jobs: Vec<(&UserSequence, BTreeMap<usize, (usize, usize)>)> = cuts
            .into_iter()
            .map(|(u, c)| (&split.sequences[seqs[u]], c))
            .collect();
        let users = jobs
            .into_par_iter()
            .map(|(seq, cuts)| {
                let first = cuts.values().map(|r| r.0).min().unwrap_or(0);
                let end = cuts.values().map(|r| r.1).max().unwrap_or(0).max(first);
                let vectors = (first..end)
                    .map(|m| {
                        let tokens = element_tokens(seq, m, split.rule, cfg, vocab)?;
                        encode_pooled(backbone, &tokens, cfg.pooling)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(UserMemory {
                    user: seq.user.clone(),
                    first,
                    timestamps: seq.timestamps[first..end].to_vec(),
                    vectors,
                    cuts,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(
            checkpoint.to_string(),
            backbone.config().d_model,
            users,
        ))
    }

    fn assemble(checkpoint: String, d_model: usize, users: Vec<UserMemory>) -> Self {
        let by_user = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.user.clone(), i))
            .collect();
        Self {
            checkpoint,
            d_model,
            users,
            by_user,
        }
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn bank_count(&self) -> usize {
        self.users.iter().map(|u| u.cuts.len()).sum()
    }

    pub fn encoded_elements(&self) -> usize {
        self.users.iter().map(|u| u.vectors.len()).sum()
    }

    pub fn bank(&self, user: &str, cut: usize) -> Result<MemoryBank> {
        let u = self
            .by_user
            .get(user)
            .map(|&i| &self.users[i])
            .ok_or_else(|| Error::Invalid(format!("no memory for user `{user}`")))?;
        let &(start, end) = u
            .cuts
            .get(&cut)
            .ok_or_else(|| Error::Invalid(format!("no memory for user `{user}` at cut {cut}")))?;
        let entries = (start..end)
            .map(|m| MemoryEntry {
                index: m + 1,
                ts: u.timestamps[m - u.first],
                vector: u.vectors[m - u.first].clone(),
            })
            .collect();
        Ok(MemoryBank {
            user: user.to_string(),
            cut,
            entries,
        })
    }

    pub fn bank_for(&self, sample: &Sample) -> Result<MemoryBank> {
        self.bank(&sample.user, sample.history)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.encoded_elements() * self.d_model);
        let users = self
            .users
            .iter()
            .map(|u| {
                for v in &u.vectors {
                    payload.extend_from_slice(v);
                }
                StoreUser {
                    user: u.user.clone(),
                    first: u.first,
                    count: u.vectors.len(),
                    timestamps: u.timestamps.clone(),
                    cuts: u
                        .cuts
                        .iter()
                        .map(|(&cut, &(start, end))| StoreCut { cut, start, end })
                        .collect(),
                }
            })
            .collect();
        let manifest = StoreManifest {
            checkpoint: self.checkpoint.clone(),
            d_model: self.d_model,
            users,
        };
        let manifest = serde_json::to_value(manifest).expect("manifest serializes");
        encode_container(BANK_MAGIC, BANK_VERSION, &manifest, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = decode_container(BANK_MAGIC, BANK_VERSION, bytes)?;
        let manifest: StoreManifest = serde_json::from_value(manifest)
            .map_err(|e| Error::Format(format!("bank manifest: {e}")))?;
        let d = manifest.d_model;
        let mut offset = 0;
        let mut users = Vec::with_capacity(manifest.users.len());
        for u in manifest.users {
            let need = u.count * d;
            if offset + need > payload.len() || u.timestamps.len() != u.count {
                return Err(Error::Format(format!("bank for `{}` is truncated", u.user)));
            }
            let vectors = payload[offset..offset + need]
                .chunks(d.max(1))
                .map(<[f64]>::to_vec)
                .collect::<Vec<_>>();
            offset += need;
            let mut cuts = BTreeMap::new();
            for c in u.cuts {
                if c.start < u.first || c.end > u.first + u.count || c.start > c.end {
                    return Err(Error::Format(format!(
                        "bank cut {} of `{}` is out of range",
                        c.cut, u.user
                    )));
                }
                cuts.insert(c.cut, (c.start, c.end));
            }
            users.push(UserMemory {
                user: u.user,
                first: u.first,
                timestamps: u.timestamps,
                vectors: if d == 0 {
                    vec![Vec::new(); u.count]
                } else {
                    vectors
                },
                cuts,
            });
        }
        if offset != payload.len() {
            return Err(Error::Format("bank payload has trailing data".into()));
        }
        Ok(Self::assemble(manifest.checkpoint, d, users))
    }

    /// Returns the file hash.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads a store and checks it was built with `checkpoint`.
    pub fn load(path: impl AsRef<Path>, checkpoint: &str) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let store = Self::from_bytes(&bytes)?;
        if store.checkpoint != checkpoint {
            return Err(Error::Stale(format!(
                "memory bank {} was built with backbone {} but the current backbone is {}; rerun build-memory",
                path.display(),
                short(&store.checkpoint),
                short(checkpoint)
            )));
        }
        Ok(store)
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
