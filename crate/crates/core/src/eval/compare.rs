use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::percentile;
use super::run::{BaselineKind, KMetrics, MetricsReport};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: BaselineKind,
    pub seed: u64,
    pub n_samples: usize,
    pub metrics: Vec<KMetrics>,
    /// Metric minus the reference report's metric for the same seed.
    pub delta: Vec<KMetrics>,
    pub improved_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub n: usize,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        Ok(Self {
            n: values.len(),
            p25: percentile(values, 25.0)?,
            p50: percentile(values, 50.0)?,
            p75: percentile(values, 75.0)?,
        })
    }
}

/// Per-sample reciprocal-rank gain over the null prefix for one report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDistribution {
    pub variant: BaselineKind,
    pub seed: u64,
    pub values: Vec<f64>,
    pub quartiles: Option<Quartiles>,
}

/// One metric of one variant across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDistribution {
    pub variant: BaselineKind,
    pub k: usize,
    pub recall: Vec<f64>,
    pub recall_quartiles: Quartiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Variant deltas are measured against (no_memory when present).
    pub reference: BaselineKind,
    pub rows: Vec<ComparisonRow>,
    pub per_sample: Vec<SampleDistribution>,
    pub per_seed: Vec<SeedDistribution>,
}

fn sub(a: &[KMetrics], b: &[KMetrics]) -> Vec<KMetrics> {
    a.iter()
        .zip(b)
        .map(|(x, y)| KMetrics {
            k: x.k,
            recall: x.recall - y.recall,
            ndcg: x.ndcg - y.ndcg,
        })
        .collect()
}

pub fn compare(reports: &[MetricsReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Invalid("compare needs at least two reports".into()));
    }
    let ks: Vec<usize> = reports[0].metrics.iter().map(|m| m.k).collect();
    let mut by_seed: BTreeMap<u64, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        if r.metrics.iter().map(|m| m.k).collect::<Vec<_>>() != ks {
            return Err(Error::Invalid("reports use different K lists".into()));
        }
        by_seed.entry(r.seed).or_default().push(r);
    }
    for group in by_seed.values() {
        let first = group[0];
        for r in &group[1..] {
            if r.split_hash != first.split_hash
                || r.n_samples != first.n_samples
                || r.audit
                    .iter()
                    .map(|a| &a.sample_id)
                    .ne(first.audit.iter().map(|a| &a.sample_id))
            {
                return Err(Error::Invalid(format!(
                    "reports {} and {} (seed {}) cover different splits",
                    first.variant, r.variant, r.seed
                )));
            }
        }
    }
    let reference = if reports.iter().any(|r| r.variant == BaselineKind::NoMemory) {
        BaselineKind::NoMemory
    } else {
        reports[0].variant
    };

    let mut rows = Vec::new();
    let mut per_sample = Vec::new();
    for (&seed, group) in &by_seed {
        let base = group
            .iter()
            .find(|r| r.variant == reference)
            .copied()
            .unwrap_or(group[0]);
        for r in group {
            let improved = r.audit.iter().filter(|a| a.improved).count();
            rows.push(ComparisonRow {
                variant: r.variant,
                seed,
                n_samples: r.n_samples,
                metrics: r.metrics.clone(),
                delta: sub(&r.metrics, &base.metrics),
                improved_fraction: improved as f64 / r.n_samples.max(1) as f64,
            });
            let values: Vec<f64> = r
                .audit
                .iter()
                .map(|a| 1.0 / a.target_rank as f64 - 1.0 / a.baseline_rank as f64)
                .collect();
            let quartiles = if values.is_empty() {
                None
            } else {
                Some(Quartiles::of(&values)?)
            };
            per_sample.push(SampleDistribution {
                variant: r.variant,
                seed,
                values,
                quartiles,
            });
        }
    }

    let mut per_variant: BTreeMap<BaselineKind, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        per_variant.entry(r.variant).or_default().push(r);
    }
    let mut per_seed = Vec::new();
    for (variant, rs) in per_variant {
        for &k in &ks {
            let recall: Vec<f64> = rs
                .iter()
                .map(|r| r.recall(k).expect("same K list"))
                .collect();
            per_seed.push(SeedDistribution {
                variant,
                k,
                recall_quartiles: Quartiles::of(&recall)?,
                recall,
            });
        }
    }
    Ok(Comparison {
        reference,
        rows,
        per_sample,
        per_seed,
    })
}

/// Metric table as CSV: one row per (variant, seed).
pub fn comparison_csv(c: &Comparison) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string(), "seed".into(), "n_samples".into()];
    if let Some(r) = c.rows.first() {
        for m in &r.metrics {
            header.push(format!("recall@{}", m.k));
            header.push(format!("ndcg@{}", m.k));
        }
        for m in &r.metrics {
            header.push(format!("delta_recall@{}", m.k));
            header.push(format!("delta_ndcg@{}", m.k));
        }
    }
    header.push("improved_fraction".into());
    w.write_record(&header).expect("in-memory write");
    for r in &c.rows {
        let mut rec = vec![
            r.variant.to_string(),
            r.seed.to_string(),
            r.n_samples.to_string(),
        ];
        for m in r.metrics.iter().chain(&r.delta) {
            rec.push(m.recall.to_string());
            rec.push(m.ndcg.to_string());
        }
        rec.push(r.improved_fraction.to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub const AUDIT_HEADER: [&str; 9] = [
    "variant",
    "seed",
    "sample_id",
    "history_len",
    "bank_size",
    "retrieved_index",
    "retrieved_ts",
    "relative_position",
    "improved",
];

/// Timestamp audit: one row per evaluated sample of every memory-using
/// report. `relative_position` is `(retrieved_index - 1) / history_len`,
/// so 0 is the oldest interaction.
pub fn audit_csv(reports: &[MetricsReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(AUDIT_HEADER).expect("in-memory write");
    for r in reports.iter().filter(|r| r.variant.uses_memory()) {
        for a in &r.audit {
            let rel = a
                .retrieved_index
                .map(|m| ((m - 1) as f64 / a.history_len as f64).to_string())
                .unwrap_or_default();
            w.write_record([
                r.variant.to_string(),
                r.seed.to_string(),
                a.sample_id.clone(),
                a.history_len.to_string(),
                a.bank_size.to_string(),
                a.retrieved_index.map(|m| m.to_string()).unwrap_or_default(),
                a.retrieved_ts.map(|t| t.to_string()).unwrap_or_default(),
                rel,
                a.improved.to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// One parsed audit row.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRecord {
    pub variant: BaselineKind,
    pub seed: u64,
    pub sample_id: String,
    pub history_len: usize,
    pub bank_size: usize,
    pub retrieved_index: Option<usize>,
    pub retrieved_ts: Option<i64>,
    pub relative_position: Option<f64>,
    pub improved: bool,
}

/// Parses an audit export, rejecting anything that breaks its schema.
pub fn validate_audit_csv(text: &str) -> Result<Vec<AuditRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("audit header: {e}")))?;
    if header.iter().ne(AUDIT_HEADER) {
        return Err(Error::Format(format!(
            "audit header {header:?} does not match {AUDIT_HEADER:?}"
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Format(format!("audit line {line}: {e}")))?;
        let bad = |what: &str| Error::Format(format!("audit line {line}: invalid {what}"));
        let opt = |s: &str| {
            if s.is_empty() {
                None
            } else {
                Some(s.to_string())
            }
        };
        let variant: BaselineKind = rec[0].parse().map_err(|_| bad("variant"))?;
        let seed: u64 = rec[1].parse().map_err(|_| bad("seed"))?;
        let sample_id = rec[2].to_string();
        if sample_id.is_empty() {
            return Err(bad("sample_id"));
        }
        let history_len: usize = rec[3].parse().map_err(|_| bad("history_len"))?;
        let bank_size: usize = rec[4].parse().map_err(|_| bad("bank_size"))?;
        let retrieved_index = opt(&rec[5])
            .map(|s| s.parse::<usize>())
            .transpose()
            .map_err(|_| bad("retrieved_index"))?;
        let retrieved_ts = opt(&rec[6])
            .map(|s| s.parse::<i64>())
            .transpose()
            .map_err(|_| bad("retrieved_ts"))?;
        let relative_position = opt(&rec[7])
            .map(|s| s.parse::<f64>())
            .transpose()
            .map_err(|_| bad("relative_position"))?;
        let improved: bool = rec[8].parse().map_err(|_| bad("improved"))?;
        if history_len == 0 || bank_size >= history_len {
            return Err(bad("history_len/bank_size"));
        }
        let present = [
            retrieved_index.is_some(),
            retrieved_ts.is_some(),
            relative_position.is_some(),
        ];
        if present.iter().any(|&p| p != present[0]) {
            return Err(bad("retrieval columns (all or none must be set)"));
        }
        if let (Some(m), Some(rel)) = (retrieved_index, relative_position) {
            if m == 0 || m > history_len || !(0.0..1.0).contains(&rel) {
                return Err(bad("retrieved_index/relative_position"));
            }
        }
        if retrieved_index.is_none() && bank_size > 0 && variant.uses_memory() {
            return Err(bad(
                "retrieval columns (bank has entries but nothing was retrieved)",
            ));
        }
        out.push(AuditRecord {
            variant,
            seed,
            sample_id,
            history_len,
            bank_size,
            retrieved_index,
            retrieved_ts,
            relative_position,
            improved,
        });
    }
    Ok(out)
}
