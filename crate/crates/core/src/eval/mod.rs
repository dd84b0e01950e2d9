//! Full-ranking evaluation, retrieval baselines and report comparison.

mod compare;
mod metrics;
mod run;

pub use compare::{
    audit_csv, compare, comparison_csv, validate_audit_csv, AuditRecord, Comparison, ComparisonRow,
    Quartiles, SampleDistribution, SeedDistribution, AUDIT_HEADER,
};
pub use metrics::{
    cosine, ground_l2, item_scores, ndcg_at_k, percentile, rank_of, ranked_list, recall_at_k,
};
pub use run::{run_eval, AuditRow, BaselineKind, EvalConfig, EvalModels, KMetrics, MetricsReport};
