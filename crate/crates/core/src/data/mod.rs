//! Interaction logs: ingestion, filtering, windowing, chronological splits
//! and the planted-anchor synthetic generator.

mod filter;
mod ingest;
mod split;
mod synthetic;
mod window;

use serde::{Deserialize, Serialize};

pub use filter::{filter_and_sequence, sequences_to_events, FilterRules};
pub use ingest::{ingest, parse_events};
pub use split::{split_chronological, DatasetSplit, Sample, SplitBoundaries};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticDataset, UserPlan};
pub use window::{window, Window, WindowRule};

/// One `(user, item, timestamp)` record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user: String,
    pub item: String,
    pub ts: i64,
}

/// A user's events in ascending timestamp order; ties keep input order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
