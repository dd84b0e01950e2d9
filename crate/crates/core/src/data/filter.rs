use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{InteractionEvent, UserSequence};
use crate::error::{Error, Result};
use crate::vocab::ItemVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    pub min_item_interactions: usize,
    pub min_seq_len: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            min_item_interactions: 5,
            min_seq_len: 20,
        }
    }
}

/// Drops rare items and short users until neither rule removes anything,
/// then groups the survivors into time-sorted sequences (users in id order)
/// and builds a single-token vocabulary over the surviving items.
pub fn filter_and_sequence(
    events: &[InteractionEvent],
    rules: FilterRules,
) -> Result<(Vec<UserSequence>, ItemVocabulary)> {
    let mut alive: Vec<&InteractionEvent> = events.iter().collect();
    loop {
        let before = alive.len();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for e in &alive {
            *item_counts.entry(e.item.as_str()).or_default() += 1;
        }
        alive.retain(|e| item_counts[e.item.as_str()] >= rules.min_item_interactions);
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for e in &alive {
            *user_counts.entry(e.user.as_str()).or_default() += 1;
        }
        alive.retain(|e| user_counts[e.user.as_str()] >= rules.min_seq_len);
        if alive.len() == before {
            break;
        }
    }
    if alive.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no events survive filtering ({} items / {} events per user minimum)",
            rules.min_item_interactions, rules.min_seq_len
        )));
    }

    let mut by_user: BTreeMap<&str, Vec<&InteractionEvent>> = BTreeMap::new();
    for e in &alive {
        by_user.entry(e.user.as_str()).or_default().push(e);
    }
    let sequences = by_user
        .into_iter()
        .map(|(user, mut evs)| {
            // stable: ties keep input order
            evs.sort_by_key(|e| e.ts);
            UserSequence {
                user: user.to_string(),
                items: evs.iter().map(|e| e.item.clone()).collect(),
                timestamps: evs.iter().map(|e| e.ts).collect(),
            }
        })
        .collect();

    let mut items: Vec<&str> = alive.iter().map(|e| e.item.as_str()).collect();
    items.sort_unstable();
    items.dedup();
    let vocab = ItemVocabulary::single_token(items)?;
    Ok((sequences, vocab))
}

/// Flattens sequences back into an event list (user order, then time order).
pub fn sequences_to_events(sequences: &[UserSequence]) -> Vec<InteractionEvent> {
    sequences
        .iter()
        .flat_map(|s| {
            s.items
                .iter()
                .zip(&s.timestamps)
                .map(|(item, &ts)| InteractionEvent {
                    user: s.user.clone(),
                    item: item.clone(),
                    ts,
                })
        })
        .collect()
}
