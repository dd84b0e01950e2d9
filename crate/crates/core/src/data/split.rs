use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{window, UserSequence, WindowRule};
use crate::error::{Error, Result};

/// Global time boundaries. Intervals are closed-open: train is
/// `[train_start, train_end)`, validation `[train_end, val_end)`, test
/// `[val_end, test_end)`. Targets before `train_start` only serve as history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    #[serde(default)]
    pub train_start: Option<i64>,
    pub train_end: i64,
    pub val_end: i64,
    pub test_end: i64,
}

impl SplitBoundaries {
    pub fn validate(&self) -> Result<()> {
        let start_ok = self.train_start.map_or(true, |s| s < self.train_end);
        if !(start_ok && self.train_end < self.val_end && self.val_end < self.test_end) {
            return Err(Error::Config(format!(
                "split boundaries must be strictly increasing: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One prediction instance: the user's event at `target_pos` is predicted
/// from the `history` events strictly before it in time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub user: String,
    pub target: String,
    pub target_pos: usize,
    pub target_ts: i64,
    /// Number of events before the cut.
    pub history: usize,
    /// `h_t` as a half-open index range into the user's sequence.
    pub short: (usize, usize),
    /// Memory candidates as a half-open index range.
    pub candidates: (usize, usize),
    pub window: Vec<String>,
}

impl Sample {
    pub fn candidate_count(&self) -> usize {
        self.candidates.1 - self.candidates.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub boundaries: SplitBoundaries,
    pub rule: WindowRule,
    pub sequences: Vec<UserSequence>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    /// Lookup table from user id to sequence index.
    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.sequences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.user.as_str(), i))
            .collect()
    }

    pub fn sequence_of(&self, sample: &Sample) -> Result<&UserSequence> {
        self.sequences
            .iter()
            .find(|s| s.user == sample.user)
            .ok_or_else(|| Error::Invalid(format!("sample {} has no sequence", sample.id)))
    }
}

/// Emits one sample per `(user, position)` whose target timestamp falls in
/// a split interval, in `(user, position)` order.
pub fn split_chronological(
    sequences: Vec<UserSequence>,
    boundaries: SplitBoundaries,
    rule: WindowRule,
) -> Result<DatasetSplit> {
    boundaries.validate()?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for seq in &sequences {
        let mut cut = 0;
        for pos in 0..seq.len() {
            let ts = seq.timestamps[pos];
            if pos > 0 && seq.timestamps[pos - 1] < ts {
                cut = pos;
            }
            let bucket = if boundaries.train_start.is_some_and(|s| ts < s) {
                None
            } else if ts < boundaries.train_end {
                Some(&mut train)
            } else if ts < boundaries.val_end {
                Some(&mut val)
            } else if ts < boundaries.test_end {
                Some(&mut test)
            } else {
                None
            };
            let Some(bucket) = bucket else { continue };
            if cut == 0 {
                continue;
            }
            let w = window(cut, rule)?;
            bucket.push(Sample {
                id: format!("{}#{}", seq.user, pos),
                user: seq.user.clone(),
                target: seq.items[pos].clone(),
                target_pos: pos,
                target_ts: ts,
                history: cut,
                short: (w.short.start, w.short.end),
                candidates: (w.candidates.start, w.candidates.end),
                window: seq.items[w.short.clone()].to_vec(),
            });
        }
    }
    for (name, list) in [("train", &train), ("validation", &val), ("test", &test)] {
        if list.is_empty() {
            log::warn!("{name} split is empty");
        }
    }
    Ok(DatasetSplit {
        boundaries,
        rule,
        sequences,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user: &str, ts: &[i64]) -> UserSequence {
        UserSequence {
            user: user.into(),
            items: (0..ts.len()).map(|i| format!("i{i}")).collect(),
            timestamps: ts.to_vec(),
        }
    }

    fn bounds() -> SplitBoundaries {
        SplitBoundaries {
            train_start: None,
            train_end: 10,
            val_end: 20,
            test_end: 30,
        }
    }

    #[test]
    fn boundary_goes_to_later_interval() {
        let s = split_chronological(
            vec![seq("u", &[1, 5, 10, 20, 29, 30])],
            bounds(),
            WindowRule::default(),
        )
        .unwrap();
        assert_eq!(s.train.len(), 1);
        assert_eq!(s.val.len(), 1);
        assert_eq!(s.val[0].target_ts, 10);
        assert_eq!(s.test.len(), 2);
    }

    #[test]
    fn equal_timestamps_never_leak() {
        let s = split_chronological(
            vec![seq("u", &[1, 3, 3, 3, 4])],
            bounds(),
            WindowRule::default(),
        )
        .unwrap();
        for sample in &s.train {
            assert!(sample.history <= sample.target_pos);
            let seq = &s.sequences[0];
            assert!(seq.timestamps[..sample.history]
                .iter()
                .all(|&t| t < sample.target_ts));
        }
        let histories: Vec<_> = s.train.iter().map(|x| x.history).collect();
        assert_eq!(histories, [1, 1, 1, 4]);
    }

    #[test]
    fn history_start_excludes_early_targets() {
        let mut b = bounds();
        b.train_start = Some(4);
        let s =
            split_chronological(vec![seq("u", &[1, 2, 3, 5])], b, WindowRule::default()).unwrap();
        assert_eq!(s.train.len(), 1);
        assert_eq!(s.train[0].history, 3);
    }

    #[test]
    fn ordered_by_user_then_cut() {
        let s = split_chronological(
            vec![seq("a", &[1, 2, 3]), seq("b", &[1, 2])],
            bounds(),
            WindowRule::default(),
        )
        .unwrap();
        let ids: Vec<_> = s.train.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, ["a#1", "a#2", "b#1"]);
    }

    #[test]
    fn rejects_unordered_boundaries() {
        let mut b = bounds();
        b.val_end = 5;
        assert!(split_chronological(vec![], b, WindowRule::default()).is_err());
    }
}
