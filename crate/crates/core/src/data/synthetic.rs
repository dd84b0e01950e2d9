//! Planted-anchor generator.
//!
//! Every user has one anchor item `a_i` early in their history and, with
//! probability `p_long`, ends on its partner `b_i`. Everything else is a
//! filler Markov chain, so `b_i` is only predictable by looking back at the
//! anchor. History events are spaced `history_step` apart starting at
//! `history_start`; the final event lands uniformly in
//! `[train_start, test_end)` so that only final events become samples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{InteractionEvent, SplitBoundaries, WindowRule};
use crate::error::{Error, Result};

/// Successor weights of the filler chain, most likely first.
const SUCCESSOR_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_item_pairs: usize,
    pub n_fillers: usize,
    pub seq_len: usize,
    /// Inclusive 1-based range of anchor positions.
    pub anchor_min: usize,
    pub anchor_max: usize,
    pub p_long: f64,
    pub seed: u64,
    pub history_start: i64,
    pub history_step: i64,
    pub train_start: i64,
    /// Length of one split "month"; train spans ten, validation and test one each.
    pub month: i64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_item_pairs: 200,
            n_fillers: 300,
            seq_len: 60,
            anchor_min: 1,
            anchor_max: 20,
            p_long: 0.7,
            seed: 0,
            history_start: 0,
            history_step: 3600,
            train_start: 1_000_000,
            month: 100_000,
        }
    }
}

impl SyntheticConfig {
    pub fn boundaries(&self) -> SplitBoundaries {
        let train_end = self.train_start + 10 * self.month;
        SplitBoundaries {
            train_start: Some(self.train_start),
            train_end,
            val_end: train_end + self.month,
            test_end: train_end + 2 * self.month,
        }
    }

    pub fn validate(&self, rule: WindowRule) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("synthetic: {msg}")));
        if self.n_users == 0 || self.n_item_pairs == 0 {
            return fail("need at least one user and one item pair".into());
        }
        if self.n_fillers < SUCCESSOR_WEIGHTS.len() {
            return fail(format!(
                "need at least {} filler items",
                SUCCESSOR_WEIGHTS.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.p_long) {
            return fail(format!("p_long {} outside [0, 1]", self.p_long));
        }
        if self.anchor_min == 0 || self.anchor_min > self.anchor_max {
            return fail(format!(
                "anchor range {}..={} must be 1-based and non-empty",
                self.anchor_min, self.anchor_max
            ));
        }
        if self.seq_len <= rule.short + self.anchor_max {
            return fail(format!(
                "seq_len {} must exceed short window {} + anchor_max {}",
                self.seq_len, rule.short, self.anchor_max
            ));
        }
        let history = self.seq_len - 1;
        if history > rule.max && self.anchor_min <= history - rule.max {
            return fail("anchor may fall outside the considered history".into());
        }
        let last_history = self.history_start + (history as i64 - 1) * self.history_step;
        if self.history_step <= 0 || self.history_start < 0 || last_history >= self.train_start {
            return fail("history events must be increasing and end before train_start".into());
        }
        if self.month <= 0 {
            return fail("month must be positive".into());
        }
        Ok(())
    }

    pub fn anchor_item(pair: usize) -> String {
        format!("a{pair}")
    }

    pub fn paired_item(pair: usize) -> String {
        format!("b{pair}")
    }

    pub fn filler_item(idx: usize) -> String {
        format!("f{idx}")
    }

    pub fn user_id(idx: usize) -> String {
        format!("u{idx:05}")
    }
}

/// What was planted for one user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPlan {
    pub user: String,
    pub pair: usize,
    /// 0-based index of the anchor in the user's sequence.
    pub anchor_pos: usize,
    pub anchor: String,
    pub paired: String,
    /// Whether the final event is the anchor's partner.
    pub long: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub events: Vec<InteractionEvent>,
    pub plans: Vec<UserPlan>,
}

fn mix(seed: u64) -> u64 {
    // splitmix64 finalizer, so nearby seeds give unrelated user streams
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn successor_table(cfg: &SyntheticConfig) -> Vec<[usize; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed));
    let all: Vec<usize> = (0..cfg.n_fillers).collect();
    (0..cfg.n_fillers)
        .map(|_| {
            let picked: Vec<usize> = all.choose_multiple(&mut rng, 4).copied().collect();
            [picked[0], picked[1], picked[2], picked[3]]
        })
        .collect()
}

fn next_filler(rng: &mut ChaCha8Rng, succ: &[usize; 4]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (w, &s) in SUCCESSOR_WEIGHTS.iter().zip(succ) {
        acc += w;
        if u < acc {
            return s;
        }
    }
    succ[3]
}

pub fn generate_synthetic(cfg: &SyntheticConfig, rule: WindowRule) -> Result<SyntheticDataset> {
    cfg.validate(rule)?;
    let table = successor_table(cfg);
    let mut pair_order: Vec<usize> = (0..cfg.n_item_pairs).collect();
    pair_order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x5eed)));
    let bounds = cfg.boundaries();
    let user_base = mix(cfg.seed.wrapping_add(1));

    let per_user: Vec<(Vec<InteractionEvent>, UserPlan)> = (0..cfg.n_users)
        .into_par_iter()
        .map(|u| {
            let mut rng = ChaCha8Rng::seed_from_u64(user_base ^ u as u64);
            let pair = pair_order[u % cfg.n_item_pairs];
            let anchor_pos = rng.gen_range(cfg.anchor_min..=cfg.anchor_max) - 1;
            let long = rng.gen_bool(cfg.p_long);
            let final_ts = rng.gen_range(bounds.train_start.unwrap_or(0)..bounds.test_end);

            let history = cfg.seq_len - 1;
            let mut items = Vec::with_capacity(cfg.seq_len);
            let mut prev = rng.gen_range(0..cfg.n_fillers);
            for pos in 0..history {
                if pos == anchor_pos {
                    items.push(SyntheticConfig::anchor_item(pair));
                    continue;
                }
                if !items.is_empty() {
                    prev = next_filler(&mut rng, &table[prev]);
                }
                items.push(SyntheticConfig::filler_item(prev));
            }
            let next = next_filler(&mut rng, &table[prev]);
            items.push(if long {
                SyntheticConfig::paired_item(pair)
            } else {
                SyntheticConfig::filler_item(next)
            });

            let user = SyntheticConfig::user_id(u);
            let events = items
                .into_iter()
                .enumerate()
                .map(|(pos, item)| InteractionEvent {
                    user: user.clone(),
                    item,
                    ts: if pos < history {
                        cfg.history_start + pos as i64 * cfg.history_step
                    } else {
                        final_ts
                    },
                })
                .collect();
            let plan = UserPlan {
                user,
                pair,
                anchor_pos,
                anchor: SyntheticConfig::anchor_item(pair),
                paired: SyntheticConfig::paired_item(pair),
                long,
            };
            (events, plan)
        })
        .collect();

    let mut events = Vec::with_capacity(cfg.n_users * cfg.seq_len);
    let mut plans = Vec::with_capacity(cfg.n_users);
    for (e, p) in per_user {
        events.extend(e);
        plans.push(p);
    }
    Ok(SyntheticDataset { events, plans })
}
