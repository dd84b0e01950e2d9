use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Short-term window size and the cap on how much history is considered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRule {
    pub short: usize,
    pub max: usize,
}

impl Default for WindowRule {
    fn default() -> Self {
        Self {
            short: 10,
            max: 100,
        }
    }
}

/// Index ranges (0-based, into the user's event list) around a cut.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    /// The short-term context `h_t`: the last `short` considered events.
    pub short: Range<usize>,
    /// Memory candidates: considered events before the short window.
    pub candidates: Range<usize>,
}

impl Window {
    pub fn considered(&self) -> Range<usize> {
        self.candidates.start..self.short.end
    }
}

/// Splits the `cut` events preceding a target into `h_t` and memory
/// candidates, looking back at most `rule.max` events.
///
/// With 1-based positions: a history of 25 gives `h_t = 16..=25` and
/// candidates `1..=15`; a history of 130 only considers `31..=130`.
pub fn window(cut: usize, rule: WindowRule) -> Result<Window> {
    if cut == 0 {
        return Err(Error::Invalid(
            "cut must leave at least one past event".into(),
        ));
    }
    if rule.short == 0 || rule.max < rule.short {
        return Err(Error::Config(format!(
            "window rule needs 0 < short <= max, got {rule:?}"
        )));
    }
    let start = cut.saturating_sub(rule.max);
    let short_start = cut.saturating_sub(rule.short).max(start);
    Ok(Window {
        short: short_start..cut,
        candidates: start..short_start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_examples() {
        let r = WindowRule::default();
        let w = window(25, r).unwrap();
        assert_eq!((w.short, w.candidates), (15..25, 0..15));
        let w = window(130, r).unwrap();
        assert_eq!(w.considered(), 30..130);
        assert_eq!(w.candidates.len(), 90);
        let w = window(10, r).unwrap();
        assert_eq!((w.short, w.candidates), (0..10, 0..0));
        assert!(window(0, r).is_err());
    }
}
