//! Item ↔ token mapping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Occupies position 0 of every prompt; its embedding is the null prefix.
pub const NULL_PREFIX: TokenId = 0;
/// The prefix slot is encoded with the null-prefix token until a memory
/// vector is injected in its place.
pub const PREFIX_SLOT: TokenId = NULL_PREFIX;
/// Marks the position whose output predicts the next item.
pub const PRED: TokenId = 1;
/// First token id available to items.
pub const FIRST_ITEM_TOKEN: TokenId = 2;

/// Bidirectional mapping between catalog items and token sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct ItemVocabulary {
    items: Vec<String>,
    tokens: Vec<Vec<TokenId>>,
    n_tokens: usize,
    by_item: HashMap<String, usize>,
    by_tokens: HashMap<Vec<TokenId>, usize>,
}

/// On-disk form: item ids in index order with their token sequences.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    items: Vec<VocabEntry>,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    item: String,
    tokens: Vec<TokenId>,
}

impl TryFrom<VocabFile> for ItemVocabulary {
    type Error = Error;
    fn try_from(f: VocabFile) -> Result<Self> {
        Self::with_tokens(f.items.into_iter().map(|e| (e.item, e.tokens)).collect())
    }
}

impl From<ItemVocabulary> for VocabFile {
    fn from(v: ItemVocabulary) -> Self {
        VocabFile {
            items: v
                .items
                .into_iter()
                .zip(v.tokens)
                .map(|(item, tokens)| VocabEntry { item, tokens })
                .collect(),
        }
    }
}

impl ItemVocabulary {
    /// One token per item, assigned in the given order.
    pub fn single_token<I, S>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries = items
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s.into(), vec![FIRST_ITEM_TOKEN + i]))
            .collect();
        Self::with_tokens(entries)
    }

    /// Explicit token sequences per item. Sequences must be non-empty,
    /// unique, and avoid the special tokens.
    pub fn with_tokens(entries: Vec<(String, Vec<TokenId>)>) -> Result<Self> {
        let mut by_item = HashMap::with_capacity(entries.len());
        let mut by_tokens = HashMap::with_capacity(entries.len());
        let mut n_tokens = FIRST_ITEM_TOKEN;
        let mut items = Vec::with_capacity(entries.len());
        let mut tokens = Vec::with_capacity(entries.len());
        for (idx, (item, toks)) in entries.into_iter().enumerate() {
            if toks.is_empty() {
                return Err(Error::Invalid(format!("item `{item}` has no tokens")));
            }
            if toks.iter().any(|&t| t < FIRST_ITEM_TOKEN) {
                return Err(Error::Invalid(format!(
                    "item `{item}` uses a reserved token"
                )));
            }
            if by_item.insert(item.clone(), idx).is_some() {
                return Err(Error::Invalid(format!("duplicate item `{item}`")));
            }
            if by_tokens.insert(toks.clone(), idx).is_some() {
                return Err(Error::Invalid(format!(
                    "item `{item}` repeats another item's tokens"
                )));
            }
            n_tokens = n_tokens.max(toks.iter().max().unwrap() + 1);
            items.push(item);
            tokens.push(toks);
        }
        Ok(Self {
            items,
            tokens,
            n_tokens,
            by_item,
            by_tokens,
        })
    }

    /// Number of catalog items.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Token vocabulary size including special tokens.
    pub fn vocab_size(&self) -> usize {
        self.n_tokens
    }

    pub fn is_single_token(&self) -> bool {
        self.tokens.iter().all(|t| t.len() == 1)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn item(&self, idx: usize) -> &str {
        &self.items[idx]
    }

    pub fn index_of(&self, item: &str) -> Result<usize> {
        self.by_item
            .get(item)
            .copied()
            .ok_or_else(|| Error::UnknownItem(item.to_string()))
    }

    pub fn tokens_of(&self, item: &str) -> Result<&[TokenId]> {
        Ok(&self.tokens[self.index_of(item)?])
    }

    pub fn tokens_at(&self, idx: usize) -> &[TokenId] {
        &self.tokens[idx]
    }

    pub fn item_for_tokens(&self, tokens: &[TokenId]) -> Option<usize> {
        self.by_tokens.get(tokens).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_layout() {
        let v = ItemVocabulary::single_token(["x", "y"]).unwrap();
        assert_eq!(v.vocab_size(), 4);
        assert_eq!(v.tokens_of("y").unwrap(), &[3]);
        assert_eq!(v.item_for_tokens(&[2]), Some(0));
        assert!(v.is_single_token());
        assert!(matches!(v.tokens_of("z"), Err(Error::UnknownItem(s)) if s == "z"));
    }

    #[test]
    fn rejects_reserved_and_duplicate_tokens() {
        assert!(ItemVocabulary::with_tokens(vec![("a".into(), vec![PRED])]).is_err());
        assert!(ItemVocabulary::with_tokens(vec![("a".into(), vec![])]).is_err());
        assert!(ItemVocabulary::with_tokens(vec![
            ("a".into(), vec![2, 3]),
            ("b".into(), vec![2, 3])
        ])
        .is_err());
        let multi =
            ItemVocabulary::with_tokens(vec![("a".into(), vec![2, 3]), ("b".into(), vec![3])])
                .unwrap();
        assert!(!multi.is_single_token());
        assert_eq!(multi.vocab_size(), 4);
    }

    #[test]
    fn json_round_trip() {
        let v = ItemVocabulary::single_token(["p", "q", "r"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: ItemVocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
