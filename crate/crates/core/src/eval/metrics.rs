use crate::error::{Error, Result};
use crate::vocab::ItemVocabulary;

/// 1 when `rank <= k` (the boundary counts as a hit).
pub fn recall_at_k(rank: usize, k: usize) -> Result<f64> {
    check(rank, k)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` inside the cutoff.
pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    check(rank, k)?;
    Ok(if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    })
}

fn check(rank: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    if rank == 0 {
        return Err(Error::Invalid("ranks start at 1".into()));
    }
    Ok(())
}

/// Item indices by descending score, ties by ascending index.
pub fn ranked_list(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based rank of `target` under the ordering of [`ranked_list`], without
/// sorting.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

/// Per-item scores from next-token logits: the logit of each item's first
/// token. Exact for single-token items.
pub fn item_scores(logits: &[f64], vocab: &ItemVocabulary) -> Vec<f64> {
    (0..vocab.len())
        .map(|i| logits[vocab.tokens_at(i)[0]])
        .collect()
}

/// Ranks items by ascending L2 distance between `generated` and each row of
/// `embeddings` (ties by ascending index).
pub fn ground_l2(generated: &[f64], embeddings: &[Vec<f64>]) -> Result<Vec<usize>> {
    let neg: Vec<f64> = embeddings
        .iter()
        .map(|e| {
            if e.len() != generated.len() {
                return Err(Error::Invalid(format!(
                    "embedding width {} differs from generated width {}",
                    e.len(),
                    generated.len()
                )));
            }
            Ok(-e
                .iter()
                .zip(generated)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt())
        })
        .collect::<Result<_>>()?;
    Ok(ranked_list(&neg))
}

/// Percentile with linear interpolation between closest ranks
/// (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("percentile of an empty list".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_ties() {
        let s = [0.5, 0.9, 0.5, 0.1];
        assert_eq!(ranked_list(&s), [1, 0, 2, 3]);
        for (pos, &item) in ranked_list(&s).iter().enumerate() {
            assert_eq!(rank_of(&s, item), pos + 1);
        }
    }

    #[test]
    fn l2_grounding() {
        let emb = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        assert_eq!(ground_l2(&[1.0, 1.0], &emb).unwrap()[0], 1);
        // items 0 and 2 are equidistant from (1, -0.5); item 1 is farther
        assert_eq!(ground_l2(&[1.0, -0.5], &emb).unwrap(), [0, 2, 1]);
        assert!(ground_l2(&[1.0], &emb).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 25.0).unwrap(), 1.75);
        assert_eq!(percentile(&v, 50.0).unwrap(), 2.5);
        assert_eq!(percentile(&v, 75.0).unwrap(), 3.25);
        assert_eq!(percentile(&[7.0], 50.0).unwrap(), 7.0);
    }
}
