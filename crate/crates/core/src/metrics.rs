//! Pointwise and ranking metrics.
//!
//! NDCG uses the clicked/unclicked label as gain and a `1 / log2(rank + 1)`
//! discount; lists without any relevant item are excluded from averages.

use crate::diffcore::bce_term;
use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l > 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives (Mann-Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] > 0).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean binary cross-entropy.
pub fn logloss(preds: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    if preds.is_empty() {
        return 0.0;
    }
    preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_term(p, y as f64))
        .sum::<f64>()
        / preds.len() as f64
}

/// NDCG@k of one list. `Ok(None)` flags a list with no relevant item.
pub fn ndcg_at_k(scores: &[f64], relevance: &[f64], k: usize) -> Result<Option<f64>> {
    if k < 1 {
        return Err(Error::Invalid("ndcg cutoff k must be at least 1".into()));
    }
    if scores.is_empty() || scores.len() != relevance.len() {
        return Err(Error::Invalid("ndcg needs equally sized, nonempty lists".into()));
    }
    let dcg = |order: &[usize]| -> f64 {
        order
            .iter()
            .take(k)
            .enumerate()
            .map(|(pos, &i)| relevance[i] / ((pos + 2) as f64).log2())
            .sum()
    };
    let mut predicted: Vec<usize> = (0..scores.len()).collect();
    predicted.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ideal: Vec<usize> = (0..scores.len()).collect();
    ideal.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]).then(a.cmp(&b)));
    let idcg = dcg(&ideal);
    if idcg <= 0.0 {
        return Ok(None);
    }
    Ok(Some(dcg(&predicted) / idcg))
}

/// Mean NDCG@k over lists, skipping lists without relevant items.
pub fn mean_ndcg<'a>(lists: impl IntoIterator<Item = (&'a [f64], &'a [f64])>, k: usize) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, r) in lists {
        if let Some(v) = ndcg_at_k(s, r, k)? {
            total += v;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::RngStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_simple_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]), Some(1.0));
        assert_eq!(auc(&[0.3, 0.3, 0.3], &[1, 0, 1]), Some(0.5));
        assert_eq!(auc(&[0.3, 0.2], &[1, 1]), None);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = RngStream::new(99);
        for _ in 0..20 {
            // coarse grid so ties occur
            let scores: Vec<f64> = (0..20).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
            let mut labels: Vec<u8> = (0..20).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            assert_eq!(auc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
        }
    }

    #[test]
    fn ndcg_cases() {
        let rel = [1.0, 0.0, 0.0];
        assert_eq!(ndcg_at_k(&[0.9, 0.5, 0.1], &rel, 3).unwrap(), Some(1.0));
        let second = ndcg_at_k(&[0.5, 0.9, 0.1], &rel, 3).unwrap().unwrap();
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((second - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(&[0.5, 0.9], &[0.0, 0.0], 3).unwrap(), None);
        assert!(ndcg_at_k(&[0.5], &[1.0], 0).is_err());
    }

    #[test]
    fn logloss_half() {
        assert!((logloss(&[0.5, 0.5], &[1, 0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            raw in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(auc(&scores, &labels), auc(&transformed, &labels));
        }
    }
}
