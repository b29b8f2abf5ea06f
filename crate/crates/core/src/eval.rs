//! Bias recovery against ground truth and ranking quality.

use crate::clicks::true_bias_logit;
use crate::data::{Dataset, LabelTable, ScoreTable};
use crate::error::{Error, Result};

/// Subtracts the first entry from every entry.
pub fn anchor_bias(theta: &[f64]) -> Vec<f64> {
    let first = theta.first().copied().unwrap_or(0.0);
    theta.iter().map(|t| t - first).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankError {
    pub rank: usize,
    pub theta_true: f64,
    pub theta_hat: f64,
    pub abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasRecoveryReport {
    pub ranks: Vec<RankError>,
    pub mae: f64,
    pub max_err: f64,
}

/// Compares anchored `theta_hat[..k]` with `-ln k`, averaging over ranks
/// `1..=k` (rank 1 contributes zero error).
pub fn bias_recovery(theta_hat: &[f64], k: usize) -> Result<BiasRecoveryReport> {
    if k == 0 || theta_hat.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need {k} bias logits, got {}",
            theta_hat.len()
        )));
    }
    let anchored = anchor_bias(&theta_hat[..k]);
    let ranks: Vec<RankError> = anchored
        .iter()
        .enumerate()
        .map(|(i, &hat)| {
            let truth = true_bias_logit(i + 1);
            RankError {
                rank: i + 1,
                theta_true: truth,
                theta_hat: hat,
                abs_err: (hat - truth).abs(),
            }
        })
        .collect();
    let mae = ranks.iter().map(|r| r.abs_err).sum::<f64>() / k as f64;
    let max_err = ranks.iter().map(|r| r.abs_err).fold(0.0, f64::max);
    Ok(BiasRecoveryReport {
        ranks,
        mae,
        max_err,
    })
}

/// nDCG@k of one query with gain `2^label - 1` and discount
/// `1 / log2(rank + 1)`. Documents are ordered by descending score, ties by
/// position (documents are stored in ascending doc id order). Returns `None`
/// when no label is positive.
pub fn ndcg_at_k(scores: &[f64], labels: &[f64], k: usize) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one score per label");
    let gain = |l: f64| l.exp2() - 1.0;
    let dcg = |order: &[usize]| -> f64 {
        order
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &d)| gain(labels[d]) / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal: Vec<usize> = (0..labels.len()).collect();
    ideal.sort_by(|&a, &b| labels[b].total_cmp(&labels[a]).then(a.cmp(&b)));
    let idcg = dcg(&ideal);
    if idcg <= 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Some(dcg(&order) / idcg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingReport {
    pub mean_ndcg: f64,
    /// `None` for queries excluded because no label is positive.
    pub per_query: Vec<Option<f64>>,
    pub excluded: usize,
}

/// Mean nDCG@k over the queries of `ds` that have a positive label.
pub fn ranking_report(
    ds: &Dataset,
    scores: &ScoreTable,
    labels: &LabelTable,
    k: usize,
) -> Result<RankingReport> {
    scores.check_aligned(ds)?;
    labels.check_aligned(ds)?;
    let per_query: Vec<Option<f64>> = scores
        .values
        .iter()
        .zip(&labels.values)
        .map(|(s, l)| ndcg_at_k(s, l, k))
        .collect();
    let kept: Vec<f64> = per_query.iter().flatten().copied().collect();
    let mean_ndcg = if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    Ok(RankingReport {
        mean_ndcg,
        excluded: per_query.len() - kept.len(),
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchoring_examples() {
        let a = anchor_bias(&[0.5, -0.2, -0.9]);
        for (x, y) in a.iter().zip([0.0, -0.7, -1.4]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(anchor_bias(&a), a);
        assert_eq!(anchor_bias(&[2.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn recovery_examples() {
        let exact: Vec<f64> = (1..=5).map(true_bias_logit).collect();
        assert_eq!(bias_recovery(&exact, 5).unwrap().mae, 0.0);
        let shifted: Vec<f64> = exact.iter().map(|t| t + 0.7).collect();
        assert!(bias_recovery(&shifted, 5).unwrap().mae < 1e-12);
        let r = bias_recovery(&[0.0, -0.5], 2).unwrap();
        assert!((r.mae - 0.09657).abs() < 1e-5, "{}", r.mae);
        assert!((r.max_err - 0.193147).abs() < 1e-6);
        assert!(bias_recovery(&[0.0], 2).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[3.0, 2.0, 1.0], &[2.0, 1.0, 0.0], 10), Some(1.0));
        let v = ndcg_at_k(&[0.0, 1.0], &[3.0, 2.0], 10).unwrap();
        let dcg = 3.0 + 7.0 / 3f64.log2();
        let idcg = 7.0 + 3.0 / 3f64.log2();
        assert!((dcg - 7.41651).abs() < 1e-5 && (idcg - 8.89279).abs() < 1e-5);
        assert!((v - 0.83399).abs() < 1e-5, "{v}");
        assert_eq!(ndcg_at_k(&[-4.0], &[1.5], 10), Some(1.0));
        assert_eq!(ndcg_at_k(&[1.0, 2.0], &[0.0, 0.0], 10), None);
    }

    #[test]
    fn ndcg_ties_break_by_position() {
        // Equal scores keep document order: relevant doc last is worse.
        let a = ndcg_at_k(&[1.0, 1.0], &[0.0, 2.0], 10).unwrap();
        let b = ndcg_at_k(&[1.0, 1.0], &[2.0, 0.0], 10).unwrap();
        assert!(a < 1.0);
        assert_eq!(b, 1.0);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matches_exhaustive_oracle(
            docs in prop::collection::vec((-5.0f64..5.0, 0.0f64..4.0), 1..=6),
            k in 1usize..8,
        ) {
            let scores: Vec<f64> = docs.iter().map(|d| d.0).collect();
            let labels: Vec<f64> = docs.iter().map(|d| d.1).collect();
            let dcg = |order: &[usize]| -> f64 {
                order.iter().take(k).enumerate()
                    .map(|(i, &d)| (labels[d].exp2() - 1.0) / ((i + 2) as f64).log2())
                    .sum()
            };
            let best = permutations(labels.len()).iter().map(|p| dcg(p)).fold(0.0, f64::max);
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let got = ndcg_at_k(&scores, &labels, k);
            if best > 0.0 {
                let v = got.unwrap();
                prop_assert!((v - dcg(&order) / best).abs() < 1e-12);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            } else {
                prop_assert!(got.is_none());
            }
        }

        #[test]
        fn invariant_to_monotone_transforms(
            docs in prop::collection::vec((-5.0f64..5.0, 0.0f64..4.0), 1..12),
        ) {
            let scores: Vec<f64> = docs.iter().map(|d| d.0).collect();
            let labels: Vec<f64> = docs.iter().map(|d| d.1).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| 3.0 * s.exp() + 1.0).collect();
            prop_assert_eq!(ndcg_at_k(&scores, &labels, 10), ndcg_at_k(&mapped, &labels, 10));
        }

        #[test]
        fn recovery_ignores_global_shift(
            theta in prop::collection::vec(-3.0f64..3.0, 1..10),
            c in -10.0f64..10.0,
        ) {
            let k = theta.len();
            let shifted: Vec<f64> = theta.iter().map(|t| t + c).collect();
            let a = bias_recovery(&theta, k).unwrap().mae;
            let b = bias_recovery(&shifted, k).unwrap().mae;
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
