//! Ranking metrics for link prediction.

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApAuc {
    pub ap: f64,
    pub auc: f64,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(invalid(
            "metrics need at least one positive and one negative",
        ));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(invalid(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Mean precision at the rank of each positive. Ranks come from a stable
/// descending sort, so tied scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / hits as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half (Mann-Whitney with midranks).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn evaluate_ap_auc(scores: &[f64], labels: &[bool]) -> Result<ApAuc> {
    Ok(ApAuc {
        ap: average_precision(scores, labels)?,
        auc: roc_auc(scores, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(s: &[f64], l: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    fn rank_walk_ap(s: &[f64], l: &[bool]) -> f64 {
        // rank of i = items strictly above it plus earlier ties
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..s.len() {
            if !l[i] {
                continue;
            }
            let above: Vec<usize> = (0..s.len())
                .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i))
                .collect();
            let pos_above = above.iter().filter(|&&j| l[j]).count() as f64;
            total += (pos_above + 1.0) / (above.len() as f64 + 1.0);
            count += 1.0;
        }
        total / count
    }

    #[test]
    fn examples() {
        let r = evaluate_ap_auc(&[0.9, 0.1], &[true, false]).unwrap();
        assert_eq!((r.ap, r.auc), (1.0, 1.0));
        let r = evaluate_ap_auc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((r.auc - 0.5).abs() < 1e-12);
        assert!((r.ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(evaluate_ap_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(evaluate_ap_auc(&[0.1, 0.2], &[false, false]).is_err());
        assert!(evaluate_ap_auc(&[0.1], &[true, false]).is_err());
        assert!(evaluate_ap_auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_brute_force(v in prop::collection::vec((0u8..6, any::<bool>()), 2..30)) {
            let s: Vec<f64> = v.iter().map(|p| p.0 as f64 / 5.0).collect();
            let mut l: Vec<bool> = v.iter().map(|p| p.1).collect();
            l[0] = true;
            l[1] = false;
            let r = evaluate_ap_auc(&s, &l).unwrap();
            prop_assert!((r.auc - pairwise_auc(&s, &l)).abs() < 1e-12);
            prop_assert!((r.ap - rank_walk_ap(&s, &l)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.ap) && (0.0..=1.0).contains(&r.auc));
        }
    }
}
