//! Slice-discovery and ranking metrics.
//!
//! Ground-truth slices are member sets; predicted slices are member
//! orderings (most likely member first). Orderings shorter than `k` count
//! the missing positions as misses.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{euclidean, Matrix};

/// Members a predicted slice needs among its top [`BC_LABEL_TOP`] to be
/// labeled bias-conflicting for slice-ranking AP.
pub const BC_LABEL_MIN_HITS: usize = 6;
pub const BC_LABEL_TOP: usize = 10;

/// `k` used to associate ground-truth slices with predicted slices when
/// computing slice recall and AP.
pub const MATCH_K: usize = 10;

fn hits<Id: Ord>(order: &[Id], members: &BTreeSet<Id>, k: usize) -> usize {
    order.iter().take(k).filter(|id| members.contains(id)).count()
}

/// `P_k(s, ŝ)`: fraction of the top `k` of `order` that belong to `members`.
pub fn slice_similarity<Id: Ord>(members: &BTreeSet<Id>, order: &[Id], k: usize) -> f64 {
    hits(order, members, k) as f64 / k as f64
}

/// Index of the predicted slice maximizing `P_k`; ties go to the first.
pub fn best_match<Id: Ord, O: AsRef<[Id]>>(members: &BTreeSet<Id>, pred: &[O], k: usize) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in pred.iter().enumerate() {
        let p = slice_similarity(members, o.as_ref(), k);
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((j, p));
        }
    }
    best
}

/// Mean over ground-truth slices of the best predicted slice's `P_k`.
pub fn precision_at_k<Id: Ord, O: AsRef<[Id]>>(gt: &[BTreeSet<Id>], pred: &[O], k: usize) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("precision_at_k needs at least one ground-truth slice"));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let total: f64 = gt
        .iter()
        .map(|s| best_match(s, pred, k).map_or(0.0, |(_, p)| p))
        .sum();
    Ok(total / gt.len() as f64)
}

/// Average precision of `ranking` against `positives`; positives never
/// ranked contribute zero precision.
pub fn average_precision<Id: Ord>(ranking: &[Id], positives: &BTreeSet<Id>) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::UndefinedMetric("average precision needs at least one positive"));
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().enumerate() {
        if positives.contains(id) {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / positives.len() as f64)
}

/// Mean AP over classes that contain at least one bias-conflicting sample.
pub fn avg_ap<Id: Ord, R: AsRef<[Id]>>(per_class: &[(R, BTreeSet<Id>)]) -> Result<f64> {
    let aps = per_class
        .iter()
        .filter(|(_, pos)| !pos.is_empty())
        .map(|(r, pos)| average_precision(r.as_ref(), pos))
        .collect::<Result<Vec<_>>>()?;
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("no class contains a bias-conflicting sample"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Precision of the top `k` for each `k` in `ks`.
pub fn precision_curve<Id: Ord>(ranking: &[Id], positives: &BTreeSet<Id>, ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| {
            if k == 0 {
                0.0
            } else {
                hits(ranking, positives, k) as f64 / k as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceRecallAp {
    pub avg_recall: f64,
    pub avg_ap: f64,
}

/// Associates every ground-truth slice with its best predicted slice by
/// `P_10`, then averages Recall@|s| and AP of the matched ordering.
pub fn slice_match_recall_ap<Id: Ord, O: AsRef<[Id]>>(gt: &[BTreeSet<Id>], pred: &[O]) -> Result<SliceRecallAp> {
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("slice recall needs at least one ground-truth slice"));
    }
    let (mut recall, mut ap) = (0.0, 0.0);
    for s in gt {
        let Some((j, _)) = best_match(s, pred, MATCH_K) else {
            continue;
        };
        let order = pred[j].as_ref();
        let gt_slice_size = s.len();
        recall += hits(order, s, gt_slice_size) as f64 / gt_slice_size as f64;
        ap += average_precision(order, s)?;
    }
    Ok(SliceRecallAp {
        avg_recall: recall / gt.len() as f64,
        avg_ap: ap / gt.len() as f64,
    })
}

/// Whether a slice's leading members mark it as bias-conflicting.
pub fn labeled_bias_conflicting<Id: Ord>(order: &[Id], conflicting: &BTreeSet<Id>) -> bool {
    hits(order, conflicting, BC_LABEL_TOP) >= BC_LABEL_MIN_HITS
}

/// AP of an ordered slice list against the 6-of-top-10 bias-conflicting
/// labels. Only the order and the members matter.
pub fn slice_ranking_ap<Id: Ord, O: AsRef<[Id]>>(ordered: &[O], conflicting: &BTreeSet<Id>) -> Result<f64> {
    let labels: Vec<bool> = ordered
        .iter()
        .map(|o| labeled_bias_conflicting(o.as_ref(), conflicting))
        .collect();
    let positives: BTreeSet<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect();
    if positives.is_empty() {
        return Err(Error::UndefinedMetric("no predicted slice is labeled bias-conflicting"));
    }
    let ranking: Vec<usize> = (0..ordered.len()).collect();
    average_precision(&ranking, &positives)
}

/// Mean silhouette coefficient with Euclidean distance. Points in
/// singleton clusters contribute 0, as do points with `a = b = 0`.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Result<f64> {
    if points.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "silhouette labels",
            expected: points.rows(),
            got: labels.len(),
        });
    }
    let clusters: BTreeSet<usize> = labels.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(Error::UndefinedMetric("silhouette needs at least two clusters"));
    }
    let ids: Vec<usize> = clusters.into_iter().collect();
    let slot = |l: usize| ids.binary_search(&l).unwrap_or(0);
    let mut sizes = alloc::vec![0usize; ids.len()];
    for &l in labels {
        sizes[slot(l)] += 1;
    }
    let n = labels.len();
    let mut total = 0.0;
    let mut sums = alloc::vec![0.0f64; ids.len()];
    for i in 0..n {
        let own = slot(labels[i]);
        if sizes[own] <= 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        let pi = points.row(i);
        for j in 0..n {
            if j != i {
                sums[slot(labels[j])] += euclidean(pi, points.row(j));
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn precision_hand_example() {
        let gt = vec![set(&[1, 2, 3])];
        let pred = vec![vec![1, 4, 2], vec![5, 6, 7]];
        assert_eq!(precision_at_k(&gt, &pred, 3).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn precision_exact_and_disjoint() {
        let gt = vec![set(&[1, 2]), set(&[3, 4])];
        assert_eq!(precision_at_k(&gt, &[vec![3, 4], vec![1, 2]], 2).unwrap(), 1.0);
        assert_eq!(precision_at_k(&gt, &[vec![5, 6], vec![7]], 2).unwrap(), 0.0);
        assert!(precision_at_k::<u32, Vec<u32>>(&[], &[vec![1]], 2).is_err());
    }

    #[test]
    fn short_orderings_count_misses() {
        let gt = vec![set(&[1, 2, 3])];
        assert_eq!(precision_at_k(&gt, &[vec![1]], 4).unwrap(), 0.25);
    }

    #[test]
    fn ap_hand_examples() {
        assert_eq!(average_precision(&[1, 2, 3], &set(&[1, 3])).unwrap(), 0.5 * (1.0 + 2.0 / 3.0));
        assert_eq!(average_precision(&[1, 2, 3, 4], &set(&[1, 2])).unwrap(), 1.0);
        assert_eq!(average_precision(&[1, 2], &set(&[9])).unwrap(), 0.0);
        assert!(average_precision(&[1, 2], &set(&[])).is_err());
    }

    #[test]
    fn avg_ap_skips_classes_without_positives() {
        let per_class = vec![
            (vec![1, 2], set(&[1])),
            (vec![3, 4], set(&[4])),
            (vec![5, 6], set(&[])),
        ];
        assert_eq!(avg_ap(&per_class).unwrap(), 0.75);
        let none = vec![(vec![1u32], set(&[]))];
        assert!(avg_ap(&none).is_err());
    }

    #[test]
    fn precision_curve_hand_count() {
        let ranking = [1, 2, 3, 4, 5];
        assert_eq!(precision_curve(&ranking, &set(&[1, 2, 3]), &[1, 3, 5]), vec![1.0, 1.0, 0.6]);
        assert_eq!(precision_curve(&ranking, &set(&[]), &[1, 5]), vec![0.0, 0.0]);
        assert_eq!(precision_curve(&ranking, &set(&[2, 5]), &[5]), vec![0.4]);
    }

    #[test]
    fn recall_ap_cases() {
        let gt = vec![set(&[1, 2, 3, 4])];
        let perfect = slice_match_recall_ap(&gt, &[vec![1, 2, 3, 4]]).unwrap();
        assert_eq!((perfect.avg_recall, perfect.avg_ap), (1.0, 1.0));
        let half = slice_match_recall_ap(&gt, &[vec![1, 9, 2, 8], vec![7, 6]]).unwrap();
        assert_eq!(half.avg_recall, 0.5);
        let none = slice_match_recall_ap(&gt, &[vec![9, 8, 7]]).unwrap();
        assert_eq!((none.avg_recall, none.avg_ap), (0.0, 0.0));
    }

    #[test]
    fn slice_ranking_ap_cases() {
        let bc = set(&(0..100).collect::<Vec<_>>());
        let bc_slice: Vec<u32> = (0..10).collect();
        let ba_slice: Vec<u32> = (100..110).collect();
        assert_eq!(
            slice_ranking_ap(&[bc_slice.clone(), ba_slice.clone(), bc_slice.clone()], &bc).unwrap(),
            0.5 * (1.0 + 2.0 / 3.0)
        );
        assert_eq!(slice_ranking_ap(&[bc_slice.clone(), ba_slice.clone()], &bc).unwrap(), 1.0);
        assert!(slice_ranking_ap(core::slice::from_ref(&ba_slice), &bc).is_err());
        // Exactly six of ten conflicting members is enough.
        let boundary: Vec<u32> = (0..6).chain(100..104).collect();
        assert!(labeled_bias_conflicting(&boundary, &bc));
        let below: Vec<u32> = (0..5).chain(100..105).collect();
        assert!(!labeled_bias_conflicting(&below, &bc));
    }

    #[test]
    fn silhouette_singletons_are_zero() {
        let pts = Matrix::from_rows(&[[0.0], [1.0], [5.0]]);
        assert_eq!(silhouette(&pts, &[0, 1, 2]).unwrap(), 0.0);
        assert!(silhouette(&pts, &[0, 0, 0]).is_err());
    }

    #[test]
    fn silhouette_separated_clusters() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]]);
        assert!(silhouette(&pts, &[0, 0, 1, 1]).unwrap() > 0.98);
    }
}
