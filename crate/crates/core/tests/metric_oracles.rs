#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;

use facts_core::linalg::Matrix;
use facts_core::metrics::{average_precision, precision_at_k, silhouette, slice_ranking_ap};
use facts_core::rng::Rng;
use proptest::prelude::*;

// Direct transcriptions of the metric definitions, written without the
// library's helpers.

fn brute_precision(gt: &[Vec<u32>], pred: &[Vec<u32>], k: usize) -> f64 {
    let mut total = 0.0;
    for s in gt {
        let mut best = 0.0f64;
        for o in pred {
            let mut hits = 0;
            for pos in 0..k {
                if pos < o.len() && s.contains(&o[pos]) {
                    hits += 1;
                }
            }
            let p = hits as f64 / k as f64;
            if p > best {
                best = p;
            }
        }
        total += best;
    }
    total / gt.len() as f64
}

fn brute_ap(ranking: &[u32], positives: &[u32]) -> f64 {
    let mut sum = 0.0;
    for i in 0..ranking.len() {
        if positives.contains(&ranking[i]) {
            let seen = ranking[..=i].iter().filter(|r| positives.contains(r)).count();
            sum += seen as f64 / (i + 1) as f64;
        }
    }
    sum / positives.len() as f64
}

fn brute_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let dist = |i: usize, j: usize| -> f64 {
        points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let clusters: BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        let own_size = labels.iter().filter(|&&l| l == labels[i]).count();
        if own_size == 1 {
            continue;
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                a += dist(i, j);
            }
        }
        a /= (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            if c == labels[i] {
                continue;
            }
            let mut s = 0.0;
            let mut m = 0;
            for j in 0..n {
                if labels[j] == c {
                    s += dist(i, j);
                    m += 1;
                }
            }
            b = b.min(s / m as f64);
        }
        let denom = if a > b { a } else { b };
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

fn brute_slice_ranking_ap(ordered: &[Vec<u32>], conflicting: &[u32]) -> Option<f64> {
    let labels: Vec<bool> = ordered
        .iter()
        .map(|o| o.iter().take(10).filter(|id| conflicting.contains(id)).count() >= 6)
        .collect();
    let positives = labels.iter().filter(|&&b| b).count();
    if positives == 0 {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..labels.len() {
        if labels[i] {
            let seen = labels[..=i].iter().filter(|&&b| b).count();
            sum += seen as f64 / (i + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn random_ordering(rng: &mut Rng, universe: u32, max_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..universe).collect();
    rng.shuffle(&mut ids);
    ids.truncate(rng.below(max_len + 1));
    ids
}

fn random_subset(rng: &mut Rng, universe: u32) -> Vec<u32> {
    (0..universe).filter(|_| rng.uniform() < 0.4).collect()
}

#[test]
fn precision_at_k_matches_brute_force() {
    let mut rng = Rng::new(1);
    for _ in 0..1000 {
        let universe = 1 + rng.below(20) as u32;
        let gt: Vec<Vec<u32>> = (0..1 + rng.below(4))
            .map(|_| random_subset(&mut rng, universe))
            .filter(|s| !s.is_empty())
            .collect();
        if gt.is_empty() {
            continue;
        }
        let pred: Vec<Vec<u32>> = (0..rng.below(5)).map(|_| random_ordering(&mut rng, universe, 20)).collect();
        let k = 1 + rng.below(12);
        let gt_sets: Vec<BTreeSet<u32>> = gt.iter().map(|s| s.iter().copied().collect()).collect();
        assert_eq!(precision_at_k(&gt_sets, &pred, k).unwrap(), brute_precision(&gt, &pred, k));
    }
}

#[test]
fn average_precision_matches_brute_force() {
    let mut rng = Rng::new(2);
    for _ in 0..1000 {
        let universe = 1 + rng.below(20) as u32;
        let positives = random_subset(&mut rng, universe);
        if positives.is_empty() {
            continue;
        }
        let ranking = random_ordering(&mut rng, universe, 20);
        let set: BTreeSet<u32> = positives.iter().copied().collect();
        assert_eq!(average_precision(&ranking, &set).unwrap(), brute_ap(&ranking, &positives));
    }
}

#[test]
fn silhouette_matches_brute_force() {
    let mut rng = Rng::new(3);
    let mut checked = 0;
    while checked < 1000 {
        let n = 2 + rng.below(19);
        let d = 1 + rng.below(3);
        let clusters = 2 + rng.below(4);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(clusters)).collect();
        if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
            continue;
        }
        let m = Matrix::from_rows(&points);
        assert_eq!(silhouette(&m, &labels).unwrap(), brute_silhouette(&points, &labels));
        checked += 1;
    }
}

#[test]
fn slice_ranking_ap_matches_brute_force() {
    let mut rng = Rng::new(4);
    for _ in 0..1000 {
        let universe = 20;
        let conflicting = random_subset(&mut rng, universe);
        let ordered: Vec<Vec<u32>> = (0..1 + rng.below(6)).map(|_| random_ordering(&mut rng, universe, 20)).collect();
        let set: BTreeSet<u32> = conflicting.iter().copied().collect();
        let got = slice_ranking_ap(&ordered, &set).ok();
        assert_eq!(got, brute_slice_ranking_ap(&ordered, &conflicting));
    }
}

#[test]
fn hand_examples() {
    let gt = vec![BTreeSet::from([1u32, 2, 3])];
    let pred = vec![vec![1u32, 4, 2], vec![5, 6, 7]];
    assert_eq!(precision_at_k(&gt, &pred, 3).unwrap(), 2.0 / 3.0);

    let ranking = [10u32, 11, 12];
    // (1/2)(1/1 + 2/3), written as the definition sums it
    let five_sixths = (1.0 + 2.0 / 3.0) / 2.0;
    assert_eq!(average_precision(&ranking, &BTreeSet::from([10, 12])).unwrap(), five_sixths);
    assert_eq!(format!("{five_sixths:.4}"), "0.8333");

    // Slices ordered [conflicting, aligned, conflicting].
    let bc: Vec<u32> = (0..10).collect();
    let ba: Vec<u32> = (100..110).collect();
    let ap = slice_ranking_ap(&[bc.clone(), ba, bc.clone()], &bc.iter().copied().collect()).unwrap();
    assert_eq!(ap, five_sixths);
    assert_eq!(format!("{ap:.4}"), "0.8333");
}

fn arb_instance() -> impl Strategy<Value = (Vec<BTreeSet<u32>>, Vec<Vec<u32>>, usize)> {
    let gt = prop::collection::vec(prop::collection::btree_set(0u32..20, 1..8), 1..4);
    let pred = prop::collection::vec(Just((0u32..20).collect::<Vec<u32>>()).prop_shuffle(), 1..5);
    (gt, pred, 1usize..12)
}

proptest! {
    #[test]
    fn precision_invariant_under_permutations((gt, pred, k) in arb_instance()) {
        let base = precision_at_k(&gt, &pred, k).unwrap();
        let mut gt_rev = gt.clone();
        gt_rev.reverse();
        let mut pred_rev = pred.clone();
        pred_rev.reverse();
        prop_assert!((precision_at_k(&gt_rev, &pred_rev, k).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn replacing_a_hit_never_raises_precision((gt, pred, k) in arb_instance(), which in 0usize..5, pos in 0usize..12) {
        let j = which % pred.len();
        let pos = pos % k.min(pred[j].len());
        let mut changed = pred.clone();
        if gt.iter().any(|s| s.contains(&changed[j][pos])) {
            changed[j][pos] = 1000;
            prop_assert!(precision_at_k(&gt, &changed, k).unwrap() <= precision_at_k(&gt, &pred, k).unwrap());
        }
    }

    #[test]
    fn average_precision_bounded(ranking in Just((0u32..20).collect::<Vec<u32>>()).prop_shuffle(), pos in prop::collection::btree_set(0u32..20, 1..20)) {
        let ap = average_precision(&ranking, &pos).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }
}
