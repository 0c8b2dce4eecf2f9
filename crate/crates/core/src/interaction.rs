//! Target-centric neighbor selection and history aggregation.

use crate::ais::Journey;
use crate::error::{Error, Result};

/// Neighbors of one target vessel at a window's anchor time.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub target_id: String,
    /// One `L`-step history per neighbor, aligned to the target window,
    /// oldest first. Steps before a neighbor's first state are zero.
    pub histories: Vec<Vec<[f64; 2]>>,
    pub threshold: f64,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Selects every other journey with a state at `anchor_time` lying within
/// `threshold` (Euclidean, normalized units, inclusive) of the target.
///
/// Journeys sharing the target's `journey_id` are skipped. If the target has
/// no state at `anchor_time` the set is empty.
pub fn find_neighbors(
    target: &Journey,
    others: &[Journey],
    anchor_time: i64,
    history_len: usize,
    threshold: f64,
) -> NeighborSet {
    let mut set = NeighborSet {
        target_id: target.journey_id.clone(),
        histories: Vec::new(),
        threshold,
    };
    let Some(target_pos) = target.point_at(anchor_time) else {
        return set;
    };
    for other in others {
        if other.journey_id == target.journey_id {
            continue;
        }
        let Some(anchor_idx) = other.index_of(anchor_time) else {
            continue;
        };
        if distance(target_pos, other.points[anchor_idx]) > threshold {
            continue;
        }
        let mut history = vec![[0.0; 2]; history_len];
        // history[history_len - 1] is the anchor state.
        for (slot, back) in (0..history_len).rev().zip(0..) {
            if back > anchor_idx {
                break;
            }
            history[slot] = other.points[anchor_idx - back];
        }
        set.histories.push(history);
    }
    set
}

/// Element-wise sum of neighbor histories; the empty set sums to zeros.
pub fn aggregate(histories: &[Vec<[f64; 2]>], history_len: usize) -> Result<Vec<[f64; 2]>> {
    let mut sum = vec![[0.0; 2]; history_len];
    for (i, h) in histories.iter().enumerate() {
        if h.len() != history_len {
            return Err(Error::Shape(format!(
                "neighbor history {i} has {} steps, expected {history_len}",
                h.len()
            )));
        }
        for (acc, p) in sum.iter_mut().zip(h) {
            acc[0] += p[0];
            acc[1] += p[1];
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn journey(id: &str, start: i64, points: Vec<[f64; 2]>) -> Journey {
        Journey {
            journey_id: id.to_string(),
            mmsi: 219_000_000,
            start,
            delta_minutes: 10,
            points,
        }
    }

    fn stationary(id: &str, p: [f64; 2]) -> Journey {
        journey(id, 0, vec![p; 10])
    }

    #[test]
    fn empty_scene_has_no_neighbors() {
        let t = stationary("t", [0.5, 0.5]);
        let set = find_neighbors(&t, &[], 3000, 4, 0.05);
        assert!(set.is_empty());
    }

    #[test]
    fn boundary_distance_is_included() {
        let t = stationary("t", [0.5, 0.5]);
        // 3-4-5 triangle scaled to 0.05: exact in binary only approximately,
        // so pick an axis-aligned offset of exactly the threshold.
        let o = stationary("o", [0.5, 0.75]);
        let set = find_neighbors(&t, &[o], 3000, 4, 0.25);
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn counts_vessels_within_threshold() {
        let thr = 0.1;
        let t = stationary("t", [0.5, 0.5]);
        let others = vec![
            stationary("a", [0.5 + 0.5 * thr, 0.5]),
            stationary("b", [0.5, 0.5 + 1.5 * thr]),
            stationary("c", [0.5 - 0.9 * thr, 0.5]),
        ];
        let set = find_neighbors(&t, &others, 3000, 4, thr);
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn target_is_excluded_and_partial_history_zero_padded() {
        let t = stationary("t", [0.5, 0.5]);
        // Starts two steps before the anchor at t = 5 * 600.
        let late = journey("late", 3 * 600, vec![[0.51, 0.5], [0.52, 0.5], [0.53, 0.5]]);
        let set = find_neighbors(&t, &[t.clone(), late], 5 * 600, 4, 0.1);
        assert_eq!(set.len(), 1);
        assert_eq!(
            set.histories[0],
            vec![[0.0, 0.0], [0.51, 0.5], [0.52, 0.5], [0.53, 0.5]]
        );
    }

    #[test]
    fn vessel_absent_at_anchor_is_skipped() {
        let t = stationary("t", [0.5, 0.5]);
        let early = journey("early", 0, vec![[0.5, 0.5]; 3]);
        assert!(find_neighbors(&t, &[early], 5 * 600, 4, 0.1).is_empty());
    }

    #[test]
    fn aggregate_trivial_cases() {
        assert_eq!(aggregate(&[], 3).unwrap(), vec![[0.0; 2]; 3]);
        let h = vec![[0.1, 0.2], [0.3, 0.4]];
        assert_eq!(aggregate(&[h.clone()], 2).unwrap(), h);
        assert_eq!(
            aggregate(&[h.clone(), h.clone()], 2).unwrap(),
            vec![[0.2, 0.4], [0.6, 0.8]]
        );
        assert!(matches!(aggregate(&[h], 3), Err(Error::Shape(_))));
    }

    #[test]
    fn neighborship_is_symmetric() {
        let a = stationary("a", [0.40, 0.40]);
        let b = stationary("b", [0.43, 0.44]);
        let ab = find_neighbors(&a, &[b.clone()], 3000, 4, 0.05).len();
        let ba = find_neighbors(&b, &[a], 3000, 4, 0.05).len();
        assert_eq!(ab, ba);
    }

    fn histories(n: usize) -> impl Strategy<Value = Vec<Vec<[f64; 2]>>> {
        prop::collection::vec(prop::collection::vec(prop::array::uniform2(0.0..1.0f64), 4), 0..n)
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(hs in histories(6), seed in 0u64..1000) {
            let mut shuffled = hs.clone();
            let n = shuffled.len();
            if n > 1 {
                shuffled.rotate_left((seed as usize) % n);
                shuffled.swap(0, n - 1);
            }
            let a = aggregate(&hs, 4).unwrap();
            let b = aggregate(&shuffled, 4).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x[0] - y[0]).abs() < 1e-12 && (x[1] - y[1]).abs() < 1e-12);
            }
        }

        #[test]
        fn aggregate_is_additive_over_disjoint_sets(a in histories(4), b in histories(4)) {
            let union: Vec<_> = a.iter().chain(&b).cloned().collect();
            let whole = aggregate(&union, 4).unwrap();
            let sa = aggregate(&a, 4).unwrap();
            let sb = aggregate(&b, 4).unwrap();
            for i in 0..4 {
                prop_assert!((whole[i][0] - (sa[i][0] + sb[i][0])).abs() < 1e-12);
                prop_assert!((whole[i][1] - (sa[i][1] + sb[i][1])).abs() < 1e-12);
            }
        }

        #[test]
        fn distance_membership_is_symmetric(
            pa in prop::array::uniform2(0.0..1.0f64),
            pb in prop::array::uniform2(0.0..1.0f64),
            thr in 0.01..0.5f64,
        ) {
            let a = stationary("a", pa);
            let b = stationary("b", pb);
            let ab = find_neighbors(&a, &[b.clone()], 3000, 4, thr).len();
            let ba = find_neighbors(&b, &[a], 3000, 4, thr).len();
            prop_assert_eq!(ab, ba);
        }
    }
}
