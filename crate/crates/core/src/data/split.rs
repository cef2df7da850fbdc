//! Slide-level train/validation/test partitioning.

use std::collections::BTreeMap;

use histosynth_tensor::seeded;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];
}

pub type SplitMap = BTreeMap<String, SplitName>;

/// Assigns each slide to a split with exactly `counts` slides per split.
///
/// With `score_bins` (one bin per slide, aligned with `slide_ids`), every bin
/// is spread over the three splits in proportion to `counts`, rounding so
/// that both per-bin and per-split totals are met exactly.
pub fn make_split(
    slide_ids: &[String],
    counts: (usize, usize, usize),
    score_bins: Option<&[u8]>,
    seed: u64,
) -> Result<SplitMap> {
    let total = counts.0 + counts.1 + counts.2;
    if total != slide_ids.len() {
        return Err(Error::Config(format!(
            "split counts {counts:?} sum to {total}, but there are {} slides",
            slide_ids.len()
        )));
    }
    if let Some(bins) = score_bins {
        if bins.len() != slide_ids.len() {
            return Err(Error::Config("one score bin per slide is required".into()));
        }
    }
    let mut unique = slide_ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != slide_ids.len() {
        return Err(Error::Validation("duplicate slide ids".into()));
    }

    let mut rng = seeded(seed);
    let mut groups: BTreeMap<u8, Vec<String>> = BTreeMap::new();
    for (i, id) in slide_ids.iter().enumerate() {
        let bin = score_bins.map_or(0, |b| b[i]);
        groups.entry(bin).or_default().push(id.clone());
    }
    for members in groups.values_mut() {
        members.sort();
        members.shuffle(&mut rng);
    }

    let targets = [counts.0, counts.1, counts.2];
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let quotas = apportion(&sizes, &targets);

    let mut map = SplitMap::new();
    for (members, quota) in groups.values().zip(&quotas) {
        let mut it = members.iter();
        for (split, &q) in SplitName::ALL.iter().zip(quota) {
            for id in it.by_ref().take(q) {
                map.insert(id.clone(), *split);
            }
        }
    }
    Ok(map)
}

/// Integer matrix with row sums `rows` and column sums `cols` closest to the
/// proportional allocation `rows[b] * cols[s] / total`.
fn apportion(rows: &[usize], cols: &[usize; 3]) -> Vec<[usize; 3]> {
    let total: usize = rows.iter().sum();
    let mut out = vec![[0usize; 3]; rows.len()];
    if total == 0 {
        return out;
    }
    let mut fractions = Vec::new();
    for (b, &n) in rows.iter().enumerate() {
        for (s, &c) in cols.iter().enumerate() {
            let exact = n * c;
            out[b][s] = exact / total;
            fractions.push((exact % total, b, s));
        }
    }
    let mut row_left: Vec<usize> = rows
        .iter()
        .zip(&out)
        .map(|(&n, q)| n - q.iter().sum::<usize>())
        .collect();
    let mut col_left: Vec<usize> = (0..3)
        .map(|s| cols[s] - out.iter().map(|q| q[s]).sum::<usize>())
        .collect();
    fractions.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, b, s) in &fractions {
        if row_left[b] > 0 && col_left[s] > 0 {
            out[b][s] += 1;
            row_left[b] -= 1;
            col_left[s] -= 1;
        }
    }
    // Greedy rounding can strand a few units; place them wherever both
    // margins still have room.
    for b in 0..rows.len() {
        for s in 0..3 {
            let k = row_left[b].min(col_left[s]);
            out[b][s] += k;
            row_left[b] -= k;
            col_left[s] -= k;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("slide{i:02}")).collect()
    }

    fn tally(map: &SplitMap) -> [usize; 3] {
        let mut t = [0; 3];
        for s in map.values() {
            t[*s as usize] += 1;
        }
        t
    }

    #[test]
    fn stratified_forty_slides_gives_six_two_two_per_bin() {
        let slides = ids(40);
        let bins: Vec<u8> = (0..40).map(|i| (i % 4) as u8).collect();
        let map = make_split(&slides, (24, 8, 8), Some(&bins), 3).unwrap();
        assert_eq!(tally(&map), [24, 8, 8]);
        for bin in 0..4u8 {
            let mut t = [0; 3];
            for (i, id) in slides.iter().enumerate() {
                if bins[i] == bin {
                    t[map[id] as usize] += 1;
                }
            }
            assert_eq!(t, [6, 2, 2], "bin {bin}");
        }
    }

    #[test]
    fn three_slides_one_each_is_a_permutation() {
        let slides = ids(3);
        let map = make_split(&slides, (1, 1, 1), None, 9).unwrap();
        assert_eq!(tally(&map), [1, 1, 1]);
        assert_eq!(map.len(), 3);
    }

    #[test]
    fn same_seed_same_split() {
        let slides = ids(20);
        let a = make_split(&slides, (12, 4, 4), None, 5).unwrap();
        let b = make_split(&slides, (12, 4, 4), None, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        assert!(make_split(&ids(5), (2, 2, 2), None, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition_with_exact_counts(
            n_bins in 1usize..6,
            sizes in proptest::collection::vec(0usize..9, 6),
            a in 0usize..10, b in 0usize..10, seed in any::<u64>()
        ) {
            let bins: Vec<u8> = sizes.iter().take(n_bins).enumerate()
                .flat_map(|(bin, &s)| std::iter::repeat_n(bin as u8, s)).collect();
            let n = bins.len();
            prop_assume!(a + b <= n);
            let slides = ids(n);
            let counts = (a, b, n - a - b);
            let map = make_split(&slides, counts, Some(&bins), seed).unwrap();
            prop_assert_eq!(map.len(), n);
            prop_assert_eq!(tally(&map), [counts.0, counts.1, counts.2]);
            // per-bin allocation within one of the proportional share
            for bin in 0..n_bins as u8 {
                let members: Vec<_> = slides.iter().zip(&bins).filter(|(_, &bb)| bb == bin).map(|(s, _)| s).collect();
                for (si, &target) in [counts.0, counts.1, counts.2].iter().enumerate() {
                    let got = members.iter().filter(|id| map[**id] as usize == si).count() as f64;
                    let ideal = members.len() as f64 * target as f64 / n.max(1) as f64;
                    prop_assert!((got - ideal).abs() < 2.0, "bin {} split {}: {} vs {}", bin, si, got, ideal);
                }
            }
        }
    }
}
