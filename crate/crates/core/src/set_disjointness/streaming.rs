//! Streaming set-disjointness over a twice-repeated input, buffering only the
//! smaller set.
//!
//! Each row is an `n`-bit element plus a separator flag; the separator row is
//! `[0ⁿ :: 1]`. The input is `A, sep, B` (length `N = |A| + |B| + 1`) repeated
//! twice. The first separator's index `|A|` tells which set is smaller; the
//! smaller set is buffered on the pass where it can be stored before the other
//! set streams by, and matches are flagged in place.

use std::collections::BTreeSet;

use crate::error::SdError;
use crate::prompt::jrp_repeat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Row {
    pub value: u64,
    pub flag: bool,
}

impl Row {
    pub const SEPARATOR: Row = Row { value: 0, flag: true };

    pub fn element(value: u64) -> Self {
        Row { value, flag: false }
    }
}

/// `A, sep, B` as rows of `bits`-wide elements.
pub fn encode_rows(a: &[u64], b: &[u64], bits: u32) -> Result<Vec<Row>, SdError> {
    let limit = if bits >= 64 { u64::MAX } else { (1u64 << bits) - 1 };
    let mut rows = Vec::with_capacity(a.len() + b.len() + 1);
    for (i, &x) in a.iter().chain(b).enumerate() {
        if x > limit {
            return Err(SdError::ElementTooWide { value: x, bits });
        }
        if i == a.len() {
            rows.push(Row::SEPARATOR);
        }
        rows.push(Row::element(x));
    }
    if b.is_empty() {
        rows.push(Row::SEPARATOR);
    }
    Ok(rows)
}

/// `encode_rows` followed by the two-fold repetition.
pub fn encode_jrt(a: &[u64], b: &[u64], bits: u32) -> Result<Vec<Row>, SdError> {
    Ok(jrp_repeat(&encode_rows(a, b, bits)?, 2).expect("two repeats"))
}

/// Which smaller-set test and buffering bound to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Thresholds {
    /// `smallFirst ⇔ 2i ≤ N − 1` (i.e. `|A| ≤ |B|`) and buffer the second-pass
    /// rows only while `i < N`. Keeps the buffer within `min(|A|, |B|)`.
    Tight,
    /// `smallFirst ⇔ i ≤ ⌊N/2⌋` and buffer while `i ≤ N`, as originally
    /// stated; can store one row more than the smaller set.
    Loose,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StreamState {
    pub first_separator: bool,
    pub second_separator: bool,
    pub small_first: bool,
    pub buffer: Vec<Row>,
    pub max_rows_seen: usize,
}

impl StreamState {
    fn store(&mut self, row: Row) {
        self.buffer.push(row);
        self.max_rows_seen = self.max_rows_seen.max(self.buffer.len());
    }

    fn flag_match(&mut self, row: Row) {
        if let Some(slot) = self.buffer.iter_mut().find(|r| r.value == row.value) {
            slot.flag = true;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamResult {
    pub intersection: BTreeSet<u64>,
    pub max_rows: usize,
    /// Bits held by the buffer at its peak: `(n + 1) · max_rows`.
    pub state_bits: usize,
}

pub fn streaming_sd_solve(u_jrt: &[Row], bits: u32) -> Result<StreamResult, SdError> {
    streaming_sd_solve_with(u_jrt, bits, Thresholds::Tight)
}

pub fn streaming_sd_solve_with(u_jrt: &[Row], bits: u32, rule: Thresholds) -> Result<StreamResult, SdError> {
    let seps = u_jrt.iter().filter(|r| r.flag).count();
    if seps != 2 || !u_jrt.len().is_multiple_of(2) {
        return Err(SdError::MalformedSeparators { found: seps });
    }
    let n_half = u_jrt.len() / 2;
    if u_jrt[..n_half] != u_jrt[n_half..] {
        return Err(SdError::NotRepeated);
    }
    if let Some(r) = u_jrt.iter().find(|r| r.flag && r.value != 0) {
        return Err(SdError::ElementTooWide { value: r.value, bits: 0 });
    }

    let mut st = StreamState::default();
    for (i, &row) in u_jrt.iter().enumerate() {
        if row.flag {
            if !st.first_separator {
                st.first_separator = true;
                st.small_first = match rule {
                    Thresholds::Tight => 2 * i < n_half,
                    Thresholds::Loose => i <= n_half / 2,
                };
            } else {
                st.second_separator = true;
            }
        } else if st.first_separator {
            if st.small_first {
                if !st.second_separator {
                    if i >= n_half {
                        st.store(row);
                    }
                } else {
                    st.flag_match(row);
                }
            } else if !st.second_separator {
                let buffering = match rule {
                    Thresholds::Tight => i < n_half,
                    Thresholds::Loose => i <= n_half,
                };
                if buffering {
                    st.store(row);
                } else {
                    st.flag_match(row);
                }
            }
        }
    }
    let intersection = st.buffer.iter().filter(|r| r.flag).map(|r| r.value).collect();
    Ok(StreamResult { intersection, max_rows: st.max_rows_seen, state_bits: (bits as usize + 1) * st.max_rows_seen })
}

/// Exact intersection by pairwise comparison.
pub fn brute_force_intersection<X: Ord + Copy>(a: &[X], b: &[X]) -> BTreeSet<X> {
    let mut out = BTreeSet::new();
    for &x in a {
        for &y in b {
            if x == y {
                out.insert(x);
            }
        }
    }
    out
}

/// Smallest bit width holding every element.
pub fn bit_width(elems: impl IntoIterator<Item = u64>) -> u32 {
    let max = elems.into_iter().max().unwrap_or(0);
    (64 - max.leading_zeros()).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solve(a: &[u64], b: &[u64], bits: u32) -> StreamResult {
        streaming_sd_solve(&encode_jrt(a, b, bits).unwrap(), bits).unwrap()
    }

    #[test]
    fn worked_example() {
        let (a, b) = ([7, 11, 17, 16, 4, 6, 9], [8, 1, 5, 6]);
        let r = solve(&a, &b, 5);
        assert_eq!(r.intersection, BTreeSet::from([6]));
        assert!(r.max_rows <= 4);
        assert_eq!(r.state_bits, 6 * r.max_rows);
    }

    #[test]
    fn disjoint_and_edge_cases() {
        assert!(solve(&[1, 2, 3], &[4, 5], 3).intersection.is_empty());
        assert_eq!(solve(&[1], &[1], 1).intersection, BTreeSet::from([1]));
        assert!(solve(&[], &[1, 2], 2).intersection.is_empty());
        assert!(solve(&[3, 4], &[], 3).intersection.is_empty());
        assert_eq!(solve(&[], &[], 1).max_rows, 0);
    }

    #[test]
    fn malformed_inputs() {
        let rows = encode_rows(&[1, 2], &[3], 2).unwrap();
        assert_eq!(streaming_sd_solve(&rows, 2).unwrap_err(), SdError::MalformedSeparators { found: 1 });
        let mut twice = encode_jrt(&[1, 2], &[3], 2).unwrap();
        twice[0] = Row::element(3);
        assert_eq!(streaming_sd_solve(&twice, 2).unwrap_err(), SdError::NotRepeated);
        let mut extra = encode_jrt(&[1], &[3], 2).unwrap();
        extra.extend([Row::SEPARATOR, Row::SEPARATOR]);
        assert!(matches!(streaming_sd_solve(&extra, 2), Err(SdError::MalformedSeparators { found: 4 })));
        assert_eq!(encode_rows(&[4], &[1], 2).unwrap_err(), SdError::ElementTooWide { value: 4, bits: 2 });
    }

    #[test]
    fn exhaustive_small_universe() {
        // Every pair of subsets of {0..8} with sizes ≤ 4, elements in arbitrary order.
        let subsets: Vec<Vec<u64>> =
            (0u32..256).filter(|m| m.count_ones() <= 4).map(|m| (0..8).filter(|i| m >> i & 1 == 1).rev().collect()).collect();
        for a in &subsets {
            for b in &subsets {
                let r = solve(a, b, 3);
                assert_eq!(r.intersection, brute_force_intersection(a, b), "{a:?} {b:?}");
                assert!(r.max_rows <= a.len().min(b.len()));
            }
        }
    }

    #[test]
    fn loose_thresholds_overfill() {
        // |A| = |B| + 1: the loose midpoint test buffers the larger set.
        let r = streaming_sd_solve_with(&encode_jrt(&[1, 2, 3], &[3, 4], 3).unwrap(), 3, Thresholds::Loose).unwrap();
        assert_eq!(r.max_rows, 3);
        // Larger set first: the loose bound also stores the first row of the second copy.
        let r = streaming_sd_solve_with(&encode_jrt(&[1, 2, 3, 4, 5], &[5], 3).unwrap(), 3, Thresholds::Loose).unwrap();
        assert_eq!(r.max_rows, 2);
        assert_eq!(r.intersection, BTreeSet::from([5]));
    }

    #[test]
    fn random_large_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let (la, lb) = (rng.gen_range(1..60), rng.gen_range(1..60));
            let a: Vec<u64> = sample(&mut rng, 200, la).into_iter().map(|x| x as u64).collect();
            let b: Vec<u64> = sample(&mut rng, 200, lb).into_iter().map(|x| x as u64).collect();
            let r = solve(&a, &b, 8);
            assert_eq!(r.intersection, brute_force_intersection(&a, &b));
            assert!(r.max_rows <= la.min(lb));
        }
    }

    #[test]
    fn brute_force_matches_sort_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a: Vec<u32> = (0..rng.gen_range(0..20)).map(|_| rng.gen_range(0..30)).collect();
            let b: Vec<u32> = (0..rng.gen_range(0..20)).map(|_| rng.gen_range(0..30)).collect();
            let (mut sa, mut sb) = (a.clone(), b.clone());
            sa.sort();
            sa.dedup();
            sb.sort();
            sb.dedup();
            let (mut i, mut j, mut merged) = (0, 0, BTreeSet::new());
            while i < sa.len() && j < sb.len() {
                match sa[i].cmp(&sb[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        merged.insert(sa[i]);
                        i += 1;
                        j += 1;
                    }
                }
            }
            assert_eq!(brute_force_intersection(&a, &b), merged);
        }
        assert_eq!(brute_force_intersection(&[1], &[1]), BTreeSet::from([1]));
        assert!(brute_force_intersection(&[1, 2], &[3, 4]).is_empty());
    }

    #[test]
    fn widths() {
        assert_eq!(bit_width([0]), 1);
        assert_eq!(bit_width([7]), 3);
        assert_eq!(bit_width([8, 1]), 4);
    }
}
