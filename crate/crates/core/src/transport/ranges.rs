//! Sorted set of inclusive `u64` ranges, used to track received sqns.

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeSet {
    ranges: Vec<(u64, u64)>,
}

impl RangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `x`, returning false if it was already present.
    pub fn insert(&mut self, x: u64) -> bool {
        let idx = self.ranges.partition_point(|&(_, hi)| hi < x);
        if let Some(&(lo, _)) = self.ranges.get(idx) {
            if lo <= x {
                return false;
            }
        }
        let joins_prev = idx > 0 && self.ranges[idx - 1].1 + 1 == x;
        let joins_next = idx < self.ranges.len() && self.ranges[idx].0 == x + 1;
        match (joins_prev, joins_next) {
            (true, true) => {
                self.ranges[idx - 1].1 = self.ranges[idx].1;
                self.ranges.remove(idx);
            }
            (true, false) => self.ranges[idx - 1].1 = x,
            (false, true) => self.ranges[idx].0 = x,
            (false, false) => self.ranges.insert(idx, (x, x)),
        }
        true
    }

    pub fn contains(&self, x: u64) -> bool {
        let idx = self.ranges.partition_point(|&(_, hi)| hi < x);
        self.ranges.get(idx).is_some_and(|&(lo, _)| lo <= x)
    }

    pub fn max(&self) -> Option<u64> {
        self.ranges.last().map(|r| r.1)
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &(u64, u64)> {
        self.ranges.iter()
    }

    /// Missing ranges between 1 and the maximum, newest first. When more than
    /// `limit` gaps exist the oldest reported gap is widened down to 1, which
    /// at worst causes a spurious retransmission, never a false ack.
    pub fn gaps(&self, limit: usize) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let mut upper = match self.ranges.last() {
            Some(&(lo, _)) => lo,
            None => return out,
        };
        for &(lo, hi) in self.ranges.iter().rev().skip(1) {
            out.push((hi + 1, upper - 1));
            upper = lo;
            if out.len() == limit {
                break;
            }
        }
        if upper > 1 {
            if out.len() == limit {
                out.last_mut().unwrap().0 = 1;
            } else {
                out.push((1, upper - 1));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_merges() {
        let mut s = RangeSet::new();
        for x in [5, 3, 4, 10, 1] {
            assert!(s.insert(x));
        }
        assert!(!s.insert(4));
        assert_eq!(
            s.iter().copied().collect::<Vec<_>>(),
            vec![(1, 1), (3, 5), (10, 10)]
        );
        assert_eq!(s.gaps(256), vec![(6, 9), (2, 2)]);
        assert!(s.insert(2));
        assert_eq!(s.gaps(256), vec![(6, 9)]);
    }

    #[test]
    fn gaps_include_prefix() {
        let mut s = RangeSet::new();
        s.insert(3);
        assert_eq!(s.gaps(256), vec![(1, 2)]);
    }

    #[test]
    fn truncated_gaps_widen_to_one() {
        let mut s = RangeSet::new();
        for x in (1..=20).step_by(2) {
            s.insert(x);
        }
        let g = s.gaps(3);
        assert_eq!(g, vec![(18, 18), (16, 16), (1, 14)]);
    }
}

/// Sorted disjoint half-open byte intervals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IntervalSet {
    ranges: Vec<(u64, u64)>,
}

impl IntervalSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lo: u64, hi: u64) {
        if lo >= hi {
            return;
        }
        let (mut lo, mut hi) = (lo, hi);
        let start = self.ranges.partition_point(|&(_, h)| h < lo);
        let mut end = start;
        while end < self.ranges.len() && self.ranges[end].0 <= hi {
            lo = lo.min(self.ranges[end].0);
            hi = hi.max(self.ranges[end].1);
            end += 1;
        }
        self.ranges.splice(start..end, [(lo, hi)]);
    }

    /// True if `[lo, hi)` is entirely covered.
    pub fn covers(&self, lo: u64, hi: u64) -> bool {
        if lo >= hi {
            return true;
        }
        let idx = self.ranges.partition_point(|&(_, h)| h <= lo);
        self.ranges
            .get(idx)
            .is_some_and(|&(l, h)| l <= lo && hi <= h)
    }

    /// End of the contiguous prefix starting at zero.
    pub fn contiguous_end(&self) -> u64 {
        match self.ranges.first() {
            Some(&(0, h)) => h,
            _ => 0,
        }
    }
}

#[cfg(test)]
mod interval_tests {
    use super::*;

    #[test]
    fn merge_and_cover() {
        let mut s = IntervalSet::new();
        s.insert(10, 20);
        s.insert(0, 5);
        assert_eq!(s.contiguous_end(), 5);
        assert!(!s.covers(4, 11));
        s.insert(5, 10);
        assert_eq!(s.contiguous_end(), 20);
        assert!(s.covers(3, 20));
        s.insert(19, 25);
        assert_eq!(s.ranges, vec![(0, 25)]);
    }
}
