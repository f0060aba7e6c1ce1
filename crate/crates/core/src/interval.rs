//! Closed intervals on the z-line and finite unions of them.

use serde::{Deserialize, Serialize};

/// Closed interval `[lower, upper]`, possibly unbounded, possibly empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const EMPTY: Interval = Interval {
        lower: f64::INFINITY,
        upper: f64::NEG_INFINITY,
    };

    pub const REAL_LINE: Interval = Interval {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn new(lower: f64, upper: f64) -> Self {
        if lower > upper || lower.is_nan() || upper.is_nan() {
            Self::EMPTY
        } else {
            Self { lower, upper }
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.lower <= self.upper)
    }

    pub fn contains(&self, z: f64) -> bool {
        self.lower <= z && z <= self.upper
    }

    pub fn width(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.upper - self.lower
        }
    }

    /// Empty is absorbing.
    pub fn intersect(&self, other: &Interval) -> Interval {
        if self.is_empty() || other.is_empty() {
            return Self::EMPTY;
        }
        Interval::new(self.lower.max(other.lower), self.upper.min(other.upper))
    }

    pub fn raise_lower(&mut self, bound: f64) {
        if bound > self.lower {
            self.lower = bound;
        }
    }

    pub fn drop_upper(&mut self, bound: f64) {
        if bound < self.upper {
            self.upper = bound;
        }
    }

    pub fn make_empty(&mut self) {
        *self = Self::EMPTY;
    }
}

impl Default for Interval {
    fn default() -> Self {
        Self::REAL_LINE
    }
}

/// Sorted union of disjoint closed intervals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    intervals: Vec<Interval>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(i: Interval) -> Self {
        Self::from_intervals(vec![i], 0.0)
    }

    /// Normalizes arbitrary intervals: drops empties, sorts, merges any that
    /// overlap or sit within `merge_tol` of each other.
    pub fn from_intervals(mut intervals: Vec<Interval>, merge_tol: f64) -> Self {
        intervals.retain(|i| !i.is_empty());
        intervals.sort_by(|a, b| a.lower.total_cmp(&b.lower));
        let mut out: Vec<Interval> = Vec::with_capacity(intervals.len());
        for i in intervals {
            match out.last_mut() {
                Some(last) if i.lower <= last.upper + merge_tol => {
                    last.upper = last.upper.max(i.upper);
                }
                _ => out.push(i),
            }
        }
        Self { intervals: out }
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn contains(&self, z: f64) -> bool {
        // Few intervals in practice; binary search keeps long unions cheap.
        let idx = self.intervals.partition_point(|i| i.upper < z);
        self.intervals.get(idx).is_some_and(|i| i.contains(z))
    }

    /// The member interval containing `z`.
    pub fn piece_containing(&self, z: f64) -> Option<Interval> {
        let idx = self.intervals.partition_point(|i| i.upper < z);
        self.intervals.get(idx).copied().filter(|i| i.contains(z))
    }

    pub fn intersect_interval(&self, other: &Interval) -> IntervalSet {
        Self {
            intervals: self
                .intervals
                .iter()
                .map(|i| i.intersect(other))
                .filter(|i| !i.is_empty())
                .collect(),
        }
    }

    pub fn intersect(&self, other: &IntervalSet) -> IntervalSet {
        let (a, b) = (&self.intervals, &other.intervals);
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < a.len() && j < b.len() {
            let x = a[i].intersect(&b[j]);
            if !x.is_empty() {
                out.push(x);
            }
            if a[i].upper < b[j].upper {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self::from_intervals(out, 0.0)
    }

    pub fn union(&self, other: &IntervalSet, merge_tol: f64) -> IntervalSet {
        let mut all = self.intervals.clone();
        all.extend_from_slice(&other.intervals);
        Self::from_intervals(all, merge_tol)
    }

    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(Interval::width).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> IntervalSet {
        Self::from_intervals(
            self.intervals
                .iter()
                .map(|i| Interval::new(f(i.lower), f(i.upper)))
                .collect(),
            0.0,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_absorbs() {
        let a = Interval::new(0.0, 1.0);
        assert!(a.intersect(&Interval::EMPTY).is_empty());
        assert!(Interval::new(2.0, 1.0).is_empty());
        assert!(Interval::REAL_LINE.contains(1e300));
    }

    #[test]
    fn set_normalizes_and_merges() {
        let s = IntervalSet::from_intervals(
            vec![
                Interval::new(3.0, 4.0),
                Interval::new(0.0, 1.0),
                Interval::new(1.0 + 1e-12, 2.0),
                Interval::EMPTY,
            ],
            1e-9,
        );
        assert_eq!(s.intervals(), &[Interval::new(0.0, 2.0), Interval::new(3.0, 4.0)]);
        assert!(s.contains(3.5));
        assert!(!s.contains(2.5));
        assert_eq!(s.piece_containing(0.5), Some(Interval::new(0.0, 2.0)));
        assert!((s.measure() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn set_intersection() {
        let a = IntervalSet::from_intervals(vec![Interval::new(0.0, 2.0), Interval::new(3.0, 5.0)], 0.0);
        let b = IntervalSet::from_intervals(vec![Interval::new(1.0, 3.5), Interval::new(4.5, 9.0)], 0.0);
        let c = a.intersect(&b);
        assert_eq!(
            c.intervals(),
            &[Interval::new(1.0, 2.0), Interval::new(3.0, 3.5), Interval::new(4.5, 5.0)]
        );
        let d = a.intersect_interval(&Interval::new(1.5, 3.2));
        assert_eq!(d.intervals(), &[Interval::new(1.5, 2.0), Interval::new(3.0, 3.2)]);
    }
}
