//! Membership changes, views and view sequences.
//!
//! A view is a set of signed membership changes. Its members are the processes
//! that joined and have not left. Views are partially ordered by set inclusion.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::crypto::{digest, Digest};
use crate::error::ViewError;

/// Default upper bound on the number of changes a decoded view may carry.
pub const DEFAULT_CHANGE_CAP: usize = 1024;

/// Stable identifier of a process in the universe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Direction of a membership change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn byte(self) -> u8 {
        match self {
            Sign::Plus => b'+',
            Sign::Minus => b'-',
        }
    }

    pub fn from_byte(b: u8) -> Option<Sign> {
        match b {
            b'+' => Some(Sign::Plus),
            b'-' => Some(Sign::Minus),
            _ => None,
        }
    }
}

/// A join (`+p`) or leave (`-p`) request. Ordered by process, then sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Change {
    pub process: ProcessId,
    pub sign: Sign,
}

impl Change {
    pub fn join(p: ProcessId) -> Change {
        Change { process: p, sign: Sign::Plus }
    }

    pub fn leave(p: ProcessId) -> Change {
        Change { process: p, sign: Sign::Minus }
    }
}

impl fmt::Display for Change {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.sign.byte() as char, self.process.0)
    }
}

impl FromStr for Change {
    type Err = ViewError;

    fn from_str(s: &str) -> Result<Change, ViewError> {
        let bad = || ViewError::BadChange(s.to_string());
        let (head, rest) = s.split_at_checked(1).ok_or_else(bad)?;
        let sign = Sign::from_byte(head.as_bytes()[0]).ok_or_else(bad)?;
        let rest = rest.strip_prefix('p').unwrap_or(rest);
        let id: u32 = rest.parse().map_err(|_| bad())?;
        Ok(Change { process: ProcessId(id), sign })
    }
}

impl Serialize for Change {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Change {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Change, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Result of comparing two views by inclusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewOrdering {
    Equal,
    /// The left view is a proper subset of the right one.
    Less,
    Greater,
    Incomparable,
}

/// An immutable set of changes. Cloning is cheap.
///
/// The total order (`Ord`) sorts by number of changes and then lexicographically;
/// it refines inclusion and exists so views can live in ordered collections.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct View {
    changes: Arc<BTreeSet<Change>>,
}

impl View {
    pub fn new(changes: impl IntoIterator<Item = Change>) -> View {
        View { changes: Arc::new(changes.into_iter().collect()) }
    }

    /// The view in which every listed process has joined.
    pub fn initial(members: impl IntoIterator<Item = ProcessId>) -> View {
        View::new(members.into_iter().map(Change::join))
    }

    pub fn changes(&self) -> &BTreeSet<Change> {
        &self.changes
    }

    pub fn contains_change(&self, c: &Change) -> bool {
        self.changes.contains(c)
    }

    pub fn members(&self) -> BTreeSet<ProcessId> {
        self.changes
            .iter()
            .filter(|c| c.sign == Sign::Plus && !self.changes.contains(&Change::leave(c.process)))
            .map(|c| c.process)
            .collect()
    }

    pub fn is_member(&self, p: ProcessId) -> bool {
        self.changes.contains(&Change::join(p)) && !self.changes.contains(&Change::leave(p))
    }

    /// Number of members.
    pub fn size(&self) -> usize {
        self.changes
            .iter()
            .filter(|c| c.sign == Sign::Plus && !self.changes.contains(&Change::leave(c.process)))
            .count()
    }

    /// `n - floor((n - 1) / 3)` for `n` members.
    pub fn quorum_size(&self) -> Result<usize, ViewError> {
        quorum_size(self.size())
    }

    /// Number of faulty members tolerated, `floor((n - 1) / 3)`.
    pub fn fault_bound(&self) -> usize {
        self.size().saturating_sub(1) / 3
    }

    pub fn compare(&self, other: &View) -> ViewOrdering {
        if Arc::ptr_eq(&self.changes, &other.changes) || self.changes == other.changes {
            return ViewOrdering::Equal;
        }
        let (a, b) = (&*self.changes, &*other.changes);
        if a.len() < b.len() && a.is_subset(b) {
            ViewOrdering::Less
        } else if b.len() < a.len() && b.is_subset(a) {
            ViewOrdering::Greater
        } else {
            ViewOrdering::Incomparable
        }
    }

    /// `self ⊂ other`.
    pub fn precedes(&self, other: &View) -> bool {
        self.compare(other) == ViewOrdering::Less
    }

    /// `self ⊆ other`.
    pub fn is_subset(&self, other: &View) -> bool {
        self.changes.is_subset(&other.changes)
    }

    pub fn comparable(&self, other: &View) -> bool {
        self.compare(other) != ViewOrdering::Incomparable
    }

    pub fn union(&self, other: &View) -> View {
        View::new(self.changes.union(&other.changes).copied())
    }

    pub fn with(&self, extra: impl IntoIterator<Item = Change>) -> View {
        View::new(self.changes.iter().copied().chain(extra))
    }

    /// `u32` big-endian change count, then `u32` big-endian id and sign byte per change,
    /// ascending by (process, sign).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 5 * self.changes.len());
        self.write_canonical(&mut out);
        out
    }

    pub fn write_canonical(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.changes.len() as u32).to_be_bytes());
        for c in self.changes.iter() {
            out.extend_from_slice(&c.process.0.to_be_bytes());
            out.push(c.sign.byte());
        }
    }

    /// Parses a canonical encoding from the front of `bytes`, returning the view
    /// and the number of bytes consumed. Non-canonical order is rejected.
    pub fn read_canonical(bytes: &[u8], cap: usize) -> Result<(View, usize), ViewError> {
        let count = bytes.get(..4).ok_or(ViewError::Truncated)?;
        let count = u32::from_be_bytes(count.try_into().expect("4 bytes")) as usize;
        if count > cap {
            return Err(ViewError::TooManyChanges { len: count, cap });
        }
        let end = 4 + count * 5;
        let body = bytes.get(4..end).ok_or(ViewError::Truncated)?;
        let mut changes = BTreeSet::new();
        let mut last: Option<Change> = None;
        for chunk in body.chunks_exact(5) {
            let id = u32::from_be_bytes(chunk[..4].try_into().expect("4 bytes"));
            let sign = Sign::from_byte(chunk[4]).ok_or(ViewError::BadSign(chunk[4]))?;
            let c = Change { process: ProcessId(id), sign };
            if last.is_some_and(|l| l >= c) {
                return Err(ViewError::NotCanonical);
            }
            last = Some(c);
            changes.insert(c);
        }
        Ok((View { changes: Arc::new(changes) }, end))
    }

    pub fn from_canonical(bytes: &[u8]) -> Result<View, ViewError> {
        let (v, used) = View::read_canonical(bytes, DEFAULT_CHANGE_CAP)?;
        if used != bytes.len() {
            return Err(ViewError::TrailingBytes);
        }
        Ok(v)
    }

    /// SHA-256 of the canonical encoding.
    pub fn digest(&self) -> Digest {
        digest(&self.canonical_bytes())
    }
}

/// `n - floor((n - 1) / 3)`; an empty view has no quorum.
pub fn quorum_size(n: usize) -> Result<usize, ViewError> {
    if n == 0 {
        return Err(ViewError::EmptyMembership);
    }
    Ok(n - (n - 1) / 3)
}

impl Ord for View {
    fn cmp(&self, other: &View) -> Ordering {
        self.changes.len().cmp(&other.changes.len()).then_with(|| self.changes.iter().cmp(other.changes.iter()))
    }
}

impl PartialOrd for View {
    fn partial_cmp(&self, other: &View) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, c) in self.changes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str("}")
    }
}

impl Serialize for View {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.changes.iter())
    }
}

impl<'de> Deserialize<'de> for View {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<View, D::Error> {
        let changes = Vec::<Change>::deserialize(d)?;
        Ok(View::new(changes))
    }
}

/// A set of views. It is a *sequence* when its views are pairwise comparable.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewSequence(BTreeSet<View>);

impl ViewSequence {
    pub fn new(views: impl IntoIterator<Item = View>) -> ViewSequence {
        ViewSequence(views.into_iter().collect())
    }

    pub fn single(v: View) -> ViewSequence {
        ViewSequence::new([v])
    }

    pub fn views(&self) -> &BTreeSet<View> {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &View> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, v: &View) -> bool {
        self.0.contains(v)
    }

    pub fn insert(&mut self, v: View) -> bool {
        self.0.insert(v)
    }

    pub fn union(&self, other: &ViewSequence) -> ViewSequence {
        ViewSequence(self.0.union(&other.0).cloned().collect())
    }

    /// Every pair of views is comparable. Holds for the empty set.
    pub fn is_sequence(&self) -> bool {
        // Within a chain the ordering by length matches inclusion, so comparing
        // neighbours in that order suffices.
        self.0.iter().zip(self.0.iter().skip(1)).all(|(a, b)| a.is_subset(b) && a != b)
    }

    /// The union of `self` and `other` is not a sequence.
    pub fn conflicts_with(&self, other: &ViewSequence) -> bool {
        !self.union(other).is_sequence()
    }

    /// The unique view with no proper subset in the set.
    pub fn least_recent(&self) -> Result<&View, ViewError> {
        let minimal: Vec<&View> = self.0.iter().filter(|w| !self.0.iter().any(|x| x.precedes(w))).collect();
        match minimal.as_slice() {
            [] => Err(ViewError::EmptySequence),
            [one] => Ok(one),
            _ => Err(ViewError::NotASequence),
        }
    }

    /// The unique view with no proper superset in the set.
    pub fn most_recent(&self) -> Result<&View, ViewError> {
        let maximal: Vec<&View> = self.0.iter().filter(|w| !self.0.iter().any(|x| w.precedes(x))).collect();
        match maximal.as_slice() {
            [] => Err(ViewError::EmptySequence),
            [one] => Ok(one),
            _ => Err(ViewError::NotASequence),
        }
    }

    /// The views strictly more recent than `v`.
    pub fn after(&self, v: &View) -> ViewSequence {
        ViewSequence(self.0.iter().filter(|w| v.precedes(w)).cloned().collect())
    }

    pub fn without(&self, v: &View) -> ViewSequence {
        ViewSequence(self.0.iter().filter(|w| *w != v).cloned().collect())
    }

    pub fn write_canonical(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.0.len() as u32).to_be_bytes());
        for v in &self.0 {
            v.write_canonical(out);
        }
    }
}

impl FromIterator<View> for ViewSequence {
    fn from_iter<I: IntoIterator<Item = View>>(iter: I) -> ViewSequence {
        ViewSequence::new(iter)
    }
}

impl fmt::Debug for ViewSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.0.iter()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(i: u32) -> ProcessId {
        ProcessId(i)
    }

    fn v(s: &str) -> View {
        View::new(s.split_whitespace().map(|c| c.parse::<Change>().unwrap()))
    }

    #[test]
    fn members_exclude_leavers() {
        let view = v("+1 +2 +3 -2");
        assert_eq!(view.members(), [p(1), p(3)].into_iter().collect());
        assert_eq!(view.size(), 2);
        assert!(!view.is_member(p(2)));
        assert!(view.is_member(p(3)));
    }

    #[test]
    fn quorum_table() {
        let expected = [(1, 1), (2, 2), (3, 3), (4, 3), (5, 4), (6, 5), (7, 5), (10, 7)];
        for (n, q) in expected {
            assert_eq!(quorum_size(n).unwrap(), q, "n={n}");
        }
        assert_eq!(quorum_size(0), Err(ViewError::EmptyMembership));
        assert_eq!(View::default().quorum_size(), Err(ViewError::EmptyMembership));
    }

    #[test]
    fn compare_cases() {
        let a = v("+1 +2");
        let b = v("+1 +2 +3");
        let c = v("+1 +2 +4");
        assert_eq!(a.compare(&a.clone()), ViewOrdering::Equal);
        assert_eq!(a.compare(&b), ViewOrdering::Less);
        assert_eq!(b.compare(&a), ViewOrdering::Greater);
        assert_eq!(b.compare(&c), ViewOrdering::Incomparable);
    }

    #[test]
    fn sequence_extremes() {
        let s = ViewSequence::new([v("+1 +2 +3"), v("+1 +2"), v("+1 +2 +3 +4")]);
        assert!(s.is_sequence());
        assert_eq!(s.least_recent().unwrap(), &v("+1 +2"));
        assert_eq!(s.most_recent().unwrap(), &v("+1 +2 +3 +4"));

        let bad = ViewSequence::new([v("+1 +2 +3"), v("+1 +2 +4")]);
        assert!(!bad.is_sequence());
        assert_eq!(bad.least_recent(), Err(ViewError::NotASequence));
        assert!(ViewSequence::default().is_sequence());
        assert_eq!(ViewSequence::default().least_recent(), Err(ViewError::EmptySequence));
    }

    #[test]
    fn canonical_layout() {
        let view = v("-2 +2 +1");
        let bytes = view.canonical_bytes();
        assert_eq!(bytes, vec![0, 0, 0, 3, 0, 0, 0, 1, b'+', 0, 0, 0, 2, b'+', 0, 0, 0, 2, b'-']);
        assert_eq!(View::from_canonical(&bytes).unwrap(), view);
    }

    #[test]
    fn canonical_rejects_bad_input() {
        let mut unsorted = vec![0, 0, 0, 2];
        unsorted.extend_from_slice(&[0, 0, 0, 2, b'+', 0, 0, 0, 1, b'+']);
        assert_eq!(View::from_canonical(&unsorted), Err(ViewError::NotCanonical));

        let sign = [0, 0, 0, 1, 0, 0, 0, 1, b'*'];
        assert_eq!(View::from_canonical(&sign), Err(ViewError::BadSign(b'*')));

        let huge = 2000u32.to_be_bytes();
        assert!(matches!(View::from_canonical(&huge), Err(ViewError::TooManyChanges { len: 2000, .. })));
        assert_eq!(View::from_canonical(&[0, 0, 0, 1, 0]), Err(ViewError::Truncated));
    }

    #[test]
    fn change_text_round_trip() {
        for s in ["+1", "-17", "+p4"] {
            let c: Change = s.parse().unwrap();
            assert_eq!(c.to_string(), s.replace('p', ""));
        }
        assert!("1".parse::<Change>().is_err());
        assert!("+x".parse::<Change>().is_err());
        assert!("".parse::<Change>().is_err());
    }
}
