//! Region families and their index sets over calibration and test points.
//!
//! A region stores `J(R)`, the sorted test indices it contains, and `I(R)`,
//! the sorted calibration indices it contains. Contiguous index windows are
//! stored as ranges so that large interval families stay cheap.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};

/// Sorted, duplicate-free set of point indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Members {
    /// `start..end`.
    Range { start: usize, end: usize },
    List(Vec<usize>),
}

impl Members {
    /// Sorts and deduplicates; runs of consecutive indices collapse to a range.
    pub fn from_indices(mut idx: Vec<usize>) -> Members {
        idx.sort_unstable();
        idx.dedup();
        match (idx.first(), idx.last()) {
            (Some(&a), Some(&b)) if b - a + 1 == idx.len() => Members::Range { start: a, end: b + 1 },
            _ => Members::List(idx),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Members::Range { start, end } => end - start,
            Members::List(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> MemberIter<'_> {
        match self {
            Members::Range { start, end } => MemberIter::Range(*start..*end),
            Members::List(v) => MemberIter::List(v.iter()),
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        match self {
            Members::Range { start, end } => (*start..*end).contains(&i),
            Members::List(v) => v.binary_search(&i).is_ok(),
        }
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    /// Largest index plus one, or 0 when empty.
    pub fn bound(&self) -> usize {
        match self {
            Members::Range { end, .. } => *end,
            Members::List(v) => v.last().map_or(0, |&i| i + 1),
        }
    }

    pub fn intersection_len(&self, other: &Members) -> usize {
        match (self, other) {
            (Members::Range { start: a, end: b }, Members::Range { start: c, end: d }) => {
                b.min(d).saturating_sub(*a.max(c))
            }
            _ => {
                let (small, big) = if self.len() <= other.len() { (self, other) } else { (other, self) };
                small.iter().filter(|&i| big.contains(i)).count()
            }
        }
    }

    pub fn symmetric_difference_len(&self, other: &Members) -> usize {
        self.len() + other.len() - 2 * self.intersection_len(other)
    }

    /// Sum of `values` over the members; `prefix` must be the prefix sums of
    /// `values` (length `values.len() + 1`).
    pub fn sum(&self, values: &[f64], prefix: &[f64]) -> f64 {
        match self {
            Members::Range { start, end } => prefix[*end] - prefix[*start],
            Members::List(v) => v.iter().map(|&i| values[i]).sum(),
        }
    }
}

pub enum MemberIter<'a> {
    Range(std::ops::Range<usize>),
    List(std::slice::Iter<'a, usize>),
}

impl Iterator for MemberIter<'_> {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        match self {
            MemberIter::Range(r) => r.next(),
            MemberIter::List(it) => it.next().copied(),
        }
    }
}

/// Prefix sums `p[0] = 0, p[i + 1] = p[i] + v[i]`.
pub fn prefix_sums(values: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(values.len() + 1);
    let mut acc = 0.0;
    p.push(acc);
    for v in values {
        acc += v;
        p.push(acc);
    }
    p
}

/// Family-specific metadata describing how a region was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Descriptor {
    Group { label: String },
    Interval { start: usize, len: usize },
    /// Closed Euclidean ball around test point `center`.
    Ball { center: usize, center_point: Vec<f64>, radius: f64 },
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: usize,
    /// `J(R)`: indices into the test set.
    pub members: Members,
    /// `I(R)`: indices into the calibration set.
    pub calib: Vec<usize>,
    pub descriptor: Descriptor,
}

impl Region {
    pub fn new(id: usize, members: Members, descriptor: Descriptor) -> Self {
        Region { id, members, calib: Vec::new(), descriptor }
    }

    pub fn from_indices(id: usize, idx: Vec<usize>) -> Self {
        Region::new(id, Members::from_indices(idx), Descriptor::Explicit)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct RegionRecord {
    id: usize,
    descriptor: Descriptor,
    member_indices: Vec<usize>,
    #[serde(default)]
    calib_indices: Vec<usize>,
}

impl Serialize for Region {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RegionRecord {
            id: self.id,
            descriptor: self.descriptor.clone(),
            member_indices: self.members.to_vec(),
            calib_indices: self.calib.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = RegionRecord::deserialize(d)?;
        let mut calib = r.calib_indices;
        calib.sort_unstable();
        calib.dedup();
        Ok(Region { id: r.id, members: Members::from_indices(r.member_indices), calib, descriptor: r.descriptor })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Partition,
    Intervals,
    Balls,
    Explicit,
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FamilyKind::Partition => "partition",
            FamilyKind::Intervals => "intervals",
            FamilyKind::Balls => "balls",
            FamilyKind::Explicit => "explicit",
        };
        f.write_str(s)
    }
}

/// A finite collection of regions with a declared VC-dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFamily {
    pub kind: FamilyKind,
    pub vc_dim: usize,
    pub disjoint: bool,
    pub regions: Vec<Region>,
}

impl RegionFamily {
    /// An explicit family; disjointness is computed from the member sets.
    pub fn explicit(regions: Vec<Region>, vc_dim: usize) -> Result<Self> {
        if vc_dim == 0 {
            return precondition("vc_dim must be at least 1");
        }
        let disjoint = pairwise_disjoint(&regions);
        Ok(RegionFamily { kind: FamilyKind::Explicit, vc_dim, disjoint, regions })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    /// Checks sortedness of index sets, unique ids, `vc_dim >= 1` and the
    /// disjointness flag.
    pub fn validate(&self) -> Result<()> {
        if self.vc_dim == 0 {
            return precondition("vc_dim must be at least 1");
        }
        let mut ids = HashSet::new();
        for r in &self.regions {
            if !ids.insert(r.id) {
                return precondition(format!("duplicate region id {}", r.id));
            }
            if let Members::List(v) = &r.members {
                if v.windows(2).any(|w| w[0] >= w[1]) {
                    return precondition(format!("region {} members not sorted and unique", r.id));
                }
            }
            if r.calib.windows(2).any(|w| w[0] >= w[1]) {
                return precondition(format!("region {} calibration indices not sorted and unique", r.id));
            }
        }
        if self.disjoint && !pairwise_disjoint(&self.regions) {
            return precondition("family is flagged disjoint but regions overlap");
        }
        Ok(())
    }

    /// Regions with at most `cap` members.
    pub fn with_max_card(&self, cap: usize) -> RegionFamily {
        RegionFamily {
            regions: self.regions.iter().filter(|r| r.len() <= cap).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let family: RegionFamily = serde_json::from_str(text)?;
        family.validate()?;
        Ok(family)
    }
}

fn pairwise_disjoint(regions: &[Region]) -> bool {
    let mut seen = HashSet::new();
    regions.iter().all(|r| r.members.iter().all(|i| seen.insert(i)))
}

/// One region per distinct group, in order of first appearance.
pub fn partition_family<K: Eq + Hash + Clone + fmt::Display>(assignments: &[K]) -> RegionFamily {
    let mut order: Vec<K> = Vec::new();
    let mut members: HashMap<K, Vec<usize>> = HashMap::new();
    for (i, g) in assignments.iter().enumerate() {
        members
            .entry(g.clone())
            .or_insert_with(|| {
                order.push(g.clone());
                Vec::new()
            })
            .push(i);
    }
    let regions = order
        .into_iter()
        .enumerate()
        .map(|(id, g)| {
            let idx = members.remove(&g).expect("group recorded");
            Region::new(id, Members::from_indices(idx), Descriptor::Group { label: g.to_string() })
        })
        .collect();
    RegionFamily { kind: FamilyKind::Partition, vc_dim: 1, disjoint: true, regions }
}

/// All windows `[i, i + len)` with `min_size <= len <= max_size`, ordered
/// by length then start.
pub fn interval_family(n: usize, min_size: usize, max_size: usize) -> Result<RegionFamily> {
    if min_size == 0 || min_size > max_size || max_size > n {
        return precondition(format!("need 1 <= min_size <= max_size <= n, got {min_size}, {max_size}, n = {n}"));
    }
    let mut regions = Vec::new();
    for len in min_size..=max_size {
        for start in 0..=n - len {
            let id = regions.len();
            regions.push(Region::new(id, Members::Range { start, end: start + len }, Descriptor::Interval { start, len }));
        }
    }
    Ok(RegionFamily { kind: FamilyKind::Intervals, vc_dim: 2, disjoint: false, regions })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For every center and every `c` in `1..=max_card`, the `c` nearest test
/// points (Euclidean, ties to the smaller index), deduplicated by member set.
///
/// Each center sorts only its `max_card` nearest neighbours after a linear
/// selection pass; swapping in a spatial index would only change
/// [`nearest_prefix`].
pub fn ball_family(points: &[Vec<f64>], max_card: usize) -> Result<RegionFamily> {
    if max_card == 0 {
        return precondition("max_card must be at least 1");
    }
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return precondition("points do not share one dimension");
    }
    let per_center: Vec<Vec<(usize, f64)>> =
        (0..points.len()).into_par_iter().map(|c| nearest_prefix(points, c, max_card)).collect();

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut regions = Vec::new();
    for (center, neighbours) in per_center.into_iter().enumerate() {
        let mut set: Vec<usize> = Vec::with_capacity(neighbours.len());
        for &(j, d2) in &neighbours {
            set.push(j);
            let mut key = set.clone();
            key.sort_unstable();
            if seen.insert(key.clone()) {
                let id = regions.len();
                regions.push(Region::new(
                    id,
                    Members::from_indices(key),
                    Descriptor::Ball { center, center_point: points[center].clone(), radius: d2.sqrt() },
                ));
            }
        }
    }
    Ok(RegionFamily { kind: FamilyKind::Balls, vc_dim: dim + 1, disjoint: pairwise_disjoint(&regions), regions })
}

/// The `k` points nearest to `points[center]` as `(index, squared distance)`,
/// ordered by `(distance, index)`.
pub fn nearest_prefix(points: &[Vec<f64>], center: usize, k: usize) -> Vec<(usize, f64)> {
    let c = &points[center];
    let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(j, p)| (j, squared_distance(c, p))).collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    let k = k.min(all.len());
    if k < all.len() {
        all.select_nth_unstable_by(k, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all
}

/// Fill `I(R)` for ball regions with every calibration point inside the
/// closed ball.
pub fn bind_calibration(family: &RegionFamily, calib_points: &[Vec<f64>]) -> Result<RegionFamily> {
    let mut out = family.clone();
    for r in &mut out.regions {
        match &r.descriptor {
            Descriptor::Ball { center_point, radius, .. } => {
                if calib_points.iter().any(|p| p.len() != center_point.len()) {
                    return precondition("calibration points do not match the family's dimension");
                }
                r.calib = calib_points
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| squared_distance(center_point, p).sqrt() <= *radius)
                    .map(|(i, _)| i)
                    .collect();
            }
            _ => return Err(Error::NoGeometry { kind: family.kind.to_string() }),
        }
    }
    Ok(out)
}

/// Fill `I(R)` for partition regions from calibration group labels.
pub fn bind_calibration_groups<K: fmt::Display>(family: &RegionFamily, calib_groups: &[K]) -> Result<RegionFamily> {
    let mut by_label: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, g) in calib_groups.iter().enumerate() {
        by_label.entry(g.to_string()).or_default().push(i);
    }
    let mut out = family.clone();
    for r in &mut out.regions {
        match &r.descriptor {
            Descriptor::Group { label } => r.calib = by_label.get(label).cloned().unwrap_or_default(),
            _ => return precondition(format!("region {} has no group label", r.id)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sets(f: &RegionFamily) -> Vec<Vec<usize>> {
        f.regions.iter().map(|r| r.members.to_vec()).collect()
    }

    #[test]
    fn partition_examples() {
        let f = partition_family(&["A", "A", "B"]);
        assert_eq!(sets(&f), vec![vec![0, 1], vec![2]]);
        assert!(f.disjoint);
        assert_eq!(f.vc_dim, 1);
        assert_eq!(sets(&partition_family(&[7, 7, 7])), vec![vec![0, 1, 2]]);
        assert_eq!(partition_family(&[1, 2, 3, 4]).len(), 4);
    }

    #[test]
    fn interval_examples() {
        let f = interval_family(4, 2, 2).unwrap();
        assert_eq!(sets(&f), vec![vec![0, 1], vec![1, 2], vec![2, 3]]);
        assert_eq!(interval_family(3, 1, 3).unwrap().len(), 6);
        assert!(interval_family(3, 4, 4).is_err());
        assert!(interval_family(3, 0, 2).is_err());
        assert!(interval_family(3, 2, 1).is_err());
    }

    #[test]
    fn ball_examples() {
        let pts = vec![vec![0.0], vec![10.0], vec![11.0]];
        let f = ball_family(&pts, 2).unwrap();
        assert_eq!(sets(&f), vec![vec![0], vec![0, 1], vec![1], vec![1, 2], vec![2]]);
        assert_eq!(f.vc_dim, 2);
        assert_eq!(ball_family(&pts, 1).unwrap().len(), 3);
        let same = vec![vec![1.0, 1.0]; 4];
        assert_eq!(sets(&ball_family(&same, 3).unwrap()), vec![vec![0], vec![0, 1], vec![0, 1, 2]]);
    }

    #[test]
    fn ball_binding_uses_closed_balls() {
        let pts = vec![vec![0.0], vec![1.0], vec![5.0]];
        let f = ball_family(&pts, 2).unwrap();
        let bound = bind_calibration(&f, &[vec![0.5], vec![1.0], vec![-1.0], vec![100.0]]).unwrap();
        // Region {0, 1}: center 0, radius 1.
        let r = bound.regions.iter().find(|r| r.members.to_vec() == vec![0, 1]).unwrap();
        assert_eq!(r.calib, vec![0, 1, 2]);
        // Singleton at 5 has radius 0 and no calibration point.
        let r = bound.regions.iter().find(|r| r.members.to_vec() == vec![2]).unwrap();
        assert!(r.calib.is_empty());
    }

    #[test]
    fn index_families_cannot_bind_geometry() {
        let f = interval_family(3, 1, 1).unwrap();
        assert!(matches!(bind_calibration(&f, &[vec![0.0]]), Err(Error::NoGeometry { .. })));
        let p = partition_family(&["a", "b"]);
        let bound = bind_calibration_groups(&p, &["b", "b", "c"]).unwrap();
        assert_eq!(bound.regions[0].calib, Vec::<usize>::new());
        assert_eq!(bound.regions[1].calib, vec![0, 1]);
    }

    #[test]
    fn manifest_roundtrip() {
        let f = bind_calibration(&ball_family(&[vec![0.0], vec![2.0]], 2).unwrap(), &[vec![1.0]]).unwrap();
        let back = RegionFamily::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        let j: serde_json::Value = serde_json::from_str(&f.to_json().unwrap()).unwrap();
        assert_eq!(j["kind"], "balls");
        assert!(j["regions"][0]["member_indices"].is_array());
    }

    #[test]
    fn disjoint_flag_is_checked() {
        let mut f = interval_family(4, 2, 2).unwrap();
        f.disjoint = true;
        assert!(f.validate().is_err());
    }

    #[test]
    fn intervals_never_shatter_three_points() {
        let n = 12;
        let f = interval_family(n, 1, n).unwrap();
        let mut rng = crate::rng::stream(11, 0);
        for _ in 0..100 {
            let mut pick: Vec<usize> = Vec::new();
            while pick.len() < 3 {
                let i = crate::rng::index(&mut rng, n);
                if !pick.contains(&i) {
                    pick.push(i);
                }
            }
            let patterns: HashSet<Vec<bool>> =
                f.regions.iter().map(|r| pick.iter().map(|&i| r.members.contains(i)).collect()).collect();
            assert!(patterns.len() < 8);
        }
    }

    proptest! {
        #[test]
        fn balls_are_deduplicated_and_nested(pts in prop::collection::vec(prop::collection::vec(-3i32..3, 2), 1..25),
                                             r in 1usize..6) {
            let pts: Vec<Vec<f64>> = pts.into_iter().map(|p| p.into_iter().map(f64::from).collect()).collect();
            let f = ball_family(&pts, r).unwrap();
            let unique: HashSet<Vec<usize>> = sets(&f).into_iter().collect();
            prop_assert_eq!(unique.len(), f.len());
            for c in 0..pts.len() {
                let prefix = nearest_prefix(&pts, c, r);
                for w in 1..prefix.len() {
                    let small: HashSet<usize> = prefix[..w].iter().map(|p| p.0).collect();
                    let big: HashSet<usize> = prefix[..w + 1].iter().map(|p| p.0).collect();
                    prop_assert!(small.is_subset(&big));
                    let mut key: Vec<usize> = big.into_iter().collect();
                    key.sort_unstable();
                    prop_assert!(unique.contains(&key));
                }
            }
        }

        #[test]
        fn member_set_algebra(a in prop::collection::btree_set(0usize..40, 0..20),
                              b in prop::collection::btree_set(0usize..40, 0..20)) {
            let ma = Members::from_indices(a.iter().copied().collect());
            let mb = Members::from_indices(b.iter().copied().collect());
            prop_assert_eq!(ma.intersection_len(&mb), a.intersection(&b).count());
            prop_assert_eq!(ma.symmetric_difference_len(&mb), a.symmetric_difference(&b).count());
        }
    }
}
