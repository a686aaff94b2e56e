//! Twin merge-only partitions of the high-probability bins `B`.
//!
//! `M` holds groups of power-of-two size together with their noisy estimates
//! `(P_hat, E_hat)`. Every group ever created in `M` is answered by the pools of
//! its size class, and equal-size groups are pairwise disjoint over the whole
//! run, which is what keeps each pool's events disjoint.
//!
//! `G` holds the prediction of each group and its cached estimated error.
//! Every `G` group is a disjoint union of current `M` groups, so its statistics
//! are sums over at most `floor(log2 |B|) + 1` stored estimates.
//!
//! Bins are referred to by their index into the sorted list `B`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{DisjointQueryPool, PoolSpec};
use crate::simplex::{canonical, round_down, LevelSet, ProbVector};
use crate::world::BinnedPredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u32);

/// The P-hat and E-hat pools serving one size class `2^i`.
#[derive(Debug)]
pub struct SizeClassPools {
    pub probability: DisjointQueryPool,
    pub mean_label: DisjointQueryPool,
}

/// `floor(log2 n) + 1`: the number of distinct power-of-two sizes up to `n`.
pub fn size_class_count(n: usize) -> usize {
    assert!(n > 0);
    (usize::BITS - n.leading_zeros()) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct MGroup {
    pub id: GroupId,
    pub bins: Vec<usize>,
    pub p_hat: f64,
    pub e_hat: Vec<f64>,
}

/// One answered estimate, kept for offline accuracy monitoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub group: GroupId,
    pub size_class: u32,
    pub bins: Vec<usize>,
    pub p_hat: f64,
    pub e_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MMerge {
    pub left: GroupId,
    pub right: GroupId,
    pub merged: GroupId,
    pub size: usize,
}

/// Sums of stored `M` estimates over the constituents of a bin set.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub p_hat: f64,
    pub e_hat: Vec<f64>,
    pub constituents: usize,
}

impl Aggregate {
    /// `|P_hat * pred_j - E_hat_j|` for every class.
    pub fn errors(&self, pred: &ProbVector) -> Vec<f64> {
        self.e_hat
            .iter()
            .enumerate()
            .map(|(j, e)| (self.p_hat * pred[j] - e).abs())
            .collect()
    }
}

#[derive(Debug)]
pub struct MStructure {
    bins: Vec<LevelSet>,
    owner: Vec<GroupId>,
    groups: BTreeMap<GroupId, MGroup>,
    history: BTreeMap<u32, Vec<Vec<usize>>>,
    estimates: Vec<EstimateRecord>,
    pools: Vec<SizeClassPools>,
    next_id: u32,
}

impl MStructure {
    pub fn bins(&self) -> &[LevelSet] {
        &self.bins
    }

    pub fn group(&self, id: GroupId) -> Option<&MGroup> {
        self.groups.get(&id)
    }

    pub fn groups(&self) -> impl Iterator<Item = &MGroup> {
        self.groups.values()
    }

    pub fn owner(&self, bin: usize) -> GroupId {
        self.owner[bin]
    }

    /// Every estimate answered so far, in query order.
    pub fn estimate_log(&self) -> &[EstimateRecord] {
        &self.estimates
    }

    pub fn pool_specs(&self) -> Vec<PoolSpec> {
        self.pools
            .iter()
            .flat_map(|p| [p.probability.spec().clone(), p.mean_label.spec().clone()])
            .collect()
    }

    pub fn queries_issued(&self) -> Vec<(usize, usize)> {
        self.pools
            .iter()
            .map(|p| {
                (
                    p.probability.queries_issued(),
                    p.mean_label.queries_issued(),
                )
            })
            .collect()
    }

    /// Current groups covering `target`, checking that each lies inside it.
    fn constituents(&self, target: &[usize]) -> Result<Vec<GroupId>> {
        let members: HashSet<usize> = target.iter().copied().collect();
        let mut seen = Vec::new();
        for &b in target {
            let id = *self
                .owner
                .get(b)
                .ok_or_else(|| Error::InvariantViolation(format!("bin index {b} outside B")))?;
            if seen.contains(&id) {
                continue;
            }
            let group = &self.groups[&id];
            if let Some(stray) = group.bins.iter().find(|x| !members.contains(x)) {
                return Err(Error::InvariantViolation(format!(
                    "bin set is not a union of M groups: group {} straddles it at bin {}",
                    id.0, self.bins[*stray]
                )));
            }
            seen.push(id);
        }
        seen.sort();
        Ok(seen)
    }

    pub fn aggregate(&self, target: &[usize]) -> Result<Aggregate> {
        let ids = self.constituents(target)?;
        let k = self.pools[0].mean_label.spec().value_dim;
        let mut agg = Aggregate {
            p_hat: 0.0,
            e_hat: vec![0.0; k],
            constituents: ids.len(),
        };
        for id in ids {
            let g = &self.groups[&id];
            agg.p_hat += g.p_hat;
            for (acc, e) in agg.e_hat.iter_mut().zip(&g.e_hat) {
                *acc += e;
            }
        }
        Ok(agg)
    }

    fn estimate(&mut self, bins: Vec<usize>, binned: &BinnedPredictor) -> Result<GroupId> {
        let size = bins.len();
        if !size.is_power_of_two() {
            return Err(Error::InvariantViolation(format!(
                "M group of size {size} is not a power of two"
            )));
        }
        let class = size.trailing_zeros();
        let pools = self
            .pools
            .get_mut(class as usize)
            .ok_or_else(|| Error::InvariantViolation(format!("no pools for size class {class}")))?;
        let history = self.history.entry(class).or_default();
        for earlier in history.iter() {
            if earlier.iter().any(|b| bins.binary_search(b).is_ok()) {
                return Err(Error::InvariantViolation(format!(
                    "two M groups of size {size} overlap over the run"
                )));
            }
        }
        let event: Vec<LevelSet> = bins.iter().map(|&b| self.bins[b].clone()).collect();
        let p_hat = pools.probability.query(&event, binned)?[0];
        let e_hat = pools.mean_label.query(&event, binned)?;
        history.push(bins.clone());

        let id = GroupId(self.next_id);
        self.next_id += 1;
        for &b in &bins {
            self.owner[b] = id;
        }
        self.estimates.push(EstimateRecord {
            group: id,
            size_class: class,
            bins: bins.clone(),
            p_hat,
            e_hat: e_hat.clone(),
        });
        self.groups.insert(
            id,
            MGroup {
                id,
                bins,
                p_hat,
                e_hat,
            },
        );
        Ok(id)
    }

    /// Merges equal-size groups inside `target`, smallest size and smallest
    /// ids first, until all constituent sizes are distinct. Each new group is
    /// estimated on its size class's pools.
    pub fn merge_pass(
        &mut self,
        target: &[usize],
        binned: &BinnedPredictor,
    ) -> Result<Vec<MMerge>> {
        let mut events = Vec::new();
        loop {
            let ids = self.constituents(target)?;
            let mut by_size: BTreeMap<usize, Vec<GroupId>> = BTreeMap::new();
            for id in ids {
                by_size
                    .entry(self.groups[&id].bins.len())
                    .or_default()
                    .push(id);
            }
            let Some((size, pair)) = by_size.into_iter().find(|(_, v)| v.len() >= 2) else {
                return Ok(events);
            };
            let (left, right) = (pair[0], pair[1]);
            let a = self.groups.remove(&left).expect("constituent exists");
            let b = self.groups.remove(&right).expect("constituent exists");
            let mut bins = a.bins;
            bins.extend(b.bins);
            bins.sort_unstable();
            let merged = self.estimate(bins, binned)?;
            events.push(MMerge {
                left,
                right,
                merged,
                size: 2 * size,
            });
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.bins.len();
        let mut covered = vec![false; n];
        for g in self.groups.values() {
            if !g.bins.len().is_power_of_two() {
                return Err(Error::InvariantViolation(format!(
                    "M group {} has size {}",
                    g.id.0,
                    g.bins.len()
                )));
            }
            for &b in &g.bins {
                if covered[b] || self.owner[b] != g.id {
                    return Err(Error::InvariantViolation(format!(
                        "M groups do not partition B at bin {}",
                        self.bins[b]
                    )));
                }
                covered[b] = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::InvariantViolation("M groups do not cover B".into()));
        }
        for (class, groups) in &self.history {
            let mut seen = vec![false; n];
            for g in groups {
                for &b in g {
                    if std::mem::replace(&mut seen[b], true) {
                        return Err(Error::InvariantViolation(format!(
                            "historical M groups of size {} overlap",
                            1usize << class
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GGroup {
    pub id: GroupId,
    pub bins: Vec<usize>,
    pub pred: ProbVector,
    pub err: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GStructure {
    lambda: u32,
    groups: BTreeMap<GroupId, GGroup>,
    owner: Vec<GroupId>,
    next_id: u32,
}

impl GStructure {
    pub fn lambda(&self) -> u32 {
        self.lambda
    }

    pub fn group(&self, id: GroupId) -> Option<&GGroup> {
        self.groups.get(&id)
    }

    pub fn groups(&self) -> impl Iterator<Item = &GGroup> {
        self.groups.values()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn owner(&self, bin: usize) -> GroupId {
        self.owner[bin]
    }

    fn group_mut(&mut self, id: GroupId) -> Result<&mut GGroup> {
        self.groups
            .get_mut(&id)
            .ok_or_else(|| Error::InvariantViolation(format!("no G group {}", id.0)))
    }

    pub fn set_pred(&mut self, id: GroupId, pred: ProbVector) -> Result<()> {
        self.group_mut(id)?.pred = pred;
        Ok(())
    }

    pub fn set_err(&mut self, id: GroupId, err: Vec<f64>) -> Result<()> {
        self.group_mut(id)?.err = err;
        Ok(())
    }

    /// The other group whose prediction rounds to `level`, if any.
    pub fn find_collision(&self, level: &LevelSet, exclude: GroupId) -> Result<Option<GroupId>> {
        let mut hits = self
            .groups
            .values()
            .filter(|g| g.id != exclude && round_down(&g.pred, self.lambda) == *level)
            .map(|g| g.id);
        let first = hits.next();
        if let Some(second) = hits.next() {
            return Err(Error::InvariantViolation(format!(
                "G groups {} and {} share level set {level}",
                first.expect("first hit precedes second").0,
                second.0
            )));
        }
        Ok(first)
    }

    /// Replaces groups `a` and `b` with their union under a fresh id. The
    /// cached errors of the merged group are zeroed; callers recompute them.
    pub fn merge(&mut self, a: GroupId, b: GroupId, winner_pred: ProbVector) -> Result<GroupId> {
        if a == b {
            return Err(Error::InvariantViolation(
                "G merge of a group with itself".into(),
            ));
        }
        let ga = self
            .groups
            .remove(&a)
            .ok_or_else(|| Error::InvariantViolation(format!("no G group {}", a.0)))?;
        let gb = match self.groups.remove(&b) {
            Some(g) => g,
            None => {
                self.groups.insert(a, ga);
                return Err(Error::InvariantViolation(format!("no G group {}", b.0)));
            }
        };
        let id = GroupId(self.next_id);
        self.next_id += 1;
        let mut bins = ga.bins;
        bins.extend(gb.bins);
        bins.sort_unstable();
        for &x in &bins {
            self.owner[x] = id;
        }
        let k = winner_pred.k();
        self.groups.insert(
            id,
            GGroup {
                id,
                bins,
                pred: winner_pred,
                err: vec![0.0; k],
            },
        );
        Ok(id)
    }

    pub fn check_invariants(&self, m: &MStructure) -> Result<()> {
        let n = self.owner.len();
        let mut covered = vec![false; n];
        let mut levels = HashSet::new();
        for g in self.groups.values() {
            for &b in &g.bins {
                if covered[b] || self.owner[b] != g.id {
                    return Err(Error::InvariantViolation(format!(
                        "G groups do not partition B at bin index {b}"
                    )));
                }
                covered[b] = true;
            }
            if !levels.insert(round_down(&g.pred, self.lambda)) {
                return Err(Error::InvariantViolation(format!(
                    "G group {} shares its level set with another group",
                    g.id.0
                )));
            }
            m.constituents(&g.bins)?;
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::InvariantViolation("G groups do not cover B".into()));
        }
        Ok(())
    }
}

/// Singleton groups for every bin of `bins` (sorted, distinct) in both
/// structures. Singleton estimates come from the size-class-0 pools and each
/// prediction starts at the canonical lift of its bin.
pub fn init(
    bins: Vec<LevelSet>,
    pools: Vec<SizeClassPools>,
    binned: &BinnedPredictor,
) -> Result<(MStructure, GStructure)> {
    if bins.is_empty() {
        return Err(Error::ParameterOutOfRange("B is empty".into()));
    }
    if bins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::ParameterOutOfRange(
            "B must be sorted and distinct".into(),
        ));
    }
    if pools.len() < size_class_count(bins.len()) {
        return Err(Error::ParameterOutOfRange(format!(
            "{} size classes of pools for |B| = {}",
            pools.len(),
            bins.len()
        )));
    }
    let lambda = bins[0].lambda();
    let n = bins.len();
    let mut m = MStructure {
        bins,
        owner: vec![GroupId(u32::MAX); n],
        groups: BTreeMap::new(),
        history: BTreeMap::new(),
        estimates: Vec::new(),
        pools,
        next_id: 0,
    };
    for b in 0..n {
        m.estimate(vec![b], binned)?;
    }

    let mut g = GStructure {
        lambda,
        groups: BTreeMap::new(),
        owner: Vec::with_capacity(n),
        next_id: 0,
    };
    for b in 0..n {
        let id = GroupId(g.next_id);
        g.next_id += 1;
        let pred = canonical(&m.bins[b]);
        let err = m.aggregate(&[b])?.errors(&pred);
        g.owner.push(id);
        g.groups.insert(
            id,
            GGroup {
                id,
                bins: vec![b],
                pred,
                err,
            },
        );
    }
    Ok((m, g))
}
