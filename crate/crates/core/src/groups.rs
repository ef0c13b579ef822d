//! Group pseudo labels.
//!
//! Samples whose neighbor sets share a common member are merged transitively
//! into groups. Group size is capped by `s`, the largest cluster DBSCAN finds
//! on the memory bank. When the cap binds, strong links (many shared
//! neighbors) win over weak ones.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, MemoryBank};
use crate::error::{Error, Result};
use crate::neighbors::{NeighborMemory, NeighborSet};

/// Disjoint-set forest with union by size and path halving.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn size_of(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r]
    }

    /// Joins the sets of `a` and `b`; false if they were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    /// Radius in cosine distance `1 - u.v`.
    pub eps: f64,
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        if !(eps > 0.0) || min_pts < 2 {
            return Err(Error::Config(format!(
                "dbscan needs eps > 0 and min_pts >= 2, got {eps}, {min_pts}"
            )));
        }
        Ok(Self { eps, min_pts })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbscanResult {
    /// Clusters in discovery order, members ascending.
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
    /// Largest cluster size, or the number of points when nothing clusters.
    pub max_cluster_size: usize,
}

/// DBSCAN over cosine distance.
///
/// Points are visited in index order; a border point reachable from several
/// clusters belongs to the first one discovered.
pub fn dbscan(bank: &MemoryBank, params: DbscanParams) -> DbscanResult {
    let n = bank.len();
    let max_sim = 1.0 - params.eps;
    let region: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let vi = bank.get(i);
            (0..n)
                .filter(|&j| dot(vi, bank.get(j)) >= max_sim)
                .collect()
        })
        .collect();

    const UNSEEN: usize = usize::MAX;
    const NOISE: usize = usize::MAX - 1;
    let mut label = vec![UNSEEN; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for p in 0..n {
        if label[p] != UNSEEN {
            continue;
        }
        if region[p].len() < params.min_pts {
            label[p] = NOISE;
            continue;
        }
        let c = clusters.len();
        let mut members = vec![p];
        label[p] = c;
        let mut queue = std::collections::VecDeque::from([p]);
        while let Some(q) = queue.pop_front() {
            for &r in &region[q] {
                if label[r] == UNSEEN || label[r] == NOISE {
                    let was_unseen = label[r] == UNSEEN;
                    label[r] = c;
                    members.push(r);
                    if was_unseen && region[r].len() >= params.min_pts {
                        queue.push_back(r);
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    let noise: Vec<usize> = (0..n).filter(|&i| label[i] == NOISE).collect();
    let max_cluster_size = clusters.iter().map(Vec::len).max().unwrap_or(n);
    DbscanResult {
        clusters,
        noise,
        max_cluster_size,
    }
}

/// `eps` as the `percentile`-th percent of pairwise cosine distances over at
/// most `max_points` evenly strided bank entries.
pub fn eps_from_percentile(bank: &MemoryBank, percentile: f64, max_points: usize) -> f64 {
    let n = bank.len();
    let take = n.min(max_points.max(2));
    let idx: Vec<usize> = (0..take).map(|t| t * n / take).collect();
    let mut dists: Vec<f64> = idx
        .par_iter()
        .enumerate()
        .flat_map_iter(|(a, &i)| {
            idx[a + 1..]
                .iter()
                .map(move |&j| 1.0 - dot(bank.get(i), bank.get(j)))
        })
        .collect();
    if dists.is_empty() {
        return 1e-9;
    }
    dists.sort_by(f64::total_cmp);
    let pos = (percentile / 100.0).clamp(0.0, 1.0) * (dists.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let eps = dists[lo] + (dists[hi] - dists[lo]) * (pos - lo as f64);
    eps.max(1e-9)
}

/// Which sample pairs may be merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergePolicy {
    /// Merge when the two neighbor sets share at least one member.
    Basic,
    /// Merge when they share at least `c` members.
    MinCommon(usize),
    /// Keep only neighbors predicted in both this and the previous epoch,
    /// then merge as `Basic`.
    TwoEpochVote,
}

impl MergePolicy {
    fn min_common(self) -> usize {
        match self {
            MergePolicy::MinCommon(c) => c.max(1),
            _ => 1,
        }
    }
}

/// Partition of the target samples into groups with contiguous ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub labels: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    pub cap: usize,
}

impl GroupPartition {
    pub fn singletons(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            groups: (0..n).map(|i| vec![i]).collect(),
            cap: n.max(1),
        }
    }

    /// Relabels arbitrary labels to ids `0..z` ordered by smallest member.
    pub fn from_labels(raw: &[usize], cap: usize) -> Self {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let labels = raw
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let id = *remap.entry(l).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[id].push(i);
                id
            })
            .collect();
        Self {
            labels,
            groups,
            cap,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, i: usize) -> &[usize] {
        &self.groups[self.labels[i]]
    }

    pub fn max_group_size(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `sample_id,group_id` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sample_id,group_id")?;
        for (i, g) in self.labels.iter().enumerate() {
            writeln!(w, "{i},{g}")?;
        }
        Ok(())
    }
}

/// Group pseudo label of every sample.
pub fn assign_labels(partition: &GroupPartition) -> Vec<usize> {
    partition.labels.clone()
}

#[derive(Clone, Copy, Debug)]
struct Link {
    a: usize,
    b: usize,
    common: usize,
    score: f64,
}

/// Candidate merges, strongest first.
fn links(sets: &[NeighborSet], min_common: usize) -> Result<Vec<Link>> {
    let n = sets.len();
    let mut owners: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, set) in sets.iter().enumerate() {
        for (&m, &s) in set.members.iter().zip(&set.scores) {
            if m >= n {
                return Err(Error::IndexOutOfRange { index: m, len: n });
            }
            owners[m].push((i, s));
        }
    }
    let mut acc: HashMap<(usize, usize), (usize, f64)> = HashMap::new();
    for list in &mut owners {
        list.sort_by_key(|&(i, _)| i);
        list.dedup_by_key(|&mut (i, _)| i);
        for (x, &(a, sa)) in list.iter().enumerate() {
            for &(b, sb) in &list[x + 1..] {
                let e = acc.entry((a, b)).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += sa + sb;
            }
        }
    }
    let mut out: Vec<Link> = acc
        .into_iter()
        .filter(|(_, (c, _))| *c >= min_common)
        .map(|((a, b), (common, score))| Link {
            a,
            b,
            common,
            score,
        })
        .collect();
    out.sort_by(|x, y| {
        y.common
            .cmp(&x.common)
            .then(y.score.total_cmp(&x.score))
            .then((x.a, x.b).cmp(&(y.a, y.b)))
    });
    Ok(out)
}

/// Merges samples sharing common neighbors into groups of at most `cap`.
pub fn merge_groups(
    mem: &NeighborMemory,
    cap: usize,
    policy: MergePolicy,
) -> Result<GroupPartition> {
    match policy {
        MergePolicy::TwoEpochVote => merge_sets(&mem.voted(), cap, 1),
        other => merge_sets(mem.sets(), cap, other.min_common()),
    }
}

pub fn merge_sets(sets: &[NeighborSet], cap: usize, min_common: usize) -> Result<GroupPartition> {
    if cap == 0 {
        return Err(Error::Config("group cap must be at least 1".into()));
    }
    let n = sets.len();
    let mut uf = UnionFind::new(n);
    for link in links(sets, min_common)? {
        if uf.find(link.a) == uf.find(link.b) {
            continue;
        }
        if uf.size_of(link.a) + uf.size_of(link.b) <= cap {
            uf.union(link.a, link.b);
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    Ok(GroupPartition::from_labels(&roots, cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(owner: usize, others: &[(usize, f64)]) -> NeighborSet {
        let mut s = NeighborSet::singleton(owner);
        for &(j, p) in others {
            s.members.push(j);
            s.scores.push(p);
        }
        s
    }

    fn memory(sets: Vec<NeighborSet>) -> NeighborMemory {
        NeighborMemory::from_sets(sets).unwrap()
    }

    fn random_memory(rng: &mut ChaCha8Rng, n: usize) -> NeighborMemory {
        let sets = (0..n)
            .map(|i| {
                let extra = rng.random_range(0..3);
                let mut s = NeighborSet::singleton(i);
                for _ in 0..extra {
                    let j = rng.random_range(0..n);
                    if !s.contains(j) {
                        s.members.push(j);
                        s.scores.push(rng.random_range(0.5..1.0));
                    }
                }
                s
            })
            .collect();
        memory(sets)
    }

    /// Components of the graph with an edge iff two sets intersect, by BFS.
    fn bfs_components(sets: &[NeighborSet]) -> Vec<usize> {
        let n = sets.len();
        let share = |a: usize, b: usize| sets[a].members.iter().any(|m| sets[b].contains(*m));
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            comp[s] = next;
            let mut stack = vec![s];
            while let Some(x) = stack.pop() {
                for y in 0..n {
                    if comp[y] == usize::MAX && share(x, y) {
                        comp[y] = next;
                        stack.push(y);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    #[test]
    fn transitive_merge_example() {
        // A=0, B=1, C=2, D=3
        let mem = memory(vec![
            set(0, &[(1, 0.9)]),
            set(1, &[(2, 0.8)]),
            set(2, &[]),
            set(3, &[]),
        ]);
        let p = merge_groups(&mem, 4, MergePolicy::Basic).unwrap();
        assert_eq!(p.groups, vec![vec![0, 1, 2], vec![3]]);
        let labels = assign_labels(&p);
        assert!(labels[0] == labels[1] && labels[1] == labels[2] && labels[3] != labels[0]);
    }

    #[test]
    fn cap_keeps_stronger_link() {
        // Both links share one member; the A-B link has the larger score sum.
        let mem = memory(vec![
            set(0, &[(1, 0.9)]),
            set(1, &[(2, 0.8)]),
            set(2, &[]),
            set(3, &[]),
        ]);
        let p = merge_groups(&mem, 2, MergePolicy::Basic).unwrap();
        assert_eq!(p.groups, vec![vec![0, 1], vec![2], vec![3]]);

        // Enumerate both application orders: each yields exactly one pair.
        for order in [[(0, 1), (1, 2)], [(1, 2), (0, 1)]] {
            let mut uf = UnionFind::new(4);
            for (a, b) in order {
                if uf.size_of(a) + uf.size_of(b) <= 2 {
                    uf.union(a, b);
                }
            }
            let sizes: Vec<usize> = (0..4).map(|i| uf.size_of(i)).collect();
            assert_eq!(sizes.iter().filter(|&&s| s == 2).count(), 2);
        }

        let flipped = memory(vec![
            set(0, &[(1, 0.6)]),
            set(1, &[(2, 0.95)]),
            set(2, &[]),
            set(3, &[]),
        ]);
        let p = merge_groups(&flipped, 2, MergePolicy::Basic).unwrap();
        assert_eq!(p.groups, vec![vec![0], vec![1, 2], vec![3]]);
        assert!(p.max_group_size() <= 2);
    }

    #[test]
    fn min_common_blocks_single_shared_neighbor() {
        let mem = memory(vec![
            set(0, &[(1, 0.9)]),
            set(1, &[(2, 0.8)]),
            set(2, &[]),
            set(3, &[]),
        ]);
        let p = merge_groups(&mem, 4, MergePolicy::MinCommon(2)).unwrap();
        assert_eq!(p.num_groups(), 4);
    }

    #[test]
    fn vote_policy_uses_both_epochs() {
        let mut mem = NeighborMemory::new(3, true);
        mem.record(set(0, &[(1, 0.9)])).unwrap();
        mem.advance_epoch();
        mem.record(set(0, &[(2, 0.9)])).unwrap();
        let p = merge_groups(&mem, 3, MergePolicy::TwoEpochVote).unwrap();
        assert_eq!(p.num_groups(), 3);
        let p = merge_groups(&mem, 3, MergePolicy::Basic).unwrap();
        assert_eq!(p.groups, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn label_examples() {
        let single = GroupPartition::singletons(5);
        assert_eq!(assign_labels(&single), vec![0, 1, 2, 3, 4]);
        let all = GroupPartition::from_labels(&[7, 7, 7], 3);
        assert_eq!(assign_labels(&all), vec![0, 0, 0]);
        let mut buf = Vec::new();
        GroupPartition::from_labels(&[4, 2, 4], 3)
            .write_csv(&mut buf)
            .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sample_id,group_id\n0,0\n1,1\n2,0\n"
        );
    }

    #[test]
    fn uncapped_merge_equals_bfs_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.random_range(1..=64);
            let mem = random_memory(&mut rng, n);
            let p = merge_groups(&mem, n, MergePolicy::Basic).unwrap();
            let want = GroupPartition::from_labels(&bfs_components(mem.sets()), n);
            assert_eq!(p.labels, want.labels);
        }
    }

    #[test]
    fn dbscan_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rows = Vec::new();
        for center in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] {
            for _ in 0..10 {
                rows.push(
                    center
                        .iter()
                        .map(|c| c + rng.random_range(-0.01..0.01))
                        .collect::<Vec<f64>>(),
                );
            }
        }
        let bank = MemoryBank::from_rows(&rows, 0.5).unwrap();
        let r = dbscan(&bank, DbscanParams::new(0.01, 4).unwrap());
        assert_eq!(r.clusters.len(), 2);
        assert_eq!(r.max_cluster_size, 10);
        assert!(r.noise.is_empty());

        let same = MemoryBank::from_rows(&vec![vec![1.0, 1.0]; 7], 0.5).unwrap();
        let r = dbscan(&same, DbscanParams::new(0.01, 4).unwrap());
        assert_eq!(r.clusters, vec![(0..7).collect::<Vec<_>>()]);
        assert_eq!(r.max_cluster_size, 7);

        let spread: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let a = i as f64 * std::f64::consts::PI / 3.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let bank = MemoryBank::from_rows(&spread, 0.5).unwrap();
        let r = dbscan(&bank, DbscanParams::new(0.1, 2).unwrap());
        assert!(r.clusters.is_empty());
        assert_eq!(r.noise.len(), 6);
        assert_eq!(r.max_cluster_size, 6);
    }

    #[test]
    fn eps_percentile_picks_small_distances() {
        let bank =
            MemoryBank::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], 0.5).unwrap();
        // distances: 0, 1, 1
        assert!(eps_from_percentile(&bank, 0.0, 2000) <= 1e-9);
        assert!((eps_from_percentile(&bank, 100.0, 2000) - 1.0).abs() < 1e-12);
        assert!((eps_from_percentile(&bank, 25.0, 2000) - 0.5).abs() < 1e-12);
        assert!(DbscanParams::new(0.0, 4).is_err());
        assert!(DbscanParams::new(0.1, 1).is_err());
    }

    proptest! {
        #[test]
        fn cap_is_respected(seed in 0u64..10_000, cap in 1usize..8, c in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..40);
            let mem = random_memory(&mut rng, n);
            for policy in [MergePolicy::Basic, MergePolicy::MinCommon(c), MergePolicy::TwoEpochVote] {
                let p = merge_groups(&mem, cap, policy).unwrap();
                prop_assert!(p.max_group_size() <= cap);
                prop_assert_eq!(p.groups.iter().map(Vec::len).sum::<usize>(), n);
                prop_assert_eq!(&p, &merge_groups(&mem, cap, policy).unwrap());
            }
        }

        #[test]
        fn stricter_common_count_refines(seed in 0u64..10_000, c in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..40);
            let mem = random_memory(&mut rng, n);
            let coarse = merge_groups(&mem, n, MergePolicy::MinCommon(c)).unwrap();
            let fine = merge_groups(&mem, n, MergePolicy::MinCommon(c + 1)).unwrap();
            for g in &fine.groups {
                prop_assert!(g.iter().all(|&i| coarse.labels[i] == coarse.labels[g[0]]));
            }
        }
    }
}
