//! Partitioning tracks into independent clusters from the gate graph,
//! re-clustering a previously clustered PMBM onto a new partition, and the
//! K-best selection of merged global hypotheses.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::PmbmError;
use crate::gating::GateMap;
use crate::rfs::{normalize_globals, Cluster, ClusteredPmbm, GlobalHypothesis, TrackId};

/// Cap on the number of global hypotheses kept per cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HypothesisCap {
    /// Fixed cap regardless of cluster size (standard, unclustered filter).
    Absolute(usize),
    /// Cap proportional to the number of tracks in the cluster.
    PerTrack(usize),
}

impl HypothesisCap {
    pub fn for_cluster(&self, n_tracks: usize) -> usize {
        match self {
            HypothesisCap::Absolute(n) => (*n).max(1),
            HypothesisCap::PerTrack(f) => (f * n_tracks.max(1)).max(1),
        }
    }
}

/// A partition of the live track ids, plus each track's previous cluster
/// index (used to attach dummy measurements to misdetected tracks).
#[derive(Debug, Clone)]
pub struct ClusterPartition {
    pub clusters: Vec<BTreeSet<TrackId>>,
    pub provenance: BTreeMap<TrackId, usize>,
}

impl ClusterPartition {
    /// One cluster holding every track (the unclustered filter layout).
    pub fn single(live: &BTreeSet<TrackId>) -> Self {
        let provenance = live.iter().map(|id| (*id, 0)).collect();
        Self {
            clusters: if live.is_empty() {
                vec![]
            } else {
                vec![live.clone()]
            },
            provenance,
        }
    }

    pub fn validate_over(&self, live: &BTreeSet<TrackId>) -> Result<(), PmbmError> {
        let mut seen = BTreeSet::new();
        for cluster in &self.clusters {
            if cluster.is_empty() {
                return Err(PmbmError::InvalidPartition("empty cluster".into()));
            }
            for id in cluster {
                if !seen.insert(*id) {
                    return Err(PmbmError::InvalidPartition(format!(
                        "track {id:?} in two clusters"
                    )));
                }
            }
        }
        if &seen != live {
            return Err(PmbmError::InvalidPartition(
                "partition does not cover the live track set".into(),
            ));
        }
        Ok(())
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Measurement-driven clustering: tracks sharing a gated measurement land in
/// the same cluster; misdetected tracks (empty gate union) are linked through
/// a dummy measurement per previous cluster, so they stay grouped as they
/// were at the last step. Tracks unknown to `prev` are treated as singleton
/// previous clusters.
pub fn cluster_measurement_driven(gates: &GateMap, prev: &ClusterPartition) -> ClusterPartition {
    let live: Vec<TrackId> = gates.track_gates.keys().copied().collect();
    let index: BTreeMap<TrackId, usize> = live
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i))
        .collect();
    let mut uf = UnionFind::new(live.len());

    // Tracks sharing a measurement are joined via the measurement incidences.
    let mut meas_owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (id, gate) in &gates.track_gates {
        let ti = index[id];
        for &j in gate {
            match meas_owner.get(&j) {
                Some(&first) => uf.union(first, ti),
                None => {
                    meas_owner.insert(j, ti);
                }
            }
        }
    }

    // Dummy measurement per previous cluster for the misdetected tracks.
    let mut dummy_owner: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next_fresh = prev.clusters.len();
    for (id, gate) in &gates.track_gates {
        let prev_cluster = match prev.provenance.get(id) {
            Some(&c) => c,
            None => {
                let c = next_fresh;
                next_fresh += 1;
                c
            }
        };
        if gate.is_empty() {
            let ti = index[id];
            match dummy_owner.get(&prev_cluster) {
                Some(&first) => uf.union(first, ti),
                None => {
                    dummy_owner.insert(prev_cluster, ti);
                }
            }
        }
    }

    // Components, ordered by their smallest member id.
    let mut by_root: BTreeMap<usize, BTreeSet<TrackId>> = BTreeMap::new();
    for (i, id) in live.iter().enumerate() {
        let root = uf.find(i);
        by_root.entry(root).or_default().insert(*id);
    }
    let mut clusters: Vec<BTreeSet<TrackId>> = by_root.into_values().collect();
    clusters.sort_by_key(|c| *c.iter().next().unwrap());

    // Re-index provenance onto the new clusters for the next step.
    let out_prov = clusters
        .iter()
        .enumerate()
        .flat_map(|(c, members)| members.iter().map(move |id| (*id, c)))
        .collect();
    ClusterPartition {
        clusters,
        provenance: out_prov,
    }
}

/// One merged global hypothesis: the selected hypothesis index per input list
/// and the product weight.
pub type MergedHypothesis = (Vec<usize>, f64);

#[derive(Debug)]
struct ProductEntry {
    weight: f64,
    tuple: Vec<usize>,
}

impl PartialEq for ProductEntry {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.tuple == other.tuple
    }
}
impl Eq for ProductEntry {}
impl PartialOrd for ProductEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ProductEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap on weight; ties resolved by ascending lexicographic tuple.
        self.weight
            .partial_cmp(&other.weight)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| other.tuple.cmp(&self.tuple))
    }
}

/// Selects the K best products of per-cluster hypothesis weights by
/// best-first search over the index lattice. Each input list must be sorted
/// descending. Emission stops once the next normalised product falls below
/// `gamma_mbm` or `k_max` merged hypotheses have been produced; the best
/// product is always emitted.
pub fn kbest_merged_hypotheses(
    per_cluster_weights: &[Vec<f64>],
    gamma_mbm: f64,
    k_max: usize,
) -> Result<Vec<MergedHypothesis>, PmbmError> {
    for list in per_cluster_weights {
        if list.is_empty() {
            return Err(PmbmError::DegenerateWeights);
        }
        if list.windows(2).any(|w| w[0] < w[1]) {
            return Err(PmbmError::UnsortedWeights);
        }
    }
    if k_max == 0 {
        return Ok(vec![]);
    }

    let total: f64 = per_cluster_weights
        .iter()
        .map(|l| l.iter().sum::<f64>())
        .product();
    let product_of = |tuple: &[usize]| -> f64 {
        tuple
            .iter()
            .zip(per_cluster_weights)
            .fold(1.0, |acc, (&i, list)| acc * list[i])
    };

    let mut out = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let first = vec![0usize; per_cluster_weights.len()];
    heap.push(ProductEntry {
        weight: product_of(&first),
        tuple: first.clone(),
    });
    seen.insert(first);

    while let Some(entry) = heap.pop() {
        if !out.is_empty() && total > 0.0 && entry.weight / total < gamma_mbm {
            break;
        }
        for (d, list) in per_cluster_weights.iter().enumerate() {
            if entry.tuple[d] + 1 < list.len() {
                let mut next = entry.tuple.clone();
                next[d] += 1;
                if seen.insert(next.clone()) {
                    heap.push(ProductEntry {
                        weight: product_of(&next),
                        tuple: next,
                    });
                }
            }
        }
        out.push((entry.tuple, entry.weight));
        if out.len() == k_max {
            break;
        }
    }
    Ok(out)
}

/// Restriction of one cluster's hypothesis table to a subset of its tracks:
/// duplicate restricted index tuples are coalesced by summing weights, and
/// the result is sorted descending (ties by ascending tuple).
fn restricted_table(
    cluster: &Cluster,
    tracks: &[TrackId],
) -> Vec<(Vec<usize>, f64)> {
    let mut table: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for g in &cluster.globals {
        let tuple: Vec<usize> = tracks.iter().map(|id| g.choice[id]).collect();
        *table.entry(tuple).or_insert(0.0) += g.weight;
    }
    let mut out: Vec<(Vec<usize>, f64)> = table.into_iter().collect();
    out.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });
    out
}

/// Re-clusters a clustered PMBM onto a new partition. Tracks that stay
/// together keep their statistical dependencies; hypothesis sets of old
/// clusters merged into one new cluster are combined with the K-best product
/// selection instead of the full cross product. The PPP is unchanged.
pub fn recluster(
    pmbm: &ClusteredPmbm,
    new: &ClusterPartition,
    gamma_mbm: f64,
    cap: &HypothesisCap,
) -> Result<ClusteredPmbm, PmbmError> {
    new.validate_over(&pmbm.live_track_ids())?;

    let mut old_of: BTreeMap<TrackId, usize> = BTreeMap::new();
    for (c, cluster) in pmbm.clusters.iter().enumerate() {
        for id in &cluster.members {
            old_of.insert(*id, c);
        }
    }

    let mut out = pmbm.clone();
    out.clusters = Vec::with_capacity(new.clusters.len());

    for members in &new.clusters {
        // Intersections with the old clusters, in old-cluster order.
        let mut pieces: BTreeMap<usize, Vec<TrackId>> = BTreeMap::new();
        for id in members {
            pieces.entry(old_of[id]).or_default().push(*id);
        }
        let old_indices: Vec<usize> = pieces.keys().copied().collect();
        let tables: Vec<Vec<(Vec<usize>, f64)>> = old_indices
            .iter()
            .map(|&c| restricted_table(&pmbm.clusters[c], &pieces[&c]))
            .collect();

        let weight_lists: Vec<Vec<f64>> = tables
            .iter()
            .map(|t| t.iter().map(|(_, w)| *w).collect())
            .collect();
        let k_max = cap.for_cluster(members.len());
        let selected = kbest_merged_hypotheses(&weight_lists, gamma_mbm, k_max)?;
        if selected.is_empty() {
            return Err(PmbmError::DegenerateWeights);
        }

        let globals: Vec<GlobalHypothesis> = selected
            .into_iter()
            .map(|(tuple, weight)| {
                let mut choice = BTreeMap::new();
                for (slot, &table_idx) in tuple.iter().enumerate() {
                    let old_c = old_indices[slot];
                    let (restricted, _) = &tables[slot][table_idx];
                    for (id, hyp) in pieces[&old_c].iter().zip(restricted) {
                        choice.insert(*id, *hyp);
                    }
                }
                GlobalHypothesis::new(weight, choice)
            })
            .collect();

        let mut cluster = Cluster::new(members.clone(), globals);
        normalize_globals(&mut cluster)?;
        out.clusters.push(cluster);
    }
    Ok(out)
}
