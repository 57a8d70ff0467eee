//! Gating: for every single-target hypothesis, the set of measurements that
//! may update it. Three interchangeable methods are provided: exhaustive
//! ellipsoidal gating, and two tree-accelerated approximations (k-d tree
//! range queries on the measurements, R-tree point queries against the
//! per-hypothesis gate rectangles).
//!
//! The three methods interpret the threshold differently: the ellipsoidal
//! gate takes a squared-Mahalanobis bound, the k-d tree a multiple of the
//! mean innovation standard deviation, and the R-tree a per-axis multiple of
//! the axis standard deviation.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::rfs::TrackId;

/// Gating method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMethod {
    Ellipsoidal,
    KdTree,
    RTree,
}

/// Gating configuration. `gamma` follows the per-method semantics described
/// in the module docs. When `exact_post_gamma` is set, tree gates are
/// filtered down to the exact ellipsoidal gate of that squared-Mahalanobis
/// threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GatingConfig {
    pub method: GateMethod,
    pub gamma: f64,
    #[serde(default)]
    pub exact_post_gamma: Option<f64>,
}

impl GatingConfig {
    pub fn ellipsoidal(gamma: f64) -> Self {
        Self {
            method: GateMethod::Ellipsoidal,
            gamma,
            exact_post_gamma: None,
        }
    }

    pub fn kdtree(gamma: f64) -> Self {
        Self {
            method: GateMethod::KdTree,
            gamma,
            exact_post_gamma: None,
        }
    }

    pub fn rtree(gamma: f64) -> Self {
        Self {
            method: GateMethod::RTree,
            gamma,
            exact_post_gamma: None,
        }
    }
}

/// Predicted-measurement summary of one single-target hypothesis, the input
/// the gating methods operate on.
#[derive(Debug, Clone)]
pub struct GateInput {
    pub track: TrackId,
    pub hyp: usize,
    pub zhat: DVector<f64>,
    pub s: DMatrix<f64>,
}

/// Gate sets per hypothesis and their per-track unions.
#[derive(Debug, Clone, Default)]
pub struct GateMap {
    /// Sorted measurement indices gated by each (track, hypothesis).
    pub gates: BTreeMap<(TrackId, usize), Vec<usize>>,
    /// Union of the hypothesis gates per track.
    pub track_gates: BTreeMap<TrackId, BTreeSet<usize>>,
    /// Hypotheses whose innovation covariance was singular; their gates are
    /// empty.
    pub flagged: BTreeSet<(TrackId, usize)>,
}

impl GateMap {
    fn insert(&mut self, input: &GateInput, mut gate: Vec<usize>) {
        gate.sort_unstable();
        gate.dedup();
        self.track_gates
            .entry(input.track)
            .or_default()
            .extend(gate.iter().copied());
        self.gates.insert((input.track, input.hyp), gate);
    }

    /// Ensures every track in `inputs` has a (possibly empty) union entry.
    fn seed_tracks(&mut self, inputs: &[GateInput]) {
        for input in inputs {
            self.track_gates.entry(input.track).or_default();
        }
    }
}

/// Gates measurements with the configured method.
pub fn gate(inputs: &[GateInput], measurements: &[DVector<f64>], cfg: &GatingConfig) -> GateMap {
    let mut map = match cfg.method {
        GateMethod::Ellipsoidal => gate_ellipsoidal(inputs, measurements, cfg.gamma),
        GateMethod::KdTree => gate_kdtree(inputs, measurements, cfg.gamma),
        GateMethod::RTree => gate_rtree(inputs, measurements, cfg.gamma),
    };
    if let Some(gamma) = cfg.exact_post_gamma {
        apply_ellipsoidal_post_filter(&mut map, inputs, measurements, gamma);
    }
    map
}

/// Exhaustive ellipsoidal gating: measurement `z` is gated by a hypothesis
/// iff its squared Mahalanobis distance to the predicted measurement is at
/// most `gamma`.
pub fn gate_ellipsoidal(
    inputs: &[GateInput],
    measurements: &[DVector<f64>],
    gamma: f64,
) -> GateMap {
    let mut map = GateMap::default();
    map.seed_tracks(inputs);
    for input in inputs {
        let Some(chol) = input.s.clone().cholesky() else {
            map.flagged.insert((input.track, input.hyp));
            map.gates.insert((input.track, input.hyp), vec![]);
            continue;
        };
        let gate: Vec<usize> = measurements
            .iter()
            .enumerate()
            .filter(|(_, z)| {
                let diff = *z - &input.zhat;
                let solved = chol.solve(&diff);
                diff.dot(&solved) <= gamma
            })
            .map(|(j, _)| j)
            .collect();
        map.insert(input, gate);
    }
    map
}

/// k-d-tree gating: one Euclidean range query per hypothesis with radius
/// `gamma * sigma`, where `sigma^2 = tr(S) / n_z` is the mean innovation
/// variance across dimensions.
pub fn gate_kdtree(inputs: &[GateInput], measurements: &[DVector<f64>], gamma: f64) -> GateMap {
    let mut map = GateMap::default();
    map.seed_tracks(inputs);
    let tree = KdTree::build(measurements);
    for input in inputs {
        let n_z = input.zhat.len() as f64;
        let sigma = (input.s.trace() / n_z).sqrt();
        let gate = tree.range_query(&input.zhat, gamma * sigma);
        map.insert(input, gate);
    }
    map
}

/// R-tree gating: the gate of a hypothesis is the axis-aligned rectangle
/// centred at the predicted measurement with half-width `gamma * sqrt(S_dd)`
/// per axis. The rectangles are bulk-loaded into an R-tree and each
/// measurement is resolved with one point query.
pub fn gate_rtree(inputs: &[GateInput], measurements: &[DVector<f64>], gamma: f64) -> GateMap {
    let mut map = GateMap::default();
    map.seed_tracks(inputs);
    let rects: Vec<Rect> = inputs
        .iter()
        .map(|input| {
            let dim = input.zhat.len();
            let mut lo = Vec::with_capacity(dim);
            let mut hi = Vec::with_capacity(dim);
            for d in 0..dim {
                let half = gamma * input.s[(d, d)].max(0.0).sqrt();
                lo.push(input.zhat[d] - half);
                hi.push(input.zhat[d] + half);
            }
            Rect { lo, hi }
        })
        .collect();
    let tree = RTree::bulk_load(&rects);

    let mut gates: Vec<Vec<usize>> = vec![Vec::new(); inputs.len()];
    for (j, z) in measurements.iter().enumerate() {
        for hyp_idx in tree.point_query(z.as_slice()) {
            gates[hyp_idx].push(j);
        }
    }
    for (input, gate) in inputs.iter().zip(gates) {
        map.insert(input, gate);
    }
    map
}

/// Restricts every gate in `map` to the exact ellipsoidal gate with squared
/// Mahalanobis threshold `gamma`. Used to make the tree methods reproduce
/// exhaustive gating when their rectangles/balls enclose the ellipse.
pub fn apply_ellipsoidal_post_filter(
    map: &mut GateMap,
    inputs: &[GateInput],
    measurements: &[DVector<f64>],
    gamma: f64,
) {
    let mut track_gates: BTreeMap<TrackId, BTreeSet<usize>> = BTreeMap::new();
    for input in inputs {
        track_gates.entry(input.track).or_default();
        let key = (input.track, input.hyp);
        let Some(gate) = map.gates.get_mut(&key) else {
            continue;
        };
        match input.s.clone().cholesky() {
            Some(chol) => {
                gate.retain(|&j| {
                    let diff = &measurements[j] - &input.zhat;
                    let solved = chol.solve(&diff);
                    diff.dot(&solved) <= gamma
                });
            }
            None => {
                gate.clear();
                map.flagged.insert(key);
            }
        }
        track_gates
            .entry(input.track)
            .or_default()
            .extend(gate.iter().copied());
    }
    map.track_gates = track_gates;
}

// ============================================================================
// k-d tree
// ============================================================================

/// Static k-d tree over a point set, built once per scan.
pub struct KdTree {
    points: Vec<Vec<f64>>,
    nodes: Vec<KdNode>,
    root: isize,
}

struct KdNode {
    point: usize,
    split: usize,
    left: isize,
    right: isize,
}

impl KdTree {
    pub fn build(points: &[DVector<f64>]) -> Self {
        let dim = points.first().map_or(0, |p| p.len());
        let pts: Vec<Vec<f64>> = points.iter().map(|p| p.as_slice().to_vec()).collect();
        let mut indices: Vec<usize> = (0..pts.len()).collect();
        let mut nodes = Vec::with_capacity(pts.len());
        let root = Self::build_rec(&pts, &mut indices, 0, dim.max(1), &mut nodes);
        Self {
            points: pts,
            nodes,
            root,
        }
    }

    fn build_rec(
        pts: &[Vec<f64>],
        indices: &mut [usize],
        depth: usize,
        dim: usize,
        nodes: &mut Vec<KdNode>,
    ) -> isize {
        if indices.is_empty() {
            return -1;
        }
        let split = depth % dim;
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            pts[a][split].partial_cmp(&pts[b][split]).unwrap()
        });
        let point = indices[mid];
        let slot = nodes.len();
        nodes.push(KdNode {
            point,
            split,
            left: -1,
            right: -1,
        });
        let (lo, rest) = indices.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(pts, lo, depth + 1, dim, nodes);
        let right = Self::build_rec(pts, hi, depth + 1, dim, nodes);
        nodes[slot].left = left;
        nodes[slot].right = right;
        slot as isize
    }

    /// Indices of all points within Euclidean distance `radius` of `centre`.
    pub fn range_query(&self, centre: &DVector<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.root < 0 || radius < 0.0 {
            return out;
        }
        let r_sq = radius * radius;
        let c = centre.as_slice();
        let mut stack = vec![self.root];
        while let Some(slot) = stack.pop() {
            let node = &self.nodes[slot as usize];
            let p = &self.points[node.point];
            let dist_sq: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist_sq <= r_sq {
                out.push(node.point);
            }
            let delta = c[node.split] - p[node.split];
            if delta <= radius && node.left >= 0 {
                stack.push(node.left);
            }
            if -delta <= radius && node.right >= 0 {
                stack.push(node.right);
            }
        }
        out
    }
}

// ============================================================================
// R-tree (STR bulk load)
// ============================================================================

/// Axis-aligned hyper-rectangle.
#[derive(Debug, Clone)]
pub struct Rect {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rect {
    fn contains(&self, p: &[f64]) -> bool {
        self.lo
            .iter()
            .zip(self.hi.iter())
            .zip(p)
            .all(|((lo, hi), x)| *lo <= *x && *x <= *hi)
    }

    fn union(&self, other: &Rect) -> Rect {
        Rect {
            lo: self
                .lo
                .iter()
                .zip(&other.lo)
                .map(|(a, b)| a.min(*b))
                .collect(),
            hi: self
                .hi
                .iter()
                .zip(&other.hi)
                .map(|(a, b)| a.max(*b))
                .collect(),
        }
    }

    fn centre(&self, d: usize) -> f64 {
        0.5 * (self.lo[d] + self.hi[d])
    }
}

const RTREE_NODE_CAPACITY: usize = 8;

enum RNode {
    Leaf(Vec<(Rect, usize)>),
    Inner(Vec<(Rect, usize)>),
}

/// R-tree over hyper-rectangles, packed with the sort-tile-recursive scheme.
pub struct RTree {
    nodes: Vec<RNode>,
    root: Option<usize>,
}

impl RTree {
    pub fn bulk_load(rects: &[Rect]) -> Self {
        let mut tree = Self {
            nodes: Vec::new(),
            root: None,
        };
        if rects.is_empty() {
            return tree;
        }

        // Leaf level: tile by the first axis, then pack runs sorted by the
        // second axis (or first again in 1-D).
        let entries: Vec<(Rect, usize)> =
            rects.iter().cloned().enumerate().map(|(i, r)| (r, i)).collect();
        let mut level: Vec<usize> = tree.pack_level(entries, true);

        while level.len() > 1 {
            let entries: Vec<(Rect, usize)> = level
                .iter()
                .map(|&slot| (tree.node_mbr(slot), slot))
                .collect();
            level = tree.pack_level(entries, false);
        }
        tree.root = Some(level[0]);
        tree
    }

    fn pack_level(&mut self, mut entries: Vec<(Rect, usize)>, leaf: bool) -> Vec<usize> {
        let dim = entries[0].0.lo.len();
        let n = entries.len();
        let n_nodes = n.div_ceil(RTREE_NODE_CAPACITY);
        let n_slabs = (n_nodes as f64).sqrt().ceil() as usize;
        let slab_size = n.div_ceil(n_slabs);

        entries.sort_by(|a, b| a.0.centre(0).partial_cmp(&b.0.centre(0)).unwrap());
        let mut slots = Vec::with_capacity(n_nodes);
        for slab in entries.chunks_mut(slab_size.max(1)) {
            if dim > 1 {
                slab.sort_by(|a, b| a.0.centre(1).partial_cmp(&b.0.centre(1)).unwrap());
            }
            for group in slab.chunks(RTREE_NODE_CAPACITY) {
                let slot = self.nodes.len();
                if leaf {
                    self.nodes.push(RNode::Leaf(group.to_vec()));
                } else {
                    self.nodes.push(RNode::Inner(group.to_vec()));
                }
                slots.push(slot);
            }
        }
        slots
    }

    fn node_mbr(&self, slot: usize) -> Rect {
        let entries = match &self.nodes[slot] {
            RNode::Leaf(e) | RNode::Inner(e) => e,
        };
        let mut mbr = entries[0].0.clone();
        for (r, _) in &entries[1..] {
            mbr = mbr.union(r);
        }
        mbr
    }

    /// Indices of all stored rectangles containing the point.
    pub fn point_query(&self, p: &[f64]) -> Vec<usize> {
        let mut out = Vec::new();
        let Some(root) = self.root else {
            return out;
        };
        let mut stack = vec![root];
        while let Some(slot) = stack.pop() {
            match &self.nodes[slot] {
                RNode::Leaf(entries) => {
                    for (rect, idx) in entries {
                        if rect.contains(p) {
                            out.push(*idx);
                        }
                    }
                }
                RNode::Inner(entries) => {
                    for (mbr, child) in entries {
                        if mbr.contains(p) {
                            stack.push(*child);
                        }
                    }
                }
            }
        }
        out
    }
}
