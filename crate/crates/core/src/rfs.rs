//! Core random-finite-set types: Gaussian densities, Bernoulli components,
//! tracks, global hypotheses and the clustered PMBM density, together with an
//! exact small-cardinality multi-object density evaluator used as the testing
//! oracle for every approximation in the crate.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::error::PmbmError;

/// Relative tolerance for the covariance symmetry invariant.
pub const SYM_TOL: f64 = 1e-9;

/// Maximum set cardinality accepted by [`evaluate_set_density`].
pub const ORACLE_MAX_CARD: usize = 5;

// ============================================================================
// Gaussian density
// ============================================================================

/// Single-target Gaussian density with mean vector and covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDensity {
    /// Builds a density after checking that the covariance is symmetric
    /// (to within [`SYM_TOL`] relative) and positive definite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, PmbmError> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(PmbmError::DimensionMismatch {
                expected: n,
                got: cov.nrows(),
            });
        }
        let scale = cov.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYM_TOL * scale {
                    return Err(PmbmError::Singular {
                        context: "asymmetric covariance",
                    });
                }
            }
        }
        if cov.clone().cholesky().is_none() {
            return Err(PmbmError::Singular {
                context: "covariance not positive definite",
            });
        }
        Ok(Self { mean, cov })
    }

    /// Builds a density without invariant checks. Callers must have
    /// symmetrised the covariance themselves.
    pub fn new_unchecked(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log of the Gaussian pdf at `x`, via a Cholesky factorisation of the
    /// covariance (no explicit inverse).
    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64, PmbmError> {
        let n = self.dim();
        if x.len() != n {
            return Err(PmbmError::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or(PmbmError::Singular { context: "log_pdf" })?;
        let diff = x - &self.mean;
        let solved = chol.solve(&diff);
        let maha_sq = diff.dot(&solved);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        Ok(-0.5 * (maha_sq + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln()))
    }

    /// Gaussian pdf at `x`.
    pub fn pdf(&self, x: &DVector<f64>) -> Result<f64, PmbmError> {
        Ok(self.log_pdf(x)?.exp())
    }
}

/// Returns `(a + a^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

// ============================================================================
// Bernoulli components and tracks
// ============================================================================

/// Data-association outcome recorded on a single-target hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Association {
    /// Hypothesis was not updated with any measurement at `step`.
    Misdetection,
    /// Hypothesis was updated with the measurement of this index at `step`.
    Measurement(usize),
}

/// Bookkeeping record: which measurement (if any) produced a hypothesis and
/// at which time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssocRecord {
    pub step: usize,
    pub assoc: Association,
}

/// One single-target hypothesis: existence probability plus a state density.
#[derive(Debug, Clone)]
pub struct BernoulliComponent {
    /// Probability of existence, in [0, 1].
    pub r: f64,
    pub density: GaussianDensity,
    pub assoc: AssocRecord,
}

impl BernoulliComponent {
    pub fn new(r: f64, density: GaussianDensity, assoc: AssocRecord) -> Self {
        debug_assert!((0.0..=1.0).contains(&r), "existence out of range: {r}");
        Self { r, density, assoc }
    }
}

/// Stable track identifier; also serves as the auxiliary variable attached to
/// target states. Monotonically increasing, never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrackId(pub u64);

/// A potential target: its identifier and single-target hypothesis list.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: TrackId,
    pub hyps: Vec<BernoulliComponent>,
}

impl Track {
    pub fn new(id: TrackId, hyps: Vec<BernoulliComponent>) -> Self {
        Self { id, hyps }
    }
}

// ============================================================================
// Global hypotheses and clusters
// ============================================================================

/// Weight plus one hypothesis index per track in scope (the whole track set
/// for an unclustered PMBM, a single cluster otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalHypothesis {
    pub weight: f64,
    pub choice: BTreeMap<TrackId, usize>,
}

impl GlobalHypothesis {
    pub fn new(weight: f64, choice: BTreeMap<TrackId, usize>) -> Self {
        Self { weight, choice }
    }

    /// Hypothesis indices ordered by track id, used for deterministic
    /// tie-breaking and duplicate detection.
    pub fn index_tuple(&self) -> Vec<usize> {
        self.choice.values().copied().collect()
    }
}

/// Poisson point process intensity as a weighted Gaussian mixture.
#[derive(Debug, Clone, Default)]
pub struct PoissonIntensity {
    pub components: Vec<(f64, GaussianDensity)>,
}

impl PoissonIntensity {
    pub fn empty() -> Self {
        Self { components: vec![] }
    }

    /// Total intensity mass (the expected number of undetected targets).
    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|(w, _)| w).sum()
    }

    /// Mixture intensity value at `x`.
    pub fn intensity_at(&self, x: &DVector<f64>) -> Result<f64, PmbmError> {
        let mut v = 0.0;
        for (w, d) in &self.components {
            v += w * d.pdf(x)?;
        }
        Ok(v)
    }
}

/// A cluster: member track ids plus the multi-Bernoulli mixture over them.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub members: BTreeSet<TrackId>,
    pub globals: Vec<GlobalHypothesis>,
}

impl Cluster {
    pub fn new(members: BTreeSet<TrackId>, globals: Vec<GlobalHypothesis>) -> Self {
        Self { members, globals }
    }

    /// Singleton cluster holding one track with a single certain hypothesis.
    pub fn singleton(id: TrackId, hyp_index: usize) -> Self {
        let mut choice = BTreeMap::new();
        choice.insert(id, hyp_index);
        Self {
            members: [id].into(),
            globals: vec![GlobalHypothesis::new(1.0, choice)],
        }
    }

    /// Sum of the weights, over the cluster globals, of those selecting
    /// hypothesis `hyp` for track `id`. This is the mixture weight of that
    /// single-target hypothesis within the cluster.
    pub fn mixture_weight(&self, id: TrackId, hyp: usize) -> f64 {
        self.globals
            .iter()
            .filter(|g| g.choice.get(&id) == Some(&hyp))
            .map(|g| g.weight)
            .sum()
    }
}

/// Normalises the global-hypothesis weights of a cluster to sum to one and
/// orders them by descending weight (ties broken by ascending index tuple).
pub fn normalize_globals(cluster: &mut Cluster) -> Result<(), PmbmError> {
    let total: f64 = cluster.globals.iter().map(|g| g.weight).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(PmbmError::DegenerateWeights);
    }
    for g in &mut cluster.globals {
        g.weight /= total;
    }
    sort_globals(&mut cluster.globals);
    Ok(())
}

/// Orders globals by descending weight, ties by ascending index tuple.
pub fn sort_globals(globals: &mut Vec<GlobalHypothesis>) {
    let mut keyed: Vec<(Vec<usize>, GlobalHypothesis)> = globals
        .drain(..)
        .map(|g| (g.index_tuple(), g))
        .collect();
    keyed.sort_by(|a, b| {
        b.1.weight
            .partial_cmp(&a.1.weight)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });
    *globals = keyed.into_iter().map(|(_, g)| g).collect();
}

// ============================================================================
// Clustered PMBM
// ============================================================================

/// PPP intensity plus a partition of the tracks into independent clusters,
/// each carrying its own multi-Bernoulli mixture.
#[derive(Debug, Clone)]
pub struct ClusteredPmbm {
    pub ppp: PoissonIntensity,
    pub tracks: BTreeMap<TrackId, Track>,
    pub clusters: Vec<Cluster>,
    next_id: u64,
}

impl ClusteredPmbm {
    pub fn empty() -> Self {
        Self {
            ppp: PoissonIntensity::empty(),
            tracks: BTreeMap::new(),
            clusters: Vec::new(),
            next_id: 0,
        }
    }

    pub fn with_ppp(ppp: PoissonIntensity) -> Self {
        Self {
            ppp,
            tracks: BTreeMap::new(),
            clusters: Vec::new(),
            next_id: 0,
        }
    }

    /// Allocates a fresh track id. Ids are monotonically increasing and never
    /// reused, so they can serve as auxiliary variables.
    pub fn alloc_track_id(&mut self) -> TrackId {
        let id = TrackId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Empty posterior shell that carries over the id counter, so ids stay
    /// unique across filtering steps.
    pub fn successor_shell(&self) -> Self {
        Self {
            ppp: PoissonIntensity::empty(),
            tracks: BTreeMap::new(),
            clusters: Vec::new(),
            next_id: self.next_id,
        }
    }

    pub fn live_track_ids(&self) -> BTreeSet<TrackId> {
        self.tracks.keys().copied().collect()
    }

    /// Checks the partition invariant: clusters pairwise disjoint and their
    /// union equal to the live track-id set, with per-cluster weights
    /// normalised and all referenced hypotheses present.
    pub fn validate(&self) -> Result<(), PmbmError> {
        let mut seen = BTreeSet::new();
        for cluster in &self.clusters {
            for id in &cluster.members {
                if !seen.insert(*id) {
                    return Err(PmbmError::InvalidPartition(format!(
                        "track {id:?} appears in more than one cluster"
                    )));
                }
                if !self.tracks.contains_key(id) {
                    return Err(PmbmError::InvalidPartition(format!(
                        "cluster references unknown track {id:?}"
                    )));
                }
            }
            let total: f64 = cluster.globals.iter().map(|g| g.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(PmbmError::InvalidPartition(format!(
                    "cluster weights sum to {total}, expected 1"
                )));
            }
            let mut referenced: BTreeMap<TrackId, BTreeSet<usize>> = cluster
                .members
                .iter()
                .map(|id| (*id, BTreeSet::new()))
                .collect();
            for g in &cluster.globals {
                if g.choice.keys().copied().collect::<BTreeSet<_>>() != cluster.members {
                    return Err(PmbmError::InvalidPartition(
                        "global hypothesis scope differs from cluster members".into(),
                    ));
                }
                for (id, hyp) in &g.choice {
                    let track = &self.tracks[id];
                    if *hyp >= track.hyps.len() {
                        return Err(PmbmError::InvalidPartition(format!(
                            "global references missing hypothesis {hyp} of track {id:?}"
                        )));
                    }
                    referenced.get_mut(id).unwrap().insert(*hyp);
                }
            }
            // Dense hypothesis indexing: every hypothesis of a member track
            // is referenced by at least one global.
            for (id, used) in referenced {
                let n = self.tracks[&id].hyps.len();
                if used.len() != n {
                    return Err(PmbmError::InvalidPartition(format!(
                        "track {id:?} keeps {n} hypotheses but only {} are referenced",
                        used.len()
                    )));
                }
            }
        }
        if seen != self.live_track_ids() {
            return Err(PmbmError::InvalidPartition(
                "clusters do not cover the live track set".into(),
            ));
        }
        Ok(())
    }
}

// ============================================================================
// Exact set-density evaluation (oracle)
// ============================================================================

/// Density of a multi-Bernoulli RFS at the element set `elems`, summing over
/// all injective assignments of elements to the given Bernoulli components.
fn multi_bernoulli_density(berns: &[&BernoulliComponent], elems: &[&DVector<f64>]) -> f64 {
    if elems.len() > berns.len() {
        return 0.0;
    }
    fn recurse(berns: &[&BernoulliComponent], elems: &[&DVector<f64>], used: &mut [bool]) -> f64 {
        match elems.split_first() {
            None => berns
                .iter()
                .zip(used.iter())
                .map(|(b, &u)| if u { 1.0 } else { 1.0 - b.r })
                .product(),
            Some((x, rest)) => {
                let mut total = 0.0;
                for i in 0..berns.len() {
                    if used[i] || berns[i].r == 0.0 {
                        continue;
                    }
                    let lik = berns[i].r * berns[i].density.pdf(x).unwrap_or(0.0);
                    if lik == 0.0 {
                        continue;
                    }
                    used[i] = true;
                    total += lik * recurse(berns, rest, used);
                    used[i] = false;
                }
                total
            }
        }
    }
    let mut used = vec![false; berns.len()];
    recurse(berns, elems, &mut used)
}

/// Cluster MBM density at `elems`: mixture over the cluster globals of the
/// multi-Bernoulli densities they select.
fn cluster_density(
    pmbm: &ClusteredPmbm,
    cluster: &Cluster,
    elems: &[&DVector<f64>],
) -> Result<f64, PmbmError> {
    let mut total = 0.0;
    for g in &cluster.globals {
        let berns: Vec<&BernoulliComponent> = g
            .choice
            .iter()
            .map(|(id, hyp)| &pmbm.tracks[id].hyps[*hyp])
            .collect();
        total += g.weight * multi_bernoulli_density(&berns, elems);
    }
    Ok(total)
}

/// Evaluates the unlabeled multi-object density of the clustered PMBM at the
/// state set `set`, by brute-force enumeration over all assignments of set
/// elements to the PPP and to the clusters. Oracle only: `set` is limited to
/// [`ORACLE_MAX_CARD`] elements.
pub fn evaluate_set_density(
    pmbm: &ClusteredPmbm,
    set: &[DVector<f64>],
) -> Result<f64, PmbmError> {
    if set.len() > ORACLE_MAX_CARD {
        return Err(PmbmError::OracleLimit {
            max: ORACLE_MAX_CARD,
            got: set.len(),
        });
    }
    if let Some(first) = set.first() {
        let dim = first.len();
        for x in set {
            if x.len() != dim {
                return Err(PmbmError::DimensionMismatch {
                    expected: dim,
                    got: x.len(),
                });
            }
        }
        for (_, d) in &pmbm.ppp.components {
            if d.dim() != dim {
                return Err(PmbmError::DimensionMismatch {
                    expected: dim,
                    got: d.dim(),
                });
            }
        }
        for t in pmbm.tracks.values() {
            for h in &t.hyps {
                if h.density.dim() != dim {
                    return Err(PmbmError::DimensionMismatch {
                        expected: dim,
                        got: h.density.dim(),
                    });
                }
            }
        }
    }

    let n_dest = pmbm.clusters.len() + 1; // destination 0 = PPP
    let n = set.len();
    let ppp_scale = (-pmbm.ppp.total_weight()).exp();

    let mut total = 0.0;
    let mut dest = vec![0usize; n];
    loop {
        // PPP factor for the elements assigned to destination 0.
        let mut term = ppp_scale;
        for (x, d) in set.iter().zip(&dest) {
            if *d == 0 {
                term *= pmbm.ppp.intensity_at(x)?;
            }
        }
        if term != 0.0 {
            for (c, cluster) in pmbm.clusters.iter().enumerate() {
                let elems: Vec<&DVector<f64>> = set
                    .iter()
                    .zip(&dest)
                    .filter(|(_, d)| **d == c + 1)
                    .map(|(x, _)| x)
                    .collect();
                term *= cluster_density(pmbm, cluster, &elems)?;
                if term == 0.0 {
                    break;
                }
            }
        }
        total += term;

        // Next assignment vector in mixed-radix order.
        let mut i = 0;
        loop {
            if i == n {
                return Ok(total);
            }
            dest[i] += 1;
            if dest[i] < n_dest {
                break;
            }
            dest[i] = 0;
            i += 1;
        }
    }
}
