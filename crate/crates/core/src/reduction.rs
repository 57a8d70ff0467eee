//! Posterior compression: intra-track merging of similar Bernoulli
//! components (moment matching driven by the closed-form Bernoulli KLD),
//! inter-track swapping of Bernoulli components between tracks of a cluster
//! (a density-preserving permutation that improves cluster separability),
//! and the collapse of a PMBM to a single-hypothesis PMB.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::PmbmError;
use crate::rfs::{
    normalize_globals, symmetrize, BernoulliComponent, Cluster, ClusteredPmbm, GaussianDensity,
    GlobalHypothesis, Track, TrackId,
};

/// Thresholds for the reduction passes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MergeParams {
    /// KLD below which two Bernoulli components of a track are merged.
    pub gamma_m: f64,
    /// Gaussian KLD above which a track counts as divergent (swap candidate).
    pub gamma_s: f64,
    pub swap_enabled: bool,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self {
            gamma_m: 0.25,
            gamma_s: 50.0,
            swap_enabled: false,
        }
    }
}

// ============================================================================
// Divergences
// ============================================================================

/// KLD between two Gaussians `D(d1 || d2)`. Returns infinity when `d1` is
/// degenerate; a singular `d2` covariance is an error.
pub fn gaussian_kld(d1: &GaussianDensity, d2: &GaussianDensity) -> Result<f64, PmbmError> {
    let n = d1.dim();
    if d2.dim() != n {
        return Err(PmbmError::DimensionMismatch {
            expected: n,
            got: d2.dim(),
        });
    }
    let chol2 = d2.cov.clone().cholesky().ok_or(PmbmError::Singular {
        context: "gaussian_kld target covariance",
    })?;
    let log_det2: f64 = chol2.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let log_det1 = match d1.cov.clone().cholesky() {
        Some(c) => c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0,
        None => return Ok(f64::INFINITY),
    };
    let trace = chol2.solve(&d1.cov).trace();
    let diff = &d2.mean - &d1.mean;
    let maha = diff.dot(&chol2.solve(&diff));
    Ok(0.5 * (trace - (log_det1 - log_det2) - n as f64 + maha))
}

/// Closed-form KLD between two Bernoulli RFS densities with Gaussian state
/// densities. Finite whenever the target existence probability is interior;
/// on the boundary it is finite only when both existences coincide.
pub fn bernoulli_kld(
    f1: &BernoulliComponent,
    f2: &BernoulliComponent,
) -> Result<f64, PmbmError> {
    let (r1, r2) = (f1.r, f2.r);
    if r2 == 0.0 || r2 == 1.0 {
        if r1 != r2 {
            return Ok(f64::INFINITY);
        }
        if r1 == 0.0 {
            return Ok(0.0);
        }
        return Ok(r1 * gaussian_kld(&f1.density, &f2.density)?);
    }
    let xlogx = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
    Ok(xlogx(1.0 - r1, 1.0 - r2)
        + xlogx(r1, r2)
        + r1 * gaussian_kld(&f1.density, &f2.density)?)
}

/// The greedy merge criterion: the smaller of the two KLD directions, so a
/// single boundary existence probability does not force an infinite
/// distance.
pub fn symmetric_bernoulli_kld(
    f1: &BernoulliComponent,
    f2: &BernoulliComponent,
) -> Result<f64, PmbmError> {
    let d12 = bernoulli_kld(f1, f2)?;
    let d21 = bernoulli_kld(f2, f1)?;
    Ok(d12.min(d21))
}

// ============================================================================
// Moment-matched merging
// ============================================================================

/// Merges weighted Bernoulli components into the single Bernoulli that
/// minimises the KLD from the mixture: the merged weight is the weight sum,
/// the existence the weight-mean of the existences, and the state density the
/// existence-weighted moment match. Returns `(merged_weight, component)`.
pub fn merge_bernoullis(
    components: &[(f64, &BernoulliComponent)],
) -> Result<(f64, BernoulliComponent), PmbmError> {
    if components.is_empty() {
        return Err(PmbmError::DegenerateWeights);
    }
    let w_sum: f64 = components.iter().map(|(w, _)| w).sum();
    if w_sum.is_nan() || w_sum <= 0.0 {
        return Err(PmbmError::DegenerateWeights);
    }
    let wr_sum: f64 = components.iter().map(|(w, c)| w * c.r).sum();
    let r_hat = wr_sum / w_sum;

    // The representative bookkeeping record comes from the heaviest input.
    let lead = components
        .iter()
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .unwrap()
        .1;

    if wr_sum <= 0.0 {
        // Every input is certainly empty; the state density is irrelevant.
        return Ok((
            w_sum,
            BernoulliComponent::new(0.0, lead.density.clone(), lead.assoc),
        ));
    }

    let n = components[0].1.density.dim();
    let mut mean = DVector::zeros(n);
    for (w, c) in components {
        mean += &c.density.mean * (w * c.r / wr_sum);
    }
    let mut cov = DMatrix::zeros(n, n);
    for (w, c) in components {
        let scale = w * c.r / wr_sum;
        cov += (&c.density.cov + &c.density.mean * c.density.mean.transpose()) * scale;
    }
    cov -= &mean * mean.transpose();
    let cov = symmetrize(&cov);
    Ok((
        w_sum,
        BernoulliComponent::new(
            r_hat.clamp(0.0, 1.0),
            GaussianDensity::new_unchecked(mean, cov),
            lead.assoc,
        ),
    ))
}

// ============================================================================
// Intra-track merging
// ============================================================================

/// Merges similar hypotheses of one track given their mixture weights
/// (`weights[h]` is the summed weight of the globals selecting hypothesis
/// `h`). Two passes: hypotheses updated with the same measurement at
/// `current_step` merge unconditionally, then a greedy loop merges the
/// minimum-distance pair while it stays below `gamma_m`. Returns the map
/// from old to new hypothesis indices.
pub fn intra_track_merge(
    track: &mut Track,
    weights: &[f64],
    current_step: usize,
    gamma_m: f64,
) -> Result<Vec<usize>, PmbmError> {
    debug_assert_eq!(weights.len(), track.hyps.len());

    // Working set: (component, mixture weight, source hypothesis indices).
    let mut items: Vec<(BernoulliComponent, f64, Vec<usize>)> = track
        .hyps
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(h, (c, &w))| (c.clone(), w, vec![h]))
        .collect();

    // Pass 1: group by current-scan measurement association.
    let mut by_meas: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, (c, _, _)) in items.iter().enumerate() {
        if c.assoc.step == current_step {
            if let crate::rfs::Association::Measurement(j) = c.assoc.assoc {
                by_meas.entry(j).or_default().push(idx);
            }
        }
    }
    let mut removed = vec![false; items.len()];
    for group in by_meas.values() {
        if group.len() < 2 {
            continue;
        }
        let inputs: Vec<(f64, &BernoulliComponent)> =
            group.iter().map(|&i| (items[i].1, &items[i].0)).collect();
        if inputs.iter().map(|(w, _)| w).sum::<f64>() <= 0.0 {
            continue;
        }
        let (w_merged, merged) = merge_bernoullis(&inputs)?;
        let sources: Vec<usize> = group
            .iter()
            .flat_map(|&i| items[i].2.clone())
            .collect();
        let target = group[0];
        items[target] = (merged, w_merged, sources);
        for &i in &group[1..] {
            removed[i] = true;
        }
    }
    let mut items: Vec<_> = items
        .into_iter()
        .zip(removed)
        .filter(|(_, r)| !r)
        .map(|(it, _)| it)
        .collect();

    // Pass 2: greedy KLD merging.
    loop {
        if items.len() < 2 {
            break;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..items.len() {
            for j in (i + 1)..items.len() {
                let d = symmetric_bernoulli_kld(&items[i].0, &items[j].0)?;
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        let Some((i, j, d)) = best else { break };
        if d >= gamma_m {
            break;
        }
        let inputs = [(items[i].1, &items[i].0), (items[j].1, &items[j].0)];
        if inputs.iter().map(|(w, _)| w).sum::<f64>() <= 0.0 {
            break;
        }
        let (w_merged, merged) = merge_bernoullis(&inputs)?;
        let mut sources = items[i].2.clone();
        sources.extend(items[j].2.iter().copied());
        items[j] = (merged, w_merged, sources);
        items.swap(i, j);
        items.remove(j);
    }

    // Rebuild the hypothesis list and the old-to-new index map.
    let mut remap = vec![usize::MAX; track.hyps.len()];
    let mut hyps = Vec::with_capacity(items.len());
    for (new_idx, (component, _, sources)) in items.into_iter().enumerate() {
        for src in sources {
            remap[src] = new_idx;
        }
        hyps.push(component);
    }
    track.hyps = hyps;
    Ok(remap)
}

/// Coalesces duplicate globals (identical choice maps) by summing weights,
/// then re-sorts and normalises.
pub fn coalesce_globals(cluster: &mut Cluster) -> Result<(), PmbmError> {
    let mut table: BTreeMap<Vec<usize>, GlobalHypothesis> = BTreeMap::new();
    for g in cluster.globals.drain(..) {
        let key = g.index_tuple();
        match table.get_mut(&key) {
            Some(existing) => existing.weight += g.weight,
            None => {
                table.insert(key, g);
            }
        }
    }
    cluster.globals = table.into_values().collect();
    normalize_globals(cluster)
}

/// Runs intra-track merging on every track of a cluster and rewrites the
/// cluster globals to the surviving hypothesis indices.
pub fn intra_track_merge_cluster(
    tracks: &mut BTreeMap<TrackId, Track>,
    cluster: &mut Cluster,
    current_step: usize,
    gamma_m: f64,
) -> Result<(), PmbmError> {
    let members: Vec<TrackId> = cluster.members.iter().copied().collect();
    for id in members {
        let track = tracks.get_mut(&id).expect("cluster member exists");
        let weights: Vec<f64> = (0..track.hyps.len())
            .map(|h| cluster.mixture_weight(id, h))
            .collect();
        let remap = intra_track_merge(track, &weights, current_step, gamma_m)?;
        for g in &mut cluster.globals {
            let old = g.choice[&id];
            g.choice.insert(id, remap[old]);
        }
    }
    coalesce_globals(cluster)
}

// ============================================================================
// Inter-track swapping
// ============================================================================

/// Clustering point for a hypothesis: planar position for the
/// constant-velocity state layout, the full mean otherwise.
fn swap_point(mean: &DVector<f64>) -> Vec<f64> {
    if mean.len() >= 4 {
        vec![mean[0], mean[2]]
    } else {
        mean.as_slice().to_vec()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations with farthest-point seeding. Returns per-point labels,
/// or None when the iteration cap is hit before the assignment stabilises.
fn kmeans(points: &[Vec<f64>], k: usize, max_iter: usize) -> Option<Vec<usize>> {
    if points.len() < k || k == 0 {
        return None;
    }
    // Farthest-point seeding: start from the pair with the largest
    // separation, then extend by max-min distance. Ties go to lower indices.
    let mut seeds: Vec<usize> = Vec::with_capacity(k);
    if k == 1 {
        seeds.push(0);
    } else {
        let mut best = (0usize, 1usize, -1.0f64);
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let d = sq_dist(&points[i], &points[j]);
                if d > best.2 {
                    best = (i, j, d);
                }
            }
        }
        seeds.push(best.0);
        seeds.push(best.1);
        while seeds.len() < k {
            let mut far = (0usize, -1.0f64);
            for (i, p) in points.iter().enumerate() {
                if seeds.contains(&i) {
                    continue;
                }
                let d = seeds
                    .iter()
                    .map(|&s| sq_dist(p, &points[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > far.1 {
                    far = (i, d);
                }
            }
            seeds.push(far.0);
        }
    }
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&s| points[s].clone()).collect();
    let mut labels = vec![0usize; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if labels[i] != best.0 {
                labels[i] = best.0;
                changed = true;
            }
        }
        if !changed {
            return Some(labels);
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            if counts[c] > 0 {
                for (dst, s) in centroid.iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    None
}

const KMEANS_MAX_ITER: usize = 50;

/// Inter-track Bernoulli swapping for one cluster. Tracks whose hypothesis
/// densities have diverged past `gamma_s` are re-grouped with K-means on the
/// hypothesis positions; each local group is assigned a reference track and
/// every global hypothesis whose induced relabelling is a permutation has its
/// Bernoulli components reassigned accordingly. The unlabeled cluster density
/// is unchanged; a failed K-means leaves the cluster untouched.
pub fn inter_track_swap(
    tracks: &mut BTreeMap<TrackId, Track>,
    cluster: &mut Cluster,
    gamma_s: f64,
) -> Result<(), PmbmError> {
    if cluster.members.len() < 2 {
        return Ok(());
    }

    // Candidate tracks: any ordered hypothesis pair with Gaussian KLD
    // above the threshold.
    let mut candidates: Vec<TrackId> = Vec::new();
    for &id in &cluster.members {
        let track = &tracks[&id];
        let mut divergent = false;
        'outer: for a in 0..track.hyps.len() {
            for b in 0..track.hyps.len() {
                if a == b {
                    continue;
                }
                let d = gaussian_kld(&track.hyps[a].density, &track.hyps[b].density)
                    .unwrap_or(f64::INFINITY);
                if d > gamma_s {
                    divergent = true;
                    break 'outer;
                }
            }
        }
        if divergent {
            candidates.push(id);
        }
    }
    if candidates.len() < 2 {
        return Ok(());
    }

    // Local clustering of every candidate-track hypothesis.
    let mut owners: Vec<(TrackId, usize)> = Vec::new();
    let mut points: Vec<Vec<f64>> = Vec::new();
    for &id in &candidates {
        for (h, hyp) in tracks[&id].hyps.iter().enumerate() {
            owners.push((id, h));
            points.push(swap_point(&hyp.density.mean));
        }
    }
    let Some(labels) = kmeans(&points, candidates.len(), KMEANS_MAX_ITER) else {
        return Ok(());
    };
    let label_of: BTreeMap<(TrackId, usize), usize> = owners
        .iter()
        .copied()
        .zip(labels.iter().copied())
        .collect();

    // Reference track per local cluster: greedily hand each local cluster
    // the candidate track holding the most mixture weight inside it.
    let k = candidates.len();
    let mut mass: BTreeMap<(TrackId, usize), f64> = BTreeMap::new();
    for (&(id, h), &l) in &label_of {
        *mass.entry((id, l)).or_insert(0.0) += cluster.mixture_weight(id, h);
    }
    let mut reference = vec![None::<TrackId>; k];
    let mut track_done: BTreeMap<TrackId, bool> =
        candidates.iter().map(|id| (*id, false)).collect();
    for _ in 0..k {
        let mut best: Option<(f64, TrackId, usize)> = None;
        for (&(id, l), &m) in &mass {
            if track_done[&id] || reference[l].is_some() {
                continue;
            }
            let better = match best {
                None => true,
                Some((bm, bid, bl)) => {
                    m > bm || (m == bm && (id, l) < (bid, bl))
                }
            };
            if better {
                best = Some((m, id, l));
            }
        }
        match best {
            Some((_, id, l)) => {
                reference[l] = Some(id);
                track_done.insert(id, true);
            }
            None => break,
        }
    }
    // Any cluster left without mass: hand out the remaining tracks by order.
    let mut leftovers: Vec<TrackId> = candidates
        .iter()
        .copied()
        .filter(|id| !track_done[id])
        .collect();
    for slot in reference.iter_mut() {
        if slot.is_none() {
            match leftovers.first() {
                Some(&id) => {
                    *slot = Some(id);
                    leftovers.remove(0);
                }
                None => return Ok(()),
            }
        }
    }
    let reference: Vec<TrackId> = reference.into_iter().map(|r| r.unwrap()).collect();

    // Destination track of each candidate hypothesis.
    let dest_of: BTreeMap<(TrackId, usize), TrackId> = label_of
        .iter()
        .map(|(&key, &l)| (key, reference[l]))
        .collect();

    // Rewrite globals whose induced relabelling is a bijection.
    let candidate_set: std::collections::BTreeSet<TrackId> =
        candidates.iter().copied().collect();
    let mut moved: BTreeMap<(TrackId, usize), usize> = BTreeMap::new();
    let mut new_globals = cluster.globals.clone();
    for g in new_globals.iter_mut() {
        let mut sigma: BTreeMap<TrackId, TrackId> = BTreeMap::new();
        for &id in &candidates {
            sigma.insert(id, dest_of[&(id, g.choice[&id])]);
        }
        let image: std::collections::BTreeSet<TrackId> = sigma.values().copied().collect();
        if image != candidate_set {
            continue; // not a permutation for this global
        }
        let mut new_choice = g.choice.clone();
        for &id in &candidates {
            let h = g.choice[&id];
            let dst = sigma[&id];
            if dst == id {
                new_choice.insert(id, h);
                continue;
            }
            let slot = *moved.entry((id, h)).or_insert_with(|| {
                let component = tracks[&id].hyps[h].clone();
                let dst_track = tracks.get_mut(&dst).expect("cluster member");
                dst_track.hyps.push(component);
                dst_track.hyps.len() - 1
            });
            new_choice.insert(dst, slot);
        }
        g.choice = new_choice;
    }
    cluster.globals = new_globals;

    drop_unreferenced_hypotheses(tracks, cluster);
    coalesce_globals(cluster)
}

/// Removes track hypotheses not referenced by any global of the cluster and
/// compacts the indices densely, rewriting the globals accordingly.
pub fn drop_unreferenced_hypotheses(tracks: &mut BTreeMap<TrackId, Track>, cluster: &mut Cluster) {
    for &id in &cluster.members.clone() {
        let track = tracks.get_mut(&id).expect("cluster member exists");
        let mut referenced = vec![false; track.hyps.len()];
        for g in &cluster.globals {
            referenced[g.choice[&id]] = true;
        }
        if referenced.iter().all(|&r| r) {
            continue;
        }
        let mut remap = vec![usize::MAX; track.hyps.len()];
        let mut next = 0;
        for (h, &keep) in referenced.iter().enumerate() {
            if keep {
                remap[h] = next;
                next += 1;
            }
        }
        track.hyps = track
            .hyps
            .drain(..)
            .zip(referenced.iter())
            .filter(|(_, &keep)| keep)
            .map(|(h, _)| h)
            .collect();
        for g in &mut cluster.globals {
            let old = g.choice[&id];
            g.choice.insert(id, remap[old]);
        }
    }
}

// ============================================================================
// PMB collapse
// ============================================================================

/// Collapses every cluster to a single global hypothesis by moment-matching
/// each track's hypothesis mixture into one Bernoulli.
pub fn collapse_to_pmb(pmbm: &ClusteredPmbm) -> Result<ClusteredPmbm, PmbmError> {
    let mut out = pmbm.clone();
    for cluster in &mut out.clusters {
        let mut choice = BTreeMap::new();
        for &id in &cluster.members {
            let track = out.tracks.get_mut(&id).expect("cluster member exists");
            if track.hyps.len() > 1 {
                let inputs: Vec<(f64, &BernoulliComponent)> = track
                    .hyps
                    .iter()
                    .enumerate()
                    .map(|(h, c)| (cluster.mixture_weight(id, h), c))
                    .collect();
                let (_, merged) = merge_bernoullis(&inputs)?;
                track.hyps = vec![merged];
            }
            choice.insert(id, 0usize);
        }
        cluster.globals = vec![GlobalHypothesis::new(1.0, choice)];
    }
    Ok(out)
}
