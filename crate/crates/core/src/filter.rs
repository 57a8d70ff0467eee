//! The clustered PMBM recursion: prediction, per-cluster measurement update
//! with ranked assignments, new-track creation from the PPP, and hypothesis
//! pruning and capping. The standard (unclustered) PMBM filter is the same
//! machinery run with a single all-track cluster and an absolute hypothesis
//! cap.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::murty_kbest;
use crate::clustering::{cluster_measurement_driven, recluster, ClusterPartition, HypothesisCap};
use crate::error::PmbmError;
use crate::gating::{gate, GateInput, GateMap, GatingConfig};
use crate::lingauss::{
    kalman_predict, kalman_update_with, predicted_measurement, MeasurementModel, MotionModel,
    PredictedMeasurement,
};
use crate::reduction::{
    coalesce_globals, collapse_to_pmb, drop_unreferenced_hypotheses, inter_track_swap,
    intra_track_merge_cluster, merge_bernoullis, MergeParams,
};
use crate::rfs::{
    normalize_globals, AssocRecord, Association, BernoulliComponent, Cluster, ClusteredPmbm,
    GaussianDensity, GlobalHypothesis, PoissonIntensity, Track, TrackId,
};

/// Density floor for log-domain weight arithmetic.
const LOG_FLOOR: f64 = 1e-300;

/// Filter variant: keep the full hypothesis mixture or collapse to a single
/// global hypothesis per cluster after every update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    Pmbm,
    Pmb,
}

/// All thresholds and switches of one filter configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterParams {
    /// PPP component prune threshold.
    pub gamma_p: f64,
    /// Bernoulli existence prune threshold.
    pub gamma_b: f64,
    /// Global-hypothesis prune threshold (on normalised weights).
    pub gamma_mbm: f64,
    /// Global-hypothesis cap per cluster.
    pub cap: HypothesisCap,
    pub gating: GatingConfig,
    /// Existence probability above which a Bernoulli is reported.
    pub estimator_threshold: f64,
    /// Measurement-driven clustering when true, one all-track cluster
    /// otherwise.
    pub clustered: bool,
    pub mode: FilterMode,
    /// Intra-track Bernoulli merging after each update.
    pub merge_enabled: bool,
    pub merge_params: MergeParams,
}

impl FilterParams {
    /// Clustered PMBM with the standard thresholds.
    pub fn clustered_pmbm() -> Self {
        Self {
            gamma_p: 1e-5,
            gamma_b: 1e-5,
            gamma_mbm: 1e-4,
            cap: HypothesisCap::PerTrack(20),
            gating: GatingConfig::kdtree(4.5),
            estimator_threshold: 0.4,
            clustered: true,
            mode: FilterMode::Pmbm,
            merge_enabled: false,
            merge_params: MergeParams::default(),
        }
    }

    /// Standard PMBM: one joint data-association problem, absolute cap.
    pub fn standard_pmbm() -> Self {
        Self {
            cap: HypothesisCap::Absolute(200),
            clustered: false,
            ..Self::clustered_pmbm()
        }
    }

    /// Checks the threshold ranges.
    pub fn validate(&self) -> Result<(), PmbmError> {
        for (name, value) in [
            ("gamma_p", self.gamma_p),
            ("gamma_b", self.gamma_b),
            ("gamma_mbm", self.gamma_mbm),
            ("estimator_threshold", self.estimator_threshold),
        ] {
            if !(value > 0.0 && value < 1.0) {
                return Err(PmbmError::InvalidConfig(format!(
                    "{name} must lie in (0, 1), got {value}"
                )));
            }
        }
        if self.gating.gamma <= 0.0 {
            return Err(PmbmError::InvalidConfig(format!(
                "gating gamma must be positive, got {}",
                self.gating.gamma
            )));
        }
        if self.merge_params.gamma_m <= 0.0 || self.merge_params.gamma_s <= 0.0 {
            return Err(PmbmError::InvalidConfig(
                "merge thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-scan bookkeeping emitted by [`step`].
#[derive(Debug, Clone, Default)]
pub struct StepStats {
    pub n_clusters: usize,
    pub mean_tracks_per_cluster: f64,
    /// Global hypotheses generated before pruning, summed over clusters.
    pub n_gh_before: usize,
    /// Global hypotheses surviving after pruning, summed over clusters.
    pub n_gh_after: usize,
}

// ============================================================================
// Prediction
// ============================================================================

/// PMBM prediction: survived PPP components plus the birth intensity, and
/// every Bernoulli propagated with the motion model. Cluster structure and
/// global weights are unchanged.
pub fn predict(
    pmbm: &ClusteredPmbm,
    motion: &MotionModel,
    birth: &PoissonIntensity,
) -> Result<ClusteredPmbm, PmbmError> {
    let mut out = pmbm.clone();
    let mut components = Vec::with_capacity(pmbm.ppp.components.len() + birth.components.len());
    for (w, d) in &pmbm.ppp.components {
        components.push((w * motion.p_s, kalman_predict(d, motion)?));
    }
    components.extend(birth.components.iter().cloned());
    out.ppp = PoissonIntensity { components };

    for track in out.tracks.values_mut() {
        for hyp in &mut track.hyps {
            hyp.r *= motion.p_s;
            hyp.density = kalman_predict(&hyp.density, motion)?;
        }
    }
    Ok(out)
}

/// Removes PPP components below the weight threshold.
pub fn prune_ppp(ppp: &PoissonIntensity, gamma_p: f64) -> PoissonIntensity {
    PoissonIntensity {
        components: ppp
            .components
            .iter()
            .filter(|(w, _)| *w >= gamma_p)
            .cloned()
            .collect(),
    }
}

// ============================================================================
// Cluster update
// ============================================================================

type PredCache = BTreeMap<(TrackId, usize), Option<PredictedMeasurement>>;

struct ClusterUpdateResult {
    cluster: Cluster,
    tracks: BTreeMap<TrackId, Track>,
    n_children_before: usize,
}

/// New-track candidate built from one measurement and the PPP.
struct NewTrackCandidate {
    id: TrackId,
    /// Non-assignment weight e(z) + clutter intensity.
    rho: f64,
    bernoulli: Option<BernoulliComponent>,
}

fn build_new_track_candidate(
    id: TrackId,
    meas_idx: usize,
    z: &DVector<f64>,
    ppp: &PoissonIntensity,
    ppp_pred: &[Option<PredictedMeasurement>],
    model: &MeasurementModel,
    step_idx: usize,
) -> Result<NewTrackCandidate, PmbmError> {
    let mut weights: Vec<f64> = Vec::with_capacity(ppp.components.len());
    let mut posteriors: Vec<GaussianDensity> = Vec::with_capacity(ppp.components.len());
    let mut e = 0.0;
    for ((w, d), pm) in ppp.components.iter().zip(ppp_pred) {
        let Some(pm) = pm else {
            continue;
        };
        let (post, log_lik) = kalman_update_with(d, z, model, pm)?;
        let beta = model.p_d * w * log_lik.exp();
        if beta > 0.0 {
            e += beta;
            weights.push(beta);
            posteriors.push(post);
        }
    }
    let rho = e + model.clutter_intensity();
    let bernoulli = if e > 0.0 && rho > 0.0 {
        let inputs: Vec<(f64, BernoulliComponent)> = weights
            .into_iter()
            .zip(posteriors)
            .map(|(beta, post)| {
                (
                    beta,
                    BernoulliComponent::new(
                        1.0,
                        post,
                        AssocRecord {
                            step: step_idx,
                            assoc: Association::Measurement(meas_idx),
                        },
                    ),
                )
            })
            .collect();
        let refs: Vec<(f64, &BernoulliComponent)> =
            inputs.iter().map(|(w, c)| (*w, c)).collect();
        let (_, matched) = merge_bernoullis(&refs)?;
        Some(BernoulliComponent::new(
            e / rho,
            matched.density,
            AssocRecord {
                step: step_idx,
                assoc: Association::Measurement(meas_idx),
            },
        ))
    } else {
        None
    };
    Ok(NewTrackCandidate { id, rho, bernoulli })
}

#[allow(clippy::too_many_arguments)]
fn update_cluster(
    tracks: &BTreeMap<TrackId, Track>,
    cluster: &Cluster,
    meas_indices: &[usize],
    measurements: &[DVector<f64>],
    pred: &PredCache,
    gates: &GateMap,
    ppp: &PoissonIntensity,
    ppp_pred: &[Option<PredictedMeasurement>],
    model: &MeasurementModel,
    params: &FilterParams,
    new_ids: &BTreeMap<usize, TrackId>,
    step_idx: usize,
) -> Result<ClusterUpdateResult, PmbmError> {
    let members: Vec<TrackId> = cluster.members.iter().copied().collect();
    let cap = params.cap.for_cluster(members.len());
    let m = meas_indices.len();
    // Local position of each gated measurement index.
    let local_of: BTreeMap<usize, usize> = meas_indices
        .iter()
        .enumerate()
        .map(|(l, &j)| (j, l))
        .collect();

    // Children of every prior hypothesis: one misdetection child plus one
    // child per gated measurement.
    struct HypChildren {
        misdet: usize,
        log_misw: f64,
        detections: BTreeMap<usize, (usize, f64)>, // local meas -> (child, log factor)
    }
    let mut new_tracks: BTreeMap<TrackId, Track> = BTreeMap::new();
    let mut children: BTreeMap<(TrackId, usize), HypChildren> = BTreeMap::new();
    for &id in &members {
        let track = &tracks[&id];
        let mut hyps: Vec<BernoulliComponent> = Vec::new();
        for (h, hyp) in track.hyps.iter().enumerate() {
            let misw = 1.0 - hyp.r + hyp.r * (1.0 - model.p_d);
            let misdet_r = if misw > 0.0 {
                hyp.r * (1.0 - model.p_d) / misw
            } else {
                0.0
            };
            let misdet = hyps.len();
            hyps.push(BernoulliComponent::new(
                misdet_r,
                hyp.density.clone(),
                AssocRecord {
                    step: step_idx,
                    assoc: Association::Misdetection,
                },
            ));
            let mut detections = BTreeMap::new();
            if hyp.r > 0.0 {
                if let Some(Some(pm)) = pred.get(&(id, h)) {
                    if let Some(gate) = gates.gates.get(&(id, h)) {
                        for &j in gate {
                            let z = &measurements[j];
                            let (post, log_lik) = kalman_update_with(&hyp.density, z, model, pm)?;
                            let child = hyps.len();
                            hyps.push(BernoulliComponent::new(
                                1.0,
                                post,
                                AssocRecord {
                                    step: step_idx,
                                    assoc: Association::Measurement(j),
                                },
                            ));
                            let log_factor =
                                (hyp.r * model.p_d).max(LOG_FLOOR).ln() + log_lik;
                            detections.insert(local_of[&j], (child, log_factor));
                        }
                    }
                }
            }
            children.insert(
                (id, h),
                HypChildren {
                    misdet,
                    log_misw: misw.max(LOG_FLOOR).ln(),
                    detections,
                },
            );
        }
        new_tracks.insert(id, Track::new(id, hyps));
    }

    // New-track candidates, one per measurement of the cluster.
    let mut candidates: Vec<NewTrackCandidate> = Vec::with_capacity(m);
    for &j in meas_indices {
        candidates.push(build_new_track_candidate(
            new_ids[&j],
            j,
            &measurements[j],
            ppp,
            ppp_pred,
            model,
            step_idx,
        )?);
    }
    let log_rho: Vec<f64> = candidates
        .iter()
        .map(|c| c.rho.max(LOG_FLOOR).ln())
        .collect();
    // A candidate becomes a real track only when its Bernoulli survives the
    // existence threshold.
    let track_born: Vec<bool> = candidates
        .iter()
        .map(|c| c.bernoulli.as_ref().is_some_and(|b| b.r >= params.gamma_b))
        .collect();

    // Ranked assignments per parent global hypothesis.
    let n_slots = members.len();
    let mut raw_children: Vec<(f64, BTreeMap<TrackId, usize>)> = Vec::new();
    for parent in &cluster.globals {
        let budget = ((parent.weight * cap as f64).ceil() as usize).max(1);
        let mut base_logw = parent.weight.max(LOG_FLOOR).ln();
        for &id in &members {
            base_logw += children[&(id, parent.choice[&id])].log_misw;
        }
        base_logw += log_rho.iter().sum::<f64>();

        let mut costs = nalgebra::DMatrix::from_element(m, n_slots + m, f64::INFINITY);
        for (slot, &id) in members.iter().enumerate() {
            let ch = &children[&(id, parent.choice[&id])];
            for (&local, &(_, log_factor)) in &ch.detections {
                costs[(local, slot)] = -(log_factor - ch.log_misw - log_rho[local]);
            }
        }
        for local in 0..m {
            costs[(local, n_slots + local)] = 0.0;
        }

        // Template child: every track misdetected, every born candidate
        // taken as a new target; children overwrite the assigned entries.
        let mut template: BTreeMap<TrackId, usize> = BTreeMap::new();
        for &id in &members {
            template.insert(id, children[&(id, parent.choice[&id])].misdet);
        }
        for (candidate, &born) in candidates.iter().zip(&track_born) {
            if born {
                // Hypothesis 0 of a new track is "does not exist", 1 is the
                // measurement-born Bernoulli.
                template.insert(candidate.id, 1);
            }
        }
        for (assignment, cost) in murty_kbest(&costs, budget) {
            let log_weight = base_logw - cost;
            let mut choice = template.clone();
            for (local, &col) in assignment.iter().enumerate() {
                if col < n_slots {
                    let id = members[col];
                    let ch = &children[&(id, parent.choice[&id])];
                    choice.insert(id, ch.detections[&local].0);
                    if track_born[local] {
                        choice.insert(candidates[local].id, 0);
                    }
                }
            }
            raw_children.push((log_weight, choice));
        }
    }

    // Materialise the born tracks.
    let mut all_members: BTreeSet<TrackId> = members.iter().copied().collect();
    for (candidate, &born) in candidates.iter().zip(&track_born) {
        if !born {
            continue;
        }
        let bern = candidate.bernoulli.clone().expect("born implies bernoulli");
        let ghost = BernoulliComponent::new(
            0.0,
            bern.density.clone(),
            AssocRecord {
                step: step_idx,
                assoc: Association::Misdetection,
            },
        );
        new_tracks.insert(candidate.id, Track::new(candidate.id, vec![ghost, bern]));
        all_members.insert(candidate.id);
    }

    let n_children_before = raw_children.len();
    if raw_children.is_empty() {
        return Err(PmbmError::DegenerateWeights);
    }

    // Log-to-linear normalisation.
    let max_log = raw_children
        .iter()
        .map(|(lw, _)| *lw)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut globals: Vec<GlobalHypothesis> = raw_children
        .into_iter()
        .map(|(lw, choice)| GlobalHypothesis::new((lw - max_log).exp(), choice))
        .collect();
    let total: f64 = globals.iter().map(|g| g.weight).sum();
    for g in &mut globals {
        g.weight /= total;
    }
    crate::rfs::sort_globals(&mut globals);

    // Prune low-weight globals (the best one always survives) and cap.
    let keep: Vec<GlobalHypothesis> = globals
        .iter()
        .enumerate()
        .filter(|(i, g)| *i == 0 || g.weight >= params.gamma_mbm)
        .map(|(_, g)| g.clone())
        .take(cap)
        .collect();
    let mut out_cluster = Cluster::new(all_members, keep);
    normalize_globals(&mut out_cluster)?;

    // Bernoulli pruning: existences below the threshold become certainly
    // empty; tracks with no surviving existence anywhere are removed.
    for (&id, track) in new_tracks.iter_mut() {
        let referenced: BTreeSet<usize> = out_cluster
            .globals
            .iter()
            .map(|g| g.choice[&id])
            .collect();
        for (h, hyp) in track.hyps.iter_mut().enumerate() {
            if referenced.contains(&h) && hyp.r < params.gamma_b {
                hyp.r = 0.0;
            }
        }
    }
    let dead: Vec<TrackId> = out_cluster
        .members
        .iter()
        .copied()
        .filter(|id| {
            out_cluster
                .globals
                .iter()
                .all(|g| new_tracks[id].hyps[g.choice[id]].r == 0.0)
        })
        .collect();
    for id in dead {
        out_cluster.members.remove(&id);
        new_tracks.remove(&id);
        for g in &mut out_cluster.globals {
            g.choice.remove(&id);
        }
    }

    drop_unreferenced_hypotheses(&mut new_tracks, &mut out_cluster);
    coalesce_globals(&mut out_cluster)?;
    new_tracks.retain(|id, _| out_cluster.members.contains(id));

    Ok(ClusterUpdateResult {
        cluster: out_cluster,
        tracks: new_tracks,
        n_children_before,
    })
}

// ============================================================================
// Full step
// ============================================================================

/// One filtering step: predict with the birth model, gate, re-cluster onto
/// the measurement-driven partition (or a single cluster for the standard
/// filter), update every cluster independently, run the enabled reduction
/// passes, and prune the PPP.
pub fn step(
    pmbm: &ClusteredPmbm,
    measurements: &[DVector<f64>],
    motion: &MotionModel,
    model: &MeasurementModel,
    birth: &PoissonIntensity,
    params: &FilterParams,
    step_idx: usize,
) -> Result<(ClusteredPmbm, StepStats), PmbmError> {
    params.validate()?;
    let n_z = model.h.nrows();
    for z in measurements {
        if z.len() != n_z {
            return Err(PmbmError::DimensionMismatch {
                expected: n_z,
                got: z.len(),
            });
        }
    }
    let predicted = predict(pmbm, motion, birth)?;
    let live = predicted.live_track_ids();

    // Predicted measurements for every hypothesis with positive existence.
    let mut pred: PredCache = BTreeMap::new();
    let mut inputs: Vec<GateInput> = Vec::new();
    for (id, track) in &predicted.tracks {
        for (h, hyp) in track.hyps.iter().enumerate() {
            if hyp.r <= 0.0 {
                continue;
            }
            match predicted_measurement(&hyp.density, model) {
                Ok(pm) => {
                    inputs.push(GateInput {
                        track: *id,
                        hyp: h,
                        zhat: pm.zhat.clone(),
                        s: pm.s.clone(),
                    });
                    pred.insert((*id, h), Some(pm));
                }
                Err(_) => {
                    pred.insert((*id, h), None);
                }
            }
        }
    }
    let mut gates = gate(&inputs, measurements, &params.gating);
    for id in &live {
        gates.track_gates.entry(*id).or_default();
    }

    // Partition and re-cluster.
    let prev = ClusterPartition {
        clusters: predicted.clusters.iter().map(|c| c.members.clone()).collect(),
        provenance: predicted
            .clusters
            .iter()
            .enumerate()
            .flat_map(|(c, cl)| cl.members.iter().map(move |id| (*id, c)))
            .collect(),
    };
    let partition = if params.clustered {
        cluster_measurement_driven(&gates, &prev)
    } else {
        ClusterPartition::single(&live)
    };
    let mut current = recluster(&predicted, &partition, params.gamma_mbm, &params.cap)?;
    if !params.clustered && current.clusters.is_empty() && !measurements.is_empty() {
        // Standard filter with no prior tracks: a single empty cluster
        // receives every measurement.
        current
            .clusters
            .push(Cluster::new(BTreeSet::new(), vec![GlobalHypothesis::new(1.0, BTreeMap::new())]));
    }

    // Measurement ownership: gated measurements follow their cluster, the
    // rest spawn singleton clusters (or all go to the single cluster).
    let n_clusters = current.clusters.len();
    let mut cluster_meas: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    let mut orphan: Vec<usize> = Vec::new();
    if params.clustered {
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        for (c, cluster) in current.clusters.iter().enumerate() {
            for id in &cluster.members {
                for &j in &gates.track_gates[id] {
                    owner.insert(j, c);
                }
            }
        }
        for j in 0..measurements.len() {
            match owner.get(&j) {
                Some(&c) => cluster_meas[c].push(j),
                None => orphan.push(j),
            }
        }
    } else {
        for j in 0..measurements.len() {
            cluster_meas[0].push(j);
        }
    }

    // Reserve ids for the would-be new tracks, one per measurement.
    let mut result = current.successor_shell();
    let new_ids: BTreeMap<usize, TrackId> = (0..measurements.len())
        .map(|j| (j, result.alloc_track_id()))
        .collect();

    // PPP predicted measurements, shared across clusters.
    let ppp_pred: Vec<Option<PredictedMeasurement>> = current
        .ppp
        .components
        .iter()
        .map(|(_, d)| predicted_measurement(d, model).ok())
        .collect();

    // Independent cluster updates.
    let updates: Vec<Result<ClusterUpdateResult, PmbmError>> = current
        .clusters
        .par_iter()
        .enumerate()
        .map(|(c, cluster)| {
            update_cluster(
                &current.tracks,
                cluster,
                &cluster_meas[c],
                measurements,
                &pred,
                &gates,
                &current.ppp,
                &ppp_pred,
                model,
                params,
                &new_ids,
                step_idx,
            )
        })
        .collect();

    let mut stats = StepStats::default();
    for update in updates {
        let update = update?;
        stats.n_gh_before += update.n_children_before;
        if update.cluster.members.is_empty() {
            continue;
        }
        stats.n_gh_after += update.cluster.globals.len();
        result.tracks.extend(update.tracks);
        result.clusters.push(update.cluster);
    }

    // Orphan measurements: new single-track clusters when the Bernoulli
    // survives the existence threshold.
    for j in orphan {
        let candidate = build_new_track_candidate(
            new_ids[&j],
            j,
            &measurements[j],
            &current.ppp,
            &ppp_pred,
            model,
            step_idx,
        )?;
        stats.n_gh_before += 1;
        if let Some(bern) = candidate.bernoulli {
            if bern.r >= params.gamma_b {
                let id = candidate.id;
                result.tracks.insert(id, Track::new(id, vec![bern]));
                result.clusters.push(Cluster::singleton(id, 0));
                stats.n_gh_after += 1;
            }
        }
    }

    // Undetected targets stay undetected with probability 1 - p_D.
    let mut ppp = current.ppp.clone();
    for (w, _) in &mut ppp.components {
        *w *= 1.0 - model.p_d;
    }
    result.ppp = prune_ppp(&ppp, params.gamma_p);

    // Reduction passes: merge, then swap, then the PMB collapse mode.
    if params.merge_enabled || params.merge_params.swap_enabled {
        let mut tracks = std::mem::take(&mut result.tracks);
        for cluster in &mut result.clusters {
            if params.merge_enabled {
                intra_track_merge_cluster(
                    &mut tracks,
                    cluster,
                    step_idx,
                    params.merge_params.gamma_m,
                )?;
            }
            if params.merge_params.swap_enabled {
                inter_track_swap(&mut tracks, cluster, params.merge_params.gamma_s)?;
            }
        }
        result.tracks = tracks;
    }
    if params.mode == FilterMode::Pmb {
        result = collapse_to_pmb(&result)?;
    }

    stats.n_clusters = result.clusters.len();
    stats.mean_tracks_per_cluster = if result.clusters.is_empty() {
        0.0
    } else {
        result.tracks.len() as f64 / result.clusters.len() as f64
    };
    Ok((result, stats))
}
