//! Exhaustive reference implementation of one PMBM filtering step over a
//! flat (single-association-problem) representation. Kept independent of the
//! library's update path: plain-form Kalman algebra with explicit inverses,
//! linear-domain weight products, and full enumeration of the
//! measurement-to-track associations instead of ranked assignments.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use pmbm_core::filter::FilterParams;
use pmbm_core::lingauss::{MeasurementModel, MotionModel};
use pmbm_core::rfs::{ClusteredPmbm, TrackId};

#[derive(Debug, Clone)]
pub struct FlatHyp {
    pub r: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FlatPosterior {
    pub ppp: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
    /// Hypothesis pool per surviving track.
    pub tracks: BTreeMap<TrackId, Vec<FlatHyp>>,
    /// Globals sorted by descending weight; choices index into `tracks`.
    pub globals: Vec<(f64, BTreeMap<TrackId, usize>)>,
}

fn gaussian_pdf(z: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let inv = cov.clone().try_inverse().expect("invertible");
    let det = cov.determinant();
    let d = z - mean;
    let maha = (d.transpose() * &inv * &d)[(0, 0)];
    (-0.5 * maha).exp() / ((2.0 * std::f64::consts::PI).powi(z.len() as i32) * det).sqrt()
}

struct Predicted {
    r: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// One full PMBM step by exhaustive enumeration. Assumes every measurement is
/// inside every gate (the caller configures the library with a huge gate) and
/// an empty birth intensity.
pub fn flat_step(
    prior: &ClusteredPmbm,
    measurements: &[DVector<f64>],
    motion: &MotionModel,
    model: &MeasurementModel,
    params: &FilterParams,
) -> FlatPosterior {
    // ------------------------------------------------------------------
    // Flatten the clustered prior into joint globals, replicating the
    // re-clustering truncation onto one all-track cluster.
    // ------------------------------------------------------------------
    let track_ids: Vec<TrackId> = prior.tracks.keys().copied().collect();
    let mut joint: Vec<(f64, BTreeMap<TrackId, usize>)> = vec![(1.0, BTreeMap::new())];
    for cluster in &prior.clusters {
        let mut next = Vec::new();
        for (w, choice) in &joint {
            for g in &cluster.globals {
                let mut merged = choice.clone();
                for (id, h) in &g.choice {
                    merged.insert(*id, *h);
                }
                next.push((w * g.weight, merged));
            }
        }
        joint = next;
    }
    joint.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| a.1.values().cmp(b.1.values()))
    });
    let cap = params.cap.for_cluster(track_ids.len());
    let mut flattened = Vec::new();
    for (i, (w, choice)) in joint.into_iter().enumerate() {
        if i > 0 && w < params.gamma_mbm {
            break;
        }
        flattened.push((w, choice));
        if flattened.len() == cap {
            break;
        }
    }
    let total: f64 = flattened.iter().map(|(w, _)| w).sum();
    for (w, _) in &mut flattened {
        *w /= total;
    }

    // ------------------------------------------------------------------
    // Prediction with plain formulas.
    // ------------------------------------------------------------------
    let mut ppp: Vec<(f64, DVector<f64>, DMatrix<f64>)> = prior
        .ppp
        .components
        .iter()
        .map(|(w, d)| {
            (
                w * motion.p_s,
                &motion.f * &d.mean,
                &motion.f * &d.cov * motion.f.transpose() + &motion.q,
            )
        })
        .collect();

    let mut predicted: BTreeMap<TrackId, Vec<Predicted>> = BTreeMap::new();
    for (id, track) in &prior.tracks {
        let hyps = track
            .hyps
            .iter()
            .map(|h| Predicted {
                r: h.r * motion.p_s,
                mean: &motion.f * &h.density.mean,
                cov: &motion.f * &h.density.cov * motion.f.transpose() + &motion.q,
            })
            .collect();
        predicted.insert(*id, hyps);
    }

    // ------------------------------------------------------------------
    // Children of every prior hypothesis: a misdetection child and one child
    // per measurement.
    // ------------------------------------------------------------------
    #[derive(Clone)]
    struct Child {
        hyp: FlatHyp,
        /// Multiplicative weight factor relative to the parent hypothesis.
        factor: f64,
    }
    // children[id][h] = (misdetection child, per-measurement children)
    let mut children: BTreeMap<TrackId, Vec<(Child, Vec<Child>)>> = BTreeMap::new();
    for (id, hyps) in &predicted {
        let mut per_hyp = Vec::new();
        for h in hyps {
            let misw = 1.0 - h.r + h.r * (1.0 - model.p_d);
            let mis = Child {
                hyp: FlatHyp {
                    r: if misw > 0.0 {
                        h.r * (1.0 - model.p_d) / misw
                    } else {
                        0.0
                    },
                    mean: h.mean.clone(),
                    cov: h.cov.clone(),
                },
                factor: misw,
            };
            let zhat = &model.h * &h.mean;
            let s = &model.h * &h.cov * model.h.transpose() + &model.r;
            let s_inv = s.clone().try_inverse().expect("invertible S");
            let gain = &h.cov * model.h.transpose() * &s_inv;
            let dets: Vec<Child> = measurements
                .iter()
                .map(|z| {
                    let lik = gaussian_pdf(z, &zhat, &s);
                    let mean = &h.mean + &gain * (z - &zhat);
                    let cov = (DMatrix::identity(4, 4) - &gain * &model.h) * &h.cov;
                    Child {
                        hyp: FlatHyp { r: 1.0, mean, cov },
                        factor: h.r * model.p_d * lik,
                    }
                })
                .collect();
            per_hyp.push((mis, dets));
        }
        children.insert(*id, per_hyp);
    }

    // ------------------------------------------------------------------
    // New-track candidates, one per measurement, from the PPP.
    // ------------------------------------------------------------------
    struct Candidate {
        rho: f64,
        born: bool,
        bern: Option<FlatHyp>,
    }
    let candidates: Vec<Candidate> = measurements
        .iter()
        .map(|z| {
            let mut e = 0.0;
            let mut parts: Vec<(f64, DVector<f64>, DMatrix<f64>)> = Vec::new();
            for (w, mean, cov) in &ppp {
                let zhat = &model.h * mean;
                let s = &model.h * cov * model.h.transpose() + &model.r;
                let lik = gaussian_pdf(z, &zhat, &s);
                let beta = model.p_d * w * lik;
                if beta > 0.0 {
                    let gain = cov * model.h.transpose() * s.try_inverse().expect("invertible");
                    let pm = mean + &gain * (z - &zhat);
                    let pc = (DMatrix::identity(4, 4) - &gain * &model.h) * cov;
                    e += beta;
                    parts.push((beta, pm, pc));
                }
            }
            let rho = e + model.clutter_intensity();
            if e > 0.0 {
                let mut mean = DVector::zeros(4);
                for (b, m, _) in &parts {
                    mean += m * (*b / e);
                }
                let mut cov = DMatrix::zeros(4, 4);
                for (b, m, c) in &parts {
                    cov += (c + m * m.transpose()) * (*b / e);
                }
                cov -= &mean * mean.transpose();
                let r = e / rho;
                Candidate {
                    rho,
                    born: r >= params.gamma_b,
                    bern: Some(FlatHyp { r, mean, cov }),
                }
            } else {
                Candidate {
                    rho,
                    born: false,
                    bern: None,
                }
            }
        })
        .collect();

    // ------------------------------------------------------------------
    // Child globals by exhaustive association enumeration per parent.
    // ------------------------------------------------------------------
    /// Selection of one child per track: Miss(h) | Det(h, j) for priors,
    /// and for new tracks NewGhost | NewBorn.
    #[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
    enum Sel {
        Miss(usize),
        Det(usize, usize),
        NewGhost,
        NewBorn,
    }
    type ChoiceMap = BTreeMap<TrackId, Sel>;

    let new_id_of = |j: usize| TrackId(track_ids.len() as u64 + j as u64);

    let mut pooled: Vec<(f64, ChoiceMap)> = Vec::new();
    for (w_parent, parent_choice) in &flattened {
        // Enumerate all injective assignments of measurements to prior
        // tracks or their own new-track column.
        let mut all: Vec<(f64, ChoiceMap)> = Vec::new();
        fn recurse(
            j: usize,
            measurements: usize,
            track_ids: &[TrackId],
            used: &mut BTreeMap<TrackId, Option<usize>>,
            acc: f64,
            children: &BTreeMap<TrackId, Vec<(Child, Vec<Child>)>>,
            parent_choice: &BTreeMap<TrackId, usize>,
            rho: &dyn Fn(usize) -> f64,
            all: &mut Vec<(f64, BTreeMap<TrackId, Sel>)>,
        ) {
            if j == measurements {
                let mut choice: BTreeMap<TrackId, Sel> = BTreeMap::new();
                let mut weight = acc;
                for id in track_ids {
                    let h = parent_choice[id];
                    match used[id] {
                        Some(meas) => {
                            choice.insert(*id, Sel::Det(h, meas));
                            weight *= children[id].get(h).unwrap().1[meas].factor;
                        }
                        None => {
                            choice.insert(*id, Sel::Miss(h));
                            weight *= children[id].get(h).unwrap().0.factor;
                        }
                    }
                }
                all.push((weight, choice));
                return;
            }
            // Measurement j stays with its own new track (target or clutter).
            recurse(
                j + 1,
                measurements,
                track_ids,
                used,
                acc * rho(j),
                children,
                parent_choice,
                rho,
                all,
            );
            // Or goes to one of the unused prior tracks.
            for id in track_ids {
                if used[id].is_none() {
                    used.insert(*id, Some(j));
                    recurse(
                        j + 1,
                        measurements,
                        track_ids,
                        used,
                        acc,
                        children,
                        parent_choice,
                        rho,
                        all,
                    );
                    used.insert(*id, None);
                }
            }
        }
        let mut used: BTreeMap<TrackId, Option<usize>> =
            track_ids.iter().map(|id| (*id, None)).collect();
        recurse(
            0,
            measurements.len(),
            &track_ids,
            &mut used,
            *w_parent,
            &children,
            parent_choice,
            &|j| candidates[j].rho,
            &mut all,
        );

        // Tag the new-track selections.
        for (_, choice) in &mut all {
            let assigned: Vec<bool> = (0..measurements.len())
                .map(|j| {
                    choice
                        .values()
                        .any(|s| matches!(s, Sel::Det(_, m) if *m == j))
                })
                .collect();
            for (j, candidate) in candidates.iter().enumerate() {
                if candidate.born {
                    choice.insert(
                        new_id_of(j),
                        if assigned[j] { Sel::NewGhost } else { Sel::NewBorn },
                    );
                }
            }
        }

        // Per-parent budget: keep the highest-weight children only.
        let budget = ((w_parent * cap as f64).ceil() as usize).max(1);
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        all.truncate(budget);
        pooled.extend(all);
    }

    // ------------------------------------------------------------------
    // Normalise, prune, cap; then existence pruning, duplicate coalescing.
    // ------------------------------------------------------------------
    let total: f64 = pooled.iter().map(|(w, _)| w).sum();
    for (w, _) in &mut pooled {
        *w /= total;
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut kept: Vec<(f64, ChoiceMap)> = Vec::new();
    for (i, (w, c)) in pooled.into_iter().enumerate() {
        if i > 0 && w < params.gamma_mbm {
            continue;
        }
        kept.push((w, c));
        if kept.len() == cap {
            break;
        }
    }
    let total: f64 = kept.iter().map(|(w, _)| w).sum();
    for (w, _) in &mut kept {
        *w /= total;
    }

    // Resolve a selection into the hypothesis values.
    let resolve = |id: &TrackId, sel: &Sel| -> FlatHyp {
        match sel {
            Sel::Miss(h) => children[id][*h].0.hyp.clone(),
            Sel::Det(h, j) => children[id][*h].1[*j].hyp.clone(),
            Sel::NewBorn => {
                let j = (id.0 as usize) - track_ids.len();
                candidates[j].bern.clone().unwrap()
            }
            Sel::NewGhost => {
                let j = (id.0 as usize) - track_ids.len();
                let mut ghost = candidates[j].bern.clone().unwrap();
                ghost.r = 0.0;
                ghost
            }
        }
    };

    // Existence pruning: referenced selections below the threshold become
    // certainly empty; tracks empty under every global disappear.
    let mut zeroed: std::collections::BTreeSet<(TrackId, Sel)> = Default::default();
    for (_, choice) in &kept {
        for (id, sel) in choice {
            if resolve(id, sel).r < params.gamma_b {
                zeroed.insert((*id, sel.clone()));
            }
        }
    }
    let all_ids: Vec<TrackId> = kept
        .first()
        .map(|(_, c)| c.keys().copied().collect())
        .unwrap_or_default();
    let dead: Vec<TrackId> = all_ids
        .iter()
        .copied()
        .filter(|id| {
            kept.iter().all(|(_, c)| {
                let sel = &c[id];
                zeroed.contains(&(*id, sel.clone())) || resolve(id, sel).r == 0.0
            })
        })
        .collect();
    for (_, choice) in &mut kept {
        for id in &dead {
            choice.remove(id);
        }
    }

    // Coalesce duplicates.
    let mut table: BTreeMap<Vec<(TrackId, Sel)>, f64> = BTreeMap::new();
    for (w, choice) in kept {
        let key: Vec<(TrackId, Sel)> = choice.into_iter().collect();
        *table.entry(key).or_insert(0.0) += w;
    }
    let mut finals: Vec<(f64, ChoiceMap)> = table
        .into_iter()
        .map(|(key, w)| (w, key.into_iter().collect()))
        .collect();
    let total: f64 = finals.iter().map(|(w, _)| w).sum();
    for (w, _) in &mut finals {
        *w /= total;
    }
    finals.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    // Materialise the per-track hypothesis pools and the index-based globals.
    let mut tracks: BTreeMap<TrackId, Vec<FlatHyp>> = BTreeMap::new();
    let mut slot_of: BTreeMap<(TrackId, Sel), usize> = BTreeMap::new();
    let mut globals = Vec::new();
    for (w, choice) in &finals {
        let mut idx_choice = BTreeMap::new();
        for (id, sel) in choice {
            let slot = *slot_of.entry((*id, sel.clone())).or_insert_with(|| {
                let mut hyp = resolve(id, sel);
                if zeroed.contains(&(*id, sel.clone())) {
                    hyp.r = 0.0;
                }
                let pool = tracks.entry(*id).or_default();
                pool.push(hyp);
                pool.len() - 1
            });
            idx_choice.insert(*id, slot);
        }
        globals.push((*w, idx_choice));
    }

    // PPP update: undetected scaling and pruning.
    for (w, _, _) in &mut ppp {
        *w *= 1.0 - model.p_d;
    }
    ppp.retain(|(w, _, _)| *w >= params.gamma_p);

    FlatPosterior {
        ppp,
        tracks,
        globals,
    }
}

fn check(dev: f64, what: &str, tol: f64) -> f64 {
    assert!(dev <= tol, "{what} deviates by {dev:.3e} (tolerance {tol:.0e})");
    dev
}

/// Compares two library posteriors (e.g. the clustered step under a forced
/// single cluster against the unclustered step). Returns the largest
/// deviation found; panics beyond the tolerance.
pub fn compare_posteriors(a: &ClusteredPmbm, b: &ClusteredPmbm, tol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    assert_eq!(a.clusters.len(), b.clusters.len(), "cluster count differs");
    assert_eq!(a.live_track_ids(), b.live_track_ids(), "track sets differ");

    assert_eq!(a.ppp.components.len(), b.ppp.components.len());
    for ((wa, da), (wb, db)) in a.ppp.components.iter().zip(&b.ppp.components) {
        worst = worst.max(check((wa - wb).abs(), "ppp weight", tol));
        worst = worst.max(check((&da.mean - &db.mean).amax(), "ppp mean", tol));
        worst = worst.max(check((&da.cov - &db.cov).amax(), "ppp cov", tol));
    }

    for (ca, cb) in a.clusters.iter().zip(&b.clusters) {
        assert_eq!(ca.members, cb.members, "cluster membership differs");
        assert_eq!(ca.globals.len(), cb.globals.len(), "global count differs");
        for (ga, gb) in ca.globals.iter().zip(&cb.globals) {
            worst = worst.max(check((ga.weight - gb.weight).abs(), "global weight", tol));
            for (id, ha) in &ga.choice {
                let hyp_a = &a.tracks[id].hyps[*ha];
                let hyp_b = &b.tracks[id].hyps[gb.choice[id]];
                worst = worst.max(check((hyp_a.r - hyp_b.r).abs(), "existence", tol));
                worst = worst.max(check(
                    (&hyp_a.density.mean - &hyp_b.density.mean).amax(),
                    "mean",
                    tol,
                ));
                worst = worst.max(check(
                    (&hyp_a.density.cov - &hyp_b.density.cov).amax(),
                    "covariance",
                    tol,
                ));
            }
        }
    }
    worst
}

/// Compares the library posterior (single cluster expected) against the flat
/// oracle. Returns the largest deviation; panics beyond the tolerance.
pub fn compare_with_flat(got: &ClusteredPmbm, oracle: &FlatPosterior, tol: f64) -> f64 {
    let mut worst: f64 = 0.0;

    assert_eq!(got.ppp.components.len(), oracle.ppp.len(), "ppp size");
    for ((wg, dg), (wo, mo, co)) in got.ppp.components.iter().zip(&oracle.ppp) {
        worst = worst.max(check((wg - wo).abs(), "ppp weight", tol));
        worst = worst.max(check((&dg.mean - mo).amax(), "ppp mean", tol));
        worst = worst.max(check((&dg.cov - co).amax(), "ppp cov", tol));
    }

    assert_eq!(got.clusters.len(), 1, "expected a single cluster");
    let cluster = &got.clusters[0];
    assert_eq!(
        cluster.members,
        oracle.tracks.keys().copied().collect(),
        "surviving tracks differ"
    );
    assert_eq!(
        cluster.globals.len(),
        oracle.globals.len(),
        "global count differs"
    );
    for (g, (wo, choice_o)) in cluster.globals.iter().zip(&oracle.globals) {
        worst = worst.max(check((g.weight - wo).abs(), "global weight", tol));
        for (id, h) in &g.choice {
            let hyp = &got.tracks[id].hyps[*h];
            let flat = &oracle.tracks[id][choice_o[id]];
            worst = worst.max(check((hyp.r - flat.r).abs(), "existence", tol));
            worst = worst.max(check(
                (&hyp.density.mean - &flat.mean).amax(),
                "mean",
                tol,
            ));
            worst = worst.max(check((&hyp.density.cov - &flat.cov).amax(), "covariance", tol));
        }
    }
    worst
}
