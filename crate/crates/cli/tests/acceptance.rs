//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Large-scale configurations (the 1024-target
//! simulation and absolute timing figures) are out of desk scale and are
//! exercised as trends only.

use std::collections::BTreeMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use pmbm_cli::{cluster_trend, clutter_stats, mean_alive_over_seeds, run_variant, Variant};
use pmbm_core::assignment::murty_kbest;
use pmbm_core::clustering::{kbest_merged_hypotheses, recluster, ClusterPartition, HypothesisCap};
use pmbm_core::eval::{gospa, planar_position};
use pmbm_core::filter::{step, FilterParams};
use pmbm_core::gating::{
    gate, gate_ellipsoidal, GateInput, GatingConfig,
};
use pmbm_core::lingauss::{MeasurementModel, MotionModel};
use pmbm_core::reduction::{bernoulli_kld, inter_track_swap, merge_bernoullis};
use pmbm_core::rfs::{
    evaluate_set_density, AssocRecord, Association, BernoulliComponent, Cluster, ClusteredPmbm,
    GaussianDensity, GlobalHypothesis, PoissonIntensity, Track, TrackId,
};
use pmbm_core::scenario::RunConfig;

/// Serialises the wall-time-sensitive criteria so they do not skew each
/// other's measurements.
static HEAVY: Mutex<()> = Mutex::new(());

mod flat_oracle;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

// ============================================================================
// Criterion 1: scenario 1 accuracy against the reference RMS GOSPA
// ============================================================================

#[test]
fn criterion_01_scenario1_rms_gospa_reference() {
    let _lock = HEAVY.lock().unwrap();
    let mc = 20;
    let base = RunConfig::preset(1, 1).unwrap();
    let (_, clustered) = run_variant(&base, Variant::ClusteredPmbm, mc);
    let (_, standard) = run_variant(&base, Variant::StandardPmbm, mc);

    let clustered_ref = 5.29;
    let standard_ref = 5.28;
    let cl_dev = (clustered.rms_gospa - clustered_ref).abs() / clustered_ref;
    let st_dev = (standard.rms_gospa - standard_ref).abs() / standard_ref;
    println!(
        "[{}] criterion 1: scenario 1 N_sim=1 x{mc}: clustered rms {:.4} (ref {clustered_ref}, dev {:.1}%), standard rms {:.4} (ref {standard_ref}, dev {:.1}%)",
        if cl_dev <= 0.10 && st_dev <= 0.10 { "PASS" } else { "FAIL" },
        clustered.rms_gospa,
        cl_dev * 100.0,
        standard.rms_gospa,
        st_dev * 100.0
    );
    assert!(
        cl_dev <= 0.10,
        "clustered PMBM rms {} deviates more than 10% from {clustered_ref}",
        clustered.rms_gospa
    );
    assert!(
        st_dev <= 0.10,
        "standard PMBM rms {} deviates more than 10% from {standard_ref}",
        standard.rms_gospa
    );
}

// ============================================================================
// Criterion 2: clustered wall time below half the standard wall time
// ============================================================================

#[test]
fn criterion_02_clustered_speedup_at_nsim2() {
    let _lock = HEAVY.lock().unwrap();
    let mc = 20;
    let base = RunConfig::preset(1, 2).unwrap();
    let (_, standard) = run_variant(&base, Variant::StandardPmbm, mc);
    let (_, clustered) = run_variant(&base, Variant::ClusteredPmbm, mc);

    let ratio = clustered.mean_time_per_run_s / standard.mean_time_per_run_s;
    println!(
        "[{}] criterion 2: scenario 1 N_sim=2 x{mc}: clustered {:.3}s/run vs standard {:.3}s/run, ratio {:.3} (require < 0.5)",
        if ratio < 0.5 { "PASS" } else { "FAIL" },
        clustered.mean_time_per_run_s,
        standard.mean_time_per_run_s,
        ratio
    );
    assert!(
        ratio < 0.5,
        "clustered/standard time ratio {ratio} not below 0.5"
    );
}

// ============================================================================
// Criterion 3: swapping increases cluster count, decreases tracks/cluster
// ============================================================================

#[test]
fn criterion_03_swapping_improves_cluster_structure() {
    let _lock = HEAVY.lock().unwrap();
    let mc = 3;
    let base = RunConfig::preset(1, 2).unwrap();
    let (merge_reports, _) = run_variant(&base, Variant::ClusteredPmbmMerging, mc);
    let (swap_reports, _) = run_variant(&base, Variant::ClusteredPmbmMergingSwapping, mc);
    let (clusters_merge, tracks_merge) = cluster_trend(&merge_reports);
    let (clusters_swap, tracks_swap) = cluster_trend(&swap_reports);
    let pass = clusters_swap > clusters_merge && tracks_swap < tracks_merge;
    println!(
        "[{}] criterion 3: scenario 1 N_sim=2: merging-only {:.2} clusters / {:.3} tracks-per-cluster, merging+swapping {:.2} / {:.3}",
        if pass { "PASS" } else { "FAIL" },
        clusters_merge,
        tracks_merge,
        clusters_swap,
        tracks_swap
    );
    assert!(
        clusters_swap > clusters_merge,
        "swapping must increase the mean cluster count ({clusters_swap} vs {clusters_merge})"
    );
    assert!(
        tracks_swap < tracks_merge,
        "swapping must decrease mean tracks per cluster ({tracks_swap} vs {tracks_merge})"
    );
}

// ============================================================================
// Criterion 4: scenario 2 generation statistics
// ============================================================================

#[test]
fn criterion_04_scenario2_generation_statistics() {
    let seeds = 50;
    let base = RunConfig::preset(2, 1).unwrap();

    // Clutter mean within three standard errors of 24.
    let (clutter_mean, n_scans) = clutter_stats(&base, seeds);
    let se = (24.0f64 / n_scans as f64).sqrt();
    let clutter_ok = (clutter_mean - 24.0).abs() <= 3.0 * se;

    // Mean alive targets within 15% of 6.
    let alive = mean_alive_over_seeds(&base, seeds).unwrap();
    let alive_ok = (alive - 6.0).abs() / 6.0 <= 0.15;

    println!(
        "[{}] criterion 4: scenario 2 N_sim=1 x{seeds} seeds: clutter mean {:.3} (24 +- {:.3}), mean alive {:.3} (6 +- 15%)",
        if clutter_ok && alive_ok { "PASS" } else { "FAIL" },
        clutter_mean,
        3.0 * se,
        alive
    );
    assert!(clutter_ok, "clutter mean {clutter_mean} outside 3 sigma of 24");
    assert!(alive_ok, "mean alive {alive} outside 15% of 6");
}

// ============================================================================
// Criterion 5: excluded scale
// ============================================================================

#[test]
fn criterion_05_large_scale_excluded() {
    // The 1024-target simulation and absolute timing values are not desk
    // scale; the suite asserts trends only (criteria 2 and 3).
    println!(
        "[PASS] criterion 5: N_sim=4 and absolute timings excluded by design; trends covered by criteria 2-3"
    );
}

// ============================================================================
// Criterion 6: single-cluster equivalence and the flat update oracle
// ============================================================================

fn random_prior(
    rng: &mut ChaCha12Rng,
    n_tracks: usize,
    n_clusters: usize,
) -> ClusteredPmbm {
    let mut pmbm = ClusteredPmbm::empty();
    pmbm.ppp.components.push((
        rng.random_range(0.1..0.5),
        GaussianDensity::new_unchecked(
            DVector::from_row_slice(&[
                rng.random_range(20.0..80.0),
                0.0,
                rng.random_range(20.0..80.0),
                0.0,
            ]),
            DMatrix::identity(4, 4) * rng.random_range(200.0..800.0),
        ),
    ));

    let mut ids = Vec::new();
    for _ in 0..n_tracks {
        let id = pmbm.alloc_track_id();
        let n_hyps = rng.random_range(1..=3);
        let hyps: Vec<BernoulliComponent> = (0..n_hyps)
            .map(|_| {
                let mean = DVector::from_row_slice(&[
                    rng.random_range(30.0..70.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(30.0..70.0),
                    rng.random_range(-1.0..1.0),
                ]);
                let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-0.4..0.4));
                let cov = &a * a.transpose() + DMatrix::identity(4, 4) * rng.random_range(0.5..2.0);
                BernoulliComponent::new(
                    rng.random_range(0.2..0.95),
                    GaussianDensity::new_unchecked(mean, cov),
                    AssocRecord {
                        step: 0,
                        assoc: Association::Misdetection,
                    },
                )
            })
            .collect();
        pmbm.tracks.insert(id, Track::new(id, hyps));
        ids.push(id);
    }

    // Random partition into the requested number of clusters.
    let mut buckets: Vec<Vec<TrackId>> = vec![Vec::new(); n_clusters];
    for (i, id) in ids.iter().enumerate() {
        if i < n_clusters {
            buckets[i].push(*id);
        } else {
            buckets[rng.random_range(0..n_clusters)].push(*id);
        }
    }
    for members in buckets {
        // Random globals over the member hypothesis combinations.
        let n_globals = rng.random_range(1..=3);
        let mut globals = Vec::new();
        for _ in 0..n_globals {
            let choice: BTreeMap<TrackId, usize> = members
                .iter()
                .map(|id| (*id, rng.random_range(0..pmbm.tracks[id].hyps.len())))
                .collect();
            globals.push(GlobalHypothesis::new(rng.random_range(0.1..1.0), choice));
        }
        // Distinct choice maps only: coalesce duplicates.
        let mut table: BTreeMap<Vec<usize>, GlobalHypothesis> = BTreeMap::new();
        for g in globals {
            match table.get_mut(&g.index_tuple()) {
                Some(e) => e.weight += g.weight,
                None => {
                    table.insert(g.index_tuple(), g);
                }
            }
        }
        let mut cluster = Cluster::new(members.into_iter().collect(), table.into_values().collect());
        pmbm_core::rfs::normalize_globals(&mut cluster).unwrap();
        pmbm.clusters.push(cluster);
    }
    pmbm
}

#[test]
fn criterion_06_single_cluster_equivalence() {
    let mut rng = rng(606);
    let motion = MotionModel::constant_velocity(1.0, 0.01, 0.99);
    let model = MeasurementModel::position_sensor(0.9, 2.0, 100.0);
    // A gate wide enough to connect every track with every measurement, so
    // measurement-driven clustering is forced into a single cluster.
    let mut params = FilterParams::clustered_pmbm();
    params.gating = GatingConfig::ellipsoidal(1e9);
    params.cap = HypothesisCap::Absolute(200);
    let mut unclustered = params.clone();
    unclustered.clustered = false;

    // PMBM_ORACLE_STRESS widens the sweep for longer soak runs.
    let stress = std::env::var("PMBM_ORACLE_STRESS").is_ok();
    let (n_scans, n_tracks, n_meas) = if stress { (500, 4, 6) } else { (50, 3, 5) };
    let mut max_dev: f64 = 0.0;
    for scan in 0..n_scans {
        let n_clusters = rng.random_range(1..=3);
        let prior = random_prior(&mut rng, n_tracks, n_clusters);
        let z: Vec<DVector<f64>> = (0..n_meas)
            .map(|_| {
                DVector::from_row_slice(&[
                    rng.random_range(25.0..75.0),
                    rng.random_range(25.0..75.0),
                ])
            })
            .collect();

        let (a, _) = step(&prior, &z, &motion, &model, &PoissonIntensity::empty(), &params, 1)
            .unwrap();
        let (b, _) = step(
            &prior,
            &z,
            &motion,
            &model,
            &PoissonIntensity::empty(),
            &unclustered,
            1,
        )
        .unwrap();
        max_dev = max_dev.max(flat_oracle::compare_posteriors(&a, &b, 1e-10));

        // Independent oracle: exhaustive flat PMBM update of the same prior.
        let oracle = flat_oracle::flat_step(&prior, &z, &motion, &model, &params);
        max_dev = max_dev.max(flat_oracle::compare_with_flat(&a, &oracle, 1e-10));
        let _ = scan;
    }
    println!(
        "[PASS] criterion 6: clustered = unclustered = exhaustive oracle on {n_scans} random scans (max deviation {max_dev:.2e}, tolerance 1e-10)"
    );
}

// ============================================================================
// Criterion 7: murty_kbest equals exhaustive enumeration
// ============================================================================

#[test]
fn criterion_07_murty_matches_enumeration() {
    let mut rng = rng(707);
    let mut checked = 0usize;
    for _ in 0..500 {
        let rows = rng.random_range(1..=5);
        let cols = rng.random_range(rows..=7);
        let mut costs = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-10.0..10.0));
        for i in 0..rows {
            for j in 0..cols {
                if rng.random_bool(0.15) && j != i {
                    costs[(i, j)] = f64::INFINITY;
                }
            }
        }
        let brute = enumerate_assignments(&costs);
        let all = murty_kbest(&costs, usize::MAX);
        assert_eq!(all.len(), brute.len());
        for k in 1..=brute.len() {
            let got = murty_kbest(&costs, k);
            assert_eq!(got.len(), k);
            for (g, b) in got.iter().zip(brute.iter()) {
                assert!((g.1 - b.1).abs() < 1e-9, "cost {} vs {}", g.1, b.1);
            }
            checked += 1;
        }
    }
    println!(
        "[PASS] criterion 7: murty_kbest equals exhaustive enumeration on 500 random matrices ({checked} (matrix, k) pairs)"
    );
}

fn enumerate_assignments(costs: &DMatrix<f64>) -> Vec<(Vec<usize>, f64)> {
    fn recurse(
        costs: &DMatrix<f64>,
        row: usize,
        acc: f64,
        used: &mut [bool],
        current: &mut [usize],
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if row == costs.nrows() {
            out.push((current.to_vec(), acc));
            return;
        }
        for j in 0..costs.ncols() {
            if used[j] || !costs[(row, j)].is_finite() {
                continue;
            }
            used[j] = true;
            current[row] = j;
            recurse(costs, row + 1, acc + costs[(row, j)], used, current, out);
            used[j] = false;
        }
    }
    let mut out = Vec::new();
    recurse(
        costs,
        0,
        0.0,
        &mut vec![false; costs.ncols()],
        &mut vec![0; costs.nrows()],
        &mut out,
    );
    out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    out
}

// ============================================================================
// Criterion 8: K-best merged hypotheses equal exhaustive truncation
// ============================================================================

#[test]
fn criterion_08_kbest_merged_matches_cross_product() {
    let mut rng = rng(808);
    for case in 0..200 {
        let n_lists = rng.random_range(1..=4);
        let lists: Vec<Vec<f64>> = (0..n_lists)
            .map(|_| {
                let n = rng.random_range(1..=5);
                let mut l: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
                let total: f64 = l.iter().sum();
                l.iter_mut().for_each(|w| *w /= total);
                l.sort_by(|a, b| b.partial_cmp(a).unwrap());
                l
            })
            .collect();
        let gamma = [0.0, 0.01, 0.05, 0.2][rng.random_range(0..4)];
        let k_max = rng.random_range(1..=40);
        let got = kbest_merged_hypotheses(&lists, gamma, k_max).unwrap();

        // Exhaustive cross product, sorted and truncated the same way.
        let mut all: Vec<(Vec<usize>, f64)> = vec![(vec![], 1.0)];
        for list in &lists {
            let mut next = Vec::new();
            for (tuple, w) in &all {
                for (i, wi) in list.iter().enumerate() {
                    let mut t = tuple.clone();
                    t.push(i);
                    next.push((t, w * wi));
                }
            }
            all = next;
        }
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let mut expected = Vec::new();
        for (tuple, w) in all {
            if !expected.is_empty() && w < gamma {
                break;
            }
            expected.push((tuple, w));
            if expected.len() == k_max {
                break;
            }
        }
        assert_eq!(got.len(), expected.len(), "case {case}");
        for ((gt, gw), (et, ew)) in got.iter().zip(expected.iter()) {
            assert_eq!(gt, et, "case {case}");
            assert!((gw - ew).abs() < 1e-12);
        }
    }
    println!(
        "[PASS] criterion 8: kbest_merged_hypotheses equals exhaustive cross-product truncation on 200 random instances"
    );
}

// ============================================================================
// Criterion 9: GOSPA equals brute-force assignment minimisation
// ============================================================================

#[test]
fn criterion_09_gospa_matches_brute_force() {
    let mut rng = rng(909);
    let mut max_dev: f64 = 0.0;
    for _ in 0..200 {
        let truth: Vec<DVector<f64>> = (0..rng.random_range(0..=4))
            .map(|_| {
                DVector::from_row_slice(&[
                    rng.random_range(-15.0..15.0),
                    rng.random_range(-15.0..15.0),
                ])
            })
            .collect();
        let est: Vec<DVector<f64>> = (0..rng.random_range(0..=4))
            .map(|_| {
                DVector::from_row_slice(&[
                    rng.random_range(-15.0..15.0),
                    rng.random_range(-15.0..15.0),
                ])
            })
            .collect();
        let got = gospa(&truth, &est, 10.0, 2.0);
        let expected = gospa_brute(&truth, &est, 10.0, 2.0);
        max_dev = max_dev.max((got.total - expected).abs());
        assert!(
            (got.total - expected).abs() < 1e-9,
            "gospa {} vs brute {}",
            got.total,
            expected
        );
        // Decomposition consistency.
        assert!(
            (got.total.powi(2) - (got.localization + got.missed + got.false_)).abs() < 1e-9
        );
    }
    println!(
        "[PASS] criterion 9: gospa equals brute-force minimisation on 200 random cases (max dev {max_dev:.2e})"
    );
}

fn gospa_brute(truth: &[DVector<f64>], est: &[DVector<f64>], c: f64, p: f64) -> f64 {
    fn recurse(
        t: &[Vec<f64>],
        e: &[Vec<f64>],
        i: usize,
        used: &mut [bool],
        acc: f64,
        c: f64,
        p: f64,
        best: &mut f64,
    ) {
        if i == t.len() {
            let unmatched = used.iter().filter(|&&u| !u).count();
            *best = best.min(acc + (c.powf(p) / 2.0) * unmatched as f64);
            return;
        }
        recurse(t, e, i + 1, used, acc + c.powf(p) / 2.0, c, p, best);
        for j in 0..e.len() {
            if used[j] {
                continue;
            }
            let d: f64 = t[i]
                .iter()
                .zip(&e[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            used[j] = true;
            recurse(t, e, i + 1, used, acc + d.powf(p), c, p, best);
            used[j] = false;
        }
    }
    let t: Vec<Vec<f64>> = truth.iter().map(planar_position).collect();
    let e: Vec<Vec<f64>> = est.iter().map(planar_position).collect();
    let mut best = f64::INFINITY;
    recurse(&t, &e, 0, &mut vec![false; e.len()], 0.0, c, p, &mut best);
    best.powf(1.0 / p)
}

// ============================================================================
// Criterion 10: Bernoulli KLD against a Monte-Carlo set integral
// ============================================================================

#[test]
fn criterion_10_bernoulli_kld_monte_carlo() {
    let mut rng = rng(1016);
    let n_samples = 1_000_000usize;
    let mut worst_z: f64 = 0.0;
    for pair in 0..20 {
        let dim = 2;
        let make = |rng: &mut ChaCha12Rng| {
            let mean = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.5..0.5));
            let cov = &a * a.transpose() + DMatrix::identity(dim, dim) * rng.random_range(0.4..1.5);
            BernoulliComponent::new(
                rng.random_range(0.05..0.95),
                GaussianDensity::new_unchecked(mean, cov),
                AssocRecord {
                    step: 0,
                    assoc: Association::Misdetection,
                },
            )
        };
        let f1 = make(&mut rng);
        let f2 = make(&mut rng);
        let closed = bernoulli_kld(&f1, &f2).unwrap();

        // Identical inputs give exactly zero.
        assert!(bernoulli_kld(&f1, &f1).unwrap().abs() < 1e-12);

        // Monte-Carlo estimate of the set-integral KLD: sample the Bernoulli
        // RFS under f1 and average log(f1/f2).
        let chol1 = f1.density.cov.clone().cholesky().unwrap();
        let l1 = chol1.l();
        let empty_term = ((1.0_f64 - f1.r) / (1.0 - f2.r)).ln();
        let log_r_ratio = (f1.r / f2.r).ln();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_samples {
            let value = if rng.random_bool(f1.r) {
                let noise = DVector::from_fn(dim, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let x = &f1.density.mean + &l1 * noise;
                log_r_ratio + f1.density.log_pdf(&x).unwrap() - f2.density.log_pdf(&x).unwrap()
            } else {
                empty_term
            };
            sum += value;
            sum_sq += value * value;
        }
        let mean = sum / n_samples as f64;
        let var = (sum_sq / n_samples as f64 - mean * mean).max(0.0);
        let se = (var / n_samples as f64).sqrt();
        let z = (mean - closed).abs() / se.max(1e-12);
        worst_z = worst_z.max(z);
        assert!(
            z <= 3.0,
            "pair {pair}: closed {closed} vs MC {mean} (se {se}), z = {z}"
        );
    }
    println!(
        "[PASS] criterion 10: bernoulli_kld within 3 standard errors of the Monte-Carlo set integral on 20 pairs (worst z {worst_z:.2})"
    );
}

// ============================================================================
// Criterion 11: moment preservation of merge_bernoullis
// ============================================================================

#[test]
fn criterion_11_merge_preserves_moments() {
    let mut rng = rng(1111);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=3usize);
        let comps: Vec<(f64, BernoulliComponent)> = (0..rng.random_range(2..=5))
            .map(|_| {
                let mean = DVector::from_fn(n, |_, _| rng.random_range(-4.0..4.0));
                let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
                let cov = &a * a.transpose() + DMatrix::identity(n, n) * rng.random_range(0.3..1.5);
                (
                    rng.random_range(0.05..1.0),
                    BernoulliComponent::new(
                        rng.random_range(0.05..1.0),
                        GaussianDensity::new_unchecked(mean, cov),
                        AssocRecord {
                            step: 0,
                            assoc: Association::Misdetection,
                        },
                    ),
                )
            })
            .collect();
        let inputs: Vec<(f64, &BernoulliComponent)> = comps.iter().map(|(w, c)| (*w, c)).collect();
        let (w_hat, merged) = merge_bernoullis(&inputs).unwrap();

        let wr: f64 = comps.iter().map(|(w, c)| w * c.r).sum();
        worst = worst.max((w_hat * merged.r - wr).abs());

        let mut first = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for (w, c) in &comps {
            first += &c.density.mean * (*w * c.r);
            second +=
                (&c.density.cov + &c.density.mean * c.density.mean.transpose()) * (*w * c.r);
        }
        let got_first = &merged.density.mean * (w_hat * merged.r);
        let got_second = (&merged.density.cov
            + &merged.density.mean * merged.density.mean.transpose())
            * (w_hat * merged.r);
        worst = worst.max((got_first - first).amax());
        worst = worst.max((got_second - second).amax());
    }
    assert!(worst < 1e-10, "moment deviation {worst}");
    println!(
        "[PASS] criterion 11: merge_bernoullis preserves existence mass and moments on 100 random mixtures (worst dev {worst:.2e})"
    );
}

// ============================================================================
// Criterion 12: inter-track swap leaves the set density unchanged
// ============================================================================

#[test]
fn criterion_12_swap_preserves_set_density() {
    let mut rng = rng(1212);
    let mut worst: f64 = 0.0;
    let mut swaps_applied = 0usize;
    for case in 0..40 {
        // Two tracks, each with one hypothesis near the origin region and
        // one in a far region, so both tracks are swap candidates.
        let mut pmbm = ClusteredPmbm::empty();
        let a = pmbm.alloc_track_id();
        let b = pmbm.alloc_track_id();
        let far = 40.0 + rng.random_range(0.0..20.0);
        let make = |rng: &mut ChaCha12Rng, cx: f64| {
            let mean = DVector::from_row_slice(&[
                cx + rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
            ]);
            BernoulliComponent::new(
                rng.random_range(0.3..0.95),
                GaussianDensity::new_unchecked(mean, DMatrix::identity(4, 4)),
                AssocRecord {
                    step: 0,
                    assoc: Association::Misdetection,
                },
            )
        };
        pmbm.tracks.insert(
            a,
            Track::new(a, vec![make(&mut rng, 0.0), make(&mut rng, far)]),
        );
        pmbm.tracks.insert(
            b,
            Track::new(b, vec![make(&mut rng, far), make(&mut rng, 0.0)]),
        );
        let w = rng.random_range(0.2..0.8);
        pmbm.clusters.push(Cluster::new(
            [a, b].into(),
            vec![
                GlobalHypothesis::new(w, BTreeMap::from([(a, 0), (b, 0)])),
                GlobalHypothesis::new(1.0 - w, BTreeMap::from([(a, 1), (b, 1)])),
            ],
        ));

        let test_sets: Vec<Vec<DVector<f64>>> = (0..10)
            .map(|i| {
                let card = i % 3;
                (0..card)
                    .map(|_| {
                        let cx = if rng.random_bool(0.5) { 0.0 } else { far };
                        DVector::from_row_slice(&[
                            cx + rng.random_range(-2.0..2.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-1.0..1.0),
                        ])
                    })
                    .collect()
            })
            .collect();
        let before: Vec<f64> = test_sets
            .iter()
            .map(|s| evaluate_set_density(&pmbm, s).unwrap())
            .collect();

        let mut tracks = pmbm.tracks.clone();
        let mut cluster = pmbm.clusters[0].clone();
        let hyps_before: usize = tracks.values().map(|t| t.hyps.len()).sum();
        inter_track_swap(&mut tracks, &mut cluster, 50.0).unwrap();
        let hyps_after: usize = tracks.values().map(|t| t.hyps.len()).sum();
        if hyps_after != hyps_before
            || cluster.globals != pmbm.clusters[0].globals
        {
            swaps_applied += 1;
        }
        let mut swapped = pmbm.clone();
        swapped.tracks = tracks;
        swapped.clusters = vec![cluster];
        swapped.validate().unwrap();

        for (set, b0) in test_sets.iter().zip(before.iter()) {
            let after = evaluate_set_density(&swapped, set).unwrap();
            let dev = (after - b0).abs();
            worst = worst.max(dev);
            assert!(
                dev <= 1e-12 * b0.abs().max(1.0),
                "case {case}: density changed by {dev} ({b0} -> {after})"
            );
        }
    }
    assert!(swaps_applied > 0, "the construction never triggered a swap");
    println!(
        "[PASS] criterion 12: inter_track_swap leaves evaluate_set_density unchanged on 40 two-track cases x 10 sets ({swaps_applied} with actual swaps, worst dev {worst:.2e})"
    );
}

// ============================================================================
// Criterion 13: tree gates with exact post-filter equal ellipsoidal gating
// ============================================================================

#[test]
fn criterion_13_gate_structure_equivalence() {
    let mut rng = rng(1313);
    for scan in 0..100 {
        let n_hyps = rng.random_range(1..=8);
        let inputs: Vec<GateInput> = (0..n_hyps)
            .map(|h| GateInput {
                track: TrackId(h as u64),
                hyp: 0,
                zhat: DVector::from_row_slice(&[
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                ]),
                s: DMatrix::identity(2, 2) * rng.random_range(0.5..3.0),
            })
            .collect();
        let z: Vec<DVector<f64>> = (0..rng.random_range(0..40))
            .map(|_| {
                DVector::from_row_slice(&[
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                ])
            })
            .collect();

        let reference = gate_ellipsoidal(&inputs, &z, 20.0);
        let mut kd = GatingConfig::kdtree(4.5);
        kd.exact_post_gamma = Some(20.0);
        let mut rt = GatingConfig::rtree(8.0);
        rt.exact_post_gamma = Some(20.0);
        let kd_map = gate(&inputs, &z, &kd);
        let rt_map = gate(&inputs, &z, &rt);
        assert_eq!(reference.gates, kd_map.gates, "scan {scan} kd");
        assert_eq!(reference.gates, rt_map.gates, "scan {scan} rtree");
        assert_eq!(reference.track_gates, kd_map.track_gates);
        assert_eq!(reference.track_gates, rt_map.track_gates);
    }
    println!(
        "[PASS] criterion 13: k-d and R-tree gates with exact post-filter equal exhaustive ellipsoidal gating on 100 random scans"
    );
}

// ============================================================================
// Criterion 14: recluster identity and split-merge marginal preservation
// ============================================================================

#[test]
fn criterion_14_recluster_identity_and_roundtrip() {
    let mut rng = rng(1414);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let n_clusters = rng.random_range(1..=3);
        let prior = random_prior(&mut rng, 4, n_clusters);

        // Identity re-clustering is a no-op.
        let identity = ClusterPartition {
            clusters: prior.clusters.iter().map(|c| c.members.clone()).collect(),
            provenance: BTreeMap::new(),
        };
        let same = recluster(&prior, &identity, 1e-4, &HypothesisCap::Absolute(1000)).unwrap();
        assert_eq!(same.clusters.len(), prior.clusters.len());
        for (c0, c1) in prior.clusters.iter().zip(same.clusters.iter()) {
            assert_eq!(c0.members, c1.members);
            assert_eq!(c0.globals.len(), c1.globals.len());
            for (g0, g1) in c0.globals.iter().zip(c1.globals.iter()) {
                assert_eq!(g0.choice, g1.choice);
                assert!((g0.weight - g1.weight).abs() < 1e-15);
            }
        }

        // Split into singletons, then merge back: per-track marginal
        // mixtures survive when pruning is disabled.
        let live = prior.live_track_ids();
        let singletons = ClusterPartition {
            clusters: live.iter().map(|id| [*id].into()).collect(),
            provenance: BTreeMap::new(),
        };
        let split = recluster(&prior, &singletons, 0.0, &HypothesisCap::Absolute(usize::MAX / 2))
            .unwrap();
        let all = ClusterPartition {
            clusters: vec![live.clone()],
            provenance: BTreeMap::new(),
        };
        let merged = recluster(&split, &all, 0.0, &HypothesisCap::Absolute(usize::MAX / 2))
            .unwrap();
        for id in &live {
            for hyp in 0..prior.tracks[id].hyps.len() {
                let orig: f64 = prior
                    .clusters
                    .iter()
                    .map(|c| c.mixture_weight(*id, hyp))
                    .sum();
                let got: f64 = merged
                    .clusters
                    .iter()
                    .map(|c| c.mixture_weight(*id, hyp))
                    .sum();
                worst = worst.max((orig - got).abs());
                assert!(
                    (orig - got).abs() < 1e-9,
                    "track {id:?} hyp {hyp}: {orig} vs {got}"
                );
            }
        }
    }
    println!(
        "[PASS] criterion 14: recluster identity is a no-op and split-merge round trips preserve marginals (worst dev {worst:.2e})"
    );
}
