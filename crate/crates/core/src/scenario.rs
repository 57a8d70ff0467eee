//! Simulated scenarios: grouped crossing targets on a grid (scenario 1) and
//! targets appearing and disappearing over time (scenario 2), plus the
//! measurement generator and the filter-side birth model.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::HypothesisCap;
use crate::error::PmbmError;
use crate::filter::{FilterMode, FilterParams};
use crate::gating::{GateMethod, GatingConfig};
use crate::lingauss::{MeasurementModel, MotionModel};
use crate::reduction::MergeParams;
use crate::rfs::{GaussianDensity, PoissonIntensity};

/// Group geometry of scenario 1: side of the square a group occupies and the
/// spacing between adjacent group centres.
pub const GROUP_SIDE: f64 = 300.0;
pub const GROUP_OFFSET: f64 = 150.0;

/// Scenario parameters. The `scenario1`/`scenario2` constructors fill in the
/// preset values for a given simulation index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: u8,
    pub n_sim: usize,
    /// Number of target groups (scenario 1 only).
    pub n_g: usize,
    /// Expected number of targets born during the simulation.
    pub n_b: usize,
    /// Side length of the surveillance area.
    pub d_a: f64,
    /// Mean clutter measurements per scan.
    pub lambda_c: f64,
    pub steps: usize,
    pub seed: u64,
    pub p_d: f64,
    pub p_s: f64,
    pub q: f64,
}

impl ScenarioConfig {
    pub fn scenario1(n_sim: usize) -> Self {
        let idx = n_sim - 1;
        let n_g = [4, 16, 64, 256][idx];
        Self {
            scenario: 1,
            n_sim,
            n_g,
            n_b: 4 * n_g,
            d_a: [400.0, 750.0, 1350.0, 2550.0][idx],
            lambda_c: [2.25, 6.25, 20.25, 72.25][idx],
            steps: 101,
            seed: 0,
            p_d: 0.9,
            p_s: 0.99,
            q: 0.01,
        }
    }

    pub fn scenario2(n_sim: usize) -> Self {
        let idx = n_sim - 1;
        Self {
            scenario: 2,
            n_sim,
            n_g: 0,
            n_b: [16, 64, 256, 1024][idx],
            d_a: 600.0 * n_sim as f64,
            lambda_c: [24.0, 96.0, 216.0, 384.0][idx],
            steps: 101,
            seed: 0,
            p_d: 0.9,
            p_s: 0.99,
            q: 0.2,
        }
    }

    /// Reference mean number of alive targets per step.
    pub fn reference_mean_alive(&self) -> f64 {
        let idx = self.n_sim - 1;
        match self.scenario {
            1 => [14.0, 56.0, 224.0, 895.0][idx],
            _ => [6.0, 24.0, 96.0, 374.0][idx],
        }
    }

    pub fn motion_model(&self) -> MotionModel {
        MotionModel::constant_velocity(1.0, self.q, self.p_s)
    }

    pub fn measurement_model(&self) -> MeasurementModel {
        MeasurementModel::position_sensor(self.p_d, self.lambda_c, self.d_a)
    }
}

/// One target: birth step, death step (exclusive) and the state trajectory,
/// with `states[k - birth]` the state at step `k` for `birth <= k < death`.
#[derive(Debug, Clone)]
pub struct TargetTruth {
    pub birth: usize,
    pub death: usize,
    pub states: Vec<DVector<f64>>,
}

impl TargetTruth {
    pub fn state_at(&self, step: usize) -> Option<&DVector<f64>> {
        (step >= self.birth && step < self.death).then(|| &self.states[step - self.birth])
    }
}

#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub targets: Vec<TargetTruth>,
}

impl GroundTruth {
    pub fn alive_at(&self, step: usize) -> Vec<DVector<f64>> {
        self.targets
            .iter()
            .filter_map(|t| t.state_at(step).cloned())
            .collect()
    }

    pub fn mean_alive(&self, steps: usize) -> f64 {
        (1..=steps)
            .map(|k| self.alive_at(k).len())
            .sum::<usize>() as f64
            / steps as f64
    }
}

/// Grouped crossing targets: a sqrt(N_g) x sqrt(N_g) grid of group centres.
/// Each group holds four targets born at step 1 on the corners of its square
/// section, converging on the group centre at step 50 with constant
/// velocity; the target entering from the top-left corner dies there, the
/// rest continue straight to the end. The trajectories are deterministic, so
/// the crossing event is exactly reproducible.
pub fn gen_scenario1(cfg: &ScenarioConfig) -> Result<GroundTruth, PmbmError> {
    let side = (cfg.n_g as f64).sqrt().round() as usize;
    if side * side != cfg.n_g {
        return Err(PmbmError::InvalidConfig(format!(
            "n_g = {} is not a perfect square",
            cfg.n_g
        )));
    }
    let cross_step = 50usize;
    let first_centre = (cfg.d_a - GROUP_OFFSET * (side as f64 - 1.0)) / 2.0;
    let half = GROUP_SIDE / 2.0;

    let mut targets = Vec::with_capacity(cfg.n_g * 4);
    for gx in 0..side {
        for gy in 0..side {
            let cx = first_centre + GROUP_OFFSET * gx as f64;
            let cy = first_centre + GROUP_OFFSET * gy as f64;
            // Corner order: top-left (the dying target), top-right,
            // bottom-left, bottom-right.
            let corners = [
                (cx - half, cy + half),
                (cx + half, cy + half),
                (cx - half, cy - half),
                (cx + half, cy - half),
            ];
            for (t, (x0, y0)) in corners.iter().enumerate() {
                let vx = (cx - x0) / (cross_step as f64 - 1.0);
                let vy = (cy - y0) / (cross_step as f64 - 1.0);
                let death = if t == 0 { cross_step + 1 } else { cfg.steps + 1 };
                let states = (1..death)
                    .map(|k| {
                        let dt = (k - 1) as f64;
                        DVector::from_row_slice(&[x0 + vx * dt, vx, y0 + vy * dt, vy])
                    })
                    .collect();
                targets.push(TargetTruth {
                    birth: 1,
                    death,
                    states,
                });
            }
        }
    }
    Ok(GroundTruth { targets })
}

/// Appearing/disappearing targets: Poisson births each step, geometric
/// lifetimes with the survival probability, initial states drawn around the
/// area centre, trajectories sampled from the motion model.
pub fn gen_scenario2(cfg: &ScenarioConfig, seed: u64) -> GroundTruth {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let motion = cfg.motion_model();
    let chol_q = motion
        .q
        .clone()
        .cholesky()
        .expect("process noise is positive definite")
        .l();
    let rate = cfg.n_b as f64 / 100.0;
    let centre = cfg.d_a / 2.0;
    let pos_sigma = 60.0 * cfg.n_sim as f64;

    let mut targets = Vec::new();
    for birth in 1..=cfg.steps.saturating_sub(1) {
        let count = if rate > 0.0 {
            Poisson::new(rate).unwrap().sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let mut state = DVector::from_row_slice(&[
                centre + pos_sigma * rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                centre + pos_sigma * rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ]);
            let mut states = vec![state.clone()];
            let mut death = birth + 1;
            while death <= cfg.steps && rng.random_bool(cfg.p_s) {
                let noise: DVector<f64> =
                    DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
                state = &motion.f * &state + &chol_q * noise;
                states.push(state.clone());
                death += 1;
            }
            targets.push(TargetTruth {
                birth,
                death,
                states,
            });
        }
    }
    GroundTruth { targets }
}

/// Per-step measurement sets: each alive target is detected with probability
/// `p_D` and observed through the measurement model; clutter is Poisson with
/// uniform positions over the area.
pub fn gen_measurements(
    truth: &GroundTruth,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Vec<Vec<DVector<f64>>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let model = cfg.measurement_model();
    let chol_r = model
        .r
        .clone()
        .cholesky()
        .expect("measurement noise is positive definite")
        .l();
    let n_z = model.h.nrows();

    (1..=cfg.steps)
        .map(|k| {
            let mut scan = Vec::new();
            for x in truth.alive_at(k) {
                if rng.random_bool(cfg.p_d) {
                    let noise: DVector<f64> =
                        DVector::from_fn(n_z, |_, _| rng.sample::<f64, _>(StandardNormal));
                    scan.push(&model.h * &x + &chol_r * noise);
                }
            }
            if cfg.lambda_c > 0.0 {
                let n_clutter = Poisson::new(cfg.lambda_c).unwrap().sample(&mut rng) as usize;
                for _ in 0..n_clutter {
                    scan.push(DVector::from_row_slice(&[
                        rng.random_range(0.0..cfg.d_a),
                        rng.random_range(0.0..cfg.d_a),
                    ]));
                }
            }
            scan
        })
        .collect()
}

/// The filter's birth intensity at a given step: a single broad Gaussian
/// centred in the area. Scenario 1 concentrates the birth mass at the first
/// step and keeps a small floor afterwards; scenario 2 matches the constant
/// birth rate.
pub fn filter_birth_model(cfg: &ScenarioConfig, step: usize) -> PoissonIntensity {
    let centre = cfg.d_a / 2.0;
    let spread = (1.1 * cfg.d_a).powi(2);
    let mut cov = DMatrix::identity(4, 4);
    cov[(0, 0)] = spread;
    cov[(2, 2)] = spread;
    let mean = DVector::from_row_slice(&[centre, 0.0, centre, 0.0]);
    let weight = match cfg.scenario {
        1 => {
            if step == 1 {
                3.0 * cfg.n_g as f64
            } else {
                0.005
            }
        }
        _ => cfg.n_b as f64 / 100.0,
    };
    PoissonIntensity {
        components: vec![(weight, GaussianDensity::new_unchecked(mean, cov))],
    }
}

// ============================================================================
// Run configuration file
// ============================================================================

/// On-disk run configuration: scenario parameters plus the filter settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: u8,
    pub n_sim: usize,
    pub n_g: usize,
    pub n_b: usize,
    pub d_a: f64,
    pub lambda_c: f64,
    pub steps: usize,
    pub seed: u64,
    pub p_d: f64,
    pub p_s: f64,
    pub q: f64,
    pub gating: GatingSection,
    pub thresholds: ThresholdSection,
    pub caps: CapSection,
    pub reduction: ReductionSection,
    pub filter: FilterSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatingSection {
    pub method: GateMethod,
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdSection {
    pub gamma_p: f64,
    pub gamma_b: f64,
    pub gamma_mbm: f64,
    pub gamma_m: f64,
    pub gamma_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapSection {
    pub n_h: usize,
    pub n_h_c_factor: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionSection {
    pub merge: bool,
    pub swap: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSection {
    pub mode: FilterMode,
    pub clustered: bool,
}

impl RunConfig {
    /// Defaults mirroring the reference simulation setup.
    pub fn preset(scenario: u8, n_sim: usize) -> Result<Self, PmbmError> {
        if !(1..=4).contains(&n_sim) {
            return Err(PmbmError::InvalidConfig(format!(
                "n_sim must be 1..=4, got {n_sim}"
            )));
        }
        let sc = match scenario {
            1 => ScenarioConfig::scenario1(n_sim),
            2 => ScenarioConfig::scenario2(n_sim),
            other => {
                return Err(PmbmError::InvalidConfig(format!(
                    "unknown scenario {other}"
                )))
            }
        };
        Ok(Self {
            scenario: sc.scenario,
            n_sim: sc.n_sim,
            n_g: sc.n_g,
            n_b: sc.n_b,
            d_a: sc.d_a,
            lambda_c: sc.lambda_c,
            steps: sc.steps,
            seed: 1,
            p_d: sc.p_d,
            p_s: sc.p_s,
            q: sc.q,
            gating: GatingSection {
                method: GateMethod::KdTree,
                gamma: 4.5,
            },
            thresholds: ThresholdSection {
                gamma_p: 1e-5,
                gamma_b: 1e-5,
                gamma_mbm: 1e-4,
                gamma_m: 0.25,
                gamma_s: 50.0,
            },
            caps: CapSection {
                n_h: 200,
                n_h_c_factor: 20,
            },
            reduction: ReductionSection {
                merge: false,
                swap: false,
            },
            filter: FilterSection {
                mode: FilterMode::Pmbm,
                clustered: true,
            },
        })
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            scenario: self.scenario,
            n_sim: self.n_sim,
            n_g: self.n_g,
            n_b: self.n_b,
            d_a: self.d_a,
            lambda_c: self.lambda_c,
            steps: self.steps,
            seed: self.seed,
            p_d: self.p_d,
            p_s: self.p_s,
            q: self.q,
        }
    }

    pub fn filter_params(&self) -> FilterParams {
        FilterParams {
            gamma_p: self.thresholds.gamma_p,
            gamma_b: self.thresholds.gamma_b,
            gamma_mbm: self.thresholds.gamma_mbm,
            cap: if self.filter.clustered {
                HypothesisCap::PerTrack(self.caps.n_h_c_factor)
            } else {
                HypothesisCap::Absolute(self.caps.n_h)
            },
            gating: GatingConfig {
                method: self.gating.method,
                gamma: self.gating.gamma,
                exact_post_gamma: None,
            },
            estimator_threshold: 0.4,
            clustered: self.filter.clustered,
            mode: self.filter.mode,
            merge_enabled: self.reduction.merge,
            merge_params: MergeParams {
                gamma_m: self.thresholds.gamma_m,
                gamma_s: self.thresholds.gamma_s,
                swap_enabled: self.reduction.swap,
            },
        }
    }
}
