//! Linear-Gaussian motion and measurement models plus the Kalman primitives
//! shared by prediction, gating and the measurement update.

use nalgebra::{DMatrix, DVector};

use crate::error::PmbmError;
use crate::rfs::{symmetrize, GaussianDensity};

/// Condition-number guard for the innovation covariance.
const MAX_CONDITION: f64 = 1e12;

/// Linear motion model `x' = F x + w`, `w ~ N(0, Q)`, with survival
/// probability `p_S`.
#[derive(Debug, Clone)]
pub struct MotionModel {
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub p_s: f64,
}

impl MotionModel {
    /// Nearly-constant-velocity model on the state `[px, vx, py, vy]` with
    /// sampling period `t` and noise intensity `q`:
    /// `F = I2 (x) [[1, T], [0, 1]]`, `Q = q I2 (x) [[T^3/3, T^2/2], [T^2/2, T]]`.
    pub fn constant_velocity(t: f64, q: f64, p_s: f64) -> Self {
        let mut f = DMatrix::identity(4, 4);
        f[(0, 1)] = t;
        f[(2, 3)] = t;
        let blk = [
            [t.powi(3) / 3.0, t.powi(2) / 2.0],
            [t.powi(2) / 2.0, t],
        ];
        let mut qm = DMatrix::zeros(4, 4);
        for axis in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    qm[(2 * axis + i, 2 * axis + j)] = q * blk[i][j];
                }
            }
        }
        Self { f, q: qm, p_s }
    }
}

/// Linear measurement model `z = H x + v`, `v ~ N(0, R)`, with detection
/// probability `p_D` and PPP clutter `clutter_rate` spread uniformly with
/// density `clutter_density` over the surveillance area.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p_d: f64,
    pub clutter_rate: f64,
    pub clutter_density: f64,
}

impl MeasurementModel {
    /// Position-only observation of the `[px, vx, py, vy]` state with unit
    /// noise covariance: `H = I2 (x) [1 0]`, `R = I2`.
    pub fn position_sensor(p_d: f64, clutter_rate: f64, area_side: f64) -> Self {
        let mut h = DMatrix::zeros(2, 4);
        h[(0, 0)] = 1.0;
        h[(1, 2)] = 1.0;
        Self {
            h,
            r: DMatrix::identity(2, 2),
            p_d,
            clutter_rate,
            clutter_density: 1.0 / (area_side * area_side),
        }
    }

    /// Clutter intensity value at any point of the surveillance area.
    pub fn clutter_intensity(&self) -> f64 {
        self.clutter_rate * self.clutter_density
    }
}

/// Predicted measurement of a state density: `zhat = H mean`, innovation
/// covariance `S = H cov H^T + R` (symmetrised) and gain `K = cov H^T S^-1`.
#[derive(Debug, Clone)]
pub struct PredictedMeasurement {
    pub zhat: DVector<f64>,
    pub s: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

/// Kalman prediction: `mean' = F mean`, `cov' = F cov F^T + Q`, symmetrised.
pub fn kalman_predict(d: &GaussianDensity, m: &MotionModel) -> Result<GaussianDensity, PmbmError> {
    if m.f.ncols() != d.dim() {
        return Err(PmbmError::DimensionMismatch {
            expected: m.f.ncols(),
            got: d.dim(),
        });
    }
    let mean = &m.f * &d.mean;
    let cov = symmetrize(&(&m.f * &d.cov * m.f.transpose() + &m.q));
    Ok(GaussianDensity::new_unchecked(mean, cov))
}

/// Computes the predicted measurement, innovation covariance and Kalman gain
/// of a state density. `S` is factorised symmetrically; a condition number
/// above 1e12 is reported as a numerical error.
pub fn predicted_measurement(
    d: &GaussianDensity,
    m: &MeasurementModel,
) -> Result<PredictedMeasurement, PmbmError> {
    if m.h.ncols() != d.dim() {
        return Err(PmbmError::DimensionMismatch {
            expected: m.h.ncols(),
            got: d.dim(),
        });
    }
    let zhat = &m.h * &d.mean;
    let s = symmetrize(&(&m.h * &d.cov * m.h.transpose() + &m.r));
    let chol = s.clone().cholesky().ok_or(PmbmError::Singular {
        context: "innovation covariance",
    })?;
    let diag = chol.l().diagonal();
    let (dmin, dmax) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if dmin.is_nan() || dmin <= 0.0 || (dmax / dmin).powi(2) > MAX_CONDITION {
        return Err(PmbmError::Singular {
            context: "ill-conditioned innovation covariance",
        });
    }
    // K = P H^T S^-1, via the factorisation: K^T = S^-1 (H P).
    let gain = chol.solve(&(&m.h * &d.cov)).transpose();
    Ok(PredictedMeasurement { zhat, s, gain })
}

/// Kalman update in Joseph-stabilised form. Returns the posterior density and
/// the measurement likelihood (Gaussian pdf of `z` under `(zhat, S)`).
pub fn kalman_update(
    d: &GaussianDensity,
    z: &DVector<f64>,
    m: &MeasurementModel,
) -> Result<(GaussianDensity, f64), PmbmError> {
    let pm = predicted_measurement(d, m)?;
    if z.len() != pm.zhat.len() {
        return Err(PmbmError::DimensionMismatch {
            expected: pm.zhat.len(),
            got: z.len(),
        });
    }
    let (post, log_lik) = kalman_update_with(d, z, m, &pm)?;
    Ok((post, log_lik.exp()))
}

/// Same as [`kalman_update`] but reuses a precomputed innovation triple and
/// returns the log-likelihood; used in the hot update loop where the same
/// hypothesis is paired with many gated measurements.
pub fn kalman_update_with(
    d: &GaussianDensity,
    z: &DVector<f64>,
    m: &MeasurementModel,
    pm: &PredictedMeasurement,
) -> Result<(GaussianDensity, f64), PmbmError> {
    let innovation = z - &pm.zhat;
    let mean = &d.mean + &pm.gain * &innovation;
    let n = d.dim();
    let ikh = DMatrix::identity(n, n) - &pm.gain * &m.h;
    let cov = symmetrize(&(&ikh * &d.cov * ikh.transpose() + &pm.gain * &m.r * pm.gain.transpose()));
    let log_lik = gaussian_log_pdf_with_cov(&innovation, &pm.s)?;
    Ok((GaussianDensity::new_unchecked(mean, cov), log_lik))
}

/// Log pdf of `N(diff; 0, cov)` via Cholesky.
pub fn gaussian_log_pdf_with_cov(diff: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64, PmbmError> {
    let chol = cov.clone().cholesky().ok_or(PmbmError::Singular {
        context: "likelihood covariance",
    })?;
    let solved = chol.solve(diff);
    let maha_sq = diff.dot(&solved);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (maha_sq + log_det + diff.len() as f64 * (2.0 * std::f64::consts::PI).ln()))
}
