//! Constant-velocity Kalman filter over `[xc, yc, w, h, ẋc, ẏc, ẇ, ḣ]`
//! with platform-motion compensation of the predicted state.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::geometry::{AffineTransform2D, Box2D};

pub type StateVector = SVector<f64, 8>;
pub type StateCovariance = SMatrix<f64, 8, 8>;
type Measurement = SVector<f64, 4>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("invalid measurement {0:?}")]
    InvalidMeasurement(Box2D),
    #[error("innovation covariance is not invertible")]
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanConfig {
    pub position_weight: f64,
    pub velocity_weight: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self { position_weight: 1.0 / 20.0, velocity_weight: 1.0 / 160.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

fn measurement_of(b: &Box2D) -> Measurement {
    let c = b.center();
    Measurement::new(c.x, c.y, b.w, b.h)
}

fn diag_from_stds(stds: &[f64; 8]) -> StateCovariance {
    StateCovariance::from_diagonal(&StateVector::from_fn(|i, _| stds[i] * stds[i]))
}

fn transition() -> StateCovariance {
    let mut f = StateCovariance::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> SMatrix<f64, 4, 8> {
    SMatrix::<f64, 4, 8>::from_fn(|r, c| if r == c { 1.0 } else { 0.0 })
}

fn symmetrize(p: &StateCovariance) -> StateCovariance {
    (p + p.transpose()) * 0.5
}

/// Starts a track at `measurement` with zero velocity. All noise terms are
/// proportional to the box height.
pub fn initiate(measurement: &Box2D, cfg: &KalmanConfig) -> Result<KalmanState, MotionError> {
    if !measurement.is_valid() || measurement.w <= 0.0 || measurement.h <= 0.0 {
        return Err(MotionError::InvalidMeasurement(*measurement));
    }
    let z = measurement_of(measurement);
    let mut mean = StateVector::zeros();
    mean.fixed_rows_mut::<4>(0).copy_from(&z);
    let h = measurement.h;
    let p = 2.0 * cfg.position_weight * h;
    let v = 10.0 * cfg.velocity_weight * h;
    Ok(KalmanState { mean, covariance: diag_from_stds(&[p, p, p, p, v, v, v, v]) })
}

/// One frame of constant-velocity propagation.
pub fn predict(state: &KalmanState, cfg: &KalmanConfig) -> KalmanState {
    let h = state.mean[3].abs();
    let p = cfg.position_weight * h;
    let v = cfg.velocity_weight * h;
    let q = diag_from_stds(&[p, p, p, p, v, v, v, v]);
    let f = transition();
    KalmanState { mean: f * state.mean, covariance: symmetrize(&(f * state.covariance * f.transpose() + q)) }
}

/// Moves a predicted state into the current frame's coordinates: the 2×2
/// linear part acts on every coordinate pair, the translation on the
/// position only.
pub fn apply_platform_compensation(state: &KalmanState, t: &AffineTransform2D) -> KalmanState {
    let mut m8 = StateCovariance::zeros();
    for block in 0..4 {
        let o = 2 * block;
        for r in 0..2 {
            for c in 0..2 {
                m8[(o + r, o + c)] = t.m[r][c];
            }
        }
    }
    let mut mean = m8 * state.mean;
    mean[0] += t.t[0];
    mean[1] += t.t[1];
    KalmanState { mean, covariance: symmetrize(&(m8 * state.covariance * m8.transpose())) }
}

/// Kalman correction against a `[xc, yc, w, h]` measurement, Joseph form.
pub fn update(state: &KalmanState, measurement: &Box2D, cfg: &KalmanConfig) -> Result<KalmanState, MotionError> {
    if !measurement.is_valid() {
        return Err(MotionError::InvalidMeasurement(*measurement));
    }
    let hmat = observation();
    let std = cfg.position_weight * state.mean[3].abs();
    let r = SMatrix::<f64, 4, 4>::identity() * (std * std);
    let s = hmat * state.covariance * hmat.transpose() + r;
    let chol = s.cholesky().ok_or(MotionError::NumericalFailure)?;
    let pht = state.covariance * hmat.transpose();
    // K = P Hᵀ S⁻¹, solved as S Kᵀ = H P
    let gain = chol.solve(&pht.transpose()).transpose();
    let innovation = measurement_of(measurement) - hmat * state.mean;
    let mean = state.mean + gain * innovation;
    let ikh = StateCovariance::identity() - gain * hmat;
    let covariance = symmetrize(&(ikh * state.covariance * ikh.transpose() + gain * r * gain.transpose()));
    if !mean.iter().chain(covariance.iter()).all(|v| v.is_finite()) {
        return Err(MotionError::NumericalFailure);
    }
    Ok(KalmanState { mean, covariance })
}

/// Top-left box of the state's position and size; negative sizes clamp to 0.
pub fn state_to_box(state: &KalmanState) -> Box2D {
    let m = &state.mean;
    Box2D::from_center(m[0], m[1], m[2], m[3])
}
