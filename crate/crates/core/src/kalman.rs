//! Constant-velocity box filter over `(cx, cy, aspect, height)` with
//! confidence-scaled measurement noise.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::BBox;

pub type StateVector = SVector<f64, 8>;
pub type StateCovariance = SMatrix<f64, 8, 8>;
pub type MeasurementVector = SVector<f64, 4>;
type MeasurementMatrix = SMatrix<f64, 4, 8>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KalmanError {
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("state projects to a degenerate box (w={w}, h={h})")]
    DegenerateShape { w: f64, h: f64 },
}

/// Noise schedule. Position/height standard deviations scale with the
/// current box height; aspect terms are absolute.
///
/// None of these values come from measured mouse data; they are the usual
/// DeepSORT-family defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanParams {
    pub std_weight_position: f64,
    pub std_weight_velocity: f64,
    pub aspect_std: f64,
    pub aspect_vel_std: f64,
    pub aspect_measurement_std: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        KalmanParams {
            std_weight_position: 1.0 / 20.0,
            std_weight_velocity: 1.0 / 160.0,
            aspect_std: 1e-2,
            aspect_vel_std: 1e-5,
            aspect_measurement_std: 1e-1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

impl KalmanState {
    pub fn height(&self) -> f64 {
        self.mean[3]
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.mean[4], self.mean[5])
    }

    /// Symmetric within `1e-9` and Cholesky-factorizable.
    pub fn is_spd(&self) -> bool {
        let c = &self.covariance;
        let scale = c.amax().max(1.0);
        if (c - c.transpose()).amax() > 1e-9 * scale {
            return false;
        }
        c.cholesky().is_some()
    }
}

fn measurement_matrix() -> MeasurementMatrix {
    let mut h = MeasurementMatrix::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

/// State transition over `frames` steps of unit duration.
pub fn transition(frames: f64) -> StateCovariance {
    let mut f = StateCovariance::identity();
    for i in 0..4 {
        f[(i, i + 4)] = frames;
    }
    f
}

#[derive(Debug, Clone, Default)]
pub struct KalmanFilter {
    pub params: KalmanParams,
}

impl KalmanFilter {
    pub fn new(params: KalmanParams) -> Self {
        KalmanFilter { params }
    }

    pub fn init(&self, measurement: &BBox) -> KalmanState {
        let z = to_measurement(measurement);
        let mut mean = StateVector::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);

        let p = &self.params;
        let h = z[3];
        let std = [
            2.0 * p.std_weight_position * h,
            2.0 * p.std_weight_position * h,
            p.aspect_std,
            2.0 * p.std_weight_position * h,
            10.0 * p.std_weight_velocity * h,
            10.0 * p.std_weight_velocity * h,
            p.aspect_vel_std,
            10.0 * p.std_weight_velocity * h,
        ];
        KalmanState {
            mean,
            covariance: StateCovariance::from_diagonal(&StateVector::from(std).map(|s| s * s)),
        }
    }

    pub fn process_noise(&self, state: &KalmanState) -> StateCovariance {
        let p = &self.params;
        let h = state.height();
        let std = [
            p.std_weight_position * h,
            p.std_weight_position * h,
            p.aspect_std,
            p.std_weight_position * h,
            p.std_weight_velocity * h,
            p.std_weight_velocity * h,
            p.aspect_vel_std,
            p.std_weight_velocity * h,
        ];
        StateCovariance::from_diagonal(&StateVector::from(std).map(|s| s * s))
    }

    /// Base (unscaled) measurement variances for the given prior.
    pub fn measurement_noise(&self, state: &KalmanState) -> MeasurementVector {
        let p = &self.params;
        let h = state.height();
        MeasurementVector::new(
            p.std_weight_position * h,
            p.std_weight_position * h,
            p.aspect_measurement_std,
            p.std_weight_position * h,
        )
        .map(|s| s * s)
    }

    pub fn predict(&self, state: &KalmanState) -> KalmanState {
        let mut mean = state.mean;
        // A shape velocity that would drive aspect or height non-positive is dropped.
        for i in [2, 3] {
            if mean[i] + mean[i + 4] <= 0.0 {
                mean[i + 4] = 0.0;
            }
        }
        let q = self.process_noise(state);
        let f = transition(1.0);
        let covariance = symmetrize(f * state.covariance * f.transpose() + q);
        KalmanState {
            mean: f * mean,
            covariance,
        }
    }

    /// Measurement update with noise `(1 - conf) * R`.
    ///
    /// `conf = 1` is allowed: the measured coordinates are replaced by `z` and
    /// their posterior variance collapses to zero.
    pub fn update(&self, state: &KalmanState, z: &BBox, conf: f64) -> Result<KalmanState, KalmanError> {
        let conf = conf.clamp(0.0, 1.0);
        let r = MeasurementVector::from(self.measurement_noise(state)) * (1.0 - conf);
        self.update_with_noise(state, &to_measurement(z), &r)
    }

    /// Update with an explicit diagonal measurement covariance.
    pub fn update_with_noise(
        &self,
        state: &KalmanState,
        z: &MeasurementVector,
        r_diag: &MeasurementVector,
    ) -> Result<KalmanState, KalmanError> {
        let h = measurement_matrix();
        let pht = state.covariance * h.transpose();
        let s = symmetrize4(h * pht + SMatrix::<f64, 4, 4>::from_diagonal(r_diag));
        let chol = s.cholesky().ok_or(KalmanError::SingularInnovation)?;
        // K = P H^T S^-1, solved as S K^T = H P
        let gain = chol.solve(&pht.transpose()).transpose();
        let innovation = z - h * state.mean;
        let mean = state.mean + gain * innovation;
        let covariance = symmetrize(state.covariance - gain * s * gain.transpose());
        Ok(KalmanState { mean, covariance })
    }

    pub fn project(&self, state: &KalmanState) -> Result<BBox, KalmanError> {
        project(state)
    }
}

pub fn to_measurement(b: &BBox) -> MeasurementVector {
    let (cx, cy) = b.center();
    MeasurementVector::new(cx, cy, b.w / b.h, b.h)
}

/// Box described by the state mean.
pub fn project(state: &KalmanState) -> Result<BBox, KalmanError> {
    let m = &state.mean;
    let h = m[3];
    let w = m[2] * h;
    if !(h > 0.0 && w > 0.0) {
        return Err(KalmanError::DegenerateShape { w, h });
    }
    Ok(BBox::from_center(m[0], m[1], w, h))
}

fn symmetrize(m: StateCovariance) -> StateCovariance {
    (m + m.transpose()) * 0.5
}

fn symmetrize4(m: SMatrix<f64, 4, 4>) -> SMatrix<f64, 4, 4> {
    (m + m.transpose()) * 0.5
}
