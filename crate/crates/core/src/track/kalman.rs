//! Constant-velocity Kalman filter over box state (cx, cy, aspect, height).
//!
//! Noise scales with box height, except the aspect components which get
//! small fixed stds so the aspect velocity decays toward zero instead of
//! drifting — vehicles don't change shape.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::geometry::BBox;
use crate::track::Detection;

const STD_WEIGHT_POSITION: f64 = 1.0 / 20.0;
const STD_WEIGHT_VELOCITY: f64 = 1.0 / 160.0;
const ASPECT_POSITION_STD: f64 = 1e-2;
const ASPECT_VELOCITY_STD: f64 = 1e-5;
const ASPECT_MEASUREMENT_STD: f64 = 1e-1;
const MIN_EXTENT: f64 = 1e-6;

type Vec8 = SVector<f64, 8>;
type Mat8 = SMatrix<f64, 8, 8>;
type Vec4 = SVector<f64, 4>;
type Mat4 = SMatrix<f64, 4, 4>;
type Mat4x8 = SMatrix<f64, 4, 8>;

#[derive(Debug, Error, PartialEq)]
pub enum KalmanError {
    #[error("innovation covariance is not invertible")]
    NumericalFailure,
}

/// Filter state: mean (cx, cy, aspect, height, and their velocities) plus
/// the full 8x8 covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    mean: Vec8,
    covariance: Mat8,
}

fn measurement_of(bbox: &BBox) -> Vec4 {
    Vec4::new(
        bbox.center().x,
        bbox.center().y,
        bbox.width() / bbox.height(),
        bbox.height(),
    )
}

fn motion_matrix() -> Mat8 {
    let mut f = Mat8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation_matrix() -> Mat4x8 {
    let mut h = Mat4x8::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

impl KalmanState {
    /// Initializes from a first detection with zero velocity and inflated
    /// uncertainty on the velocity components.
    pub fn initiate(detection: &Detection) -> Self {
        let z = measurement_of(&detection.bbox);
        let h = z[3];
        let mut mean = Vec8::zeros();
        for i in 0..4 {
            mean[i] = z[i];
        }
        let std = [
            2.0 * STD_WEIGHT_POSITION * h,
            2.0 * STD_WEIGHT_POSITION * h,
            ASPECT_POSITION_STD,
            2.0 * STD_WEIGHT_POSITION * h,
            10.0 * STD_WEIGHT_VELOCITY * h,
            10.0 * STD_WEIGHT_VELOCITY * h,
            ASPECT_VELOCITY_STD,
            10.0 * STD_WEIGHT_VELOCITY * h,
        ];
        let covariance = Mat8::from_diagonal(&Vec8::from_iterator(std.iter().map(|s| s * s)));
        Self { mean, covariance }
    }

    pub fn mean(&self) -> &Vec8 {
        &self.mean
    }

    pub fn covariance(&self) -> &Mat8 {
        &self.covariance
    }

    /// Current state as a box; the state can momentarily describe a box the
    /// detector never produced, so extents are clamped positive.
    pub fn bbox(&self) -> BBox {
        let aspect = self.mean[2].max(MIN_EXTENT);
        let height = self.mean[3].max(MIN_EXTENT);
        BBox::from_cah(self.mean[0], self.mean[1], aspect, height)
            .expect("clamped extents always form a valid box")
    }

    fn process_noise(&self) -> Mat8 {
        let h = self.mean[3].max(MIN_EXTENT);
        let std = [
            STD_WEIGHT_POSITION * h,
            STD_WEIGHT_POSITION * h,
            ASPECT_POSITION_STD,
            STD_WEIGHT_POSITION * h,
            STD_WEIGHT_VELOCITY * h,
            STD_WEIGHT_VELOCITY * h,
            ASPECT_VELOCITY_STD,
            STD_WEIGHT_VELOCITY * h,
        ];
        Mat8::from_diagonal(&Vec8::from_iterator(std.iter().map(|s| s * s)))
    }

    fn measurement_noise(&self) -> Mat4 {
        let h = self.mean[3].max(MIN_EXTENT);
        let std = [
            STD_WEIGHT_POSITION * h,
            STD_WEIGHT_POSITION * h,
            ASPECT_MEASUREMENT_STD,
            STD_WEIGHT_POSITION * h,
        ];
        Mat4::from_diagonal(&Vec4::from_iterator(std.iter().map(|s| s * s)))
    }

    /// Advances one frame under the constant-velocity model.
    pub fn predict(&self) -> Self {
        let f = motion_matrix();
        let q = self.process_noise();
        Self {
            mean: f * self.mean,
            covariance: f * self.covariance * f.transpose() + q,
        }
    }

    /// Standard measurement update from a matched detection.
    pub fn update(&self, detection: &Detection) -> Result<Self, KalmanError> {
        let z = measurement_of(&detection.bbox);
        let h = observation_matrix();
        let r = self.measurement_noise();

        let projected_mean = h * self.mean;
        let s = h * self.covariance * h.transpose() + r;
        let chol = s.cholesky().ok_or(KalmanError::NumericalFailure)?;

        // K = P Hᵀ S⁻¹, via solving S Kᵀ = H Pᵀ
        let kt = chol.solve(&(h * self.covariance.transpose()));
        let k = kt.transpose();

        let innovation = z - projected_mean;
        let mut mean = self.mean + k * innovation;
        mean[2] = mean[2].max(MIN_EXTENT);
        mean[3] = mean[3].max(MIN_EXTENT);
        let covariance = self.covariance - k * s * k.transpose();
        Ok(Self { mean, covariance })
    }
}
