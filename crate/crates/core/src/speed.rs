//! Metric speed estimation: image-space anchors projected through the road
//! calibration, windowed distance/time samples, and the reduction from many
//! samples to one reported speed per vehicle.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    anchor_of, estimate_homography, transform_point, BBox, GeometryError, Homography, Point2, Quad,
    CORNER_RESIDUAL_TOL,
};

/// Anchors this far outside the target rectangle (fraction of each target
/// dimension) are still accepted; farther out the projection is unreliable.
pub const ROI_MARGIN_FRAC: f64 = 0.05;

pub const MPS_TO_KMH: f64 = 3.6;

#[derive(Debug, Error, PartialEq)]
pub enum SpeedError {
    #[error("frame {frame} is not after the last stored frame {last}")]
    NonMonotonicFrame { frame: u64, last: u64 },
    #[error("cannot assign a speed from an empty sample list")]
    EmptySamples,
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Camera-site calibration: the pixel quad covering the surveilled road
/// stretch, its metric dimensions, and the solved homography between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub camera_id: String,
    pub location: String,
    pub fps: f64,
    pub speed_limit_kmh: f64,
    pub source_quad: Quad,
    pub target_width_m: f64,
    pub target_length_m: f64,
    pub homography: Homography,
}

impl Calibration {
    /// Solves the homography from the corner correspondence and validates
    /// the scalar fields.
    #[allow(clippy::too_many_arguments)]
    pub fn solve(
        camera_id: impl Into<String>,
        location: impl Into<String>,
        fps: f64,
        speed_limit_kmh: f64,
        source_quad: Quad,
        target_width_m: f64,
        target_length_m: f64,
    ) -> Result<Self, SpeedError> {
        let target = Quad::rect(target_width_m, target_length_m)
            .map_err(|e| SpeedError::InvalidCalibration(e.to_string()))?;
        let homography = estimate_homography(&source_quad, &target)?;
        let cal = Self {
            camera_id: camera_id.into(),
            location: location.into(),
            fps,
            speed_limit_kmh,
            source_quad,
            target_width_m,
            target_length_m,
            homography,
        };
        cal.validate()?;
        Ok(cal)
    }

    /// Checks scalar ranges and that the stored homography still maps the
    /// source corners onto the target rectangle.
    pub fn validate(&self) -> Result<(), SpeedError> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(SpeedError::InvalidCalibration("fps must be > 0".into()));
        }
        if !(self.target_width_m > 0.0 && self.target_length_m > 0.0) {
            return Err(SpeedError::InvalidCalibration(
                "target dimensions must be > 0".into(),
            ));
        }
        if self.speed_limit_kmh < 0.0 {
            return Err(SpeedError::InvalidCalibration(
                "speed limit must be >= 0".into(),
            ));
        }
        let target = Quad::rect(self.target_width_m, self.target_length_m)
            .map_err(|e| SpeedError::InvalidCalibration(e.to_string()))?;
        let tol = CORNER_RESIDUAL_TOL * target.diagonal();
        for (s, t) in self.source_quad.corners().iter().zip(target.corners()) {
            let mapped = transform_point(&self.homography, *s)?;
            if mapped.distance(&t) > tol {
                return Err(SpeedError::InvalidCalibration(format!(
                    "stored homography misses a target corner by {}",
                    mapped.distance(&t)
                )));
            }
        }
        Ok(())
    }

    /// Corner-mapping residuals of the stored homography, in target units.
    pub fn corner_residuals(&self) -> Result<[f64; 4], SpeedError> {
        let target = Quad::rect(self.target_width_m, self.target_length_m)
            .map_err(|e| SpeedError::InvalidCalibration(e.to_string()))?;
        let mut out = [0.0; 4];
        for (i, (s, t)) in self
            .source_quad
            .corners()
            .iter()
            .zip(target.corners())
            .enumerate()
        {
            out[i] = transform_point(&self.homography, *s)?.distance(&t);
        }
        Ok(out)
    }
}

/// Reduction from a track's many window samples to one reported speed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedPolicy {
    #[default]
    Max,
    Mode,
    Min,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedSample {
    pub frame_index: u64,
    pub speed_kmh: f64,
}

/// Windowing parameters; `window` defaults to one second of frames and
/// `min_samples` to half of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedParams {
    pub window: usize,
    pub min_samples: usize,
    pub policy: SpeedPolicy,
    /// Measure displacement along the travel axis only instead of the full
    /// 2-D euclidean displacement.
    pub axis_only: bool,
}

impl SpeedParams {
    pub fn for_fps(fps: f64) -> Self {
        let window = (fps.round() as usize).max(2);
        Self {
            window,
            min_samples: (window / 2).max(2),
            policy: SpeedPolicy::Max,
            axis_only: false,
        }
    }
}

/// Bounded per-track history of metric anchor points.
#[derive(Debug, Clone, Default)]
pub struct AnchorHistory {
    entries: VecDeque<(u64, Point2)>,
}

impl AnchorHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &(u64, Point2)> {
        self.entries.iter()
    }

    /// Projects the box anchor into target space and appends it. Anchors
    /// beyond the ROI margin are dropped without touching the history;
    /// returns whether the anchor was stored.
    pub fn push(
        &mut self,
        frame: u64,
        bbox: &BBox,
        cal: &Calibration,
        window: usize,
    ) -> Result<bool, SpeedError> {
        if let Some(&(last, _)) = self.entries.back() {
            if frame <= last {
                return Err(SpeedError::NonMonotonicFrame { frame, last });
            }
        }
        let p = transform_point(&cal.homography, anchor_of(bbox))?;
        let mx = ROI_MARGIN_FRAC * cal.target_width_m;
        let my = ROI_MARGIN_FRAC * cal.target_length_m;
        if p.x < -mx || p.x > cal.target_width_m + mx || p.y < -my || p.y > cal.target_length_m + my
        {
            return Ok(false);
        }
        self.entries.push_back((frame, p));
        while self.entries.len() > window {
            self.entries.pop_front();
        }
        Ok(true)
    }
}

/// Speed over the current window: endpoint displacement divided by endpoint
/// time span. `None` until `min_samples` anchors exist.
pub fn instantaneous_speed(
    history: &AnchorHistory,
    cal: &Calibration,
    params: &SpeedParams,
) -> Option<SpeedSample> {
    if history.len() < params.min_samples.max(2) {
        return None;
    }
    let &(f0, p0) = history.entries.front()?;
    let &(f1, p1) = history.entries.back()?;
    let dt = (f1 - f0) as f64 / cal.fps;
    if dt <= 0.0 {
        return None;
    }
    let dist = if params.axis_only {
        (p1.y - p0.y).abs()
    } else {
        p0.distance(&p1)
    };
    Some(SpeedSample {
        frame_index: f1,
        speed_kmh: MPS_TO_KMH * dist / dt,
    })
}

/// Reduces the sample list to the single reported speed.
pub fn assign_speed(samples: &[SpeedSample], policy: SpeedPolicy) -> Result<f64, SpeedError> {
    if samples.is_empty() {
        return Err(SpeedError::EmptySamples);
    }
    let raw: Vec<f64> = samples.iter().map(|s| s.speed_kmh).collect();
    Ok(match policy {
        SpeedPolicy::Max => raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        SpeedPolicy::Min => raw.iter().copied().fold(f64::INFINITY, f64::min),
        SpeedPolicy::Mode => {
            let mut counts = std::collections::BTreeMap::new();
            for v in &raw {
                *counts.entry(v.round() as i64).or_insert(0usize) += 1;
            }
            // ties resolve to the larger value: scan ascending, >= keeps last
            let mut best = (i64::MIN, 0usize);
            for (&value, &count) in &counts {
                if count >= best.1 {
                    best = (value, count);
                }
            }
            best.0 as f64
        }
        SpeedPolicy::Median => {
            let mut rounded: Vec<i64> = raw.iter().map(|v| v.round() as i64).collect();
            rounded.sort_unstable();
            // even count takes the larger of the two central values
            rounded[rounded.len() / 2] as f64
        }
    })
}
