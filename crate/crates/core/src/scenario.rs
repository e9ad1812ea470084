//! Synthetic calibrated scenes with known commanded speeds.
//!
//! Vehicles advance along the target rectangle at constant metric speed;
//! their anchors are back-projected through the inverse homography and
//! wrapped in detector-shaped boxes, optionally corrupted with jitter,
//! dropped detections and score noise. Same spec + same seed means
//! byte-identical output, and zero-noise output is seed-independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{transform_point, BBox, GeometryError, Point2};
use crate::speed::{Calibration, MPS_TO_KMH};
use crate::stream::{FrameRecord, PlatePayload, StreamDetection, TruthRecord};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub entry_frame: u64,
    pub speed_kmh: f64,
    /// Lateral position in the target rectangle, meters from its left edge.
    pub lane_offset_m: f64,
    pub plate: String,
    #[serde(default = "default_class")]
    pub class: String,
}

fn default_class() -> String {
    "car".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Std-dev of gaussian jitter applied to box corners, pixels.
    pub bbox_jitter_px: f64,
    /// Probability that a vehicle's detection is missing on a frame.
    pub drop_probability: f64,
    pub score_min: f64,
    pub score_max: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            bbox_jitter_px: 0.0,
            drop_probability: 0.0,
            score_min: 0.9,
            score_max: 0.9,
        }
    }
}

/// Linear perspective proxy for box size: height grows with image y, so
/// vehicles loom as they approach the camera. Only the bottom-center anchor
/// feeds the speed path, so a proxy is enough.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxModel {
    pub base_height_px: f64,
    pub height_per_y_px: f64,
    /// Box width over height.
    pub aspect: f64,
}

impl Default for BoxModel {
    fn default() -> Self {
        Self {
            base_height_px: 18.0,
            height_per_y_px: 0.12,
            aspect: 1.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub calibration: Calibration,
    pub duration_frames: u64,
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub boxes: BoxModel,
}

impl ScenarioSpec {
    fn validate(&self) -> Result<(), ScenarioError> {
        let spec_err = |m: String| Err(ScenarioError::Spec(m));
        if self.duration_frames == 0 {
            return spec_err("duration_frames must be > 0".into());
        }
        let n = &self.noise;
        if !(0.0..1.0).contains(&n.drop_probability) {
            return spec_err(format!(
                "drop_probability {} outside [0, 1)",
                n.drop_probability
            ));
        }
        if n.bbox_jitter_px < 0.0 {
            return spec_err("bbox_jitter_px must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&n.score_min)
            || !(0.0..=1.0).contains(&n.score_max)
            || n.score_min > n.score_max
        {
            return spec_err(format!(
                "score range [{}, {}] invalid",
                n.score_min, n.score_max
            ));
        }
        if self.boxes.base_height_px <= 0.0 || self.boxes.aspect <= 0.0 {
            return spec_err("box model needs positive base height and aspect".into());
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            if v.speed_kmh <= 0.0 {
                return spec_err(format!("vehicle {i}: commanded speed must be > 0"));
            }
            if !(0.0..=self.calibration.target_width_m).contains(&v.lane_offset_m) {
                return spec_err(format!(
                    "vehicle {i}: lane offset {} outside the target width",
                    v.lane_offset_m
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub frames: Vec<FrameRecord>,
    pub truth: Vec<TruthRecord>,
}

fn timestamp_for(frame: u64, fps: f64) -> i64 {
    (frame as f64 * 1000.0 / fps).round() as i64
}

/// Generates the detection stream and the matching truth table.
pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scenario, ScenarioError> {
    spec.validate()?;
    let cal = &spec.calibration;
    let pixel_of = cal.homography.inverse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Noise paths draw from the rng only when active, so a zero-noise spec
    // produces identical bytes for every seed.
    let jitter = (spec.noise.bbox_jitter_px > 0.0)
        .then(|| Normal::new(0.0, spec.noise.bbox_jitter_px).expect("positive sigma"));

    let mut truth = Vec::with_capacity(spec.vehicles.len());
    for (i, v) in spec.vehicles.iter().enumerate() {
        let step = v.speed_kmh / MPS_TO_KMH / cal.fps;
        let crossing = (cal.target_length_m / step).floor() as u64;
        let exit_frame = (v.entry_frame + crossing).min(spec.duration_frames - 1);
        truth.push(TruthRecord {
            vehicle_id: i as u32,
            plate: v.plate.clone(),
            speed_kmh: v.speed_kmh,
            entry_frame: v.entry_frame,
            exit_frame,
            entry_timestamp_ms: timestamp_for(v.entry_frame, cal.fps),
            exit_timestamp_ms: timestamp_for(exit_frame, cal.fps),
        });
    }

    let mut frames = Vec::with_capacity(spec.duration_frames as usize);
    for frame in 0..spec.duration_frames {
        let mut detections = Vec::new();
        for v in &spec.vehicles {
            if frame < v.entry_frame {
                continue;
            }
            let step = v.speed_kmh / MPS_TO_KMH / cal.fps;
            let travelled = (frame - v.entry_frame) as f64 * step;
            if travelled > cal.target_length_m {
                continue;
            }
            if spec.noise.drop_probability > 0.0 && rng.gen_bool(spec.noise.drop_probability) {
                continue;
            }

            let anchor = transform_point(&pixel_of, Point2::new(v.lane_offset_m, travelled))?;
            let height = spec.boxes.base_height_px + spec.boxes.height_per_y_px * anchor.y;
            if height <= 1.0 {
                return Err(ScenarioError::Spec(format!(
                    "box model collapses at image y {:.1}",
                    anchor.y
                )));
            }
            let width = spec.boxes.aspect * height;
            let mut corners = [
                anchor.x - width / 2.0,
                anchor.y - height,
                anchor.x + width / 2.0,
                anchor.y,
            ];
            let mut plate_center = Point2::new(anchor.x, anchor.y - 0.12 * height);
            if let Some(normal) = &jitter {
                for c in &mut corners {
                    *c += normal.sample(&mut rng);
                }
                plate_center.x += normal.sample(&mut rng);
                plate_center.y += normal.sample(&mut rng);
            }
            let bbox = BBox::new(
                corners[0].min(corners[2] - 1.0),
                corners[1].min(corners[3] - 1.0),
                corners[2],
                corners[3],
            )
            .expect("jittered box keeps positive extent by construction");

            let plate_w = 0.35 * width;
            let plate_h = 0.12 * height;
            let plate_bbox = BBox::new(
                plate_center.x - plate_w / 2.0,
                plate_center.y - plate_h / 2.0,
                plate_center.x + plate_w / 2.0,
                plate_center.y + plate_h / 2.0,
            )
            .expect("plate box has positive extent");

            let score = if spec.noise.score_max > spec.noise.score_min {
                rng.gen_range(spec.noise.score_min..=spec.noise.score_max)
            } else {
                spec.noise.score_max
            };

            detections.push(StreamDetection {
                class: v.class.clone(),
                score,
                bbox,
                plate: Some(PlatePayload {
                    bbox: plate_bbox,
                    text: v.plate.clone(),
                    text_score: 0.9,
                }),
            });
        }
        frames.push(FrameRecord {
            frame_index: frame,
            timestamp_ms: timestamp_for(frame, cal.fps),
            detections,
        });
    }

    Ok(Scenario { frames, truth })
}
