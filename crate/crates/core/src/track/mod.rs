//! Multi-object tracker: stable IDs for vehicle detections across frames.
//!
//! Association cascade: high-confidence detections are matched to live
//! tracks first, then low-confidence detections rescue tracks that would
//! otherwise go unmatched (occlusions and detector flicker mostly produce
//! low-score boxes, not missing ones).

pub mod assign;
pub mod kalman;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assign::{assign, Assignment};
pub use kalman::{KalmanError, KalmanState};

use crate::geometry::{iou, BBox};
use crate::TrackId;

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("kalman update failed on track {track}: {source}")]
    Kalman {
        track: TrackId,
        #[source]
        source: KalmanError,
    },
}

/// One class-filtered detector output box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Lost,
    Removed,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: TrackId,
    pub state: KalmanState,
    pub status: TrackStatus,
    /// Frames since the last matched detection; 0 while matched.
    pub frames_since_update: u32,
    /// Consecutive matches; confirmation requires `min_hits` of them.
    pub hits: u32,
    pub class: String,
    pub last_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackerMode {
    /// Two-stage cascade with low-confidence rescue.
    ByteTrack,
    /// Single-stage baseline: high-confidence detections only.
    Sort,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    pub high_thresh: f64,
    pub low_thresh: f64,
    /// IoU-cost gate (1 - IoU) for the high-confidence stage.
    pub stage1_max_cost: f64,
    /// IoU-cost gate for the low-confidence rescue stage.
    pub stage2_max_cost: f64,
    /// IoU-cost gate when matching leftover high detections to tentative tracks.
    pub tentative_max_cost: f64,
    pub min_hits: u32,
    /// Frames a track may stay unmatched before removal.
    pub track_buffer: u32,
    pub mode: TrackerMode,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            high_thresh: 0.5,
            low_thresh: 0.1,
            stage1_max_cost: 0.8,
            stage2_max_cost: 0.5,
            tentative_max_cost: 0.7,
            min_hits: 3,
            track_buffer: 30,
            mode: TrackerMode::ByteTrack,
        }
    }
}

/// Outcome of one frame step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Track ID per input detection; `None` for detections that neither
    /// matched a track nor spawned one.
    pub labels: Vec<Option<TrackId>>,
    /// Tracks that reached their terminal state this frame.
    pub removed: Vec<TrackId>,
}

/// Owns every live track of one stream. Strictly sequential: frames must be
/// fed in order, one tracker per stream.
#[derive(Debug, Clone)]
pub struct Tracker {
    params: TrackerParams,
    tracks: Vec<Track>,
    next_id: TrackId,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: 1,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Ingests one frame of class-filtered detections.
    pub fn step(&mut self, detections: &[Detection]) -> Result<StepResult, TrackError> {
        for t in &mut self.tracks {
            t.state = t.state.predict();
        }
        let initial_status: Vec<TrackStatus> = self.tracks.iter().map(|t| t.status).collect();

        let high: Vec<usize> = (0..detections.len())
            .filter(|&i| detections[i].score >= self.params.high_thresh)
            .collect();
        let low: Vec<usize> = (0..detections.len())
            .filter(|&i| {
                detections[i].score >= self.params.low_thresh
                    && detections[i].score < self.params.high_thresh
            })
            .collect();

        let mut labels: Vec<Option<TrackId>> = vec![None; detections.len()];
        let mut track_matched = vec![false; self.tracks.len()];
        let mut det_matched = vec![false; detections.len()];

        // Stage 1: high-confidence detections vs confirmed and lost tracks.
        // The baseline mode has no later stages, so every track competes here.
        let pool1: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| match self.params.mode {
                TrackerMode::ByteTrack => matches!(
                    self.tracks[i].status,
                    TrackStatus::Confirmed | TrackStatus::Lost
                ),
                TrackerMode::Sort => true,
            })
            .collect();
        self.associate(
            &pool1,
            &high,
            detections,
            self.params.stage1_max_cost,
            &mut labels,
            &mut track_matched,
            &mut det_matched,
        )?;

        if self.params.mode == TrackerMode::ByteTrack {
            // Stage 2: rescue tracks that were confirmed coming into this
            // frame with the low-confidence leftovers.
            let pool2: Vec<usize> = (0..self.tracks.len())
                .filter(|&i| !track_matched[i] && initial_status[i] == TrackStatus::Confirmed)
                .collect();
            let low_free: Vec<usize> = low.iter().copied().filter(|&i| !det_matched[i]).collect();
            self.associate(
                &pool2,
                &low_free,
                detections,
                self.params.stage2_max_cost,
                &mut labels,
                &mut track_matched,
                &mut det_matched,
            )?;

            // Tentative tracks only ever see high-confidence detections; a
            // track must earn confirmation on solid evidence.
            let pool3: Vec<usize> = (0..self.tracks.len())
                .filter(|&i| !track_matched[i] && self.tracks[i].status == TrackStatus::Tentative)
                .collect();
            let high_free: Vec<usize> = high.iter().copied().filter(|&i| !det_matched[i]).collect();
            self.associate(
                &pool3,
                &high_free,
                detections,
                self.params.tentative_max_cost,
                &mut labels,
                &mut track_matched,
                &mut det_matched,
            )?;
        }

        // Lifecycle for unmatched tracks. A tentative track misses once and
        // is gone: confirmation requires consecutive hits.
        for (i, t) in self.tracks.iter_mut().enumerate() {
            if track_matched[i] {
                continue;
            }
            t.hits = 0;
            match t.status {
                TrackStatus::Tentative => t.status = TrackStatus::Removed,
                TrackStatus::Confirmed | TrackStatus::Lost => {
                    t.frames_since_update += 1;
                    t.status = if t.frames_since_update > self.params.track_buffer {
                        TrackStatus::Removed
                    } else {
                        TrackStatus::Lost
                    };
                }
                TrackStatus::Removed => unreachable!("removed tracks are purged each step"),
            }
        }

        // Unmatched high-confidence detections spawn fresh tracks.
        for &di in &high {
            if det_matched[di] {
                continue;
            }
            let d = &detections[di];
            let id = self.next_id;
            self.next_id += 1;
            let status = if self.params.min_hits <= 1 {
                TrackStatus::Confirmed
            } else {
                TrackStatus::Tentative
            };
            self.tracks.push(Track {
                id,
                state: KalmanState::initiate(d),
                status,
                frames_since_update: 0,
                hits: 1,
                class: d.class.clone(),
                last_score: d.score,
            });
            labels[di] = Some(id);
        }

        let removed: Vec<TrackId> = self
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Removed)
            .map(|t| t.id)
            .collect();
        self.tracks.retain(|t| t.status != TrackStatus::Removed);

        Ok(StepResult { labels, removed })
    }

    /// Drains every remaining track, returning their IDs; used at stream end.
    pub fn finish(&mut self) -> Vec<TrackId> {
        let ids = self.tracks.iter().map(|t| t.id).collect();
        self.tracks.clear();
        ids
    }

    #[allow(clippy::too_many_arguments)]
    fn associate(
        &mut self,
        track_idx: &[usize],
        det_idx: &[usize],
        detections: &[Detection],
        max_cost: f64,
        labels: &mut [Option<TrackId>],
        track_matched: &mut [bool],
        det_matched: &mut [bool],
    ) -> Result<(), TrackError> {
        if track_idx.is_empty() || det_idx.is_empty() {
            return Ok(());
        }
        let cost: Vec<Vec<f64>> = track_idx
            .iter()
            .map(|&ti| {
                let tb = self.tracks[ti].state.bbox();
                det_idx
                    .iter()
                    .map(|&di| 1.0 - iou(&tb, &detections[di].bbox))
                    .collect()
            })
            .collect();
        for (r, c) in assign(&cost, max_cost).pairs {
            let ti = track_idx[r];
            let di = det_idx[c];
            let t = &mut self.tracks[ti];
            t.state = t
                .state
                .update(&detections[di])
                .map_err(|source| TrackError::Kalman {
                    track: t.id,
                    source,
                })?;
            t.frames_since_update = 0;
            t.hits += 1;
            t.last_score = detections[di].score;
            match t.status {
                TrackStatus::Tentative => {
                    if t.hits >= self.params.min_hits {
                        t.status = TrackStatus::Confirmed;
                    }
                }
                TrackStatus::Lost => t.status = TrackStatus::Confirmed,
                TrackStatus::Confirmed => {}
                TrackStatus::Removed => unreachable!(),
            }
            track_matched[ti] = true;
            det_matched[di] = true;
            labels[di] = Some(t.id);
        }
        Ok(())
    }
}
