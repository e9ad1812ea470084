//! Per-stream pipeline: detections → tracks → metric anchors and speed
//! samples → plate identity → violation tickets. One engine instance owns
//! one stream and consumes frames strictly in order; everything it emits is
//! derived from stream timestamps, never the wall clock, so a run is
//! replayable byte for byte.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enforcement::sms::{SmsClient, SmsRequest};
use crate::enforcement::{
    detect_violation, make_ticket, DeliveryState, EnforcementParams, Registry, RegistryEntry,
    TicketInputs, ViolationTicket,
};
use crate::geometry::BBox;
use crate::plate::{
    aggregate_identity, match_plate_to_vehicle, PlateGrammar, PlateIdentity, PlateObservation,
};
use crate::speed::{
    assign_speed, instantaneous_speed, AnchorHistory, Calibration, SpeedParams, SpeedSample,
};
use crate::stream::{FrameRecord, StreamError};
use crate::track::{Detection, TrackStatus, Tracker, TrackerParams};
use crate::TrackId;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("frame {frame}, {stage} stage: {message}")]
    Stage {
        frame: u64,
        stage: &'static str,
        message: String,
    },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Resolved engine parameters for one stream.
#[derive(Debug, Clone)]
pub struct EngineSettings {
    pub calibration: Calibration,
    pub tracker: TrackerParams,
    pub speed: SpeedParams,
    pub grammar: PlateGrammar,
    pub enforcement: EnforcementParams,
    /// Detection classes treated as vehicles; empty accepts everything.
    pub vehicle_classes: Vec<String>,
}

impl EngineSettings {
    pub fn new(calibration: Calibration) -> Self {
        let speed = SpeedParams::for_fps(calibration.fps);
        Self {
            calibration,
            tracker: TrackerParams::default(),
            speed,
            grammar: PlateGrammar::default(),
            enforcement: EnforcementParams::default(),
            vehicle_classes: vec![
                "car".to_string(),
                "truck".to_string(),
                "bus".to_string(),
                "motorcycle".to_string(),
            ],
        }
    }
}

/// Final per-vehicle record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub track_id: TrackId,
    pub class: String,
    pub first_frame: u64,
    pub last_frame: u64,
    pub first_timestamp_ms: i64,
    pub last_timestamp_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate: Option<PlateIdentity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<RegistryEntry>,
    pub speed_samples: Vec<SpeedSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_speed_kmh: Option<f64>,
    pub violation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticket_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub track_id: TrackId,
    pub class: String,
    pub bbox: BBox,
    /// Live windowed estimate at this frame, once enough anchors exist.
    pub speed_kmh: Option<f64>,
}

/// Per-frame sidecar record standing in for rendered output video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_index: u64,
    pub timestamp_ms: i64,
    pub boxes: Vec<AnnotatedBox>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub reports: Vec<TrackReport>,
    pub annotations: Vec<FrameAnnotation>,
    pub tickets: Vec<ViolationTicket>,
    pub frames_processed: u64,
}

#[derive(Debug)]
struct TrackAgg {
    class: String,
    first_frame: u64,
    last_frame: u64,
    first_timestamp_ms: i64,
    last_timestamp_ms: i64,
    history: AnchorHistory,
    samples: Vec<SpeedSample>,
    plates: Vec<PlateObservation>,
    confirmed: bool,
}

pub struct Engine {
    settings: EngineSettings,
    registry: Registry,
    sms: Option<SmsClient>,
    tracker: Tracker,
    aggs: BTreeMap<TrackId, TrackAgg>,
    issued: HashSet<String>,
    reports: Vec<TrackReport>,
    tickets: Vec<ViolationTicket>,
    annotations: Vec<FrameAnnotation>,
    frames_processed: u64,
}

impl Engine {
    pub fn new(settings: EngineSettings, registry: Registry, sms: Option<SmsClient>) -> Self {
        let tracker = Tracker::new(settings.tracker.clone());
        Self {
            settings,
            registry,
            sms,
            tracker,
            aggs: BTreeMap::new(),
            issued: HashSet::new(),
            reports: Vec::new(),
            tickets: Vec::new(),
            annotations: Vec::new(),
            frames_processed: 0,
        }
    }

    /// Runs an entire stream through a fresh engine.
    pub fn run<I>(
        settings: EngineSettings,
        registry: Registry,
        sms: Option<SmsClient>,
        frames: I,
    ) -> Result<RunOutput, EngineError>
    where
        I: IntoIterator<Item = Result<FrameRecord, StreamError>>,
    {
        let mut engine = Engine::new(settings, registry, sms);
        for frame in frames {
            engine.process_frame(&frame?)?;
        }
        engine.finish()
    }

    fn is_vehicle(&self, class: &str) -> bool {
        self.settings.vehicle_classes.is_empty()
            || self.settings.vehicle_classes.iter().any(|c| c == class)
    }

    pub fn process_frame(&mut self, frame: &FrameRecord) -> Result<(), EngineError> {
        let stage = |stage: &'static str, message: String| EngineError::Stage {
            frame: frame.frame_index,
            stage,
            message,
        };

        // detection: class filter, keeping the stream indices
        let mut det_indices = Vec::new();
        let mut dets = Vec::new();
        for (i, d) in frame.detections.iter().enumerate() {
            if self.is_vehicle(&d.class) {
                det_indices.push(i);
                dets.push(Detection {
                    bbox: d.bbox,
                    score: d.score,
                    class: d.class.clone(),
                });
            }
        }

        // tracking
        let step = self
            .tracker
            .step(&dets)
            .map_err(|e| stage("tracking", e.to_string()))?;

        let status_of: BTreeMap<TrackId, TrackStatus> = self
            .tracker
            .tracks()
            .iter()
            .map(|t| (t.id, t.status))
            .collect();

        // labelled vehicle boxes for this frame, in detection order
        let vehicles: Vec<(TrackId, BBox)> = step
            .labels
            .iter()
            .zip(&dets)
            .filter_map(|(label, d)| label.map(|id| (id, d.bbox)))
            .collect();

        // speed path: project anchors, emit window samples
        let mut annotated = Vec::new();
        for (label, d) in step.labels.iter().zip(&dets) {
            let Some(id) = label else { continue };
            let agg = self.aggs.entry(*id).or_insert_with(|| TrackAgg {
                class: d.class.clone(),
                first_frame: frame.frame_index,
                last_frame: frame.frame_index,
                first_timestamp_ms: frame.timestamp_ms,
                last_timestamp_ms: frame.timestamp_ms,
                history: AnchorHistory::new(),
                samples: Vec::new(),
                plates: Vec::new(),
                confirmed: false,
            });
            agg.last_frame = frame.frame_index;
            agg.last_timestamp_ms = frame.timestamp_ms;
            if status_of.get(id) == Some(&TrackStatus::Confirmed) {
                agg.confirmed = true;
            }

            let appended = agg
                .history
                .push(
                    frame.frame_index,
                    &d.bbox,
                    &self.settings.calibration,
                    self.settings.speed.window,
                )
                .map_err(|e| stage("speed", e.to_string()))?;
            let mut live_speed = None;
            if appended {
                if let Some(sample) = instantaneous_speed(
                    &agg.history,
                    &self.settings.calibration,
                    &self.settings.speed,
                ) {
                    live_speed = Some(sample.speed_kmh);
                    agg.samples.push(sample);
                }
            }
            annotated.push(AnnotatedBox {
                track_id: *id,
                class: d.class.clone(),
                bbox: d.bbox,
                speed_kmh: live_speed,
            });
        }

        // plate path: every plate payload on the frame is re-associated by
        // containment against this frame's labelled vehicle boxes
        for &i in &det_indices {
            let Some(payload) = &frame.detections[i].plate else {
                continue;
            };
            if let Some(id) = match_plate_to_vehicle(&payload.bbox, &vehicles) {
                if let Some(agg) = self.aggs.get_mut(&id) {
                    agg.plates.push(PlateObservation {
                        bbox: payload.bbox,
                        text: payload.text.clone(),
                        text_score: payload.text_score,
                        frame_index: frame.frame_index,
                    });
                }
            }
        }

        self.annotations.push(FrameAnnotation {
            frame_index: frame.frame_index,
            timestamp_ms: frame.timestamp_ms,
            boxes: annotated,
        });

        // integration: tracks that ended this frame get their final report
        let mut ended = step.removed;
        ended.sort_unstable();
        for id in ended {
            self.finalize_track(id, frame.frame_index)?;
        }

        self.frames_processed += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunOutput, EngineError> {
        let last_frame = self.frames_processed;
        let mut remaining = self.tracker.finish();
        remaining.sort_unstable();
        for id in remaining {
            self.finalize_track(id, last_frame)?;
        }
        self.reports.sort_by_key(|r| r.track_id);
        Ok(RunOutput {
            reports: self.reports,
            annotations: self.annotations,
            tickets: self.tickets,
            frames_processed: self.frames_processed,
        })
    }

    fn finalize_track(&mut self, id: TrackId, at_frame: u64) -> Result<(), EngineError> {
        let Some(agg) = self.aggs.remove(&id) else {
            return Ok(());
        };
        // tracks that never confirmed are detector noise, not vehicles
        if !agg.confirmed {
            return Ok(());
        }

        let plate = aggregate_identity(&agg.plates, &self.settings.grammar);
        let owner = plate.as_ref().and_then(|p| self.registry.lookup(&p.text));

        let assigned = if agg.samples.is_empty() {
            None
        } else {
            Some(
                assign_speed(&agg.samples, self.settings.speed.policy).map_err(|e| {
                    EngineError::Stage {
                        frame: at_frame,
                        stage: "speed-assignment",
                        message: e.to_string(),
                    }
                })?,
            )
        };

        let violation = assigned.is_some_and(|s| {
            detect_violation(
                s,
                &self.settings.calibration,
                self.settings.enforcement.margin_kmh,
            )
        });

        let mut ticket_id = None;
        if violation {
            if let (Some(speed), Some(identity)) = (assigned, plate.as_ref()) {
                let mut ticket = make_ticket(
                    TicketInputs {
                        plate: &identity.text,
                        track_id: id,
                        estimated_speed_kmh: speed,
                        policy: self.settings.speed.policy,
                        cal: &self.settings.calibration,
                        timestamp_ms: agg.last_timestamp_ms,
                        owner: owner.clone(),
                        cooldown_minutes: self.settings.enforcement.cooldown_minutes,
                    },
                    &self.issued,
                );
                self.issued.insert(ticket.ticket_id.clone());
                self.dispatch(&mut ticket);
                ticket_id = Some(ticket.ticket_id.clone());
                self.tickets.push(ticket);
            }
        }

        self.reports.push(TrackReport {
            track_id: id,
            class: agg.class,
            first_frame: agg.first_frame,
            last_frame: agg.last_frame,
            first_timestamp_ms: agg.first_timestamp_ms,
            last_timestamp_ms: agg.last_timestamp_ms,
            plate,
            owner,
            speed_samples: agg.samples,
            assigned_speed_kmh: assigned,
            violation,
            ticket_id,
        });
        Ok(())
    }

    /// Sends a pending ticket when a gateway client is configured.
    /// Suppressed tickets are never transmitted.
    fn dispatch(&self, ticket: &mut ViolationTicket) {
        if ticket.delivery != DeliveryState::Pending {
            return;
        }
        let Some(client) = &self.sms else { return };
        let Some(owner) = &ticket.owner else { return };
        let request = SmsRequest {
            to: owner.phone.clone(),
            message: crate::enforcement::render_sms(ticket),
            idempotency_key: ticket.ticket_id.clone(),
        };
        ticket.delivery = match client.send(&request) {
            Ok(result) => DeliveryState::Sent {
                message_id: result.message_id,
            },
            Err(e) => DeliveryState::Failed {
                reason: e.to_string(),
            },
        };
    }
}

pub fn write_reports(path: impl AsRef<Path>, reports: &[TrackReport]) -> Result<(), EngineError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(io_invalid)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<TrackReport>, EngineError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(io_invalid)?);
    }
    Ok(out)
}

pub fn write_annotations(
    path: impl AsRef<Path>,
    annotations: &[FrameAnnotation],
) -> Result<(), EngineError> {
    let mut w = BufWriter::new(File::create(path)?);
    for a in annotations {
        serde_json::to_writer(&mut w, a).map_err(io_invalid)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn io_invalid(e: serde_json::Error) -> EngineError {
    EngineError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
