//! Evaluation harness: speed accuracy against ground truth, single-class
//! average precision at IoU 0.5, and batch character-error-rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::TrackReport;
use crate::geometry::{iou, BBox};
use crate::plate::{cer, PlateError};
use crate::stream::{GunRecord, TruthRecord};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no truth record matched any track report")]
    NoMatches,
    #[error("truth list is empty")]
    EmptyTruth,
    #[error("no ground-truth boxes were provided")]
    NoGroundTruth,
    #[error(transparent)]
    Plate(#[from] PlateError),
}

/// Ground truth for a speed evaluation: either the synthetic truth table or
/// speed-gun records matched by timestamp.
#[derive(Debug, Clone)]
pub enum SpeedTruth {
    Synthetic(Vec<TruthRecord>),
    Gun(Vec<GunRecord>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedEvalRow {
    pub truth_label: String,
    pub truth_speed_kmh: f64,
    pub track_id: crate::TrackId,
    pub estimated_kmh: f64,
    pub abs_error_kmh: f64,
    pub within_margin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedEvalReport {
    pub margin_kmh: f64,
    pub matched: usize,
    pub mae_kmh: f64,
    pub max_abs_error_kmh: f64,
    pub fraction_within_margin: f64,
    pub rows: Vec<SpeedEvalRow>,
    /// Truth records that matched no track.
    pub unmatched: Vec<String>,
    /// Truth records that matched several tracks; reported, never resolved.
    pub ambiguous: Vec<String>,
}

fn match_synthetic<'a>(
    truth: &TruthRecord,
    reports: &'a [TrackReport],
) -> Result<Option<&'a TrackReport>, ()> {
    // plate identity is the primary join key for synthetic scenes
    let by_plate: Vec<&TrackReport> = reports
        .iter()
        .filter(|r| {
            r.assigned_speed_kmh.is_some()
                && r.plate.as_ref().is_some_and(|p| p.text == truth.plate)
        })
        .collect();
    match by_plate.len() {
        1 => return Ok(Some(by_plate[0])),
        n if n > 1 => return Err(()),
        _ => {}
    }
    // fall back to the track whose frame interval covers the crossing midpoint
    let mid = truth.entry_frame + (truth.exit_frame - truth.entry_frame) / 2;
    let by_interval: Vec<&TrackReport> = reports
        .iter()
        .filter(|r| r.assigned_speed_kmh.is_some() && r.first_frame <= mid && mid <= r.last_frame)
        .collect();
    match by_interval.len() {
        0 => Ok(None),
        1 => Ok(Some(by_interval[0])),
        _ => Err(()),
    }
}

fn match_gun<'a>(
    truth: &GunRecord,
    reports: &'a [TrackReport],
) -> Result<Option<&'a TrackReport>, ()> {
    // a gun snapshot belongs to the track whose observation interval
    // contains its timestamp
    let hits: Vec<&TrackReport> = reports
        .iter()
        .filter(|r| {
            r.assigned_speed_kmh.is_some()
                && r.first_timestamp_ms <= truth.timestamp_ms
                && truth.timestamp_ms <= r.last_timestamp_ms
        })
        .collect();
    match hits.len() {
        0 => Ok(None),
        1 => Ok(Some(hits[0])),
        _ => Err(()),
    }
}

/// Outcome of matching one truth record: a report, nothing, or several
/// candidates (ambiguous).
type MatchOutcome<'a> = Result<Option<&'a TrackReport>, ()>;

/// Compares assigned track speeds to ground truth. Matching is reported
/// per record: unmatched and ambiguous truths are listed, not guessed at.
pub fn evaluate_speeds(
    reports: &[TrackReport],
    truth: &SpeedTruth,
    margin_kmh: f64,
) -> Result<SpeedEvalReport, EvalError> {
    let pairs: Vec<(String, f64, MatchOutcome)> = match truth {
        SpeedTruth::Synthetic(records) => {
            if records.is_empty() {
                return Err(EvalError::EmptyTruth);
            }
            records
                .iter()
                .map(|t| {
                    (
                        format!("vehicle {}", t.vehicle_id),
                        t.speed_kmh,
                        match_synthetic(t, reports),
                    )
                })
                .collect()
        }
        SpeedTruth::Gun(records) => {
            if records.is_empty() {
                return Err(EvalError::EmptyTruth);
            }
            records
                .iter()
                .map(|t| {
                    (
                        format!("gun {}", t.serial),
                        t.measured_speed_kmh,
                        match_gun(t, reports),
                    )
                })
                .collect()
        }
    };

    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    let mut ambiguous = Vec::new();
    for (label, truth_speed, matched) in pairs {
        match matched {
            Ok(Some(report)) => {
                let est = report
                    .assigned_speed_kmh
                    .expect("matchers require an assigned speed");
                let abs_error = (est - truth_speed).abs();
                rows.push(SpeedEvalRow {
                    truth_label: label,
                    truth_speed_kmh: truth_speed,
                    track_id: report.track_id,
                    estimated_kmh: est,
                    abs_error_kmh: abs_error,
                    within_margin: abs_error <= margin_kmh,
                });
            }
            Ok(None) => unmatched.push(label),
            Err(()) => ambiguous.push(label),
        }
    }

    if rows.is_empty() {
        return Err(EvalError::NoMatches);
    }
    let matched = rows.len();
    let mae = rows.iter().map(|r| r.abs_error_kmh).sum::<f64>() / matched as f64;
    let max_abs = rows.iter().map(|r| r.abs_error_kmh).fold(0.0, f64::max);
    let within = rows.iter().filter(|r| r.within_margin).count() as f64 / matched as f64;
    Ok(SpeedEvalReport {
        margin_kmh,
        matched,
        mae_kmh: mae,
        max_abs_error_kmh: max_abs,
        fraction_within_margin: within,
        rows,
        unmatched,
        ambiguous,
    })
}

/// Ground truth and scored predictions for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub ground_truth: Vec<BBox>,
    /// (box, confidence score)
    pub predictions: Vec<(BBox, f64)>,
}

/// Average precision at IoU 0.5 for a single class: predictions are taken
/// in descending score order, each greedily matched to the best unmatched
/// ground-truth box in its image, and the precision-recall curve is
/// integrated with all-point interpolation.
pub fn map50(frames: &[DetectionFrame]) -> Result<f64, EvalError> {
    let total_gt: usize = frames.iter().map(|f| f.ground_truth.len()).sum();
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }

    // (score, frame index, prediction index), globally score-sorted;
    // stable sort keeps input order on equal scores
    let mut ranked: Vec<(f64, usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            f.predictions
                .iter()
                .enumerate()
                .map(move |(pi, (_, score))| (*score, fi, pi))
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut gt_used: Vec<Vec<bool>> = frames
        .iter()
        .map(|f| vec![false; f.ground_truth.len()])
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len()); // (recall, precision)
    for (_, fi, pi) in ranked {
        let (pred_box, _) = frames[fi].predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt_box) in frames[fi].ground_truth.iter().enumerate() {
            if gt_used[fi][gi] {
                continue;
            }
            let overlap = iou(&pred_box, gt_box);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, overlap)) if overlap >= 0.5 => {
                gt_used[fi][gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    if curve.is_empty() {
        return Ok(0.0);
    }

    // precision envelope from the right, then area under the step curve
    let mut envelope = curve.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in envelope {
        if recall > prev_recall {
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Mean character-error-rate over (predicted, truth) pairs.
pub fn cer_batch(pairs: &[(String, String)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    let mut total = 0.0;
    for (predicted, truth) in pairs {
        total += cer(predicted, truth)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Ground-truth boxes for one image, line format of the detection
/// evaluation input: `{"image":"f0001","boxes":[[x1,y1,x2,y2],...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image: String,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Scored predictions for one image:
/// `{"image":"f0001","boxes":[{"bbox":[...],"score":0.9},...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image: String,
    pub boxes: Vec<ScoredBox>,
}

/// Joins ground truth and predictions by image key. Predictions for images
/// with no ground truth still enter as false positives.
pub fn join_detection_frames(
    ground_truth: &[GroundTruthRecord],
    predictions: &[PredictionRecord],
) -> Vec<DetectionFrame> {
    let mut frames: std::collections::BTreeMap<&str, DetectionFrame> =
        std::collections::BTreeMap::new();
    for gt in ground_truth {
        frames
            .entry(gt.image.as_str())
            .or_default()
            .ground_truth
            .extend(gt.boxes.iter().copied());
    }
    for p in predictions {
        let frame = frames.entry(p.image.as_str()).or_default();
        frame
            .predictions
            .extend(p.boxes.iter().map(|b| (b.bbox, b.score)));
    }
    frames.into_values().collect()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<Vec<T>> {
    use std::io::BufRead;
    let mut out = Vec::new();
    let file = std::fs::File::open(path)?;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(out)
}

pub fn read_ground_truth(
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<Vec<GroundTruthRecord>> {
    read_jsonl(path)
}

pub fn read_predictions(
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<Vec<PredictionRecord>> {
    read_jsonl(path)
}

/// CSV of `predicted,truth` pairs for batch character-error-rate.
pub fn read_cer_pairs(path: impl AsRef<std::path::Path>) -> std::io::Result<Vec<(String, String)>> {
    #[derive(Deserialize)]
    struct Pair {
        predicted: String,
        truth: String,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let pair: Pair =
            row.map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push((pair.predicted, pair.truth));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TrackReport;
    use crate::plate::PlateIdentity;

    fn report(
        track_id: crate::TrackId,
        plate: Option<&str>,
        speed: f64,
        frames: (u64, u64),
        ts: (i64, i64),
    ) -> TrackReport {
        TrackReport {
            track_id,
            class: "car".to_string(),
            first_frame: frames.0,
            last_frame: frames.1,
            first_timestamp_ms: ts.0,
            last_timestamp_ms: ts.1,
            plate: plate.map(|p| PlateIdentity {
                text: p.to_string(),
                confidence: 1.0,
                votes: 10,
            }),
            owner: None,
            speed_samples: Vec::new(),
            assigned_speed_kmh: Some(speed),
            violation: false,
            ticket_id: None,
        }
    }

    fn gun(serial: &str, ts: i64, speed: f64) -> GunRecord {
        GunRecord {
            serial: serial.to_string(),
            timestamp_ms: ts,
            measured_distance_m: 48.0,
            measured_speed_kmh: speed,
            n_frames: 7,
        }
    }

    #[test]
    fn estimate_43_against_gun_42_is_within_margin() {
        let reports = vec![report(5, Some("UBA123C"), 43.0, (0, 100), (0, 4000))];
        let truth = SpeedTruth::Gun(vec![gun("TC-0001", 2000, 42.0)]);
        let out = evaluate_speeds(&reports, &truth, 10.0).unwrap();
        assert_eq!(out.matched, 1);
        assert!((out.rows[0].abs_error_kmh - 1.0).abs() < 1e-12);
        assert!(out.rows[0].within_margin);
        assert_eq!(out.fraction_within_margin, 1.0);
    }

    #[test]
    fn perfect_estimates_score_zero_mae() {
        let reports = vec![
            report(1, Some("AAA111A"), 50.0, (0, 50), (0, 2000)),
            report(2, Some("BBB222B"), 65.0, (60, 110), (2400, 4400)),
        ];
        let truth = SpeedTruth::Synthetic(vec![
            TruthRecord {
                vehicle_id: 0,
                plate: "AAA111A".to_string(),
                speed_kmh: 50.0,
                entry_frame: 0,
                exit_frame: 50,
                entry_timestamp_ms: 0,
                exit_timestamp_ms: 2000,
            },
            TruthRecord {
                vehicle_id: 1,
                plate: "BBB222B".to_string(),
                speed_kmh: 65.0,
                entry_frame: 60,
                exit_frame: 110,
                entry_timestamp_ms: 2400,
                exit_timestamp_ms: 4400,
            },
        ]);
        let out = evaluate_speeds(&reports, &truth, 10.0).unwrap();
        assert_eq!(out.mae_kmh, 0.0);
        assert_eq!(out.fraction_within_margin, 1.0);
        assert!(out.unmatched.is_empty());
    }

    #[test]
    fn mae_is_invariant_under_truth_reordering() {
        let reports = vec![
            report(1, Some("AAA111A"), 52.0, (0, 50), (0, 2000)),
            report(2, Some("BBB222B"), 61.0, (60, 110), (2400, 4400)),
        ];
        let mut records = vec![
            TruthRecord {
                vehicle_id: 0,
                plate: "AAA111A".to_string(),
                speed_kmh: 50.0,
                entry_frame: 0,
                exit_frame: 50,
                entry_timestamp_ms: 0,
                exit_timestamp_ms: 2000,
            },
            TruthRecord {
                vehicle_id: 1,
                plate: "BBB222B".to_string(),
                speed_kmh: 65.0,
                entry_frame: 60,
                exit_frame: 110,
                entry_timestamp_ms: 2400,
                exit_timestamp_ms: 4400,
            },
        ];
        let a = evaluate_speeds(&reports, &SpeedTruth::Synthetic(records.clone()), 10.0).unwrap();
        records.reverse();
        let b = evaluate_speeds(&reports, &SpeedTruth::Synthetic(records), 10.0).unwrap();
        assert_eq!(a.mae_kmh, b.mae_kmh);
        assert_eq!(a.max_abs_error_kmh, b.max_abs_error_kmh);
    }

    #[test]
    fn unmatched_and_ambiguous_are_reported_not_resolved() {
        let reports = vec![
            report(1, None, 50.0, (0, 100), (0, 4000)),
            report(2, None, 60.0, (0, 100), (0, 4000)),
        ];
        // two tracks overlap this gun timestamp: ambiguous
        let truth = SpeedTruth::Gun(vec![gun("A", 2000, 55.0), gun("B", 9000, 70.0)]);
        let err = evaluate_speeds(&reports, &truth, 10.0).unwrap_err();
        assert_eq!(err, EvalError::NoMatches);

        let reports = vec![
            report(1, None, 50.0, (0, 100), (0, 4000)),
            report(2, None, 60.0, (0, 100), (0, 4000)),
            report(3, None, 61.0, (200, 300), (8000, 12000)),
        ];
        let truth = SpeedTruth::Gun(vec![gun("A", 2000, 55.0), gun("B", 9000, 61.0)]);
        let out = evaluate_speeds(&reports, &truth, 10.0).unwrap();
        assert_eq!(out.matched, 1);
        assert_eq!(out.ambiguous, vec!["gun A".to_string()]);
        assert!(out.unmatched.is_empty());
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn single_prediction_above_threshold_is_perfect() {
        // inter 80, union 100: IoU exactly 0.8
        let frames = vec![DetectionFrame {
            ground_truth: vec![bx(0.0, 0.0, 10.0, 10.0)],
            predictions: vec![(bx(0.0, 0.0, 10.0, 8.0), 0.9)],
        }];
        let ap = map50(&frames).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn single_prediction_below_threshold_scores_zero() {
        // inter 30, union 100: IoU exactly 0.3
        let frames = vec![DetectionFrame {
            ground_truth: vec![bx(0.0, 0.0, 10.0, 10.0)],
            predictions: vec![(bx(0.0, 0.0, 10.0, 3.0), 0.9)],
        }];
        assert_eq!(map50(&frames).unwrap(), 0.0);
    }

    #[test]
    fn hand_derived_five_sixths_fixture() {
        // 2 ground truths; predictions scored 0.9 (TP), 0.8 (FP), 0.7 (TP).
        // PR points: (0.5, 1), (0.5, 0.5), (1, 2/3); all-point interpolation
        // integrates to 5/6.
        let frames = vec![DetectionFrame {
            ground_truth: vec![bx(0.0, 0.0, 10.0, 10.0), bx(100.0, 0.0, 110.0, 10.0)],
            predictions: vec![
                (bx(0.0, 0.0, 10.0, 10.0), 0.9),
                (bx(50.0, 50.0, 60.0, 60.0), 0.8),
                (bx(100.0, 0.0, 110.0, 10.0), 0.7),
            ],
        }];
        let ap = map50(&frames).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap = {ap}");
    }

    #[test]
    fn predictions_equal_to_truth_score_one_for_any_scene() {
        let frames = vec![
            DetectionFrame {
                ground_truth: vec![bx(0.0, 0.0, 10.0, 10.0), bx(30.0, 0.0, 45.0, 12.0)],
                predictions: vec![
                    (bx(0.0, 0.0, 10.0, 10.0), 1.0),
                    (bx(30.0, 0.0, 45.0, 12.0), 1.0),
                ],
            },
            DetectionFrame {
                ground_truth: vec![bx(5.0, 5.0, 25.0, 20.0)],
                predictions: vec![(bx(5.0, 5.0, 25.0, 20.0), 1.0)],
            },
        ];
        assert_eq!(map50(&frames).unwrap(), 1.0);
    }

    #[test]
    fn duplicate_predictions_on_one_truth_count_as_false_positives() {
        let frames = vec![DetectionFrame {
            ground_truth: vec![bx(0.0, 0.0, 10.0, 10.0)],
            predictions: vec![
                (bx(0.0, 0.0, 10.0, 10.0), 0.9),
                (bx(0.1, 0.0, 10.1, 10.0), 0.8), // second hit on same GT: FP
            ],
        }];
        // recall reaches 1.0 at precision 1.0 already; the later FP cannot
        // reduce the area
        assert_eq!(map50(&frames).unwrap(), 1.0);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        assert_eq!(map50(&[]).unwrap_err(), EvalError::NoGroundTruth);
    }

    #[test]
    fn join_keeps_orphan_predictions_as_false_positives() {
        let gt = vec![GroundTruthRecord {
            image: "f0".to_string(),
            boxes: vec![bx(0.0, 0.0, 10.0, 10.0)],
        }];
        let preds = vec![
            PredictionRecord {
                image: "f0".to_string(),
                boxes: vec![ScoredBox {
                    bbox: bx(0.0, 0.0, 10.0, 10.0),
                    score: 0.9,
                }],
            },
            PredictionRecord {
                image: "f1".to_string(), // no truth for this image
                boxes: vec![ScoredBox {
                    bbox: bx(0.0, 0.0, 10.0, 10.0),
                    score: 0.8,
                }],
            },
        ];
        let frames = join_detection_frames(&gt, &preds);
        assert_eq!(frames.len(), 2);
        // the orphan prediction costs precision but recall still reaches 1
        let ap = map50(&frames).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn cer_batch_examples() {
        let exact = vec![
            ("ABC123A".to_string(), "ABC123A".to_string()),
            ("UBA456C".to_string(), "UBA456C".to_string()),
        ];
        assert_eq!(cer_batch(&exact).unwrap(), 0.0);

        let mixed = vec![
            ("UBA123C".to_string(), "UBA123C".to_string()),
            ("UBA123C".to_string(), "UBA128C".to_string()),
        ];
        assert!((cer_batch(&mixed).unwrap() - 1.0 / 14.0).abs() < 1e-12);

        assert_eq!(cer_batch(&[]).unwrap_err(), EvalError::EmptyTruth);
    }
}
