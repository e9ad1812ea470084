//! Detection-stream and ground-truth file formats.
//!
//! The detection stream is line-delimited JSON, one frame per line:
//!
//! ```text
//! {"frame_index":0,"timestamp_ms":0,"detections":[{"class":"car","score":0.92,
//!  "bbox":[412.0,318.5,471.0,362.0],"plate":{"bbox":[430.1,350.2,452.9,359.8],
//!  "text":"UBA123C","text_score":0.88}}]}
//! ```
//!
//! Frame indices must be strictly increasing and timestamps non-decreasing.
//! Gun records and synthetic truth tables are comma-separated with a header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: frame index {frame} does not increase (previous {previous})")]
    Monotonicity {
        line: usize,
        frame: u64,
        previous: u64,
    },
    #[error("line {line}: timestamp {timestamp} decreases (previous {previous})")]
    TimestampOrder {
        line: usize,
        timestamp: i64,
        previous: i64,
    },
    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// OCR output attached to a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatePayload {
    pub bbox: BBox,
    pub text: String,
    pub text_score: f64,
}

/// One detector output box on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDetection {
    pub class: String,
    pub score: f64,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate: Option<PlatePayload>,
}

/// One frame of detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub timestamp_ms: i64,
    pub detections: Vec<StreamDetection>,
}

impl FrameRecord {
    fn validate(&self, line: usize) -> Result<(), StreamError> {
        for (i, d) in self.detections.iter().enumerate() {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(StreamError::Parse {
                    line,
                    reason: format!("detection {i}: score {} outside [0, 1]", d.score),
                });
            }
            if let Some(p) = &d.plate {
                if !(0.0..=1.0).contains(&p.text_score) {
                    return Err(StreamError::Parse {
                        line,
                        reason: format!(
                            "detection {i}: text_score {} outside [0, 1]",
                            p.text_score
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Lazy line-by-line reader enforcing the stream invariants.
pub struct StreamReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    last_frame: Option<u64>,
    last_timestamp: Option<i64>,
}

impl<R: BufRead> StreamReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            last_frame: None,
            last_timestamp: None,
        }
    }
}

impl StreamReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StreamError> {
        Ok(Self::new(BufReader::new(File::open(path)?)))
    }
}

impl<R: BufRead> Iterator for StreamReader<R> {
    type Item = Result<FrameRecord, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: FrameRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(StreamError::Parse {
                        line: self.line_no,
                        reason: e.to_string(),
                    }))
                }
            };
            if let Err(e) = record.validate(self.line_no) {
                return Some(Err(e));
            }
            if let Some(prev) = self.last_frame {
                if record.frame_index <= prev {
                    return Some(Err(StreamError::Monotonicity {
                        line: self.line_no,
                        frame: record.frame_index,
                        previous: prev,
                    }));
                }
            }
            if let Some(prev) = self.last_timestamp {
                if record.timestamp_ms < prev {
                    return Some(Err(StreamError::TimestampOrder {
                        line: self.line_no,
                        timestamp: record.timestamp_ms,
                        previous: prev,
                    }));
                }
            }
            self.last_frame = Some(record.frame_index);
            self.last_timestamp = Some(record.timestamp_ms);
            return Some(Ok(record));
        }
    }
}

/// Parses a whole stream eagerly; convenience for tests and small files.
pub fn read_stream(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>, StreamError> {
    StreamReader::open(path)?.collect()
}

pub fn parse_stream_bytes(bytes: &[u8]) -> Result<Vec<FrameRecord>, StreamError> {
    StreamReader::new(BufReader::new(bytes)).collect()
}

pub fn write_stream(path: impl AsRef<Path>, frames: &[FrameRecord]) -> Result<(), StreamError> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in frames {
        serde_json::to_writer(&mut w, f).map_err(|e| StreamError::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Speed-gun ground truth row, from an officer-exported table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GunRecord {
    pub serial: String,
    pub timestamp_ms: i64,
    pub measured_distance_m: f64,
    pub measured_speed_kmh: f64,
    pub n_frames: u32,
}

impl GunRecord {
    fn validate(&self, index: usize) -> Result<(), StreamError> {
        if self.measured_speed_kmh < 0.0 {
            return Err(StreamError::BadRecord {
                index,
                reason: "measured speed must be >= 0".into(),
            });
        }
        if self.n_frames >= 8 {
            return Err(StreamError::BadRecord {
                index,
                reason: format!("gun clips hold fewer than 8 frames, got {}", self.n_frames),
            });
        }
        Ok(())
    }
}

pub fn read_gun_records<R: Read>(reader: R) -> Result<Vec<GunRecord>, StreamError> {
    let mut out = Vec::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, row) in rdr.deserialize().enumerate() {
        let rec: GunRecord = row.map_err(|e| StreamError::BadRecord {
            index: i + 1,
            reason: e.to_string(),
        })?;
        rec.validate(i + 1)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_gun_file(path: impl AsRef<Path>) -> Result<Vec<GunRecord>, StreamError> {
    read_gun_records(File::open(path)?)
}

pub fn write_gun_file(path: impl AsRef<Path>, records: &[GunRecord]) -> Result<(), StreamError> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in records {
        w.serialize(r).map_err(|e| StreamError::BadRecord {
            index: 0,
            reason: e.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Per-vehicle row of the synthetic truth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub vehicle_id: u32,
    pub plate: String,
    pub speed_kmh: f64,
    pub entry_frame: u64,
    pub exit_frame: u64,
    pub entry_timestamp_ms: i64,
    pub exit_timestamp_ms: i64,
}

pub fn read_truth_file(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>, StreamError> {
    let mut out = Vec::new();
    let mut rdr = csv::Reader::from_reader(File::open(path)?);
    for (i, row) in rdr.deserialize().enumerate() {
        let rec: TruthRecord = row.map_err(|e| StreamError::BadRecord {
            index: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_truth_file(
    path: impl AsRef<Path>,
    records: &[TruthRecord],
) -> Result<(), StreamError> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in records {
        w.serialize(r).map_err(|e| StreamError::BadRecord {
            index: 0,
            reason: e.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Sniffs whether a CSV file is a gun table or a synthetic truth table from
/// its header line.
pub fn sniff_truth_kind(path: impl AsRef<Path>) -> Result<TruthKind, StreamError> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    let header = first.trim().to_ascii_lowercase();
    if header.starts_with("serial") {
        Ok(TruthKind::Gun)
    } else if header.starts_with("vehicle_id") {
        Ok(TruthKind::Synthetic)
    } else {
        Err(StreamError::BadRecord {
            index: 0,
            reason: format!("unrecognized truth header: {header:?}"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthKind {
    Gun,
    Synthetic,
}
