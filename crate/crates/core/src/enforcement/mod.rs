//! Violation detection, owner resolution, idempotent ticket generation and
//! the append-only ticket log.

pub mod mock;
pub mod sms;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::speed::{Calibration, SpeedPolicy};
use crate::TrackId;

#[derive(Debug, Error)]
pub enum EnforcementError {
    #[error("registry: {0}")]
    Registry(String),
    #[error("ticket log line {line}: {reason}")]
    Log { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One row of the vehicle registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub plate: String,
    pub owner_name: String,
    pub phone: String,
    pub email: String,
    pub vehicle_details: String,
}

/// In-memory registry snapshot keyed by normalized plate. Reload swaps the
/// whole snapshot atomically, so readers never see a half-loaded table.
#[derive(Debug)]
pub struct Registry {
    path: Option<PathBuf>,
    snapshot: RwLock<Arc<HashMap<String, RegistryEntry>>>,
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            path: None,
            snapshot: RwLock::new(Arc::new(HashMap::new())),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnforcementError> {
        let entries = load_registry_entries(&path)?;
        let reg = Self {
            path: Some(path.as_ref().to_path_buf()),
            snapshot: RwLock::new(Arc::new(index_entries(entries)?)),
        };
        Ok(reg)
    }

    /// Re-reads the backing file and swaps the snapshot in one move.
    pub fn reload(&self) -> Result<(), EnforcementError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let fresh = index_entries(load_registry_entries(path)?)?;
        *self.snapshot.write().expect("registry lock poisoned") = Arc::new(fresh);
        Ok(())
    }

    /// Exact-match lookup on a normalized plate.
    pub fn lookup(&self, plate: &str) -> Option<RegistryEntry> {
        self.snapshot
            .read()
            .expect("registry lock poisoned")
            .get(plate)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.snapshot.read().expect("registry lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn index_entries(
    entries: Vec<RegistryEntry>,
) -> Result<HashMap<String, RegistryEntry>, EnforcementError> {
    let mut map = HashMap::with_capacity(entries.len());
    for e in entries {
        if e.phone.trim().is_empty() {
            return Err(EnforcementError::Registry(format!(
                "entry {} has an empty phone number",
                e.plate
            )));
        }
        let key = e.plate.trim().to_ascii_uppercase();
        if map.insert(key.clone(), e).is_some() {
            return Err(EnforcementError::Registry(format!(
                "duplicate plate {key} in registry"
            )));
        }
    }
    Ok(map)
}

pub fn load_registry_entries(
    path: impl AsRef<Path>,
) -> Result<Vec<RegistryEntry>, EnforcementError> {
    let mut rdr = csv::Reader::from_reader(File::open(path)?);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let entry: RegistryEntry = row.map_err(|e| EnforcementError::Registry(e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn save_registry(
    path: impl AsRef<Path>,
    entries: &[RegistryEntry],
) -> Result<(), EnforcementError> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for e in entries {
        w.serialize(e)
            .map_err(|e| EnforcementError::Registry(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnforcementParams {
    /// Tolerance added to the limit before a speed counts as a violation;
    /// sized to the estimator's measured error so marginal reads never
    /// produce a ticket.
    pub margin_kmh: f64,
    /// Window within which repeat violations by one plate at one camera
    /// collapse into a single ticket.
    pub cooldown_minutes: u64,
}

impl Default for EnforcementParams {
    fn default() -> Self {
        Self {
            margin_kmh: 10.0,
            cooldown_minutes: 10,
        }
    }
}

/// Strictly above limit plus margin.
pub fn detect_violation(speed_kmh: f64, cal: &Calibration, margin_kmh: f64) -> bool {
    speed_kmh > cal.speed_limit_kmh + margin_kmh
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum DeliveryState {
    Pending,
    Sent { message_id: String },
    Failed { reason: String },
    Suppressed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationTicket {
    pub ticket_id: String,
    pub plate: String,
    pub track_id: TrackId,
    pub estimated_speed_kmh: f64,
    pub speed_limit_kmh: f64,
    pub policy: SpeedPolicy,
    pub camera_id: String,
    pub location: String,
    pub timestamp_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<RegistryEntry>,
    pub delivery: DeliveryState,
}

/// Cooldown bucket index for a stream timestamp.
pub fn cooldown_bucket(timestamp_ms: i64, cooldown_minutes: u64) -> i64 {
    let window_ms = (cooldown_minutes.max(1) * 60_000) as i64;
    timestamp_ms.div_euclid(window_ms)
}

/// Deterministic ticket id: content hash of plate, camera and time bucket.
/// Recomputing from the same inputs always yields the same id.
pub fn ticket_id_for(plate: &str, camera_id: &str, bucket: i64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(plate.as_bytes());
    hasher.update(b"|");
    hasher.update(camera_id.as_bytes());
    hasher.update(b"|");
    hasher.update(bucket.to_le_bytes());
    let digest = hasher.finalize();
    let mut id = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        id.push_str(&format!("{byte:02x}"));
    }
    id
}

pub struct TicketInputs<'a> {
    pub plate: &'a str,
    pub track_id: TrackId,
    pub estimated_speed_kmh: f64,
    pub policy: SpeedPolicy,
    pub cal: &'a Calibration,
    pub timestamp_ms: i64,
    pub owner: Option<RegistryEntry>,
    pub cooldown_minutes: u64,
}

/// Builds the ticket record. Duplicates within the cooldown bucket and
/// plates missing from the registry are kept as suppressed audit records,
/// never queued for delivery.
pub fn make_ticket(inputs: TicketInputs<'_>, already_issued: &HashSet<String>) -> ViolationTicket {
    let bucket = cooldown_bucket(inputs.timestamp_ms, inputs.cooldown_minutes);
    let ticket_id = ticket_id_for(inputs.plate, &inputs.cal.camera_id, bucket);
    let delivery = if already_issued.contains(&ticket_id) {
        DeliveryState::Suppressed {
            reason: "duplicate within cooldown window".to_string(),
        }
    } else if inputs.owner.is_none() {
        DeliveryState::Suppressed {
            reason: "plate not in registry".to_string(),
        }
    } else {
        DeliveryState::Pending
    };
    ViolationTicket {
        ticket_id,
        plate: inputs.plate.to_string(),
        track_id: inputs.track_id,
        estimated_speed_kmh: inputs.estimated_speed_kmh,
        speed_limit_kmh: inputs.cal.speed_limit_kmh,
        policy: inputs.policy,
        camera_id: inputs.cal.camera_id.clone(),
        location: inputs.cal.location.clone(),
        timestamp_ms: inputs.timestamp_ms,
        owner: inputs.owner,
        delivery,
    }
}

/// SMS body for a ticket; one ticket fits comfortably in three segments.
pub fn render_sms(t: &ViolationTicket) -> String {
    let when = chrono::DateTime::from_timestamp_millis(t.timestamp_ms)
        .map(|dt| dt.format("%Y-%m-%d %H:%M:%S UTC").to_string())
        .unwrap_or_else(|| format!("{} ms", t.timestamp_ms));
    format!(
        "TRAFFIC TICKET {}: Vehicle {} recorded at {:.0} km/h in a {:.0} km/h zone at {}, {}.",
        t.ticket_id, t.plate, t.estimated_speed_kmh, t.speed_limit_kmh, t.location, when
    )
}

/// Append-only line-delimited ticket sink. The mutex is the mutual-exclusion
/// point when several streams share one log.
pub struct TicketLogWriter {
    file: Mutex<File>,
}

impl TicketLogWriter {
    /// Opens for appending, creating the file if needed.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EnforcementError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, ticket: &ViolationTicket) -> Result<(), EnforcementError> {
        let line = serde_json::to_string(ticket).map_err(|e| EnforcementError::Log {
            line: 0,
            reason: e.to_string(),
        })?;
        let mut f = self.file.lock().expect("ticket log lock poisoned");
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}

/// Reads every record in the log, oldest first.
pub fn load_ticket_log(path: impl AsRef<Path>) -> Result<Vec<ViolationTicket>, EnforcementError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: ViolationTicket =
            serde_json::from_str(&line).map_err(|e| EnforcementError::Log {
                line: i + 1,
                reason: e.to_string(),
            })?;
        out.push(t);
    }
    Ok(out)
}

/// Collapses an append-only log to the latest record per ticket id,
/// preserving first-seen order.
pub fn latest_tickets(log: &[ViolationTicket]) -> Vec<ViolationTicket> {
    let mut order = Vec::new();
    let mut latest: BTreeMap<&str, &ViolationTicket> = BTreeMap::new();
    for t in log {
        if !latest.contains_key(t.ticket_id.as_str()) {
            order.push(t.ticket_id.as_str());
        }
        latest.insert(t.ticket_id.as_str(), t);
    }
    order.into_iter().map(|id| latest[id].clone()).collect()
}
