//! Engine configuration and the on-disk JSON formats for calibrations,
//! scenario specs and the config file itself. Relative paths inside a file
//! resolve against that file's directory.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enforcement::sms::{GatewayConfig, RetryPolicy, SmsError, ENV_KEY, ENV_URL, ENV_USER};
use crate::enforcement::{EnforcementParams, Registry};
use crate::engine::EngineSettings;
use crate::plate::PlateGrammar;
use crate::scenario::ScenarioSpec;
use crate::speed::{Calibration, SpeedParams, SpeedPolicy};
use crate::track::TrackerParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sms(#[from] SmsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ConfigError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    use std::io::Write;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Loads a calibration file and verifies its stored homography still maps
/// the quad corners onto the target rectangle.
pub fn load_calibration(path: impl AsRef<Path>) -> Result<Calibration, ConfigError> {
    let cal: Calibration = read_json(path.as_ref())?;
    cal.validate().map_err(|e| ConfigError::Parse {
        path: path.as_ref().to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(cal)
}

pub fn save_calibration(path: impl AsRef<Path>, cal: &Calibration) -> Result<(), ConfigError> {
    write_json(path.as_ref(), cal)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioSpec, ConfigError> {
    read_json(path.as_ref())
}

pub fn save_scenario(path: impl AsRef<Path>, spec: &ScenarioSpec) -> Result<(), ConfigError> {
    write_json(path.as_ref(), spec)
}

/// Windowing block of the config file; unset window and min_samples derive
/// from the calibration fps (one second, half a second).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeedConfig {
    pub window: Option<usize>,
    pub min_samples: Option<usize>,
    pub policy: SpeedPolicy,
    pub axis_only: bool,
}

/// Gateway block; the api key never lives in the file and the environment
/// overrides whatever the file carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySettings {
    pub base_url: Option<String>,
    pub username: Option<String>,
    pub timeout_ms: u64,
    pub retry_max_attempts: u32,
    pub retry_base_ms: u64,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            base_url: None,
            username: None,
            timeout_ms: 10_000,
            retry_max_attempts: 3,
            retry_base_ms: 1_000,
        }
    }
}

fn default_grammar() -> String {
    "LLLDDDL".to_string()
}

fn default_vehicle_classes() -> Vec<String> {
    ["car", "truck", "bus", "motorcycle"]
        .into_iter()
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    pub calibration: PathBuf,
    #[serde(default)]
    pub tracker: TrackerParams,
    #[serde(default)]
    pub speed: SpeedConfig,
    #[serde(default = "default_grammar")]
    pub plate_grammar: String,
    #[serde(default)]
    pub enforcement: EnforcementParams,
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub gateway: GatewaySettings,
    pub output_dir: PathBuf,
    #[serde(default = "default_vehicle_classes")]
    pub vehicle_classes: Vec<String>,
}

impl EngineConfig {
    /// Reads the config file, anchoring relative paths at its directory and
    /// checking every referenced input exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let mut config: EngineConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.calibration = anchor(base, &config.calibration);
        config.registry = config.registry.as_ref().map(|p| anchor(base, p));
        config.output_dir = anchor(base, &config.output_dir);

        if !config.calibration.is_file() {
            return Err(ConfigError::Invalid(format!(
                "calibration file {} does not exist",
                config.calibration.display()
            )));
        }
        if let Some(reg) = &config.registry {
            if !reg.is_file() {
                return Err(ConfigError::Invalid(format!(
                    "registry file {} does not exist",
                    reg.display()
                )));
            }
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.tracker;
        let unit = 0.0..=1.0;
        if !unit.contains(&t.high_thresh)
            || !unit.contains(&t.low_thresh)
            || t.low_thresh >= t.high_thresh
        {
            return Err(ConfigError::Invalid(
                "tracker thresholds must satisfy 0 <= low < high <= 1".into(),
            ));
        }
        for (name, v) in [
            ("stage1_max_cost", t.stage1_max_cost),
            ("stage2_max_cost", t.stage2_max_cost),
            ("tentative_max_cost", t.tentative_max_cost),
        ] {
            if !unit.contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} must be in [0, 1]")));
            }
        }
        if t.min_hits == 0 {
            return Err(ConfigError::Invalid("min_hits must be >= 1".into()));
        }
        if let Some(w) = self.speed.window {
            if w < 2 {
                return Err(ConfigError::Invalid("speed window must be >= 2".into()));
            }
            if let Some(m) = self.speed.min_samples {
                if m < 2 || m > w {
                    return Err(ConfigError::Invalid(
                        "min_samples must be in [2, window]".into(),
                    ));
                }
            }
        }
        if self.enforcement.margin_kmh < 0.0 {
            return Err(ConfigError::Invalid(
                "enforcement margin must be >= 0".into(),
            ));
        }
        if self.enforcement.cooldown_minutes == 0 {
            return Err(ConfigError::Invalid("cooldown must be >= 1 minute".into()));
        }
        PlateGrammar::parse(&self.plate_grammar)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Loads the calibration and assembles the resolved per-stream settings.
    pub fn build_settings(&self) -> Result<EngineSettings, ConfigError> {
        let calibration = load_calibration(&self.calibration)?;
        let defaults = SpeedParams::for_fps(calibration.fps);
        let window = self.speed.window.unwrap_or(defaults.window);
        let min_samples = self
            .speed
            .min_samples
            .unwrap_or_else(|| (window / 2).max(2));
        if min_samples < 2 || min_samples > window {
            return Err(ConfigError::Invalid(
                "derived min_samples fell outside [2, window]".into(),
            ));
        }
        let grammar = PlateGrammar::parse(&self.plate_grammar)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(EngineSettings {
            calibration,
            tracker: self.tracker.clone(),
            speed: SpeedParams {
                window,
                min_samples,
                policy: self.speed.policy,
                axis_only: self.speed.axis_only,
            },
            grammar,
            enforcement: self.enforcement,
            vehicle_classes: self.vehicle_classes.clone(),
        })
    }

    pub fn load_registry(&self) -> Result<Registry, ConfigError> {
        match &self.registry {
            Some(path) => Registry::load(path).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(Registry::empty()),
        }
    }

    /// Merges gateway settings with the environment: variables win, the api
    /// key comes only from the environment. `None` when no URL is known,
    /// which leaves tickets pending.
    pub fn resolve_gateway(&self) -> Result<Option<GatewayConfig>, ConfigError> {
        let url = std::env::var(ENV_URL)
            .ok()
            .or_else(|| self.gateway.base_url.clone());
        let Some(base_url) = url else {
            return Ok(None);
        };
        let username = std::env::var(ENV_USER)
            .ok()
            .or_else(|| self.gateway.username.clone())
            .ok_or_else(|| {
                ConfigError::Invalid(format!("gateway url set but no username ({ENV_USER})"))
            })?;
        let api_key = std::env::var(ENV_KEY).map_err(|_| {
            ConfigError::Invalid(format!(
                "gateway url set but {ENV_KEY} is not in the environment"
            ))
        })?;
        Ok(Some(GatewayConfig {
            base_url,
            username,
            api_key,
            timeout: Duration::from_millis(self.gateway.timeout_ms),
            retry: RetryPolicy {
                max_attempts: self.gateway.retry_max_attempts,
                base_delay: Duration::from_millis(self.gateway.retry_base_ms),
            },
        }))
    }
}

fn anchor(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
