//! SMS gateway client. Speaks the bulk-messaging wire format used by the
//! hosted gateway: form-encoded POST, api key header, JSON reply with
//! per-recipient status. Transient failures retry with exponential backoff
//! under a fixed idempotency key; recipient-level rejections do not retry.

use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

/// Three concatenated GSM segments.
pub const MAX_MESSAGE_CHARS: usize = 459;

pub const ENV_URL: &str = "SENTINEL_SMS_URL";
pub const ENV_USER: &str = "SENTINEL_SMS_USER";
pub const ENV_KEY: &str = "SENTINEL_SMS_KEY";

#[derive(Debug, Error)]
pub enum SmsError {
    #[error("message is {0} characters, over the {MAX_MESSAGE_CHARS} limit")]
    MessageTooLong(usize),
    #[error("gateway rejected the message: {status}")]
    GatewayRejected { status: String },
    #[error("transport failed after {attempts} attempts: {reason}")]
    TransportFailed { attempts: u32, reason: String },
    #[error("gateway configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub base_url: String,
    pub username: String,
    pub api_key: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl GatewayConfig {
    /// Reads the gateway settings from the environment. `None` when no URL
    /// is set (deliveries stay pending); an URL without credentials is a
    /// configuration error.
    pub fn from_env() -> Result<Option<Self>, SmsError> {
        let Ok(base_url) = std::env::var(ENV_URL) else {
            return Ok(None);
        };
        let username = std::env::var(ENV_USER)
            .map_err(|_| SmsError::Config(format!("{ENV_URL} is set but {ENV_USER} is not")))?;
        let api_key = std::env::var(ENV_KEY)
            .map_err(|_| SmsError::Config(format!("{ENV_URL} is set but {ENV_KEY} is not")))?;
        Ok(Some(Self {
            base_url,
            username,
            api_key,
            timeout: Duration::from_secs(10),
            retry: RetryPolicy::default(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmsRequest {
    pub to: String,
    pub message: String,
    /// Carried on every attempt so the gateway can collapse replays.
    pub idempotency_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmsResult {
    pub message_id: String,
    pub status: String,
    pub cost: String,
}

#[derive(Deserialize)]
struct ApiResponse {
    #[serde(rename = "SMSMessageData")]
    data: MessageData,
}

#[derive(Deserialize)]
struct MessageData {
    #[serde(rename = "Recipients", default)]
    recipients: Vec<Recipient>,
}

#[derive(Deserialize)]
struct Recipient {
    #[serde(default)]
    status: String,
    #[serde(rename = "messageId", default)]
    message_id: String,
    #[serde(default)]
    cost: String,
}

pub struct SmsClient {
    config: GatewayConfig,
    http: reqwest::blocking::Client,
}

enum AttemptOutcome {
    Delivered(SmsResult),
    Rejected(String),
    Retryable(String),
}

impl SmsClient {
    pub fn new(config: GatewayConfig) -> Result<Self, SmsError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| SmsError::Config(e.to_string()))?;
        Ok(Self { config, http })
    }

    pub fn send(&self, req: &SmsRequest) -> Result<SmsResult, SmsError> {
        if req.message.chars().count() > MAX_MESSAGE_CHARS {
            return Err(SmsError::MessageTooLong(req.message.chars().count()));
        }
        let attempts = self.config.retry.max_attempts.max(1);
        let mut last_reason = String::new();
        for attempt in 1..=attempts {
            match self.attempt(req) {
                AttemptOutcome::Delivered(r) => return Ok(r),
                AttemptOutcome::Rejected(status) => {
                    return Err(SmsError::GatewayRejected { status })
                }
                AttemptOutcome::Retryable(reason) => last_reason = reason,
            }
            if attempt < attempts {
                let delay = self.config.retry.base_delay * 2u32.pow(attempt - 1);
                std::thread::sleep(delay);
            }
        }
        Err(SmsError::TransportFailed {
            attempts,
            reason: last_reason,
        })
    }

    fn attempt(&self, req: &SmsRequest) -> AttemptOutcome {
        let url = format!(
            "{}/version1/messaging",
            self.config.base_url.trim_end_matches('/')
        );
        let response = self
            .http
            .post(&url)
            .header("apiKey", &self.config.api_key)
            .header("Accept", "application/json")
            .header("Idempotency-Key", &req.idempotency_key)
            .form(&[
                ("username", self.config.username.as_str()),
                ("to", req.to.as_str()),
                ("message", req.message.as_str()),
            ])
            .send();

        let response = match response {
            Ok(r) => r,
            Err(e) => return AttemptOutcome::Retryable(e.to_string()),
        };
        let status = response.status();
        if status.is_server_error() {
            return AttemptOutcome::Retryable(format!("HTTP {status}"));
        }
        if !status.is_success() {
            return AttemptOutcome::Rejected(format!("HTTP {status}"));
        }
        let body = match response.text() {
            Ok(b) => b,
            Err(e) => return AttemptOutcome::Retryable(e.to_string()),
        };
        let parsed: ApiResponse = match serde_json::from_str(&body) {
            Ok(p) => p,
            Err(e) => return AttemptOutcome::Rejected(format!("malformed reply: {e}")),
        };
        let Some(recipient) = parsed.data.recipients.into_iter().next() else {
            return AttemptOutcome::Rejected("no recipients in reply".to_string());
        };
        if recipient.status == "Success" {
            AttemptOutcome::Delivered(SmsResult {
                message_id: recipient.message_id,
                status: recipient.status,
                cost: recipient.cost,
            })
        } else {
            AttemptOutcome::Rejected(recipient.status)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enforcement::mock::{MockBehavior, MockGateway};

    fn config_for(gateway: &MockGateway) -> GatewayConfig {
        GatewayConfig {
            base_url: gateway.base_url(),
            username: "sandbox".to_string(),
            api_key: "test-key".to_string(),
            timeout: Duration::from_secs(2),
            retry: RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(2),
            },
        }
    }

    fn request() -> SmsRequest {
        SmsRequest {
            to: "+256700000001".to_string(),
            message: "TRAFFIC TICKET abc: Vehicle ABC123A recorded at 72 km/h".to_string(),
            idempotency_key: "ticket-abc".to_string(),
        }
    }

    #[test]
    fn happy_path_records_message_id() {
        let gw = MockGateway::spawn(MockBehavior::Succeed).unwrap();
        let client = SmsClient::new(config_for(&gw)).unwrap();
        let result = client.send(&request()).unwrap();
        assert_eq!(result.status, "Success");
        assert!(result.message_id.starts_with("ATXid_"));

        let seen = gw.requests();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].to, "+256700000001");
        assert_eq!(seen[0].username, "sandbox");
        assert_eq!(seen[0].api_key, "test-key");
        assert_eq!(seen[0].idempotency_key, "ticket-abc");
        assert!(seen[0].message.contains("ABC123A"));
    }

    #[test]
    fn server_errors_retry_until_success() {
        let gw = MockGateway::spawn(MockBehavior::FailHttpThenSucceed { failures: 2 }).unwrap();
        let client = SmsClient::new(config_for(&gw)).unwrap();
        let result = client.send(&request()).unwrap();
        assert_eq!(result.status, "Success");

        let seen = gw.requests();
        assert_eq!(seen.len(), 3);
        // same idempotency key on every attempt
        assert!(seen.iter().all(|r| r.idempotency_key == "ticket-abc"));
    }

    #[test]
    fn recipient_rejection_does_not_retry() {
        let gw = MockGateway::spawn(MockBehavior::RejectRecipient {
            status: "InvalidPhoneNumber".to_string(),
        })
        .unwrap();
        let client = SmsClient::new(config_for(&gw)).unwrap();
        let err = client.send(&request()).unwrap_err();
        assert!(
            matches!(err, SmsError::GatewayRejected { ref status } if status == "InvalidPhoneNumber"),
            "{err:?}"
        );
        assert_eq!(gw.requests().len(), 1);
    }

    #[test]
    fn gateway_down_fails_after_all_attempts() {
        // bind and immediately drop a listener to get a dead port
        let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = dead.local_addr().unwrap();
        drop(dead);

        let config = GatewayConfig {
            base_url: format!("http://{addr}"),
            username: "sandbox".to_string(),
            api_key: "k".to_string(),
            timeout: Duration::from_millis(500),
            retry: RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(1),
            },
        };
        let client = SmsClient::new(config).unwrap();
        let err = client.send(&request()).unwrap_err();
        assert!(
            matches!(err, SmsError::TransportFailed { attempts: 3, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn oversized_message_rejected_before_sending() {
        let gw = MockGateway::spawn(MockBehavior::Succeed).unwrap();
        let client = SmsClient::new(config_for(&gw)).unwrap();
        let mut req = request();
        req.message = "x".repeat(MAX_MESSAGE_CHARS + 1);
        assert!(matches!(
            client.send(&req),
            Err(SmsError::MessageTooLong(_))
        ));
        assert!(gw.requests().is_empty());
    }
}
