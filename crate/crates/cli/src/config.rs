//! Operator configuration: a `key=value` file overlaid by command-line flags.

use std::path::PathBuf;

use imobe_core::audit::{AnomalyRule, DEFAULT_ANOMALY_R, DEFAULT_ANOMALY_W_S};
use imobe_core::auth::DEFAULT_TOKEN_TTL_S;
use imobe_core::domain::DEFAULT_THRESHOLD;
use imobe_core::platform::PlatformConfig;
use imobe_core::protocol::workflow::{Timeouts, DEFAULT_PHASE_TIMEOUT_MS, DEFAULT_WORKFLOW_BUDGET_MS};
use imobe_core::runtime::Mode;
use thiserror::Error;

pub const DEFAULT_STORE_PATH: &str = "imobe-store.jsonl";
pub const DEFAULT_LISTEN_ADDRESS: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub store_path: PathBuf,
    pub listen_address: String,
    /// Unset means `serve` generates a fresh secret per process.
    pub token_secret: Option<String>,
    pub token_ttl_s: u64,
    pub phase_timeout_ms: u64,
    pub workflow_budget_ms: u64,
    pub anomaly_r: usize,
    pub anomaly_w_s: u64,
    pub attainment_threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            store_path: PathBuf::from(DEFAULT_STORE_PATH),
            listen_address: DEFAULT_LISTEN_ADDRESS.to_string(),
            token_secret: None,
            token_ttl_s: DEFAULT_TOKEN_TTL_S,
            phase_timeout_ms: DEFAULT_PHASE_TIMEOUT_MS,
            workflow_budget_ms: DEFAULT_WORKFLOW_BUDGET_MS,
            anomaly_r: DEFAULT_ANOMALY_R,
            anomaly_w_s: DEFAULT_ANOMALY_W_S,
            attainment_threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("{key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Settings given explicitly, from a file or from flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub store_path: Option<PathBuf>,
    pub listen_address: Option<String>,
    pub token_secret: Option<String>,
    pub token_ttl_s: Option<u64>,
    pub phase_timeout_ms: Option<u64>,
    pub workflow_budget_ms: Option<u64>,
    pub anomaly_r: Option<usize>,
    pub anomaly_w_s: Option<u64>,
    pub attainment_threshold: Option<f64>,
}

fn number<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Syntax {
        line,
        reason: format!("{key} expects a number, found {value:?}"),
    })
}

impl Overrides {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Overrides, ConfigError> {
        let mut out = Overrides::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    reason: format!("expected key=value, found {content:?}"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "store_path" => out.store_path = Some(PathBuf::from(value)),
                "listen_address" => out.listen_address = Some(value.to_string()),
                "token_secret" => out.token_secret = Some(value.to_string()),
                "token_ttl_s" => out.token_ttl_s = Some(number(line, key, value)?),
                "phase_timeout_ms" => out.phase_timeout_ms = Some(number(line, key, value)?),
                "workflow_budget_ms" => out.workflow_budget_ms = Some(number(line, key, value)?),
                "anomaly_r" => out.anomaly_r = Some(number(line, key, value)?),
                "anomaly_w_s" => out.anomaly_w_s = Some(number(line, key, value)?),
                "attainment_threshold" => out.attainment_threshold = Some(number(line, key, value)?),
                other => {
                    return Err(ConfigError::Syntax {
                        line,
                        reason: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Fields set in `other` replace ours.
    pub fn overlay(self, other: Overrides) -> Overrides {
        Overrides {
            store_path: other.store_path.or(self.store_path),
            listen_address: other.listen_address.or(self.listen_address),
            token_secret: other.token_secret.or(self.token_secret),
            token_ttl_s: other.token_ttl_s.or(self.token_ttl_s),
            phase_timeout_ms: other.phase_timeout_ms.or(self.phase_timeout_ms),
            workflow_budget_ms: other.workflow_budget_ms.or(self.workflow_budget_ms),
            anomaly_r: other.anomaly_r.or(self.anomaly_r),
            anomaly_w_s: other.anomaly_w_s.or(self.anomaly_w_s),
            attainment_threshold: other.attainment_threshold.or(self.attainment_threshold),
        }
    }
}

impl Config {
    pub fn resolve(overrides: Overrides) -> Result<Config, ConfigError> {
        let d = Config::default();
        let config = Config {
            store_path: overrides.store_path.unwrap_or(d.store_path),
            listen_address: overrides.listen_address.unwrap_or(d.listen_address),
            token_secret: overrides.token_secret.or(d.token_secret),
            token_ttl_s: overrides.token_ttl_s.unwrap_or(d.token_ttl_s),
            phase_timeout_ms: overrides.phase_timeout_ms.unwrap_or(d.phase_timeout_ms),
            workflow_budget_ms: overrides.workflow_budget_ms.unwrap_or(d.workflow_budget_ms),
            anomaly_r: overrides.anomaly_r.unwrap_or(d.anomaly_r),
            anomaly_w_s: overrides.anomaly_w_s.unwrap_or(d.anomaly_w_s),
            attainment_threshold: overrides.attainment_threshold.unwrap_or(d.attainment_threshold),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("token_ttl_s", self.token_ttl_s),
            ("phase_timeout_ms", self.phase_timeout_ms),
            ("workflow_budget_ms", self.workflow_budget_ms),
            ("anomaly_w_s", self.anomaly_w_s),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(ConfigError::Invalid {
                    key,
                    reason: "must be greater than 0".to_string(),
                });
            }
        }
        let t = self.attainment_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(ConfigError::Invalid {
                key: "attainment_threshold",
                reason: format!("{t} is outside (0, 1)"),
            });
        }
        if self.token_secret.as_deref() == Some("") {
            return Err(ConfigError::Invalid {
                key: "token_secret",
                reason: "must not be empty".to_string(),
            });
        }
        if self.listen_address.is_empty() {
            return Err(ConfigError::Invalid {
                key: "listen_address",
                reason: "must not be empty".to_string(),
            });
        }
        Ok(())
    }

    pub fn platform(&self, store_path: Option<PathBuf>, secret: Vec<u8>, mode: Mode) -> PlatformConfig {
        PlatformConfig {
            store_path,
            token_secret: secret,
            token_ttl_s: self.token_ttl_s,
            timeouts: Timeouts {
                phase_ms: self.phase_timeout_ms,
                budget_ms: self.workflow_budget_ms,
            },
            anomaly_rule: AnomalyRule {
                max_failures: self.anomaly_r,
                window_ms: self.anomaly_w_s * 1000,
            },
            threshold: self.attainment_threshold,
            mode,
        }
    }
}
