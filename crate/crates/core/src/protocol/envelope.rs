use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::auth::Credentials;

pub const ENVELOPE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Login,
    AssessRequest,
    JobDelegate,
    DataRetrieveRequest,
    StoreQuery,
    StoreResult,
    AssessResult,
    JobResult,
    Present,
    AuditEvent,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 11] = [
        MessageKind::Login,
        MessageKind::AssessRequest,
        MessageKind::JobDelegate,
        MessageKind::DataRetrieveRequest,
        MessageKind::StoreQuery,
        MessageKind::StoreResult,
        MessageKind::AssessResult,
        MessageKind::JobResult,
        MessageKind::Present,
        MessageKind::AuditEvent,
        MessageKind::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Login => "LOGIN",
            MessageKind::AssessRequest => "ASSESS_REQUEST",
            MessageKind::JobDelegate => "JOB_DELEGATE",
            MessageKind::DataRetrieveRequest => "DATA_RETRIEVE_REQUEST",
            MessageKind::StoreQuery => "STORE_QUERY",
            MessageKind::StoreResult => "STORE_RESULT",
            MessageKind::AssessResult => "ASSESS_RESULT",
            MessageKind::JobResult => "JOB_RESULT",
            MessageKind::Present => "PRESENT",
            MessageKind::AuditEvent => "AUDIT_EVENT",
            MessageKind::Error => "ERROR",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DecodeError::UnknownKind(s.to_string()))
    }
}

/// The inter-agent wire unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    pub v: u32,
    pub msg_id: String,
    pub correlation_id: String,
    pub ts: u64,
    pub from: String,
    pub to: String,
    pub kind: MessageKind,
    pub credentials: Credentials,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("unsupported envelope version {0}")]
    BadVersion(String),
    #[error("malformed envelope: {0}")]
    Malformed(String),
}

const REQUIRED_FIELDS: [&str; 9] = [
    "v",
    "msg_id",
    "correlation_id",
    "ts",
    "from",
    "to",
    "kind",
    "credentials",
    "payload",
];

/// Canonical JSON: object keys sorted at every depth, no insignificant
/// whitespace. Equal envelopes give equal bytes.
pub fn encode(envelope: &MessageEnvelope) -> Vec<u8> {
    canonical_json(&serde_json::to_value(envelope).expect("envelope serializes"))
}

pub fn canonical_json(value: &Value) -> Vec<u8> {
    // serde_json's map is ordered by key unless preserve_order is enabled;
    // rebuilding guards against that feature being switched on elsewhere.
    fn sort(value: &Value) -> Value {
        match value {
            Value::Object(map) => {
                let mut entries: Vec<(&String, &Value)> = map.iter().collect();
                entries.sort_by(|a, b| a.0.cmp(b.0));
                Value::Object(entries.into_iter().map(|(k, v)| (k.clone(), sort(v))).collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_vec(&sort(value)).expect("json value serializes")
}

pub fn decode(bytes: &[u8]) -> Result<MessageEnvelope, DecodeError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let Value::Object(map) = &value else {
        return Err(DecodeError::Malformed("envelope is not an object".into()));
    };
    let version = map.get("v").ok_or(DecodeError::MissingField("v"))?;
    if version.as_u64() != Some(u64::from(ENVELOPE_VERSION)) {
        return Err(DecodeError::BadVersion(version.to_string()));
    }
    for field in REQUIRED_FIELDS {
        if !map.contains_key(field) {
            return Err(DecodeError::MissingField(field));
        }
    }
    match map.get("kind") {
        Some(Value::String(kind)) => {
            kind.parse::<MessageKind>()?;
        }
        Some(other) => return Err(DecodeError::UnknownKind(other.to_string())),
        None => unreachable!("checked above"),
    }
    serde_json::from_value(value).map_err(|e| DecodeError::Malformed(e.to_string()))
}
