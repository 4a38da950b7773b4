//! Wires the store, audit log, runtime and standing agents together.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use thiserror::Error;

use crate::audit::{AnomalyRule, AuditAction, AuditDraft, AuditLog, AuditLogError, AuditSource};
use crate::auth::{Authenticator, Credentials, PrincipalDirectory, PrivilegeSet, Role, TokenSigner, DEFAULT_TOKEN_TTL_S};
use crate::behaviors::{delegate_for, StandardBehaviors};
use crate::clock::Clock;
use crate::domain::DEFAULT_THRESHOLD;
use crate::kinds::AgentKind;
use crate::protocol::payload::AssessRequest;
use crate::protocol::workflow::Timeouts;
use crate::protocol::{MessageEnvelope, MessageKind};
use crate::runtime::{AgentDescriptor, Mode, Rejection, Runtime, RuntimeConfig, RuntimeError, MAIN_CONTAINER};
use crate::store::{ObeStore, StoreError};

pub const UIA_ID: &str = "uia";
pub const ASSA_ID: &str = "assa";
pub const SAA_ID: &str = "saa";

#[derive(Debug, Clone)]
pub struct PlatformConfig {
    /// `None` keeps everything in memory.
    pub store_path: Option<PathBuf>,
    pub token_secret: Vec<u8>,
    pub token_ttl_s: u64,
    pub timeouts: Timeouts,
    pub anomaly_rule: AnomalyRule,
    pub threshold: f64,
    pub mode: Mode,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            store_path: None,
            token_secret: b"change-me".to_vec(),
            token_ttl_s: DEFAULT_TOKEN_TTL_S,
            timeouts: Timeouts::default(),
            anomaly_rule: AnomalyRule::default(),
            threshold: DEFAULT_THRESHOLD,
            mode: Mode::Deterministic,
        }
    }
}

impl PlatformConfig {
    /// The audit log lives next to the store log.
    pub fn audit_path(&self) -> Option<PathBuf> {
        self.store_path.as_ref().map(|p| {
            let mut name = p.as_os_str().to_owned();
            name.push(".audit.jsonl");
            PathBuf::from(name)
        })
    }
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("cannot open store: {0}")]
    StoreOpen(#[from] StoreError),
    #[error("cannot open audit log: {0}")]
    AuditOpen(#[from] AuditLogError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoginError {
    #[error("invalid principal or secret")]
    InvalidCredentials,
    #[error("account {0} is disabled")]
    AccountDisabled(String),
}

impl LoginError {
    pub fn code(&self) -> &'static str {
        match self {
            LoginError::InvalidCredentials => "InvalidCredentials",
            LoginError::AccountDisabled(_) => "AccountDisabled",
        }
    }
}

/// A session's runtime footprint: its client endpoint, container and the
/// AA or SA dispatched into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSession {
    pub session_id: String,
    pub principal: String,
    pub privileges: PrivilegeSet,
    pub container: String,
    pub delegate: Option<String>,
}

pub struct Platform {
    pub config: PlatformConfig,
    pub signer: Arc<TokenSigner>,
    pub store: Arc<ObeStore>,
    pub audit: Arc<AuditLog>,
    pub auth: Authenticator,
    pub runtime: Runtime,
}

impl Platform {
    pub fn open(config: PlatformConfig, clock: Arc<dyn Clock>) -> Result<Platform, PlatformError> {
        let signer = Arc::new(TokenSigner::new(&config.token_secret, config.token_ttl_s, clock));
        let audit = Arc::new(match config.audit_path() {
            Some(path) => AuditLog::open(&path, config.anomaly_rule)?,
            None => AuditLog::in_memory(config.anomaly_rule),
        });
        let store = Arc::new(match &config.store_path {
            Some(path) => ObeStore::open(path, signer.clone(), audit.clone())?,
            None => ObeStore::in_memory(signer.clone(), audit.clone()),
        });
        let auth = Authenticator::new(signer.clone(), store.clone());
        let runtime = Runtime::new(
            config.mode,
            RuntimeConfig {
                timeouts: config.timeouts,
                threshold: config.threshold,
            },
            auth.clone(),
            audit.clone(),
            Arc::new(StandardBehaviors {
                anomaly_rule: config.anomaly_rule,
            }),
            Some(store.clone()),
        );
        let system = auth.system_credentials();
        for (id, kind) in [(UIA_ID, AgentKind::UIA), (ASSA_ID, AgentKind::AssA), (SAA_ID, AgentKind::SAA)] {
            runtime.dispatch(AgentDescriptor::new(id, kind, MAIN_CONTAINER), MAIN_CONTAINER, &system)?;
        }
        Ok(Platform {
            config,
            signer,
            store,
            audit,
            auth,
            runtime,
        })
    }

    pub fn system_credentials(&self) -> Credentials {
        self.auth.system_credentials()
    }

    fn audit_failure(&self, principal: &str, subject: &str, code: &str) {
        self.audit.record(AuditDraft::new(
            self.signer.now_ms(),
            principal,
            AuditAction::AuthFailure,
            subject,
            json!({"code": code}),
            AuditSource::Gateway,
        ));
    }

    /// Checks a principal's secret and issues a token. Failures are audited.
    pub fn login(&self, principal: &str, secret: &str) -> Result<(Credentials, PrivilegeSet), LoginError> {
        let profile = self.store.profile(principal);
        let result = match profile {
            Some(p) if !p.check_secret(secret) => Err(LoginError::InvalidCredentials),
            Some(p) if !p.enabled => Err(LoginError::AccountDisabled(principal.to_string())),
            Some(p) => Ok(p),
            None => Err(LoginError::InvalidCredentials),
        };
        match result {
            Ok(profile) => {
                let credentials = self.signer.issue(principal);
                Ok((credentials, PrivilegeSet::for_roles(&profile.principal, &profile.roles)))
            }
            Err(e) => {
                self.audit_failure(principal, "login", e.code());
                Err(e)
            }
        }
    }

    /// Opens a client container for `credentials` and dispatches the
    /// principal's AA (academicians) or SA (students) into it.
    pub fn open_session(&self, session_id: &str, credentials: &Credentials) -> Result<ClientSession, RuntimeError> {
        let privileges = self.auth.authenticate(credentials)?;
        let container = self.runtime.open_client(session_id, &credentials.principal)?;
        let delegate = if privileges.has(Role::Academician) || privileges.has(Role::Student) {
            let kind = delegate_for(&privileges);
            let id = format!("{}-{session_id}", kind.to_string().to_lowercase());
            match self
                .runtime
                .dispatch(AgentDescriptor::new(&id, kind, &container), &container, credentials)
            {
                Ok(handle) => Some(handle.agent_id),
                Err(e) => {
                    self.runtime.close_client(session_id);
                    return Err(e);
                }
            }
        } else {
            None
        };
        Ok(ClientSession {
            session_id: session_id.to_string(),
            principal: credentials.principal.clone(),
            privileges,
            container,
            delegate,
        })
    }

    pub fn close_session(&self, session_id: &str) {
        self.runtime.close_client(session_id);
    }

    /// Sends an ASSESS_REQUEST to the UIA and waits for its PRESENT or ERROR.
    /// `Ok(None)` means no answer arrived within `max_wait`.
    pub fn assess(
        &self,
        session_id: &str,
        correlation_id: &str,
        credentials: &Credentials,
        request: &AssessRequest,
        max_wait: Duration,
    ) -> Result<Option<MessageEnvelope>, Rejection> {
        self.runtime.submit(
            session_id,
            UIA_ID,
            MessageKind::AssessRequest,
            correlation_id,
            credentials,
            serde_json::to_value(request).expect("request serializes"),
        )?;
        Ok(self.runtime.await_reply(session_id, correlation_id, max_wait))
    }

    /// Flushes the store and audit log to disk.
    pub fn flush(&self) -> std::io::Result<()> {
        self.store.flush().map_err(|e| std::io::Error::other(e.to_string()))?;
        self.audit.flush()
    }

    pub fn shutdown(&self) {
        self.runtime.shutdown();
        if let Err(e) = self.flush() {
            log::error!("flush on shutdown failed: {e}");
        }
    }
}
