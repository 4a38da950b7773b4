use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit::{AnomalyDetector, AnomalyFlag, AnomalyRule, AuditAction, AuditDraft, AuditEvent, AuditSink, AuditSource};
use crate::auth::{AuthError, Credentials, PrincipalDirectory, Role, UserProfile, SYSTEM_PRINCIPAL};
use crate::kinds::AgentKind;
use crate::protocol::{MessageEnvelope, MessageKind};
use crate::runtime::{AgentContext, Behavior, Outbound};
use crate::store::{ObeStore, StoreError};

use super::save;

/// System Administrator Agent: follows the audit stream and keeps its own
/// anomaly view. The audit log itself is the system of record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaaBehavior {
    detector: AnomalyDetector,
    last_event_id: u64,
    seen: u64,
    flags: Vec<AnomalyFlag>,
}

impl SaaBehavior {
    pub fn new(rule: AnomalyRule) -> Self {
        SaaBehavior {
            detector: AnomalyDetector::new(rule),
            last_event_id: 0,
            seen: 0,
            flags: Vec::new(),
        }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn flags(&self) -> &[AnomalyFlag] {
        &self.flags
    }
}

impl Behavior for SaaBehavior {
    fn kind(&self) -> AgentKind {
        AgentKind::SAA
    }

    fn handle(&mut self, _ctx: &AgentContext<'_>, env: &MessageEnvelope) -> Vec<Outbound> {
        if env.kind != MessageKind::AuditEvent {
            return Vec::new();
        }
        let Ok(event) = serde_json::from_value::<AuditEvent>(env.payload.clone()) else {
            log::warn!("SAA ignoring malformed audit event {}", env.msg_id);
            return Vec::new();
        };
        if event.event_id <= self.last_event_id {
            return Vec::new();
        }
        self.last_event_id = event.event_id;
        self.seen += 1;
        if let Some(flag) = self.detector.observe(&event) {
            log::warn!("anomaly: {} had {} failures", flag.principal, flag.failures);
            self.flags.push(flag);
        }
        Vec::new()
    }

    fn save_state(&self) -> Vec<u8> {
        save(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum AccountOp {
    Create {
        principal: String,
        secret: String,
        roles: BTreeSet<Role>,
    },
    Disable {
        principal: String,
    },
    SetRoles {
        principal: String,
        roles: BTreeSet<Role>,
    },
}

impl AccountOp {
    pub fn principal(&self) -> &str {
        match self {
            AccountOp::Create { principal, .. }
            | AccountOp::Disable { principal }
            | AccountOp::SetRoles { principal, .. } => principal,
        }
    }
}

#[derive(Debug, Error)]
pub enum AccountError {
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("{0} is not an administrator")]
    Unauthorized(String),
    #[error("no principal {0}")]
    UnknownPrincipal(String),
    #[error("principal {0} already exists")]
    DuplicatePrincipal(String),
    #[error("invalid account request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl AccountError {
    pub fn code(&self) -> &'static str {
        match self {
            AccountError::Auth(e) => e.code(),
            AccountError::Unauthorized(_) => "Unauthorized",
            AccountError::UnknownPrincipal(_) => "UnknownPrincipal",
            AccountError::DuplicatePrincipal(_) => "DuplicatePrincipal",
            AccountError::Invalid(_) => "ValidationFailure",
            AccountError::Store(e) => e.code(),
        }
    }
}

/// Creates, disables or re-roles an account in the user-profile repository.
/// Only administrators may do this. Emits one AccountChange event carrying
/// the profile; refusals emit one AuthFailure.
pub fn saa_manage_account(
    store: &ObeStore,
    audit: &dyn AuditSink,
    credentials: &Credentials,
    op: AccountOp,
) -> Result<UserProfile, AccountError> {
    let now = store.signer().now_ms();
    let refuse = |code: &str| {
        audit.emit(AuditDraft::new(
            now,
            &credentials.principal,
            AuditAction::AuthFailure,
            &format!("user/{}", op.principal()),
            json!({"code": code}),
            AuditSource::Gateway,
        ));
    };
    let privileges = store.authenticate(credentials).inspect_err(|e| refuse(e.code()))?;
    if !(privileges.has(Role::Administrator) || privileges.has(Role::System)) {
        refuse("Unauthorized");
        return Err(AccountError::Unauthorized(credentials.principal.clone()));
    }
    let principal = op.principal().to_string();
    if principal.is_empty() || principal == SYSTEM_PRINCIPAL || principal.contains('/') {
        return Err(AccountError::Invalid(format!("principal name {principal:?}")));
    }
    let existing = store.profile(&principal);
    let profile = match (op, existing) {
        (AccountOp::Create { .. }, Some(_)) => return Err(AccountError::DuplicatePrincipal(principal)),
        (AccountOp::Create { secret, roles, .. }, None) => {
            if roles.contains(&Role::System) {
                return Err(AccountError::Invalid("the System role cannot be granted".into()));
            }
            UserProfile::new(&principal, &secret, roles)
        }
        (_, None) => return Err(AccountError::UnknownPrincipal(principal)),
        (AccountOp::Disable { .. }, Some(mut p)) => {
            p.enabled = false;
            p
        }
        (AccountOp::SetRoles { roles, .. }, Some(mut p)) => {
            if roles.contains(&Role::System) {
                return Err(AccountError::Invalid("the System role cannot be granted".into()));
            }
            p.roles = roles;
            p
        }
    };
    let key = format!("user/{principal}");
    store.put(&key, serde_json::to_value(&profile).expect("profile serializes"), credentials)?;
    audit.emit(AuditDraft::new(
        now,
        &credentials.principal,
        AuditAction::AccountChange,
        &key,
        json!({"profile": profile.public_view()}),
        AuditSource::Gateway,
    ));
    Ok(profile)
}
