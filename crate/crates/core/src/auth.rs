//! Credentials, signed tokens and privilege resolution.
//!
//! A token is `v1.<hex principal>.<issued_at ms>.<hex hmac-sha256>` where the
//! MAC covers the principal and the issue time. Tokens older than the
//! configured ttl never verify.

use std::collections::BTreeSet;
use std::sync::Arc;

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::kinds::{AgentKind, EndpointKind};

pub const SYSTEM_PRINCIPAL: &str = "system";
pub const DEFAULT_TOKEN_TTL_S: u64 = 3600;

/// Tokens issued this far in the future are still accepted.
const CLOCK_SKEW_MS: u64 = 1_000;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Academician,
    Student,
    Administrator,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Credentials {
    pub principal: String,
    pub token: String,
    pub issued_at: u64,
}

impl Credentials {
    /// Rebuilds credentials from a bare token. Only the layout is checked
    /// here; the signature is checked by [`TokenSigner::verify`].
    pub fn from_token(token: &str) -> Option<Credentials> {
        let mut parts = token.split('.');
        let (Some("v1"), Some(principal_hex), Some(issued), Some(tag), None) =
            (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return None;
        };
        let principal = String::from_utf8(hex::decode(principal_hex).ok()?).ok()?;
        if principal.is_empty() || tag.is_empty() {
            return None;
        }
        Some(Credentials {
            principal,
            token: token.to_string(),
            issued_at: issued.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivilegeSet {
    pub principal: String,
    pub roles: BTreeSet<Role>,
    pub reachable_kinds: BTreeSet<EndpointKind>,
}

impl PrivilegeSet {
    pub fn for_roles(principal: &str, roles: &BTreeSet<Role>) -> Self {
        let mut reachable = BTreeSet::new();
        for role in roles {
            match role {
                Role::Academician | Role::Student => {
                    reachable.insert(EndpointKind::Agent(AgentKind::UIA));
                }
                Role::Administrator => {
                    reachable.insert(EndpointKind::Agent(AgentKind::UIA));
                    reachable.insert(EndpointKind::Agent(AgentKind::SAA));
                }
                Role::System => {
                    reachable.extend(EndpointKind::ALL.iter().filter(|k| **k != EndpointKind::Client));
                }
            }
        }
        PrivilegeSet {
            principal: principal.to_string(),
            roles: roles.clone(),
            reachable_kinds: reachable,
        }
    }

    pub fn has(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }

    /// Whether this principal may dispatch an agent of `kind`.
    pub fn may_dispatch(&self, kind: AgentKind) -> bool {
        if self.has(Role::System) {
            return true;
        }
        match kind {
            AgentKind::AA => self.has(Role::Academician),
            AgentKind::SA => self.has(Role::Student),
            AgentKind::SAA => self.has(Role::Administrator),
            AgentKind::UIA | AgentKind::AssA => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("credentials expired")]
    ExpiredCredentials,
    #[error("unknown principal {0}")]
    UnknownPrincipal(String),
}

impl AuthError {
    pub fn code(&self) -> &'static str {
        match self {
            AuthError::InvalidCredentials => "InvalidCredentials",
            AuthError::ExpiredCredentials => "ExpiredCredentials",
            AuthError::UnknownPrincipal(_) => "UnknownPrincipal",
        }
    }
}

/// A registered user as kept in the user-profile repository.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub principal: String,
    pub roles: BTreeSet<Role>,
    pub enabled: bool,
    pub salt: String,
    pub secret_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_request: Option<serde_json::Value>,
}

impl UserProfile {
    pub fn new(principal: &str, secret: &str, roles: BTreeSet<Role>) -> Self {
        let salt = hex::encode(rand_salt(principal));
        let secret_hash = hash_secret(&salt, secret);
        UserProfile {
            principal: principal.to_string(),
            roles,
            enabled: true,
            salt,
            secret_hash,
            last_request: None,
        }
    }

    pub fn check_secret(&self, secret: &str) -> bool {
        constant_time_eq(hash_secret(&self.salt, secret).as_bytes(), self.secret_hash.as_bytes())
    }

    /// Copy safe to hand out over the API.
    pub fn public_view(&self) -> serde_json::Value {
        serde_json::json!({
            "principal": self.principal,
            "roles": self.roles,
            "enabled": self.enabled,
        })
    }
}

fn rand_salt(principal: &str) -> [u8; 16] {
    let mut hasher = Sha256::new();
    hasher.update(principal.as_bytes());
    hasher.update(rand::random::<[u8; 16]>());
    let digest = hasher.finalize();
    let mut salt = [0u8; 16];
    salt.copy_from_slice(&digest[..16]);
    salt
}

pub fn hash_secret(salt: &str, secret: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(salt.as_bytes());
    hasher.update([0u8]);
    hasher.update(secret.as_bytes());
    hex::encode(hasher.finalize())
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Lookup of registered principals.
pub trait PrincipalDirectory: Send + Sync {
    fn profile(&self, principal: &str) -> Option<UserProfile>;
}

/// Issues and checks tokens with a shared secret.
pub struct TokenSigner {
    secret: Vec<u8>,
    ttl_ms: u64,
    clock: Arc<dyn Clock>,
}

impl TokenSigner {
    pub fn new(secret: &[u8], ttl_s: u64, clock: Arc<dyn Clock>) -> Self {
        TokenSigner {
            secret: secret.to_vec(),
            ttl_ms: ttl_s.saturating_mul(1000),
            clock,
        }
    }

    pub fn ttl_ms(&self) -> u64 {
        self.ttl_ms
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    fn mac(&self, principal: &str, issued_at: u64) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.secret).expect("hmac accepts any key length");
        mac.update(b"imobe-token-v1\0");
        mac.update(principal.as_bytes());
        mac.update(b"\0");
        mac.update(issued_at.to_string().as_bytes());
        mac
    }

    pub fn issue(&self, principal: &str) -> Credentials {
        self.issue_at(principal, self.clock.now_ms())
    }

    pub fn issue_at(&self, principal: &str, issued_at: u64) -> Credentials {
        let tag = self.mac(principal, issued_at).finalize().into_bytes();
        Credentials {
            principal: principal.to_string(),
            token: format!("v1.{}.{}.{}", hex::encode(principal), issued_at, hex::encode(tag)),
            issued_at,
        }
    }

    /// Signature and expiry check only; does not consult the directory.
    pub fn verify(&self, credentials: &Credentials) -> Result<(), AuthError> {
        let mut parts = credentials.token.split('.');
        let (Some("v1"), Some(principal_hex), Some(issued), Some(tag_hex), None) =
            (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(AuthError::InvalidCredentials);
        };
        let principal = hex::decode(principal_hex)
            .ok()
            .and_then(|b| String::from_utf8(b).ok())
            .ok_or(AuthError::InvalidCredentials)?;
        let issued_at: u64 = issued.parse().map_err(|_| AuthError::InvalidCredentials)?;
        let tag = hex::decode(tag_hex).map_err(|_| AuthError::InvalidCredentials)?;
        if principal != credentials.principal || issued_at != credentials.issued_at {
            return Err(AuthError::InvalidCredentials);
        }
        self.mac(&principal, issued_at)
            .verify_slice(&tag)
            .map_err(|_| AuthError::InvalidCredentials)?;
        let now = self.clock.now_ms();
        if issued_at > now.saturating_add(CLOCK_SKEW_MS) {
            return Err(AuthError::InvalidCredentials);
        }
        if now.saturating_sub(issued_at) > self.ttl_ms {
            return Err(AuthError::ExpiredCredentials);
        }
        Ok(())
    }

    /// Expiry time of tokens issued at `issued_at`.
    pub fn expires_at(&self, issued_at: u64) -> u64 {
        issued_at.saturating_add(self.ttl_ms)
    }
}

/// Verifies the token and resolves the principal's privileges. Disabled
/// accounts are reported as unknown principals.
pub fn authenticate(
    credentials: &Credentials,
    signer: &TokenSigner,
    directory: &dyn PrincipalDirectory,
) -> Result<PrivilegeSet, AuthError> {
    signer.verify(credentials)?;
    if credentials.principal == SYSTEM_PRINCIPAL {
        return Ok(PrivilegeSet::for_roles(SYSTEM_PRINCIPAL, &[Role::System].into()));
    }
    match directory.profile(&credentials.principal) {
        Some(profile) if profile.enabled => Ok(PrivilegeSet::for_roles(&profile.principal, &profile.roles)),
        _ => Err(AuthError::UnknownPrincipal(credentials.principal.clone())),
    }
}

/// Signer plus directory, the pair every entry point authenticates against.
#[derive(Clone)]
pub struct Authenticator {
    pub signer: Arc<TokenSigner>,
    pub directory: Arc<dyn PrincipalDirectory>,
}

impl Authenticator {
    pub fn new(signer: Arc<TokenSigner>, directory: Arc<dyn PrincipalDirectory>) -> Self {
        Authenticator { signer, directory }
    }

    pub fn authenticate(&self, credentials: &Credentials) -> Result<PrivilegeSet, AuthError> {
        authenticate(credentials, &self.signer, self.directory.as_ref())
    }

    pub fn system_credentials(&self) -> Credentials {
        self.signer.issue(SYSTEM_PRINCIPAL)
    }
}
