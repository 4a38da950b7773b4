use std::collections::HashMap;

use imobe_core::auth::{Credentials, PrivilegeSet};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub session_id: String,
    pub principal: String,
    pub privileges: PrivilegeSet,
    #[serde(skip)]
    pub credentials: Credentials,
    pub client_container_id: String,
    pub created_ts: u64,
    pub expires_ts: u64,
}

/// Bearer form of a credential. The signed token already names the
/// principal and issue time.
pub fn bearer(credentials: &Credentials) -> String {
    credentials.token.clone()
}

pub fn parse_bearer(text: &str) -> Option<Credentials> {
    Credentials::from_token(text)
}

/// Live sessions keyed by their bearer token.
#[derive(Debug, Default)]
pub struct SessionTable {
    by_token: HashMap<String, Session>,
}

impl SessionTable {
    pub fn insert(&mut self, token: String, session: Session) -> Option<Session> {
        self.by_token.insert(token, session)
    }

    pub fn get(&self, token: &str) -> Option<&Session> {
        self.by_token.get(token)
    }

    pub fn remove(&mut self, token: &str) -> Option<Session> {
        self.by_token.remove(token)
    }

    pub fn len(&self) -> usize {
        self.by_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_token.is_empty()
    }

    /// Drops sessions past their expiry and returns them.
    pub fn expire(&mut self, now: u64) -> Vec<Session> {
        let dead: Vec<String> = self
            .by_token
            .iter()
            .filter(|(_, s)| s.expires_ts <= now)
            .map(|(t, _)| t.clone())
            .collect();
        dead.iter().filter_map(|t| self.by_token.remove(t)).collect()
    }
}
