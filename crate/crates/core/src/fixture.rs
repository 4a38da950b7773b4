//! Seed files: outcome hierarchy, items, users and optional scores in one
//! JSON document, validated as a whole before anything is written.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{Credentials, Role, UserProfile};
use crate::domain::{validate_hierarchy, AssessmentItem, OutcomeNode};
use crate::store::{ObeStore, ScoreDoc, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSeed {
    pub principal: String,
    pub secret: String,
    pub roles: BTreeSet<Role>,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    #[serde(default)]
    pub outcomes: Vec<OutcomeNode>,
    #[serde(default)]
    pub items: Vec<AssessmentItem>,
    #[serde(default)]
    pub users: Vec<UserSeed>,
    #[serde(default)]
    pub scores: Vec<ScoreDoc>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedCounts {
    pub outcomes: usize,
    pub items: usize,
    pub users: usize,
    pub scores: usize,
}

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("invalid fixture JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("ValidationFailure at {path}: {reason}")]
    Validation { path: String, reason: String },
    #[error("store rejected {key}: {source}")]
    Store { key: String, source: StoreError },
}

fn invalid(path: String, reason: impl Into<String>) -> SeedError {
    SeedError::Validation {
        path,
        reason: reason.into(),
    }
}

impl Fixture {
    pub fn parse(text: &str) -> Result<Fixture, SeedError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn counts(&self) -> SeedCounts {
        SeedCounts {
            outcomes: self.outcomes.len(),
            items: self.items.len(),
            users: self.users.len(),
            scores: self.scores.len(),
        }
    }

    /// Checks every record; the first problem is reported with its path.
    pub fn validate(&self) -> Result<(), SeedError> {
        let report = validate_hierarchy(&self.outcomes);
        if let Some(v) = report.violations.first() {
            let node = match v {
                crate::domain::Violation::DuplicateId { id } => id.clone(),
                crate::domain::Violation::LevelSkip { node, .. }
                | crate::domain::Violation::Orphan { node, .. }
                | crate::domain::Violation::DanglingParent { node, .. } => node.clone(),
                crate::domain::Violation::Cycle { path } => path.first().cloned().unwrap_or_default(),
            };
            let index = self.outcomes.iter().position(|n| n.id == node).unwrap_or(0);
            return Err(invalid(format!("outcomes[{index}]"), v.to_string()));
        }
        let mut items: BTreeMap<&str, &AssessmentItem> = BTreeMap::new();
        for (i, item) in self.items.iter().enumerate() {
            let path = format!("items[{i}]");
            item.check().map_err(|r| invalid(path.clone(), r))?;
            if item.id.is_empty() || item.id.contains('/') {
                return Err(invalid(path, "id must be non-empty and contain no '/'"));
            }
            if items.insert(&item.id, item).is_some() {
                return Err(invalid(path, format!("duplicate item {}", item.id)));
            }
        }
        let mut principals = BTreeSet::new();
        for (i, user) in self.users.iter().enumerate() {
            let path = format!("users[{i}]");
            if user.principal.is_empty() || user.principal.contains('/') || user.principal == crate::auth::SYSTEM_PRINCIPAL {
                return Err(invalid(path, format!("bad principal {:?}", user.principal)));
            }
            if user.roles.is_empty() || user.roles.contains(&Role::System) {
                return Err(invalid(path, "roles must be non-empty and exclude System"));
            }
            if !principals.insert(&user.principal) {
                return Err(invalid(path, format!("duplicate principal {}", user.principal)));
            }
        }
        for (i, score) in self.scores.iter().enumerate() {
            let path = format!("scores[{i}]");
            let item = items
                .get(score.item_id.as_str())
                .ok_or_else(|| invalid(path.clone(), format!("unknown item {}", score.item_id)))?;
            if item.course_id != score.course_id {
                return Err(invalid(path, format!("item {} is not in course {}", item.id, score.course_id)));
            }
            score.to_score().check_against(item).map_err(|r| invalid(path, r))?;
        }
        Ok(())
    }

    /// Validates, then writes every record. Re-seeding the same fixture
    /// bumps each record's version by one.
    pub fn seed(&self, store: &ObeStore, credentials: &Credentials) -> Result<SeedCounts, SeedError> {
        self.validate()?;
        let put = |key: String, doc: serde_json::Value| {
            store
                .put(&key, doc, credentials)
                .map_err(|source| SeedError::Store { key, source })
        };
        for node in &self.outcomes {
            put(format!("outcome/{}", node.id), serde_json::to_value(node)?)?;
        }
        for item in &self.items {
            put(format!("item/{}", item.id), serde_json::to_value(item)?)?;
        }
        for user in &self.users {
            let mut profile = UserProfile::new(&user.principal, &user.secret, user.roles.clone());
            profile.enabled = user.enabled;
            put(format!("user/{}", user.principal), serde_json::to_value(profile)?)?;
        }
        for score in &self.scores {
            put(score.key(), serde_json::to_value(score)?)?;
        }
        Ok(self.counts())
    }
}
