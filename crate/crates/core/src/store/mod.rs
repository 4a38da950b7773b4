//! The OBE database server.
//!
//! Two repositories share one append-only JSONL log: `user/…` records make
//! up the user-profile repository, everything else (`score/…`, `item/…`,
//! `outcome/…`) the data repository. The in-memory index holds the latest
//! version of each key and is rebuilt from the log on open.
//!
//! Writes are serialized through a single committer lock. A write is
//! appended to the log, indexed, and mirrored to the audit sink before
//! `put` returns.

mod docs;
mod endpoint;
mod snapshot;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audit::{AuditAction, AuditDraft, AuditSink, AuditSource};
use crate::auth::{authenticate, AuthError, Credentials, PrincipalDirectory, PrivilegeSet, Role, TokenSigner, UserProfile};
use crate::kinds::{AgentKind, EndpointKind};

pub use docs::ScoreDoc;
pub use snapshot::Snapshot;

pub const QUERYABLE_PREFIXES: [&str; 4] = ["score", "item", "outcome", "user"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepositoryName {
    Data,
    UserProfiles,
}

/// One log line and one index entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub key: String,
    pub version: u64,
    pub ts: u64,
    pub doc: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    pub prefix: String,
    /// Exact-match conjunction over top-level document fields.
    #[serde(default)]
    pub filters: BTreeMap<String, String>,
}

impl Selector {
    pub fn new(prefix: &str) -> Self {
        Selector {
            prefix: prefix.to_string(),
            filters: BTreeMap::new(),
        }
    }

    pub fn filter(mut self, field: &str, value: &str) -> Self {
        self.filters.insert(field.to_string(), value.to_string());
        self
    }

    fn matches(&self, doc: &Value) -> bool {
        self.filters.iter().all(|(field, wanted)| match doc.get(field) {
            Some(Value::String(s)) => s == wanted,
            Some(other) => other.to_string() == *wanted,
            None => false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreQuery {
    pub correlation_id: String,
    pub selectors: Vec<Selector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreResult {
    pub records: Vec<Record>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("{principal} may not write {key}")]
    Unauthorized { principal: String, key: String },
    #[error("invalid key prefix in {0:?}")]
    InvalidKeyPrefix(String),
    #[error("validation failed for {key}: {reason}")]
    ValidationFailure { key: String, reason: String },
    #[error("{0} may not query the store")]
    RouteForbidden(EndpointKind),
    #[error("snapshot digest mismatch")]
    DigestMismatch,
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("store log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Auth(e) => e.code(),
            StoreError::Unauthorized { .. } => "Unauthorized",
            StoreError::InvalidKeyPrefix(_) => "InvalidKeyPrefix",
            StoreError::ValidationFailure { .. } => "ValidationFailure",
            StoreError::RouteForbidden(_) => "RouteForbidden",
            StoreError::DigestMismatch => "DigestMismatch",
            StoreError::Unavailable(_) => "StoreUnavailable",
            StoreError::Corrupt { .. } => "Corrupt",
            StoreError::Io(_) => "StoreIo",
        }
    }
}

/// Splits `prefix/rest`, checking the prefix is known and `rest` non-empty.
pub fn repository_for(key: &str) -> Result<(RepositoryName, &str, &str), StoreError> {
    let (prefix, rest) = key
        .split_once('/')
        .ok_or_else(|| StoreError::InvalidKeyPrefix(key.to_string()))?;
    if rest.is_empty() || !QUERYABLE_PREFIXES.contains(&prefix) {
        return Err(StoreError::InvalidKeyPrefix(key.to_string()));
    }
    let repo = if prefix == "user" {
        RepositoryName::UserProfiles
    } else {
        RepositoryName::Data
    };
    Ok((repo, prefix, rest))
}

fn may_write(privileges: &PrivilegeSet, prefix: &str) -> bool {
    privileges.has(Role::System)
        || match prefix {
            "user" => privileges.has(Role::Administrator),
            _ => privileges.has(Role::Academician),
        }
}

#[derive(Default)]
struct Index {
    data: BTreeMap<String, Record>,
    profiles: BTreeMap<String, Record>,
}

impl Index {
    fn repo(&self, name: RepositoryName) -> &BTreeMap<String, Record> {
        match name {
            RepositoryName::Data => &self.data,
            RepositoryName::UserProfiles => &self.profiles,
        }
    }

    fn get(&self, key: &str) -> Option<&Record> {
        let (repo, _, _) = repository_for(key).ok()?;
        self.repo(repo).get(key)
    }

    fn apply(&mut self, record: Record) -> Result<(), StoreError> {
        let (repo, _, _) = repository_for(&record.key)?;
        let map = match repo {
            RepositoryName::Data => &mut self.data,
            RepositoryName::UserProfiles => &mut self.profiles,
        };
        map.insert(record.key.clone(), record);
        Ok(())
    }
}

struct Committer {
    file: Option<File>,
    history: Vec<Record>,
}

pub struct ObeStore {
    path: Option<PathBuf>,
    signer: Arc<TokenSigner>,
    audit: Arc<dyn AuditSink>,
    committer: Mutex<Committer>,
    index: RwLock<Index>,
}

impl ObeStore {
    pub fn in_memory(signer: Arc<TokenSigner>, audit: Arc<dyn AuditSink>) -> Self {
        ObeStore {
            path: None,
            signer,
            audit,
            committer: Mutex::new(Committer {
                file: None,
                history: Vec::new(),
            }),
            index: RwLock::new(Index::default()),
        }
    }

    /// Opens (or creates) the log at `path` and rebuilds the index from it.
    pub fn open(path: &Path, signer: Arc<TokenSigner>, audit: Arc<dyn AuditSink>) -> Result<Self, StoreError> {
        let history = if path.exists() {
            parse_log(BufReader::new(File::open(path)?))?
        } else {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Vec::new()
        };
        let mut index = Index::default();
        for record in &history {
            index.apply(record.clone())?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ObeStore {
            path: Some(path.to_path_buf()),
            signer,
            audit,
            committer: Mutex::new(Committer {
                file: Some(file),
                history,
            }),
            index: RwLock::new(index),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// False once the backing log file has gone away.
    pub fn is_available(&self) -> bool {
        self.path.as_ref().map(|p| p.exists()).unwrap_or(true)
    }

    fn audit(&self, principal: &str, action: AuditAction, subject: &str, detail: Value) {
        self.audit.emit(AuditDraft::new(
            self.signer.now_ms(),
            principal,
            action,
            subject,
            detail,
            AuditSource::Store,
        ));
    }

    pub fn authenticate(&self, credentials: &Credentials) -> Result<PrivilegeSet, AuthError> {
        authenticate(credentials, &self.signer, self)
    }

    pub fn signer(&self) -> &Arc<TokenSigner> {
        &self.signer
    }

    /// Authorized, validated write. Returns the new version of `key`.
    pub fn put(&self, key: &str, doc: Value, credentials: &Credentials) -> Result<u64, StoreError> {
        let privileges = match authenticate(credentials, &self.signer, self) {
            Ok(p) => p,
            Err(e) => {
                self.audit(&credentials.principal, AuditAction::AuthFailure, key, json!({"code": e.code()}));
                return Err(e.into());
            }
        };
        let (_, prefix, _) = repository_for(key)?;
        if !may_write(&privileges, prefix) {
            self.audit(
                &credentials.principal,
                AuditAction::AuthFailure,
                key,
                json!({"code": "Unauthorized"}),
            );
            return Err(StoreError::Unauthorized {
                principal: credentials.principal.clone(),
                key: key.to_string(),
            });
        }
        self.commit(key, doc, &credentials.principal)
    }

    fn commit(&self, key: &str, doc: Value, principal: &str) -> Result<u64, StoreError> {
        if !self.is_available() {
            return Err(StoreError::Unavailable("log file missing".into()));
        }
        let mut committer = self.committer.lock().expect("committer lock");
        {
            let index = self.index.read().expect("index lock");
            docs::validate(key, &doc, |k| index.get(k).map(|r| r.doc.clone()))?;
        }
        let version = self
            .index
            .read()
            .expect("index lock")
            .get(key)
            .map(|r| r.version + 1)
            .unwrap_or(1);
        let record = Record {
            key: key.to_string(),
            version,
            ts: self.signer.now_ms(),
            doc,
        };
        if let Some(file) = committer.file.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            file.write_all(&line)?;
        }
        committer.history.push(record.clone());
        self.index.write().expect("index lock").apply(record)?;
        self.audit(principal, AuditAction::StoreWrite, key, json!({"version": version}));
        Ok(version)
    }

    /// Latest version of `key`, unfiltered. For the owning process only;
    /// agents go through [`ObeStore::query`].
    pub fn get(&self, key: &str) -> Option<Record> {
        self.index.read().expect("index lock").get(key).cloned()
    }

    /// Latest-version records matching any selector, in key order. Only the
    /// Assessment and System Administrator agents may query.
    pub fn query(&self, query: &StoreQuery, caller: EndpointKind) -> Result<Vec<Record>, StoreError> {
        if !matches!(caller, EndpointKind::Agent(AgentKind::AssA) | EndpointKind::Agent(AgentKind::SAA)) {
            return Err(StoreError::RouteForbidden(caller));
        }
        self.scan(&query.selectors)
    }

    fn scan(&self, selectors: &[Selector]) -> Result<Vec<Record>, StoreError> {
        for selector in selectors {
            if !QUERYABLE_PREFIXES.contains(&selector.prefix.as_str()) {
                return Err(StoreError::InvalidKeyPrefix(selector.prefix.clone()));
            }
        }
        let index = self.index.read().expect("index lock");
        let mut hits: BTreeMap<&str, &Record> = BTreeMap::new();
        for selector in selectors {
            let repo = if selector.prefix == "user" {
                index.repo(RepositoryName::UserProfiles)
            } else {
                index.repo(RepositoryName::Data)
            };
            let start = format!("{}/", selector.prefix);
            for (key, record) in repo.range(start.clone()..) {
                if !key.starts_with(&start) {
                    break;
                }
                if selector.matches(&record.doc) {
                    hits.insert(key, record);
                }
            }
        }
        Ok(hits.into_values().cloned().collect())
    }

    /// Same as an agent query, for operator tooling running in-process.
    pub fn scan_prefix(&self, selector: &Selector) -> Result<Vec<Record>, StoreError> {
        self.scan(std::slice::from_ref(selector))
    }

    pub fn repository_keys(&self, repo: RepositoryName) -> Vec<String> {
        self.index.read().expect("index lock").repo(repo).keys().cloned().collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        let committer = self.committer.lock().expect("committer lock");
        Snapshot::from_records(&committer.history)
    }

    /// Replaces the whole store with a verified snapshot.
    pub fn restore(&self, snapshot: &Snapshot) -> Result<(), StoreError> {
        snapshot.verify()?;
        let history = parse_log(snapshot.log.as_slice())?;
        let mut index = Index::default();
        for record in &history {
            index.apply(record.clone())?;
        }
        let mut committer = self.committer.lock().expect("committer lock");
        if let Some(path) = &self.path {
            let tmp = path.with_extension("restore.tmp");
            fs::write(&tmp, &snapshot.log)?;
            fs::rename(&tmp, path)?;
            committer.file = Some(OpenOptions::new().append(true).open(path)?);
        }
        committer.history = history;
        *self.index.write().expect("index lock") = index;
        Ok(())
    }

    pub fn flush(&self) -> Result<(), StoreError> {
        let committer = self.committer.lock().expect("committer lock");
        if let Some(file) = committer.file.as_ref() {
            file.sync_all()?;
        }
        Ok(())
    }

    /// Number of successful writes since the log began.
    pub fn write_count(&self) -> usize {
        self.committer.lock().expect("committer lock").history.len()
    }
}

impl PrincipalDirectory for ObeStore {
    fn profile(&self, principal: &str) -> Option<UserProfile> {
        let record = self.get(&format!("user/{principal}"))?;
        serde_json::from_value(record.doc).ok()
    }
}

fn parse_log(reader: impl BufRead) -> Result<Vec<Record>, StoreError> {
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(line) {
            Ok(record) => records.push(record),
            Err(_) if i + 1 == lines.len() => log::warn!("ignoring torn final log line"),
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(records)
}
