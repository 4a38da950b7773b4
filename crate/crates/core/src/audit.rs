//! Append-only audit trail kept for the System Administrator Agent, plus the
//! failure-rate anomaly rule run over it.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_ANOMALY_R: usize = 5;
pub const DEFAULT_ANOMALY_W_S: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuditAction {
    StoreWrite,
    AuthFailure,
    RouteRejection,
    AccountChange,
    /// Any other failed request (bad input, unknown course, failed workflow).
    RequestError,
}

impl AuditAction {
    fn counts_toward_anomaly(self) -> bool {
        matches!(self, AuditAction::AuthFailure | AuditAction::RouteRejection)
    }
}

/// Who raised the event; decides which endpoint forwards it to the SAA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditSource {
    Store,
    Gateway,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub event_id: u64,
    pub ts: u64,
    pub principal: String,
    pub action: AuditAction,
    pub subject: String,
    pub detail: Value,
}

/// An event before the log assigns its id.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditDraft {
    pub ts: u64,
    pub principal: String,
    pub action: AuditAction,
    pub subject: String,
    pub detail: Value,
    pub source: AuditSource,
}

impl AuditDraft {
    pub fn new(ts: u64, principal: &str, action: AuditAction, subject: &str, detail: Value, source: AuditSource) -> Self {
        AuditDraft {
            ts,
            principal: principal.to_string(),
            action,
            subject: subject.to_string(),
            detail,
            source,
        }
    }
}

pub trait AuditSink: Send + Sync {
    fn emit(&self, draft: AuditDraft);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyRule {
    /// A principal is flagged on its `max_failures + 1`-th failure inside the window.
    pub max_failures: usize,
    pub window_ms: u64,
}

impl Default for AnomalyRule {
    fn default() -> Self {
        AnomalyRule {
            max_failures: DEFAULT_ANOMALY_R,
            window_ms: DEFAULT_ANOMALY_W_S * 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyFlag {
    pub principal: String,
    pub ts: u64,
    pub event_id: u64,
    pub failures: usize,
}

/// Sliding-window failure counter. After a flag the principal's window is
/// cleared, so one burst yields one flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnomalyDetector {
    rule: AnomalyRule,
    windows: BTreeMap<String, VecDeque<u64>>,
}

impl AnomalyDetector {
    pub fn new(rule: AnomalyRule) -> Self {
        AnomalyDetector {
            rule,
            windows: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, event: &AuditEvent) -> Option<AnomalyFlag> {
        if !event.action.counts_toward_anomaly() {
            return None;
        }
        let window = self.windows.entry(event.principal.clone()).or_default();
        window.push_back(event.ts);
        while let Some(front) = window.front() {
            if event.ts.saturating_sub(*front) >= self.rule.window_ms {
                window.pop_front();
            } else {
                break;
            }
        }
        if window.len() > self.rule.max_failures {
            let failures = window.len();
            window.clear();
            Some(AnomalyFlag {
                principal: event.principal.clone(),
                ts: event.ts,
                event_id: event.event_id,
                failures,
            })
        } else {
            None
        }
    }
}

/// Flags raised by `rule` over an event sequence.
pub fn detect_anomalies(events: &[AuditEvent], rule: AnomalyRule) -> Vec<AnomalyFlag> {
    let mut detector = AnomalyDetector::new(rule);
    events.iter().filter_map(|e| detector.observe(e)).collect()
}

struct LogState {
    events: Vec<AuditEvent>,
    next_id: u64,
    detector: AnomalyDetector,
    flags: Vec<AnomalyFlag>,
    file: Option<File>,
    subscribers: Vec<Sender<(AuditEvent, AuditSource)>>,
}

/// The audit repository. Event ids are strictly increasing; appends are
/// mirrored to an optional JSONL file.
pub struct AuditLog {
    path: Option<PathBuf>,
    rule: AnomalyRule,
    state: Mutex<LogState>,
}

#[derive(Debug, thiserror::Error)]
pub enum AuditLogError {
    #[error("audit log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

impl AuditLog {
    pub fn in_memory(rule: AnomalyRule) -> Self {
        AuditLog {
            path: None,
            rule,
            state: Mutex::new(LogState {
                events: Vec::new(),
                next_id: 1,
                detector: AnomalyDetector::new(rule),
                flags: Vec::new(),
                file: None,
                subscribers: Vec::new(),
            }),
        }
    }

    pub fn open(path: &Path, rule: AnomalyRule) -> Result<Self, AuditLogError> {
        let events = read_events(path)?;
        let log = AuditLog::in_memory(rule);
        {
            let mut state = log.state.lock().expect("audit lock");
            for event in &events {
                if let Some(flag) = state.detector.observe(event) {
                    state.flags.push(flag);
                }
            }
            state.next_id = events.last().map(|e| e.event_id + 1).unwrap_or(1);
            state.events = events;
            state.file = Some(OpenOptions::new().create(true).append(true).open(path)?);
        }
        Ok(AuditLog {
            path: Some(path.to_path_buf()),
            ..log
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn rule(&self) -> AnomalyRule {
        self.rule
    }

    /// Appends the event and runs the anomaly rule on it. File failures are
    /// retried once and then only logged; the in-memory trail always advances.
    pub fn record(&self, draft: AuditDraft) -> (AuditEvent, Option<AnomalyFlag>) {
        let mut state = self.state.lock().expect("audit lock");
        let event = AuditEvent {
            event_id: state.next_id,
            ts: draft.ts,
            principal: draft.principal,
            action: draft.action,
            subject: draft.subject,
            detail: draft.detail,
        };
        state.next_id += 1;
        if let Some(file) = state.file.as_mut() {
            let mut line = serde_json::to_vec(&event).expect("audit event serializes");
            line.push(b'\n');
            if let Err(first) = file.write_all(&line) {
                log::warn!("audit append failed, retrying: {first}");
                if let Err(second) = file.write_all(&line) {
                    log::error!("audit append failed twice, event {} kept in memory only: {second}", event.event_id);
                }
            }
        }
        let flag = state.detector.observe(&event);
        if let Some(flag) = &flag {
            log::warn!("anomaly: {} reached {} failures", flag.principal, flag.failures);
            state.flags.push(flag.clone());
        }
        state.events.push(event.clone());
        let source = draft.source;
        state.subscribers.retain(|tx| tx.send((event.clone(), source)).is_ok());
        (event, flag)
    }

    /// Every event recorded from now on is also sent down the returned channel.
    pub fn subscribe(&self) -> Receiver<(AuditEvent, AuditSource)> {
        let (tx, rx) = channel();
        self.state.lock().expect("audit lock").subscribers.push(tx);
        rx
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.state.lock().expect("audit lock").events.clone()
    }

    pub fn events_since(&self, after_id: u64) -> Vec<AuditEvent> {
        let state = self.state.lock().expect("audit lock");
        state.events.iter().filter(|e| e.event_id > after_id).cloned().collect()
    }

    pub fn flags(&self) -> Vec<AnomalyFlag> {
        self.state.lock().expect("audit lock").flags.clone()
    }

    pub fn count(&self, action: AuditAction) -> usize {
        let state = self.state.lock().expect("audit lock");
        state.events.iter().filter(|e| e.action == action).count()
    }

    pub fn flush(&self) -> std::io::Result<()> {
        match self.state.lock().expect("audit lock").file.as_mut() {
            Some(file) => file.sync_data(),
            None => Ok(()),
        }
    }
}

impl AuditSink for AuditLog {
    fn emit(&self, draft: AuditDraft) {
        self.record(draft);
    }
}

/// Reads a JSONL audit file. A torn final line is ignored.
pub fn read_events(path: &Path) -> Result<Vec<AuditEvent>, AuditLogError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let mut events = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AuditEvent>(line) {
            Ok(event) => events.push(event),
            Err(_) if i + 1 == lines.len() => log::warn!("ignoring torn final audit line"),
            Err(e) => {
                return Err(AuditLogError::Corrupt {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn failure(log: &AuditLog, principal: &str, ts: u64) -> Option<AnomalyFlag> {
        log.record(AuditDraft::new(ts, principal, AuditAction::AuthFailure, "login", json!({}), AuditSource::Gateway))
            .1
    }

    #[test]
    fn r_plus_one_failures_inside_window_flag_once() {
        let log = AuditLog::in_memory(AnomalyRule::default());
        let flags: Vec<_> = (0..6).filter_map(|i| failure(&log, "mallory", 1_000 + i * 1_000)).collect();
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].failures, 6);
        assert_eq!(flags[0].event_id, 6);
        assert_eq!(log.flags().len(), 1);
    }

    #[test]
    fn r_failures_spread_over_two_windows_never_flag() {
        let log = AuditLog::in_memory(AnomalyRule::default());
        // 5 failures evenly over 120 s, then 5 more
        for i in 0..10u64 {
            assert!(failure(&log, "bob", i * 24_000).is_none());
        }
    }

    #[test]
    fn store_writes_never_flag() {
        let log = AuditLog::in_memory(AnomalyRule::default());
        for i in 0..50 {
            let (_, flag) = log.record(AuditDraft::new(
                i,
                "lecturer",
                AuditAction::StoreWrite,
                "score/x",
                json!({}),
                AuditSource::Store,
            ));
            assert!(flag.is_none());
        }
    }

    #[test]
    fn ids_strictly_increase_and_persist() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        {
            let log = AuditLog::open(&path, AnomalyRule::default()).unwrap();
            for i in 0..3 {
                failure(&log, "x", i);
            }
        }
        let log = AuditLog::open(&path, AnomalyRule::default()).unwrap();
        let (event, _) = log.record(AuditDraft::new(9, "y", AuditAction::AccountChange, "user/y", json!({}), AuditSource::Gateway));
        assert_eq!(event.event_id, 4);
        let ids: Vec<u64> = log.events().iter().map(|e| e.event_id).collect();
        assert_eq!(ids, vec![1, 2, 3, 4]);
    }

    #[test]
    fn detection_is_a_function_of_the_sequence() {
        let log = AuditLog::in_memory(AnomalyRule { max_failures: 2, window_ms: 10 });
        for ts in [0, 1, 2, 3, 20, 21, 22] {
            failure(&log, "p", ts);
        }
        assert_eq!(log.flags(), detect_anomalies(&log.events(), log.rule()));
        assert_eq!(log.flags().len(), 2);
    }
}
