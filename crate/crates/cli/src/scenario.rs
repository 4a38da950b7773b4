//! The canonical assessment scenario, run end to end on a scratch copy of a
//! store with the deterministic scheduler.

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use imobe_core::audit::AuditAction;
use imobe_core::auth::{Credentials, Role};
use imobe_core::fixture::Fixture;
use imobe_core::kinds::AgentKind;
use imobe_core::protocol::payload::{AssessRequest, ErrorPayload, Scope};
use imobe_core::protocol::{canonical_trace, MessageKind, Step};
use imobe_core::runtime::{Mode, RejectReason, TraceEntry};

use crate::config::Config;
use crate::{courses, first_with_role, open_platform, seed_error, CliError};

pub const SESSION_ID: &str = "sim";
pub const CORRELATION_ID: &str = "scenario-1";

/// A fault introduced after setup and before the request is sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inject {
    StoreRemoved,
    ForgedToken,
}

/// Where the scratch store gets its contents.
#[derive(Debug, Clone)]
pub enum Source {
    Fixture(String),
    /// An existing store log, copied before use.
    Store(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ScenarioArgs {
    pub source: Source,
    pub inject: Option<Inject>,
    pub course: Option<String>,
    pub principal: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Divergence {
    /// 1-based position in the trace.
    pub step: usize,
    pub expected: Option<Step>,
    pub found: Option<Step>,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub principal: String,
    pub course_id: String,
    pub trace: Vec<TraceEntry>,
    pub expected: Vec<Step>,
    /// Set when the runtime refused the opening request.
    pub rejection: Option<String>,
    /// The ERROR the client received, if any.
    pub error: Option<ErrorPayload>,
    pub auth_failures: usize,
}

impl ScenarioRun {
    pub fn divergence(&self) -> Option<Divergence> {
        let found: Vec<Step> = self.trace.iter().map(TraceEntry::step).collect();
        let n = found.len().max(self.expected.len());
        (0..n)
            .find(|&i| found.get(i) != self.expected.get(i))
            .map(|i| Divergence {
                step: i + 1,
                expected: self.expected.get(i).copied(),
                found: found.get(i).copied(),
            })
    }

    /// One line per envelope.
    pub fn trace_lines(&self) -> Vec<String> {
        self.trace
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let e = &t.envelope;
                format!(
                    "{:>2}. {:<40} {} -> {}  msg_id={} ts={}",
                    i + 1,
                    t.step().to_string(),
                    e.from,
                    e.to,
                    e.msg_id,
                    e.ts
                )
            })
            .collect()
    }

    /// Summary lines printed after the trace.
    pub fn verdict_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(rejection) = &self.rejection {
            out.push(format!("rejected: {rejection}"));
        }
        if self.auth_failures > 0 {
            out.push(format!("AuthFailure audit events: {}", self.auth_failures));
        }
        if let Some(error) = &self.error {
            out.push(format!("error: {}: {}", error.code, error.reason));
        }
        match self.divergence() {
            None => out.push(format!("OK: trace matches the canonical {}-step sequence", self.expected.len())),
            Some(d) => {
                let show = |s: Option<Step>| s.map_or("end of trace".to_string(), |s| s.to_string());
                out.push(format!(
                    "DIVERGENCE at step {}: expected {}, found {}",
                    d.step,
                    show(d.expected),
                    show(d.found)
                ));
            }
        }
        out
    }
}

fn forge(credentials: &Credentials) -> Credentials {
    let mut forged = credentials.clone();
    let flipped = match forged.token.pop() {
        Some('0') => '1',
        _ => '0',
    };
    forged.token.push(flipped);
    forged
}

pub fn simulate(config: &Config, args: &ScenarioArgs) -> Result<ScenarioRun, CliError> {
    let scratch = tempfile::tempdir().map_err(|e| CliError::Io(format!("cannot create scratch dir: {e}")))?;
    let store_path = scratch.path().join("scenario.jsonl");
    let fixture = match &args.source {
        Source::Fixture(text) => {
            let fixture = Fixture::parse(text).map_err(seed_error)?;
            fixture.validate().map_err(seed_error)?;
            Some(fixture)
        }
        Source::Store(path) => {
            fs::copy(path, &store_path)
                .map_err(|e| CliError::Io(format!("cannot copy {}: {e}", path.display())))?;
            None
        }
    };
    let platform = open_platform(config.platform(
        Some(store_path.clone()),
        b"imobe-scenario".to_vec(),
        Mode::Deterministic,
    ))?;
    let outcome = (|| {
        if let Some(fixture) = &fixture {
            fixture
                .seed(&platform.store, &platform.system_credentials())
                .map_err(seed_error)?;
        }
        platform.runtime.run_until_idle();
        let principal = match &args.principal {
            Some(p) => p.clone(),
            None => first_with_role(&platform, Role::Academician)
                .ok_or_else(|| CliError::Usage("no enabled academician to run the scenario; pass --as".into()))?,
        };
        let course_id = match &args.course {
            Some(c) => c.clone(),
            None => courses(&platform)
                .into_iter()
                .next()
                .ok_or_else(|| CliError::Usage("the store has no assessment items".into()))?,
        };
        let credentials = platform.signer.issue(&principal);
        let session = platform
            .open_session(SESSION_ID, &credentials)
            .map_err(|e| CliError::Usage(format!("cannot open a session for {principal}: {e}")))?;
        let delegate = if session.privileges.has(Role::Academician) {
            AgentKind::AA
        } else {
            AgentKind::SA
        };
        let scope = if delegate == AgentKind::SA {
            Scope::StudentResult {
                student_id: principal.clone(),
            }
        } else {
            Scope::CourseReport
        };

        let sent_with = match args.inject {
            Some(Inject::StoreRemoved) => {
                fs::remove_file(&store_path)
                    .map_err(|e| CliError::Io(format!("cannot remove {}: {e}", store_path.display())))?;
                credentials
            }
            Some(Inject::ForgedToken) => forge(&credentials),
            None => credentials,
        };
        let failures_before = platform.audit.count(AuditAction::AuthFailure);
        let request = AssessRequest {
            course_id: course_id.clone(),
            scope,
            threshold: None,
        };
        let wait = Duration::from_millis(config.workflow_budget_ms + 2_000);
        let (rejection, reply) = match platform.assess(SESSION_ID, CORRELATION_ID, &sent_with, &request, wait) {
            Ok(reply) => (None, reply),
            Err(r) => {
                let shown = match &r.reason {
                    RejectReason::Auth(e) => format!("AuthFailure ({}: {})", e.code(), r.detail),
                    other => format!("{} ({})", other.code(), r.detail),
                };
                (Some(shown), None)
            }
        };
        platform.runtime.run_until_idle();
        let error = reply
            .filter(|r| r.kind == MessageKind::Error)
            .map(|r| ErrorPayload::from_value(&r.payload));
        Ok(ScenarioRun {
            principal,
            course_id,
            trace: platform.runtime.trace(CORRELATION_ID),
            expected: canonical_trace(delegate),
            rejection,
            error,
            auth_failures: platform.audit.count(AuditAction::AuthFailure) - failures_before,
        })
    })();
    platform.shutdown();
    outcome
}
