//! Operator commands behind the `imobe` binary.

pub mod config;
pub mod scenario;
pub mod table;

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use imobe_core::audit::{detect_anomalies, read_events, AnomalyFlag, AuditEvent};
use imobe_core::auth::{Credentials, PrincipalDirectory, Role};
use imobe_core::clock::SystemClock;
use imobe_core::fixture::{Fixture, SeedCounts, SeedError};
use imobe_core::platform::{Platform, PlatformConfig};
use imobe_core::protocol::payload::{AssessRequest, ErrorPayload, Scope};
use imobe_core::protocol::MessageKind;
use imobe_core::runtime::Mode;
use imobe_core::store::{RepositoryName, Selector};
use imobe_gateway::{import_scores, Gateway, ImportReport};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use config::Config;

/// The demo course shipped with the binary.
pub const DEMO_FIXTURE: &str = include_str!("../fixtures/demo.json");

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// A check, validation or workflow failed.
    #[error("{0}")]
    Failed(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => EXIT_FAILED,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))
}

/// Operator tools run in-process and never hand tokens out, so any secret
/// will do unless the operator configured one.
fn local_secret(config: &Config) -> Vec<u8> {
    match &config.token_secret {
        Some(secret) => secret.as_bytes().to_vec(),
        None => b"imobe-local-operator".to_vec(),
    }
}

pub fn open_platform(platform_config: PlatformConfig) -> Result<Platform, CliError> {
    let path = platform_config.store_path.clone();
    Platform::open(platform_config, Arc::new(SystemClock)).map_err(|e| {
        let shown = path.map(|p| p.display().to_string()).unwrap_or_default();
        CliError::Io(format!("StoreOpenFailure: {shown}: {e}"))
    })
}

/// Opens the configured store for a one-shot command.
fn open_store(config: &Config, must_exist: bool) -> Result<Platform, CliError> {
    if must_exist && !config.store_path.exists() {
        return Err(CliError::Io(format!(
            "StoreOpenFailure: {} does not exist; run `imobe seed` first",
            config.store_path.display()
        )));
    }
    open_platform(config.platform(Some(config.store_path.clone()), local_secret(config), Mode::Deterministic))
}

fn finish(platform: &Platform) -> Result<(), CliError> {
    platform.shutdown();
    platform.flush().map_err(|e| CliError::Io(format!("flush failed: {e}")))
}

pub fn seed_error(e: SeedError) -> CliError {
    match e {
        SeedError::Store { .. } => CliError::Io(e.to_string()),
        other => CliError::Failed(other.to_string()),
    }
}

/// Validates and writes a fixture into the configured store.
pub fn seed(config: &Config, fixture_text: &str) -> Result<SeedCounts, CliError> {
    let fixture = Fixture::parse(fixture_text).map_err(seed_error)?;
    fixture.validate().map_err(seed_error)?;
    let platform = open_store(config, false)?;
    let counts = fixture
        .seed(&platform.store, &platform.system_credentials())
        .map_err(seed_error);
    finish(&platform)?;
    counts
}

/// Credentials for `principal`, or the system principal when none is given.
fn acting_as(platform: &Platform, principal: Option<&str>) -> Result<Credentials, CliError> {
    let Some(principal) = principal else {
        return Ok(platform.system_credentials());
    };
    match platform.store.profile(principal) {
        Some(profile) if profile.enabled => Ok(platform.signer.issue(principal)),
        Some(_) => Err(CliError::Usage(format!("account {principal} is disabled"))),
        None => Err(CliError::Usage(format!("no such principal {principal:?}"))),
    }
}

pub fn import(config: &Config, csv_path: &Path, principal: Option<&str>) -> Result<ImportReport, CliError> {
    let body = fs::read(csv_path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", csv_path.display())))?;
    let platform = open_store(config, true)?;
    let result = acting_as(&platform, principal).and_then(|credentials| {
        import_scores(&platform.store, &credentials, &body).map_err(|e| CliError::Failed(format!("MalformedHeader: {}", e.0)))
    });
    finish(&platform)?;
    result
}

/// First enabled principal holding `role`, by name.
pub fn first_with_role(platform: &Platform, role: Role) -> Option<String> {
    platform
        .store
        .repository_keys(RepositoryName::UserProfiles)
        .iter()
        .filter_map(|key| key.strip_prefix("user/"))
        .filter_map(|p| platform.store.profile(p))
        .find(|p| p.enabled && p.roles.contains(&role))
        .map(|p| p.principal)
}

/// Courses that have at least one assessment item, sorted.
pub fn courses(platform: &Platform) -> Vec<String> {
    let items = platform.store.scan_prefix(&Selector::new("item")).unwrap_or_default();
    let mut ids: Vec<String> = items
        .iter()
        .filter_map(|r| r.doc.get("course_id").and_then(Value::as_str).map(str::to_string))
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

#[derive(Debug, Clone, Default)]
pub struct ReportArgs {
    pub course: String,
    pub student: Option<String>,
    pub item: Option<String>,
    pub threshold: Option<f64>,
    pub principal: Option<String>,
}

impl ReportArgs {
    pub fn scope(&self) -> Scope {
        match (&self.student, &self.item) {
            (Some(student_id), _) => Scope::StudentResult {
                student_id: student_id.clone(),
            },
            (None, Some(item_id)) => Scope::ItemBreakdown { item_id: item_id.clone() },
            (None, None) => Scope::CourseReport,
        }
    }
}

/// Runs one assessment workflow against the configured store and returns
/// the presented document.
pub fn report(config: &Config, args: &ReportArgs) -> Result<Value, CliError> {
    let platform = open_store(config, true)?;
    let result = run_report(&platform, config, args);
    finish(&platform)?;
    result
}

fn run_report(platform: &Platform, config: &Config, args: &ReportArgs) -> Result<Value, CliError> {
    let principal = match &args.principal {
        Some(p) => p.clone(),
        None => first_with_role(platform, Role::Academician)
            .ok_or_else(|| CliError::Usage("the store has no enabled academician; pass --as".to_string()))?,
    };
    let credentials = acting_as(platform, Some(&principal))?;
    platform
        .open_session("cli", &credentials)
        .map_err(|e| CliError::Failed(format!("{}: {e}", e.code())))?;
    let request = AssessRequest {
        course_id: args.course.clone(),
        scope: args.scope(),
        threshold: args.threshold,
    };
    let wait = Duration::from_millis(config.workflow_budget_ms + 2_000);
    let reply = platform
        .assess("cli", "report-1", &credentials, &request, wait)
        .map_err(|r| CliError::Failed(r.to_string()))?
        .ok_or_else(|| CliError::Failed("Timeout: no reply within the workflow budget".to_string()))?;
    match reply.kind {
        MessageKind::Present => Ok(reply.payload),
        _ => {
            let error = ErrorPayload::from_value(&reply.payload);
            Err(CliError::Failed(format!("{}: {}", error.code, error.reason)))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditDump {
    pub events: Vec<AuditEvent>,
    pub flags: Vec<AnomalyFlag>,
}

/// Reads the audit log beside the configured store.
pub fn audit(config: &Config, since: Option<u64>) -> Result<AuditDump, CliError> {
    let platform_config = config.platform(Some(config.store_path.clone()), Vec::new(), Mode::Deterministic);
    let path = platform_config.audit_path().expect("store path is set");
    if !path.exists() {
        return Ok(AuditDump {
            events: Vec::new(),
            flags: Vec::new(),
        });
    }
    let events = read_events(&path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let flags = detect_anomalies(&events, platform_config.anomaly_rule);
    let events = events
        .into_iter()
        .filter(|e| since.is_none_or(|after| e.event_id > after))
        .collect();
    Ok(AuditDump { events, flags })
}

fn random_secret() -> Vec<u8> {
    let bytes: [u8; 32] = rand::random();
    bytes.to_vec()
}

/// Runs the HTTP gateway on a concurrent runtime until SIGTERM or Ctrl-C.
/// `on_ready` receives the bound address.
pub fn serve(config: &Config, on_ready: impl FnOnce(std::net::SocketAddr)) -> Result<(), CliError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.listen_address)
            .await
            .map_err(|e| CliError::Io(format!("BindFailure: {}: {e}", config.listen_address)))?;
        let address = listener
            .local_addr()
            .map_err(|e| CliError::Io(format!("BindFailure: {e}")))?;
        let secret = match &config.token_secret {
            Some(secret) => secret.as_bytes().to_vec(),
            None => {
                log::warn!("no token_secret configured; tokens will not survive a restart");
                random_secret()
            }
        };
        let platform = open_platform(config.platform(Some(config.store_path.clone()), secret, Mode::Concurrent))?;
        let gateway = Gateway::new(Arc::new(platform));
        on_ready(address);
        imobe_gateway::serve(listener, gateway, shutdown_signal())
            .await
            .map_err(|e| CliError::Io(format!("server error: {e}")))
    })
}

#[cfg(unix)]
async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler installs");
    tokio::select! {
        _ = term.recv() => log::info!("SIGTERM received, shutting down"),
        _ = tokio::signal::ctrl_c() => log::info!("interrupt received, shutting down"),
    }
}

#[cfg(not(unix))]
async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}
