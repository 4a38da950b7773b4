//! HTTP/JSON front end for the i-MOBE platform.
//!
//! Each login opens a client container with the caller's AA or SA; each
//! assessment request is one workflow through the agent runtime. Responses
//! to assessment requests are the PRESENT payload, byte for byte as JSON,
//! with the correlation id in the `x-correlation-id` header.

mod error;
mod import;
mod session;

use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use imobe_core::audit::{AuditAction, AuditDraft, AuditSource};
use imobe_core::auth::{Role, UserProfile};
use imobe_core::behaviors::{saa_manage_account, AccountError, AccountOp};
use imobe_core::platform::Platform;
use imobe_core::protocol::payload::{AssessRequest, ErrorPayload, Scope};
use imobe_core::protocol::MessageKind;
use imobe_core::store::Selector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use error::{status_for, ApiError, ErrorBody, CORRELATION_HEADER};
pub use import::{import_scores, ImportReport, RejectedRow, CSV_HEADER};
pub use session::{bearer, parse_bearer, Session, SessionTable};

use error::{code_for_status, ErrorInfo};

const MAX_TRACKED_CORRELATIONS: usize = 4096;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoginRequest {
    pub principal: String,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoginResponse {
    pub token: String,
    pub session_id: String,
    pub principal: String,
    pub roles: Vec<Role>,
    pub expires_ts: u64,
}

/// Who owns which correlation, for trace access. Oldest entries are evicted.
#[derive(Default)]
struct Owners {
    order: VecDeque<String>,
    owner: HashMap<String, String>,
}

impl Owners {
    fn insert(&mut self, correlation_id: &str, principal: &str) {
        if self.owner.insert(correlation_id.to_string(), principal.to_string()).is_none() {
            self.order.push_back(correlation_id.to_string());
        }
        while self.order.len() > MAX_TRACKED_CORRELATIONS {
            if let Some(old) = self.order.pop_front() {
                self.owner.remove(&old);
            }
        }
    }
}

pub struct Gateway {
    platform: Arc<Platform>,
    sessions: RwLock<SessionTable>,
    owners: Mutex<Owners>,
    reply_wait: Duration,
}

impl Gateway {
    pub fn new(platform: Arc<Platform>) -> Arc<Gateway> {
        // the runtime fails a workflow at its budget; allow a little slack for the notice
        let budget = platform.config.timeouts.budget_ms;
        Arc::new(Gateway {
            platform,
            sessions: RwLock::new(SessionTable::default()),
            owners: Mutex::new(Owners::default()),
            reply_wait: Duration::from_millis(budget + 2_000),
        })
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session lock").len()
    }

    /// Closes the client containers of sessions whose token has expired.
    pub fn expire_sessions(&self) -> usize {
        let now = self.platform.signer.now_ms();
        let dead = self.sessions.write().expect("session lock").expire(now);
        for session in &dead {
            self.platform.close_session(&session.session_id);
        }
        dead.len()
    }

    fn audit_error(&self, principal: &str, path: &str, status: StatusCode, code: &str) {
        let action = if matches!(status, StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN) {
            AuditAction::AuthFailure
        } else {
            AuditAction::RequestError
        };
        self.platform.audit.record(AuditDraft::new(
            self.platform.signer.now_ms(),
            principal,
            action,
            path,
            json!({"status": status.as_u16(), "code": code}),
            AuditSource::Gateway,
        ));
    }

    fn login(&self, request: LoginRequest) -> Result<LoginResponse, ApiError> {
        self.expire_sessions();
        let (credentials, privileges) = self
            .platform
            .login(&request.principal, &request.secret)
            .map_err(|e| ApiError::new(status_for(e.code()), e.code(), e.to_string()).by(&request.principal).audited())?;
        let session_id = format!("s-{}", hex_id());
        let client = self
            .platform
            .open_session(&session_id, &credentials)
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.code(), e.to_string()).by(&request.principal))?;
        let token = bearer(&credentials);
        let expires_ts = self.platform.signer.expires_at(credentials.issued_at);
        let session = Session {
            session_id: session_id.clone(),
            principal: credentials.principal.clone(),
            privileges: privileges.clone(),
            credentials,
            client_container_id: client.container,
            created_ts: self.platform.signer.now_ms(),
            expires_ts,
        };
        // a second login within the same millisecond yields the same token
        let replaced = self.sessions.write().expect("session lock").insert(token.clone(), session);
        if let Some(old) = replaced {
            self.platform.close_session(&old.session_id);
        }
        Ok(LoginResponse {
            token,
            session_id,
            principal: request.principal,
            roles: privileges.roles.into_iter().collect(),
            expires_ts,
        })
    }

    /// Resolves the bearer token to a live session, re-checking the token
    /// against the signer and the user directory on every request.
    fn authorize(&self, headers: &HeaderMap) -> Result<Session, ApiError> {
        let unauthorized = |code: &str, reason: &str| ApiError::new(StatusCode::UNAUTHORIZED, code, reason);
        let Some(value) = headers.get(header::AUTHORIZATION) else {
            return Err(unauthorized("MissingCredentials", "no Authorization header"));
        };
        let text = value.to_str().unwrap_or_default();
        let Some(token) = text.strip_prefix("Bearer ").map(str::trim) else {
            return Err(unauthorized("MissingCredentials", "expected a Bearer token"));
        };
        let Some(credentials) = parse_bearer(token) else {
            return Err(unauthorized("InvalidCredentials", "malformed token"));
        };
        let principal = credentials.principal.clone();
        let privileges = match self.platform.auth.authenticate(&credentials) {
            Ok(privileges) => privileges,
            Err(e) => {
                if e.code() == "ExpiredCredentials" {
                    self.expire_sessions();
                }
                return Err(unauthorized(e.code(), &e.to_string()).by(&principal));
            }
        };
        // roles may have changed since login
        match self.sessions.read().expect("session lock").get(token) {
            Some(session) if session.credentials == credentials => Ok(Session {
                privileges,
                ..session.clone()
            }),
            _ => Err(unauthorized("InvalidCredentials", "no live session for this token").by(&principal)),
        }
    }

    fn require(&self, session: &Session, role: Role) -> Result<(), ApiError> {
        if session.privileges.has(role) {
            Ok(())
        } else {
            Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "Unauthorized",
                format!("{role:?} role required"),
            )
            .by(&session.principal))
        }
    }

    fn logout(&self, session: &Session) {
        let token = bearer(&session.credentials);
        if self.sessions.write().expect("session lock").remove(&token).is_some() {
            self.platform.close_session(&session.session_id);
        }
    }

    /// Runs one workflow and renders its PRESENT payload or ERROR.
    fn assess(&self, session: &Session, request: AssessRequest) -> Result<(String, Value), ApiError> {
        let correlation_id = format!("c-{}", hex_id());
        self.owners
            .lock()
            .expect("owner lock")
            .insert(&correlation_id, &session.principal);
        let fail = |e: ApiError| e.by(&session.principal).with_correlation(&correlation_id);
        let reply = self
            .platform
            .assess(&session.session_id, &correlation_id, &session.credentials, &request, self.reply_wait)
            .map_err(|r| fail(ApiError::new(status_for(r.reason.code()), r.reason.code(), r.detail).audited()))?;
        self.remember(&session.principal, &request, &correlation_id);
        let Some(reply) = reply else {
            return Err(fail(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "Timeout", "no reply within the workflow budget")));
        };
        match reply.kind {
            MessageKind::Present => Ok((correlation_id, reply.payload)),
            _ => {
                let error = ErrorPayload::from_value(&reply.payload);
                Err(fail(ApiError::new(status_for(&error.code), &error.code, error.reason)))
            }
        }
    }

    /// Keeps the principal's most recent request in their profile.
    fn remember(&self, principal: &str, request: &AssessRequest, correlation_id: &str) {
        let store = &self.platform.store;
        let Some(record) = store.get(&format!("user/{principal}")) else {
            return;
        };
        let Ok(mut profile) = serde_json::from_value::<UserProfile>(record.doc) else {
            return;
        };
        profile.last_request = Some(json!({
            "course_id": request.course_id,
            "scope": request.scope,
            "threshold": request.threshold,
            "correlation_id": correlation_id,
            "ts": self.platform.signer.now_ms(),
        }));
        let doc = serde_json::to_value(&profile).expect("profile serializes");
        if let Err(e) = store.put(&record.key, doc, &self.platform.system_credentials()) {
            log::warn!("could not record last request of {principal}: {e}");
        }
    }

    fn trace(&self, session: &Session, correlation_id: &str) -> Result<Value, ApiError> {
        let owner = self.owners.lock().expect("owner lock").owner.get(correlation_id).cloned();
        let not_found = || {
            ApiError::new(StatusCode::NOT_FOUND, "NotFound", format!("no trace for {correlation_id}")).by(&session.principal)
        };
        let runtime = &self.platform.runtime;
        let state = runtime.workflow(correlation_id).ok_or_else(not_found)?;
        let allowed = session.privileges.has(Role::Administrator) || owner.as_deref() == Some(session.principal.as_str());
        if !allowed {
            return Err(ApiError::new(StatusCode::FORBIDDEN, "Unauthorized", "not your request").by(&session.principal));
        }
        let steps: Vec<Value> = runtime
            .trace(correlation_id)
            .into_iter()
            .map(|t| {
                json!({
                    "step": t.step().to_string(),
                    "msg_id": t.envelope.msg_id,
                    "ts": t.envelope.ts,
                    "from": t.envelope.from,
                    "to": t.envelope.to,
                    "kind": t.envelope.kind,
                })
            })
            .collect();
        Ok(json!({
            "correlation_id": correlation_id,
            "phase": state.phase,
            "failure_reason": state.failure_reason,
            "steps": steps,
        }))
    }
}

fn hex_id() -> String {
    format!("{:016x}", rand::random::<u64>())
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn presented(correlation_id: String, payload: Value) -> Response {
    let mut response = Json(payload).into_response();
    if let Ok(value) = HeaderValue::from_str(&correlation_id) {
        response.headers_mut().insert(CORRELATION_HEADER, value);
    }
    response
}

/// Blocking platform calls run off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string())))
}

type Shared = State<Arc<Gateway>>;

async fn login(State(gw): Shared, body: Bytes) -> Result<Json<LoginResponse>, ApiError> {
    let request: LoginRequest = parse_json(&body)?;
    blocking(move || gw.login(request)).await.map(Json)
}

async fn logout(State(gw): Shared, headers: HeaderMap) -> Result<StatusCode, ApiError> {
    let session = gw.authorize(&headers)?;
    gw.logout(&session);
    Ok(StatusCode::NO_CONTENT)
}

async fn session_info(State(gw): Shared, headers: HeaderMap) -> Result<Json<Session>, ApiError> {
    gw.authorize(&headers).map(Json)
}

async fn assess(State(gw): Shared, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let session = gw.authorize(&headers)?;
    let request: AssessRequest = parse_json(&body).map_err(|e| e.by(&session.principal))?;
    let (correlation_id, payload) = blocking(move || gw.assess(&session, request)).await?;
    Ok(presented(correlation_id, payload))
}

#[derive(Debug, Deserialize)]
struct ThresholdQuery {
    threshold: Option<f64>,
}

async fn course_attainment(
    State(gw): Shared,
    headers: HeaderMap,
    Path(course_id): Path<String>,
    Query(q): Query<ThresholdQuery>,
) -> Result<Response, ApiError> {
    let session = gw.authorize(&headers)?;
    let request = AssessRequest {
        course_id,
        scope: Scope::CourseReport,
        threshold: q.threshold,
    };
    let (correlation_id, payload) = blocking(move || gw.assess(&session, request)).await?;
    Ok(presented(correlation_id, payload))
}

#[derive(Debug, Deserialize)]
struct StudentQuery {
    course_id: Option<String>,
    threshold: Option<f64>,
}

async fn student_results(
    State(gw): Shared,
    headers: HeaderMap,
    Path(student_id): Path<String>,
    Query(q): Query<StudentQuery>,
) -> Result<Response, ApiError> {
    let session = gw.authorize(&headers)?;
    let Some(course_id) = q.course_id else {
        return Err(ApiError::bad_request("course_id query parameter is required").by(&session.principal));
    };
    let request = AssessRequest {
        course_id,
        scope: Scope::StudentResult { student_id },
        threshold: q.threshold,
    };
    let (correlation_id, payload) = blocking(move || gw.assess(&session, request)).await?;
    Ok(presented(correlation_id, payload))
}

async fn scores(State(gw): Shared, headers: HeaderMap, body: Bytes) -> Result<Json<ImportReport>, ApiError> {
    let session = gw.authorize(&headers)?;
    gw.require(&session, Role::Academician)?;
    blocking(move || {
        import_scores(&gw.platform.store, &session.credentials, &body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "MalformedHeader", e.0).by(&session.principal))
    })
    .await
    .map(Json)
}

async fn trace(State(gw): Shared, headers: HeaderMap, Path(correlation_id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = gw.authorize(&headers)?;
    gw.trace(&session, &correlation_id).map(Json)
}

async fn create_or_change_user(State(gw): Shared, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let session = gw.authorize(&headers)?;
    gw.require(&session, Role::Administrator)?;
    let op: AccountOp = parse_json(&body).map_err(|e| e.by(&session.principal))?;
    let created = matches!(op, AccountOp::Create { .. });
    let profile = blocking(move || {
        saa_manage_account(&gw.platform.store, gw.platform.audit.as_ref(), &session.credentials, op)
            .map_err(|e| account_error(&e).by(&session.principal))
    })
    .await?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(profile.public_view())).into_response())
}

fn account_error(e: &AccountError) -> ApiError {
    let status = match e {
        AccountError::Auth(_) => StatusCode::UNAUTHORIZED,
        AccountError::Unauthorized(_) => StatusCode::FORBIDDEN,
        AccountError::UnknownPrincipal(_) => StatusCode::NOT_FOUND,
        AccountError::DuplicatePrincipal(_) => StatusCode::CONFLICT,
        AccountError::Invalid(_) => StatusCode::BAD_REQUEST,
        AccountError::Store(inner) => status_for(inner.code()),
    };
    let error = ApiError::new(status, e.code(), e.to_string());
    // refusals are audited by the account operation itself
    match e {
        AccountError::Auth(_) | AccountError::Unauthorized(_) => error.audited(),
        _ => error,
    }
}

async fn list_users(State(gw): Shared, headers: HeaderMap) -> Result<Json<Vec<Value>>, ApiError> {
    let session = gw.authorize(&headers)?;
    gw.require(&session, Role::Administrator)?;
    let records = gw
        .platform
        .store
        .scan_prefix(&Selector::new("user"))
        .map_err(|e| ApiError::new(status_for(e.code()), e.code(), e.to_string()))?;
    Ok(Json(
        records
            .into_iter()
            .filter_map(|r| serde_json::from_value::<UserProfile>(r.doc).ok())
            .map(|p| p.public_view())
            .collect(),
    ))
}

#[derive(Debug, Deserialize)]
struct AuditQuery {
    since: Option<u64>,
}

async fn audit(State(gw): Shared, headers: HeaderMap, Query(q): Query<AuditQuery>) -> Result<Json<Value>, ApiError> {
    let session = gw.authorize(&headers)?;
    gw.require(&session, Role::Administrator)?;
    let events = gw.platform.audit.events_since(q.since.unwrap_or(0));
    Ok(Json(json!({"events": events, "flags": gw.platform.audit.flags()})))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint")
}

/// Audits every error response that the platform has not already recorded,
/// and gives bodiless framework errors the standard error body.
async fn audit_errors(State(gw): Shared, request: Request, next: Next) -> Response {
    let path = request.uri().path().to_string();
    let response = next.run(request).await;
    let status = response.status();
    if !(status.is_client_error() || status.is_server_error()) {
        return response;
    }
    match response.extensions().get::<ErrorInfo>().cloned() {
        Some(info) => {
            if !info.audited {
                gw.audit_error(&info.principal, &path, status, &info.code);
            }
            response
        }
        None => {
            let code = code_for_status(status);
            gw.audit_error("anonymous", &path, status, code);
            let mut error = ApiError::new(status, code, status.canonical_reason().unwrap_or("request failed"));
            error.audited = true;
            error.into_response()
        }
    }
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/api/v1/login", post(login))
        .route("/api/v1/session", get(session_info).delete(logout))
        .route("/api/v1/assess", post(assess))
        .route("/api/v1/scores", post(scores))
        .route("/api/v1/courses/{id}/attainment", get(course_attainment))
        .route("/api/v1/students/{id}/results", get(student_results))
        .route("/api/v1/traces/{correlation_id}", get(trace))
        .route("/api/v1/admin/users", post(create_or_change_user).get(list_users))
        .route("/api/v1/admin/audit", get(audit))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(gateway.clone(), audit_errors))
        .with_state(gateway)
}

/// Serves until `shutdown` resolves, then stops the runtime and flushes.
pub async fn serve(
    listener: tokio::net::TcpListener,
    gateway: Arc<Gateway>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let gateway = gateway.clone();
        tokio::spawn(async move {
            let mut every = tokio::time::interval(Duration::from_secs(30));
            loop {
                every.tick().await;
                gateway.expire_sessions();
            }
        })
    };
    let result = axum::serve(listener, router(gateway.clone()))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    let platform = gateway.platform.clone();
    tokio::task::spawn_blocking(move || platform.shutdown())
        .await
        .map_err(std::io::Error::other)?;
    result
}
