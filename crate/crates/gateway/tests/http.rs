use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use imobe_core::audit::AuditAction;
use imobe_core::clock::ManualClock;
use imobe_core::domain::build_report;
use imobe_core::fixture::Fixture;
use imobe_core::kinds::AgentKind;
use imobe_core::platform::{Platform, PlatformConfig, ASSA_ID};
use imobe_core::protocol::canonical_trace;
use imobe_core::runtime::Mode;
use imobe_gateway::{parse_bearer, router, Gateway, CORRELATION_HEADER};
use serde_json::{json, Value};
use tower::ServiceExt;

const START_MS: u64 = 1_700_000_000_000;

const FIXTURE: &str = r#"{
  "outcomes": [
    {"id": "PO1", "level": "ProgramOutcome"},
    {"id": "PO2", "level": "ProgramOutcome"},
    {"id": "EO1", "level": "ExitOutcome", "parent_ids": ["PO1"]},
    {"id": "EO2", "level": "ExitOutcome", "parent_ids": ["PO1", "PO2"]},
    {"id": "CO1", "level": "CourseOutcome", "parent_ids": ["EO1"]},
    {"id": "CO2", "level": "CourseOutcome", "parent_ids": ["EO1", "EO2"]}
  ],
  "items": [
    {"id": "quiz1", "course_id": "C1", "kind": "Test", "max_marks": 20, "co_weights": {"CO1": 1}},
    {"id": "proj1", "course_id": "C1", "kind": "Project", "max_marks": 50, "co_weights": {"CO1": 1, "CO2": 2}}
  ],
  "users": [
    {"principal": "lect", "secret": "lect-pw", "roles": ["Academician"]},
    {"principal": "s1", "secret": "s1-pw", "roles": ["Student"]},
    {"principal": "s2", "secret": "s2-pw", "roles": ["Student"]},
    {"principal": "admin", "secret": "admin-pw", "roles": ["Administrator"]},
    {"principal": "off", "secret": "off-pw", "roles": ["Academician"], "enabled": false}
  ],
  "scores": [
    {"course_id": "C1", "item_id": "quiz1", "student_id": "s1", "raw": 15},
    {"course_id": "C1", "item_id": "proj1", "student_id": "s1", "raw": 40},
    {"course_id": "C1", "item_id": "quiz1", "student_id": "s2", "raw": 10},
    {"course_id": "C1", "item_id": "proj1", "student_id": "s2", "raw": 20},
    {"course_id": "C1", "item_id": "quiz1", "student_id": "s3", "raw": 20}
  ]
}"#;

struct Harness {
    gw: Arc<Gateway>,
    clock: Arc<ManualClock>,
    fixture: Fixture,
}

fn harness_with(mode: Mode) -> Harness {
    let clock = Arc::new(ManualClock::new(START_MS));
    let config = PlatformConfig {
        mode,
        ..PlatformConfig::default()
    };
    let platform = Platform::open(config, clock.clone()).unwrap();
    let fixture = Fixture::parse(FIXTURE).unwrap();
    fixture.seed(&platform.store, &platform.system_credentials()).unwrap();
    Harness {
        gw: Gateway::new(Arc::new(platform)),
        clock,
        fixture,
    }
}

fn harness() -> Harness {
    harness_with(Mode::Deterministic)
}

struct Reply {
    status: StatusCode,
    correlation: Option<String>,
    body: Value,
}

impl Harness {
    fn platform(&self) -> &Platform {
        self.gw.platform()
    }

    fn audit_len(&self) -> usize {
        self.platform().audit.events().len()
    }

    async fn call(&self, method: Method, path: &str, token: Option<&str>, body: Body) -> Reply {
        let mut request = Request::builder().method(method).uri(path);
        if let Some(token) = token {
            request = request.header("authorization", format!("Bearer {token}"));
        }
        let response = router(self.gw.clone()).oneshot(request.body(body).unwrap()).await.unwrap();
        let status = response.status();
        let correlation = response
            .headers()
            .get(CORRELATION_HEADER)
            .map(|v| v.to_str().unwrap().to_string());
        let bytes = response.into_body().collect().await.unwrap().to_bytes();
        let body = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        Reply {
            status,
            correlation,
            body,
        }
    }

    async fn json(&self, method: Method, path: &str, token: Option<&str>, body: Value) -> Reply {
        self.call(method, path, token, Body::from(body.to_string())).await
    }

    async fn login(&self, principal: &str) -> String {
        let reply = self
            .json(Method::POST, "/api/v1/login", None, json!({"principal": principal, "secret": format!("{principal}-pw")}))
            .await;
        assert_eq!(reply.status, StatusCode::OK, "{:?}", reply.body);
        reply.body["token"].as_str().unwrap().to_string()
    }

    async fn get(&self, path: &str, token: &str) -> Reply {
        self.call(Method::GET, path, Some(token), Body::empty()).await
    }
}

fn course_request() -> Value {
    json!({"course_id": "C1", "scope": {"type": "CourseReport"}})
}

#[tokio::test]
async fn login_issues_a_verifiable_token() {
    let h = harness();
    let token = h.login("lect").await;
    let credentials = parse_bearer(&token).unwrap();
    let privileges = h.platform().auth.authenticate(&credentials).unwrap();
    assert_eq!(privileges.principal, "lect");
    assert_eq!(h.gw.session_count(), 1);
    let info = h.get("/api/v1/session", &token).await;
    assert_eq!(info.body["principal"], "lect");
    assert!(info.body["expires_ts"].as_u64().unwrap() <= START_MS + 3_600_000);
}

#[tokio::test]
async fn login_failures_are_audited_once() {
    let h = harness();
    for (principal, secret, status, code) in [
        ("lect", "wrong", StatusCode::UNAUTHORIZED, "InvalidCredentials"),
        ("ghost", "x", StatusCode::UNAUTHORIZED, "InvalidCredentials"),
        ("off", "off-pw", StatusCode::FORBIDDEN, "AccountDisabled"),
    ] {
        let before = h.audit_len();
        let reply = h
            .json(Method::POST, "/api/v1/login", None, json!({"principal": principal, "secret": secret}))
            .await;
        assert_eq!(reply.status, status);
        assert_eq!(reply.body["code"], code);
        let new = h.platform().audit.events_since(before as u64);
        assert_eq!(new.len(), 1, "{new:?}");
        assert_eq!(new[0].action, AuditAction::AuthFailure);
    }
    let reply = h.json(Method::POST, "/api/v1/login", None, json!({"who": 1})).await;
    assert_eq!(reply.status, StatusCode::BAD_REQUEST);
    assert_eq!(reply.body["code"], "Malformed");
    assert_eq!(h.gw.session_count(), 0);
}

#[tokio::test]
async fn course_report_equals_the_library_result() {
    let h = harness();
    let token = h.login("lect").await;
    let reply = h.json(Method::POST, "/api/v1/assess", Some(&token), course_request()).await;
    assert_eq!(reply.status, StatusCode::OK, "{:?}", reply.body);
    let scores: Vec<_> = h.fixture.scores.iter().map(|s| s.to_score()).collect();
    let direct = build_report("C1", &scores, &h.fixture.items, &h.fixture.outcomes, 0.5).unwrap();
    assert_eq!(reply.body, serde_json::to_value(direct).unwrap());

    let corr = reply.correlation.unwrap();
    let trace = h.get(&format!("/api/v1/traces/{corr}"), &token).await;
    assert_eq!(trace.status, StatusCode::OK);
    assert_eq!(trace.body["phase"], "Presented");
    let steps: Vec<String> = trace.body["steps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["step"].as_str().unwrap().to_string())
        .collect();
    let canonical: Vec<String> = canonical_trace(AgentKind::AA).iter().map(ToString::to_string).collect();
    assert_eq!(steps, canonical);

    let via_get = h.get("/api/v1/courses/C1/attainment", &token).await;
    assert_eq!(via_get.body, reply.body);
    let other = h.login("admin").await;
    assert_eq!(h.get(&format!("/api/v1/traces/{corr}"), &other).await.status, StatusCode::OK);
    let student = h.login("s1").await;
    assert_eq!(h.get(&format!("/api/v1/traces/{corr}"), &student).await.status, StatusCode::FORBIDDEN);
    assert_eq!(h.get("/api/v1/traces/nope", &token).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn the_last_request_is_remembered() {
    let h = harness();
    let token = h.login("lect").await;
    let reply = h.get("/api/v1/courses/C1/attainment?threshold=0.7", &token).await;
    assert_eq!(reply.body["threshold"], 0.7);
    let doc = h.platform().store.get("user/lect").unwrap().doc;
    assert_eq!(doc["last_request"]["course_id"], "C1");
    assert_eq!(doc["last_request"]["correlation_id"].as_str(), reply.correlation.as_deref());
}

#[tokio::test]
async fn students_see_only_their_own_results() {
    let h = harness();
    let token = h.login("s1").await;
    let own = h.get("/api/v1/students/s1/results?course_id=C1", &token).await;
    assert_eq!(own.status, StatusCode::OK);
    assert_eq!(own.body["per_co"], json!({"CO1": 0.775, "CO2": 0.8}));

    for path in ["/api/v1/students/s2/results?course_id=C1", "/api/v1/courses/C1/attainment"] {
        let before = h.audit_len();
        let reply = h.get(path, &token).await;
        assert_eq!(reply.status, StatusCode::FORBIDDEN);
        assert_eq!(reply.body["code"], "ScopeForbidden");
        assert!(reply.body["correlation_id"].is_string());
        assert!(h.audit_len() > before);
    }
    let missing = h.get("/api/v1/students/s1/results", &token).await;
    assert_eq!(missing.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn workflow_failures_map_to_statuses() {
    let h = harness();
    let token = h.login("lect").await;
    let unknown = h.get("/api/v1/courses/NOPE/attainment", &token).await;
    assert_eq!(unknown.status, StatusCode::NOT_FOUND);
    assert_eq!(unknown.body["code"], "UnknownCourse");
    let bad = h.get("/api/v1/courses/C1/attainment?threshold=2", &token).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    let malformed = h
        .json(Method::POST, "/api/v1/assess", Some(&token), json!({"course_id": "C1"}))
        .await;
    assert_eq!(malformed.status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn stalled_workflow_gives_504() {
    let h = harness_with(Mode::Concurrent);
    let token = h.login("lect").await;
    h.platform().runtime.sleep(ASSA_ID).unwrap();
    let clock = h.clock.clone();
    let advance = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(300));
        clock.advance(6_000);
    });
    let before = h.platform().audit.count(AuditAction::RequestError);
    let reply = h.json(Method::POST, "/api/v1/assess", Some(&token), course_request()).await;
    advance.join().unwrap();
    assert_eq!(reply.status, StatusCode::GATEWAY_TIMEOUT);
    assert_eq!(reply.body["code"], "Timeout");
    assert!(h.platform().audit.count(AuditAction::RequestError) > before);
    h.platform().shutdown();
}

#[tokio::test]
async fn expired_sessions_are_closed() {
    let h = harness();
    let token = h.login("lect").await;
    let containers = h.platform().runtime.containers().len();
    h.clock.advance(3_600_001);
    let before = h.audit_len();
    let reply = h.get("/api/v1/courses/C1/attainment", &token).await;
    assert_eq!(reply.status, StatusCode::UNAUTHORIZED);
    assert_eq!(reply.body["code"], "ExpiredCredentials");
    assert_eq!(h.audit_len(), before + 1);
    assert_eq!(h.gw.session_count(), 0);
    assert_eq!(h.platform().runtime.containers().len(), containers - 1);
}

#[tokio::test]
async fn logout_closes_the_client_container() {
    let h = harness();
    let token = h.login("lect").await;
    let containers = h.platform().runtime.containers().len();
    let reply = h.call(Method::DELETE, "/api/v1/session", Some(&token), Body::empty()).await;
    assert_eq!(reply.status, StatusCode::NO_CONTENT);
    assert_eq!(h.platform().runtime.containers().len(), containers - 1);
    let again = h.get("/api/v1/session", &token).await;
    assert_eq!(again.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn csv_import_accepts_and_rejects_by_line() {
    let h = harness();
    let token = h.login("lect").await;
    let writes = h.platform().audit.count(AuditAction::StoreWrite);
    let csv = "course_id,item_id,student_id,raw_score\nC1,quiz1,s4,12\nC1,quiz1,s5,20\nC1,proj1,s4,33.5\n";
    let reply = h.call(Method::POST, "/api/v1/scores", Some(&token), Body::from(csv)).await;
    assert_eq!(reply.status, StatusCode::OK);
    assert_eq!(reply.body, json!({"accepted": 3, "rejected": []}));
    assert_eq!(h.platform().audit.count(AuditAction::StoreWrite), writes + 3);

    let csv = "course_id,item_id,student_id,raw_score\nC1,quiz1,s6,12\nC1,quiz1,s7,21\nC1,quiz1,s8,abc\nC1,nope,s9,1\n";
    let reply = h.call(Method::POST, "/api/v1/scores", Some(&token), Body::from(csv)).await;
    assert_eq!(reply.body["accepted"], 1);
    let rejected = reply.body["rejected"].as_array().unwrap();
    let lines: Vec<u64> = rejected.iter().map(|r| r["line"].as_u64().unwrap()).collect();
    assert_eq!(lines, [3, 4, 5]);
    assert!(rejected[0]["reason"].as_str().unwrap().starts_with("ValidationFailure"));
    assert!(rejected[1]["reason"].as_str().unwrap().starts_with("Malformed"));

    for body in ["C1,quiz1,s4,12\n", ""] {
        let reply = h.call(Method::POST, "/api/v1/scores", Some(&token), Body::from(body)).await;
        assert_eq!(reply.status, StatusCode::BAD_REQUEST);
        assert_eq!(reply.body["code"], "MalformedHeader");
    }
    let student = h.login("s1").await;
    let reply = h
        .call(Method::POST, "/api/v1/scores", Some(&student), Body::from("course_id,item_id,student_id,raw_score\n"))
        .await;
    assert_eq!(reply.status, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn administrators_manage_accounts_and_read_the_audit_log() {
    let h = harness();
    let admin = h.login("admin").await;
    let lect = h.login("lect").await;
    let create = json!({"op": "Create", "principal": "new", "secret": "new-pw", "roles": ["Academician"]});
    let reply = h.json(Method::POST, "/api/v1/admin/users", Some(&admin), create.clone()).await;
    assert_eq!(reply.status, StatusCode::CREATED);
    assert_eq!(reply.body, json!({"principal": "new", "roles": ["Academician"], "enabled": true}));
    assert_eq!(
        h.json(Method::POST, "/api/v1/admin/users", Some(&admin), create.clone()).await.status,
        StatusCode::CONFLICT
    );
    assert_eq!(
        h.json(Method::POST, "/api/v1/admin/users", Some(&lect), create).await.status,
        StatusCode::FORBIDDEN
    );
    let new = h.login("new").await;
    let disable = json!({"op": "Disable", "principal": "new"});
    assert_eq!(h.json(Method::POST, "/api/v1/admin/users", Some(&admin), disable).await.status, StatusCode::OK);
    let reply = h.get("/api/v1/courses/C1/attainment", &new).await;
    assert_eq!(reply.status, StatusCode::UNAUTHORIZED);
    assert_eq!(reply.body["code"], "UnknownPrincipal");
    let missing = json!({"op": "Disable", "principal": "nobody"});
    assert_eq!(h.json(Method::POST, "/api/v1/admin/users", Some(&admin), missing).await.status, StatusCode::NOT_FOUND);

    let users = h.get("/api/v1/admin/users", &admin).await;
    assert_eq!(users.body.as_array().unwrap().len(), 6);
    assert!(users.body.to_string().find("secret").is_none());

    for _ in 0..6 {
        h.json(Method::POST, "/api/v1/login", None, json!({"principal": "s2", "secret": "bad"})).await;
    }
    let audit = h.get("/api/v1/admin/audit", &admin).await;
    assert_eq!(audit.status, StatusCode::OK);
    assert_eq!(audit.body["flags"][0]["principal"], "s2");
    let last = audit.body["events"].as_array().unwrap().last().unwrap()["event_id"].as_u64().unwrap();
    let since = h.get(&format!("/api/v1/admin/audit?since={last}"), &admin).await;
    assert!(since.body["events"].as_array().unwrap().len() <= 1);
    assert_eq!(h.get("/api/v1/admin/audit", &lect).await.status, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn bad_tokens_are_refused_on_every_route() {
    let h = harness();
    let good = h.login("lect").await;
    let (head, _) = good.rsplit_once('.').unwrap();
    let forged = format!("{head}.{}", "0".repeat(64));
    let expired = {
        let c = h.platform().signer.issue_at("lect", START_MS - 3_601_000);
        imobe_gateway::bearer(&c)
    };
    let disabled = h.login("s2").await;
    let admin = h.login("admin").await;
    let reply = h
        .json(Method::POST, "/api/v1/admin/users", Some(&admin), json!({"op": "Disable", "principal": "s2"}))
        .await;
    assert_eq!(reply.status, StatusCode::OK);

    let routes = [
        (Method::GET, "/api/v1/session"),
        (Method::DELETE, "/api/v1/session"),
        (Method::POST, "/api/v1/assess"),
        (Method::POST, "/api/v1/scores"),
        (Method::GET, "/api/v1/courses/C1/attainment"),
        (Method::GET, "/api/v1/students/s2/results?course_id=C1"),
        (Method::GET, "/api/v1/traces/c-1"),
        (Method::POST, "/api/v1/admin/users"),
        (Method::GET, "/api/v1/admin/users"),
        (Method::GET, "/api/v1/admin/audit"),
    ];
    for (method, path) in routes {
        for (token, code) in [
            (forged.as_str(), "InvalidCredentials"),
            (expired.as_str(), "ExpiredCredentials"),
            (disabled.as_str(), "UnknownPrincipal"),
            ("garbage", "InvalidCredentials"),
        ] {
            let before = h.audit_len();
            let reply = h.call(method.clone(), path, Some(token), Body::from("{}")).await;
            assert_eq!(reply.status, StatusCode::UNAUTHORIZED, "{method} {path}");
            assert_eq!(reply.body["code"], code, "{method} {path}");
            let new = h.platform().audit.events_since(before as u64);
            assert_eq!(new.len(), 1, "{method} {path} {code}");
            assert_eq!(new[0].action, AuditAction::AuthFailure);
        }
        let before = h.audit_len();
        let reply = h.call(method.clone(), path, None, Body::empty()).await;
        assert_eq!(reply.status, StatusCode::UNAUTHORIZED);
        assert_eq!(reply.body["code"], "MissingCredentials");
        assert_eq!(h.audit_len(), before + 1);
    }
}

#[tokio::test]
async fn every_error_response_is_audited() {
    let h = harness();
    let token = h.login("lect").await;
    let cases = [
        (Method::GET, "/api/v1/nowhere", StatusCode::NOT_FOUND),
        (Method::PUT, "/api/v1/login", StatusCode::METHOD_NOT_ALLOWED),
        (Method::POST, "/api/v1/login", StatusCode::BAD_REQUEST),
        (Method::GET, "/api/v1/courses/NOPE/attainment", StatusCode::NOT_FOUND),
        (Method::GET, "/api/v1/admin/audit", StatusCode::FORBIDDEN),
    ];
    for (method, path, status) in cases {
        let before = h.audit_len();
        let reply = h.call(method.clone(), path, Some(&token), Body::from("not json")).await;
        assert_eq!(reply.status, status, "{method} {path}");
        assert!(reply.body["code"].is_string(), "{method} {path}: {:?}", reply.body);
        assert!(reply.body["reason"].is_string());
        assert!(h.audit_len() > before, "{method} {path}");
    }
}

#[tokio::test]
async fn sessions_use_their_own_container() {
    let h = harness();
    h.login("lect").await;
    let containers = h.platform().runtime.containers().len();
    h.login("lect").await;
    assert_eq!(h.platform().runtime.containers().len(), containers);
    assert_eq!(h.gw.session_count(), 1);
    let a = h.login("lect").await;
    h.clock.advance(1);
    let b = h.login("lect").await;
    assert_eq!(h.gw.session_count(), 2);
    let sa = h.get("/api/v1/session", &a).await.body["session_id"].as_str().unwrap().to_string();
    let sb = h.get("/api/v1/session", &b).await.body["session_id"].as_str().unwrap().to_string();
    assert_ne!(sa, sb);
    for (token, session) in [(&a, &sa), (&b, &sb)] {
        let reply = h.get("/api/v1/courses/C1/attainment", token).await;
        let corr = reply.correlation.unwrap();
        let trace = h.platform().runtime.trace(&corr);
        assert_eq!(&trace[0].envelope.from, session);
        assert_eq!(trace[1].envelope.to, format!("aa-{session}"));
        assert_eq!(&trace.last().unwrap().envelope.to, session);
    }
}
