use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use imobe_cli::DEMO_FIXTURE;
use imobe_core::audit::{read_events, AuditAction};
use imobe_core::clock::SystemClock;
use imobe_core::domain::build_report;
use imobe_core::fixture::Fixture;
use imobe_core::platform::{Platform, PlatformConfig};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_imobe");

struct Dir {
    tmp: tempfile::TempDir,
}

impl Dir {
    fn new() -> Dir {
        Dir {
            tmp: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn store(&self) -> PathBuf {
        self.path("store.jsonl")
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.path(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    /// Runs the binary inside the directory against its store.
    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .current_dir(self.tmp.path())
            .arg("--store")
            .arg(self.store())
            .args(args)
            .output()
            .unwrap()
    }

    fn seeded(self) -> Dir {
        let out = self.run(&["seed"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        self
    }
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(out)))
}

fn trace_lines(out: &Output) -> Vec<String> {
    stdout(out)
        .lines()
        .filter(|l| l.contains("msg_id="))
        .map(|l| l.split("  msg_id=").next().unwrap().to_string())
        .collect()
}

fn open(store: &Path) -> Platform {
    let config = PlatformConfig {
        store_path: Some(store.to_path_buf()),
        ..PlatformConfig::default()
    };
    Platform::open(config, Arc::new(SystemClock)).unwrap()
}

#[test]
fn scenario_on_the_demo_course_is_canonical() {
    let dir = Dir::new();
    let start = Instant::now();
    let out = dir.run(&["simulate-scenario"]);
    let elapsed = start.elapsed();
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));
    assert!(elapsed < Duration::from_secs(5), "{elapsed:?}");
    let lines = trace_lines(&out);
    assert_eq!(lines.len(), 8);
    assert!(lines[0].contains("client -> UIA ASSESS_REQUEST"));
    assert!(lines[7].contains("UIA -> client PRESENT"));
    assert!(stdout(&out).contains("OK: trace matches the canonical 8-step sequence"));
    assert!(!dir.store().exists(), "the scenario never touches the configured store");
}

#[test]
fn scenario_is_deterministic_modulo_ids_and_times() {
    let dir = Dir::new().seeded();
    let a = dir.run(&["simulate-scenario"]);
    let b = dir.run(&["simulate-scenario"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(trace_lines(&a), trace_lines(&b));
    assert_eq!(trace_lines(&a).len(), 8);
}

#[test]
fn scenario_as_a_student_takes_the_relay_path() {
    let dir = Dir::new();
    let out = dir.run(&["simulate-scenario", "--as", "amir"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert_eq!(trace_lines(&out).len(), 9);
}

#[test]
fn removed_store_diverges_at_store_query() {
    let dir = Dir::new().seeded();
    let before = std::fs::read(dir.store()).unwrap();
    let out = dir.run(&["simulate-scenario", "--inject", "store-removed"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    let divergence = text.lines().find(|l| l.starts_with("DIVERGENCE")).unwrap();
    assert!(divergence.contains("step 4"), "{divergence}");
    assert!(divergence.contains("STORE_QUERY"), "{divergence}");
    assert!(text.contains("StoreUnavailable"));
    assert_eq!(std::fs::read(dir.store()).unwrap(), before, "only the scratch copy is removed");
}

#[test]
fn forged_token_is_reported_as_auth_failure() {
    let dir = Dir::new();
    let out = dir.run(&["simulate-scenario", "--inject", "forged-token"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("rejected: AuthFailure"), "{text}");
    assert!(text.contains("AuthFailure audit events: 1"), "{text}");
    assert!(text.contains("DIVERGENCE at step 1"));
}

#[test]
fn seeding_counts_and_versions() {
    let dir = Dir::new();
    let first = dir.run(&["seed"]);
    assert_eq!(first.status.code(), Some(0));
    let counts = json(&first);
    assert_eq!(counts["outcomes"], 9);
    assert_eq!(counts["items"], 4);
    assert_eq!(counts["users"], 5);
    let second = json(&dir.run(&["seed"]));
    assert_eq!(second, counts);
    let platform = open(&dir.store());
    for key in ["outcome/PO1", "item/quiz1", "user/lee", "score/CS201/quiz1/amir"] {
        assert_eq!(platform.store.get(key).unwrap().version, 2, "{key}");
    }
}

#[test]
fn empty_fixture_seeds_nothing() {
    let dir = Dir::new();
    let fixture = dir.write("empty.json", "{}");
    let out = dir.run(&["seed", fixture.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out), serde_json::json!({"outcomes": 0, "items": 0, "users": 0, "scores": 0}));
}

#[test]
fn invalid_fixture_reports_the_path() {
    let dir = Dir::new();
    let bad = DEMO_FIXTURE.replacen("\"max_marks\": 20", "\"max_marks\": 0", 1);
    let fixture = dir.write("bad.json", &bad);
    let out = dir.run(&["seed", fixture.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("ValidationFailure at items[0]"), "{}", stderr(&out));
    assert!(!dir.store().exists());

    let missing = dir.run(&["seed", "nope.json"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn report_matches_the_library() {
    let dir = Dir::new().seeded();
    let out = dir.run(&["report", "--course", "CS201"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let fixture = Fixture::parse(DEMO_FIXTURE).unwrap();
    let scores: Vec<_> = fixture.scores.iter().map(|s| s.to_score()).collect();
    let direct = build_report("CS201", &scores, &fixture.items, &fixture.outcomes, 0.5).unwrap();
    assert_eq!(json(&out), serde_json::to_value(direct).unwrap());

    let pretty = dir.run(&["report", "--course", "CS201", "--pretty"]);
    let text = stdout(&pretty);
    assert!(text.starts_with("Course report for CS201"));
    assert!(text.lines().any(|l| l.starts_with("amir ")));

    let student = json(&dir.run(&["report", "--course", "CS201", "--student", "bella", "--threshold", "0.7"]));
    assert_eq!(student["student_id"], "bella");
    assert_eq!(student["threshold"], 0.7);

    let item = json(&dir.run(&["report", "--course", "CS201", "--item", "quiz1"]));
    assert_eq!(item["item_id"], "quiz1");
}

#[test]
fn report_failures_use_exit_codes() {
    let dir = Dir::new();
    assert_eq!(dir.run(&["report", "--course", "CS201"]).status.code(), Some(3));
    let dir = dir.seeded();
    let unknown = dir.run(&["report", "--course", "NOPE"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stderr(&unknown).contains("UnknownCourse"));
    let forbidden = dir.run(&["report", "--course", "CS201", "--as", "amir"]);
    assert_eq!(forbidden.status.code(), Some(1));
    assert!(stderr(&forbidden).contains("ScopeForbidden"));
    assert_eq!(dir.run(&["report"]).status.code(), Some(2));
    assert_eq!(dir.run(&["report", "--course", "CS201", "--as", "ghost"]).status.code(), Some(2));
}

#[test]
fn config_file_and_flags() {
    let dir = Dir::new();
    let config = dir.write("imobe.conf", "attainment_threshold = 0.8\nanomaly_r = 2\n");
    let c = config.to_str().unwrap();
    let seeded = dir.run(&["--config", c, "seed"]);
    assert_eq!(seeded.status.code(), Some(0));
    let report = json(&dir.run(&["--config", c, "report", "--course", "CS201"]));
    assert_eq!(report["threshold"], 0.8);
    let flagged = json(&dir.run(&["--config", c, "--attainment-threshold", "0.3", "report", "--course", "CS201"]));
    assert_eq!(flagged["threshold"], 0.3);

    let bad = dir.write("bad.conf", "phase_timeout_ms = 0\n");
    assert_eq!(dir.run(&["--config", bad.to_str().unwrap(), "seed"]).status.code(), Some(2));
    let syntax = dir.write("syntax.conf", "what\n");
    let out = dir.run(&["--config", syntax.to_str().unwrap(), "seed"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 1"));
    assert_eq!(dir.run(&["--attainment-threshold", "1.5", "seed"]).status.code(), Some(2));
    assert_eq!(dir.run(&["--config", "missing.conf", "seed"]).status.code(), Some(3));
}

#[test]
fn import_reports_rejected_lines() {
    let dir = Dir::new().seeded();
    let csv = dir.write(
        "scores.csv",
        "course_id,item_id,student_id,raw_score\nCS201,quiz1,dan,11\nCS201,quiz1,eve,21\nCS201,project1,dan,30\nCS201,presentation1,dan,9.5\n",
    );
    let writes = |dir: &Dir| {
        read_events(&dir.path("store.jsonl.audit.jsonl"))
            .unwrap()
            .iter()
            .filter(|e| e.action == AuditAction::StoreWrite)
            .count()
    };
    let before = writes(&dir);
    let out = dir.run(&["import", csv.to_str().unwrap(), "--as", "lee"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = json(&out);
    assert_eq!(report["accepted"], 3);
    assert_eq!(report["rejected"][0]["line"], 3);
    assert!(report["rejected"][0]["reason"].as_str().unwrap().starts_with("ValidationFailure"));
    assert_eq!(writes(&dir), before + 3);

    let headless = dir.write("headless.csv", "CS201,quiz1,dan,11\n");
    let out = dir.run(&["import", headless.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("MalformedHeader"));

    let out = dir.run(&["import", csv.to_str().unwrap(), "--as", "amir"]);
    let report = json(&out);
    assert_eq!(report["accepted"], 0);
    assert!(report["rejected"][0]["reason"].as_str().unwrap().starts_with("Unauthorized"));
}

#[test]
fn audit_lists_events_and_flags() {
    let dir = Dir::new().seeded();
    let dump = json(&dir.run(&["audit"]));
    let events = dump["events"].as_array().unwrap();
    assert_eq!(events.len(), 30);
    assert!(events.iter().all(|e| e["action"] == "StoreWrite"));
    assert_eq!(dump["flags"], serde_json::json!([]));
    let since = json(&dir.run(&["audit", "--since", "25"]));
    assert_eq!(since["events"].as_array().unwrap().len(), 5);
    let pretty = stdout(&dir.run(&["audit", "--pretty"]));
    assert!(pretty.lines().next().unwrap().starts_with("id"));
}

struct Server {
    child: std::process::Child,
    address: String,
}

fn start_server(dir: &Dir) -> Server {
    let mut child = Command::new(BIN)
        .args(["--store", dir.store().to_str().unwrap(), "--listen", "127.0.0.1:0", "serve"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let address = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("{line:?}")).to_string();
    Server { child, address }
}

fn http(address: &str, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(address).unwrap();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {address}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    let status = response.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = response.split("\r\n\r\n").nth(1).unwrap_or_default().to_string();
    (status, body)
}

#[cfg(unix)]
#[test]
fn serve_answers_and_stops_on_sigterm() {
    let dir = Dir::new().seeded();
    let mut server = start_server(&dir);

    let (status, body) = http(&server.address, "POST", "/api/v1/login", "{\"nope\": 1}");
    assert_eq!(status, 400);
    assert!(body.contains("Malformed"));
    let (status, body) = http(
        &server.address,
        "POST",
        "/api/v1/login",
        "{\"principal\": \"lee\", \"secret\": \"lee-pass\"}",
    );
    assert_eq!(status, 200, "{body}");

    let busy = Command::new(BIN)
        .args(["--store", dir.path("other.jsonl").to_str().unwrap(), "--listen", &server.address, "serve"])
        .output()
        .unwrap();
    assert_eq!(busy.status.code(), Some(3));
    assert!(stderr(&busy).contains("BindFailure"), "{}", stderr(&busy));

    unsafe {
        libc::kill(server.child.id() as i32, libc::SIGTERM);
    }
    let status = server.child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
    let mut err = String::new();
    server.child.stderr.take().unwrap().read_to_string(&mut err).unwrap();
    assert!(err.contains("shut down cleanly"), "{err}");

    let events = read_events(&dir.path("store.jsonl.audit.jsonl")).unwrap();
    assert!(events.iter().any(|e| e.action == AuditAction::RequestError));
}

#[test]
fn usage_errors_exit_2() {
    let dir = Dir::new();
    assert_eq!(dir.run(&["bogus"]).status.code(), Some(2));
    assert_eq!(dir.run(&["simulate-scenario", "--inject", "meteor"]).status.code(), Some(2));
    assert_eq!(dir.run(&["--help"]).status.code(), Some(0));
}
