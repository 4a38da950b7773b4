#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use imobe_core::auth::{Credentials, Role};
use imobe_core::clock::ManualClock;
use imobe_core::domain::{AssessmentItem, ItemKind, OutcomeLevel, OutcomeNode, Score};
use imobe_core::fixture::{Fixture, UserSeed};
use imobe_core::platform::{ClientSession, Platform, PlatformConfig};
use imobe_core::protocol::payload::{AssessRequest, Scope};
use imobe_core::protocol::MessageEnvelope;
use imobe_core::store::ScoreDoc;
use proptest::prelude::*;

pub const START_MS: u64 = 1_700_000_000_000;
pub const COURSE: &str = "C1";

pub fn item(id: &str, max: f64, weights: &[(&str, f64)]) -> AssessmentItem {
    AssessmentItem {
        id: id.into(),
        course_id: COURSE.into(),
        kind: ItemKind::Test,
        max_marks: max,
        co_weights: weights.iter().map(|(c, w)| (c.to_string(), *w)).collect(),
    }
}

pub fn score(student: &str, item: &str, raw: f64) -> ScoreDoc {
    ScoreDoc {
        course_id: COURSE.into(),
        item_id: item.into(),
        student_id: student.into(),
        raw,
    }
}

pub fn user(principal: &str, role: Role) -> UserSeed {
    UserSeed {
        principal: principal.into(),
        secret: format!("{principal}-pw"),
        roles: [role].into(),
        enabled: true,
    }
}

/// Three students, two items, two COs feeding two POs through two EOs.
pub fn small_fixture() -> Fixture {
    use OutcomeLevel::*;
    Fixture {
        outcomes: vec![
            OutcomeNode::new("PO1", ProgramOutcome, &[]),
            OutcomeNode::new("PO2", ProgramOutcome, &[]),
            OutcomeNode::new("EO1", ExitOutcome, &["PO1"]),
            OutcomeNode::new("EO2", ExitOutcome, &["PO1", "PO2"]),
            OutcomeNode::new("CO1", CourseOutcome, &["EO1"]),
            OutcomeNode::new("CO2", CourseOutcome, &["EO1", "EO2"]),
        ],
        items: vec![
            item("quiz1", 20.0, &[("CO1", 1.0)]),
            item("proj1", 50.0, &[("CO1", 1.0), ("CO2", 2.0)]),
        ],
        users: vec![
            user("lect", Role::Academician),
            user("s1", Role::Student),
            user("s2", Role::Student),
            user("admin", Role::Administrator),
        ],
        scores: vec![
            score("s1", "quiz1", 15.0),
            score("s1", "proj1", 40.0),
            score("s2", "quiz1", 10.0),
            score("s2", "proj1", 20.0),
            score("s3", "quiz1", 20.0),
        ],
    }
}

pub struct Env {
    pub platform: Platform,
    pub clock: Arc<ManualClock>,
}

pub fn platform_with(config: PlatformConfig, fixture: &Fixture) -> Env {
    let clock = Arc::new(ManualClock::new(START_MS));
    let platform = Platform::open(config, clock.clone()).expect("platform opens");
    fixture
        .seed(&platform.store, &platform.system_credentials())
        .expect("fixture seeds");
    platform.runtime.run_until_idle();
    Env { platform, clock }
}

pub fn platform(fixture: &Fixture) -> Env {
    platform_with(PlatformConfig::default(), fixture)
}

impl Env {
    pub fn session(&self, principal: &str, session_id: &str) -> (Credentials, ClientSession) {
        let (creds, _) = self
            .platform
            .login(principal, &format!("{principal}-pw"))
            .expect("login");
        let session = self.platform.open_session(session_id, &creds).expect("session");
        (creds, session)
    }

    pub fn assess(&self, session: &str, corr: &str, creds: &Credentials, scope: Scope) -> MessageEnvelope {
        let request = AssessRequest {
            course_id: COURSE.into(),
            scope,
            threshold: None,
        };
        self.platform
            .assess(session, corr, creds, &request, Duration::from_secs(5))
            .expect("request accepted")
            .expect("reply arrives")
    }
}

pub fn scores_of(fixture: &Fixture) -> Vec<Score> {
    fixture.scores.iter().map(ScoreDoc::to_score).collect()
}

/// Straight-line recomputation of a course report from raw marks, sharing
/// no code with the library. Returns (per_student, cohort mean, cohort
/// fraction, po rollup).
pub struct OracleReport {
    pub per_student: BTreeMap<String, BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
    pub fraction: BTreeMap<String, f64>,
    pub po: BTreeMap<String, f64>,
}

pub fn oracle_report(fixture: &Fixture, threshold: f64) -> OracleReport {
    let items: Vec<&AssessmentItem> = fixture.items.iter().filter(|i| i.course_id == COURSE).collect();
    let mut cos = BTreeSet::new();
    for i in &items {
        for (co, w) in &i.co_weights {
            if *w > 0.0 {
                cos.insert(co.clone());
            }
        }
    }
    let mut students = BTreeSet::new();
    for s in &fixture.scores {
        students.insert(s.student_id.clone());
    }
    let mut per_student = BTreeMap::new();
    for st in &students {
        let mut row = BTreeMap::new();
        for co in &cos {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in &items {
                let w = i.co_weights.get(co).copied().unwrap_or(0.0);
                if w <= 0.0 {
                    continue;
                }
                let mut raw = 0.0;
                for s in &fixture.scores {
                    if &s.student_id == st && s.item_id == i.id {
                        raw = s.raw;
                    }
                }
                num += w * raw / i.max_marks;
                den += w;
            }
            row.insert(co.clone(), num / den);
        }
        per_student.insert(st.clone(), row);
    }
    let n = students.len() as f64;
    let mut mean = BTreeMap::new();
    let mut fraction = BTreeMap::new();
    for co in &cos {
        let mut total = 0.0;
        let mut above = 0.0;
        for row in per_student.values() {
            total += row[co];
            if row[co] >= threshold - 1e-12 {
                above += 1.0;
            }
        }
        mean.insert(co.clone(), total / n);
        fraction.insert(co.clone(), above / n);
    }
    let parents = |id: &str| -> Vec<String> {
        fixture
            .outcomes
            .iter()
            .find(|o| o.id == id)
            .map(|o| o.parent_ids.clone())
            .unwrap_or_default()
    };
    let mut po_members: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for co in &cos {
        let mut reached = BTreeSet::new();
        for eo in parents(co) {
            for po in parents(&eo) {
                reached.insert(po);
            }
        }
        for po in reached {
            po_members.entry(po).or_default().push(mean[co]);
        }
    }
    let po = po_members
        .into_iter()
        .map(|(po, v)| (po, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    OracleReport {
        per_student,
        mean,
        fraction,
        po,
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Compares a report document against the oracle; returns the first mismatch.
pub fn check_against_oracle(doc: &serde_json::Value, oracle: &OracleReport, tol: f64) -> Result<(), String> {
    let num = |v: &serde_json::Value, path: &str| v.as_f64().ok_or_else(|| format!("{path} missing"));
    let per_student = doc["per_student"].as_object().ok_or("per_student missing")?;
    if per_student.len() != oracle.per_student.len() {
        return Err(format!("{} students, oracle has {}", per_student.len(), oracle.per_student.len()));
    }
    for (st, row) in &oracle.per_student {
        let got = doc["per_student"][st].as_object().ok_or(format!("student {st} missing"))?;
        if got.len() != row.len() {
            return Err(format!("student {st}: {} COs, oracle has {}", got.len(), row.len()));
        }
        for (co, want) in row {
            let v = num(&doc["per_student"][st][co], &format!("{st}/{co}"))?;
            if !close(v, *want, tol) {
                return Err(format!("per_student {st}/{co}: {v} vs {want}"));
            }
        }
    }
    for (co, want) in &oracle.mean {
        let v = num(&doc["cohort"][co]["mean"], co)?;
        if !close(v, *want, tol) {
            return Err(format!("cohort {co} mean: {v} vs {want}"));
        }
        let f = num(&doc["cohort"][co]["fraction_above_threshold"], co)?;
        if !close(f, oracle.fraction[co], tol) {
            return Err(format!("cohort {co} fraction: {f} vs {}", oracle.fraction[co]));
        }
    }
    let po = doc["po_rollup"].as_object().ok_or("po_rollup missing")?;
    if po.len() != oracle.po.len() {
        return Err(format!("{} POs, oracle has {}", po.len(), oracle.po.len()));
    }
    for (id, want) in &oracle.po {
        let v = num(&doc["po_rollup"][id], id)?;
        if !close(v, *want, tol) {
            return Err(format!("po {id}: {v} vs {want}"));
        }
    }
    Ok(())
}

/// Random small course: up to 5 students, 4 items and 3 COs over a fixed
/// two-EO, two-PO upper hierarchy.
pub fn arb_fixture() -> impl Strategy<Value = Fixture> {
    (1usize..=3, 1usize..=4, 1usize..=5)
        .prop_flat_map(|(n_co, n_items, n_students)| {
            let co_parents = prop::collection::vec(prop::sample::subsequence(vec!["EO1", "EO2"], 1..=2), n_co);
            let items = prop::collection::vec(
                (
                    1u32..=100,
                    prop::collection::vec(prop::option::weighted(0.7, 1u32..=5), n_co)
                        .prop_filter("some weight", |w| w.iter().any(Option::is_some)),
                ),
                n_items,
            );
            let marks = prop::collection::vec(prop::collection::vec(prop::option::weighted(0.8, 0.0f64..=1.0), n_items), n_students);
            (Just(n_co), co_parents, items, marks)
        })
        .prop_filter("at least one score", |(_, _, _, marks)| {
            marks.iter().flatten().any(Option::is_some)
        })
        .prop_map(|(n_co, co_parents, items, marks)| {
            use OutcomeLevel::*;
            let mut outcomes = vec![
                OutcomeNode::new("PO1", ProgramOutcome, &[]),
                OutcomeNode::new("PO2", ProgramOutcome, &[]),
                OutcomeNode::new("EO1", ExitOutcome, &["PO1"]),
                OutcomeNode::new("EO2", ExitOutcome, &["PO1", "PO2"]),
            ];
            for (c, parents) in co_parents.iter().enumerate().take(n_co) {
                outcomes.push(OutcomeNode::new(&format!("CO{}", c + 1), CourseOutcome, parents));
            }
            let items: Vec<AssessmentItem> = items
                .iter()
                .enumerate()
                .map(|(i, (max, weights))| AssessmentItem {
                    id: format!("it{}", i + 1),
                    course_id: COURSE.into(),
                    kind: ItemKind::Assignment,
                    max_marks: *max as f64,
                    co_weights: weights
                        .iter()
                        .enumerate()
                        .filter_map(|(c, w)| w.map(|w| (format!("CO{}", c + 1), w as f64)))
                        .collect(),
                })
                .collect();
            let mut scores = Vec::new();
            for (s, row) in marks.iter().enumerate() {
                for (i, frac) in row.iter().enumerate() {
                    if let Some(frac) = frac {
                        scores.push(score(&format!("st{}", s + 1), &items[i].id, (frac * items[i].max_marks).round()));
                    }
                }
            }
            let mut users = vec![user("lect", Role::Academician)];
            for s in 0..marks.len() {
                users.push(user(&format!("st{}", s + 1), Role::Student));
            }
            Fixture {
                outcomes,
                items,
                users,
                scores,
            }
        })
}
