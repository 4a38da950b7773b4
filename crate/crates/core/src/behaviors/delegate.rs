use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::kinds::AgentKind;
use crate::protocol::payload::{AssessmentJob, DataClass, DataRetrieveRequest, ErrorPayload, Scope};
use crate::protocol::{MessageEnvelope, MessageKind};
use crate::runtime::{AgentContext, Behavior, Outbound};

use super::save;

fn parse_job(job: &Value) -> Result<AssessmentJob, ErrorPayload> {
    serde_json::from_value(job.clone()).map_err(|e| {
        let scope_ok = job
            .get("scope")
            .map(|s| serde_json::from_value::<Scope>(s.clone()).is_ok())
            .unwrap_or(true);
        if scope_ok {
            ErrorPayload::new("Malformed", e.to_string())
        } else {
            ErrorPayload::new("UnsupportedScope", format!("unsupported scope {}", job["scope"]))
        }
    })
}

fn classes_for(scope: &Scope) -> Vec<DataClass> {
    match scope {
        Scope::CourseReport => vec![
            DataClass::Scores {
                student_id: None,
                item_id: None,
            },
            DataClass::Items { item_id: None },
            DataClass::Hierarchy,
        ],
        Scope::StudentResult { student_id } => vec![
            DataClass::Scores {
                student_id: Some(student_id.clone()),
                item_id: None,
            },
            DataClass::Items { item_id: None },
        ],
        Scope::ItemBreakdown { item_id } => vec![
            DataClass::Scores {
                student_id: None,
                item_id: Some(item_id.clone()),
            },
            DataClass::Items {
                item_id: Some(item_id.clone()),
            },
        ],
    }
}

/// Academic Agent planning: one retrieval request naming what the scope needs.
pub fn aa_handle(job: &Value, origin: &str) -> Result<DataRetrieveRequest, ErrorPayload> {
    let job = parse_job(job)?;
    Ok(DataRetrieveRequest {
        classes: classes_for(&job.scope),
        job,
        origin: origin.to_string(),
    })
}

/// Student Agent planning: as for the Academic Agent, but only for the
/// requesting student's own result.
pub fn sa_handle(job: &Value, origin: &str) -> Result<DataRetrieveRequest, ErrorPayload> {
    let parsed = parse_job(job)?;
    match &parsed.scope {
        Scope::StudentResult { student_id } if *student_id == parsed.requested_by => aa_handle(job, origin),
        other => Err(ErrorPayload::new(
            "ScopeForbidden",
            format!("{} may only view their own result, not {other:?}", parsed.requested_by),
        )),
    }
}

/// The Academic Agent (`kind` AA) or Student Agent (`kind` SA). They differ
/// in the scope rule and in where the retrieval request goes: the AA talks to
/// the Assessment Agent, the SA goes through the UIA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelegateBehavior {
    pub(super) kind: AgentKind,
    /// correlation id -> agent the job came from
    pending: BTreeMap<String, String>,
}

impl DelegateBehavior {
    pub fn new(kind: AgentKind) -> Self {
        assert!(matches!(kind, AgentKind::AA | AgentKind::SA), "delegates are AA or SA");
        DelegateBehavior {
            kind,
            pending: BTreeMap::new(),
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn plan(&self, ctx: &AgentContext<'_>, env: &MessageEnvelope) -> Result<Outbound, ErrorPayload> {
        let request = match self.kind {
            AgentKind::SA => sa_handle(&env.payload, ctx.agent_id)?,
            _ => aa_handle(&env.payload, ctx.agent_id)?,
        };
        let to = match self.kind {
            AgentKind::SA => env.from.clone(),
            _ => ctx
                .find_agent(AgentKind::AssA, None)
                .ok_or_else(|| ErrorPayload::new("AgentUnknown", "no assessment agent"))?,
        };
        Ok(Outbound::new(
            &to,
            MessageKind::DataRetrieveRequest,
            &env.correlation_id,
            serde_json::to_value(&request).expect("request serializes"),
        ))
    }
}

impl Behavior for DelegateBehavior {
    fn kind(&self) -> AgentKind {
        self.kind
    }

    fn handle(&mut self, ctx: &AgentContext<'_>, env: &MessageEnvelope) -> Vec<Outbound> {
        let cid = &env.correlation_id;
        match env.kind {
            MessageKind::JobDelegate => match self.plan(ctx, env) {
                Ok(out) => {
                    self.pending.insert(cid.clone(), env.from.clone());
                    vec![out]
                }
                Err(error) => vec![Outbound::error(&env.from, cid, &error)],
            },
            MessageKind::AssessResult => match self.pending.remove(cid) {
                Some(uia) => vec![Outbound::new(&uia, MessageKind::JobResult, cid, env.payload.clone())],
                None => Vec::new(),
            },
            MessageKind::Error => {
                self.pending.remove(cid);
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    fn save_state(&self) -> Vec<u8> {
        save(self)
    }
}
