use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{
    build_report, item_breakdown, student_result, AssessmentItem, DomainError, OutcomeNode, Score,
};
use crate::kinds::AgentKind;
use crate::protocol::payload::{AssessmentJob, DataClass, DataRetrieveRequest, ErrorPayload, Scope};
use crate::protocol::{MessageEnvelope, MessageKind};
use crate::runtime::{AgentContext, Behavior, Outbound, STORE_ENDPOINT};
use crate::store::{Record, ScoreDoc, Selector, StoreQuery, StoreResult};

use super::save;

/// The store query answering a retrieval request.
pub fn store_query_for(request: &DataRetrieveRequest) -> StoreQuery {
    let course = &request.job.course_id;
    let selectors = request
        .classes
        .iter()
        .map(|class| match class {
            DataClass::Scores { student_id, item_id } => {
                let mut s = Selector::new("score").filter("course_id", course);
                if let Some(student) = student_id {
                    s = s.filter("student_id", student);
                }
                if let Some(item) = item_id {
                    s = s.filter("item_id", item);
                }
                s
            }
            DataClass::Items { item_id } => {
                let s = Selector::new("item").filter("course_id", course);
                match item_id {
                    Some(item) => s.filter("id", item),
                    None => s,
                }
            }
            DataClass::Hierarchy => Selector::new("outcome"),
        })
        .collect();
    StoreQuery {
        correlation_id: request.job.correlation_id.clone(),
        selectors,
    }
}

fn malformed(record: &Record, e: serde_json::Error) -> DomainError {
    DomainError::Malformed(format!("{}: {e}", record.key))
}

/// Computes the result document for `job` from store records.
pub fn assess(job: &AssessmentJob, records: &[Record]) -> Result<Value, DomainError> {
    let mut scores = Vec::new();
    let mut items = Vec::new();
    let mut nodes = Vec::new();
    for record in records {
        let prefix = record.key.split('/').next().unwrap_or_default();
        match prefix {
            "score" => {
                let doc: ScoreDoc = serde_json::from_value(record.doc.clone()).map_err(|e| malformed(record, e))?;
                scores.push(doc.to_score());
            }
            "item" => items.push(
                serde_json::from_value::<AssessmentItem>(record.doc.clone()).map_err(|e| malformed(record, e))?,
            ),
            "outcome" => nodes.push(
                serde_json::from_value::<OutcomeNode>(record.doc.clone()).map_err(|e| malformed(record, e))?,
            ),
            _ => return Err(DomainError::Malformed(format!("unexpected record {}", record.key))),
        }
    }
    let course = &job.course_id;
    let value = match &job.scope {
        Scope::CourseReport => serde_json::to_value(build_report(course, &scores, &items, &nodes, job.threshold)?),
        Scope::StudentResult { student_id } => {
            let own: Vec<Score> = scores.into_iter().filter(|s| s.student_id == *student_id).collect();
            serde_json::to_value(student_result(course, student_id, &own, &items, job.threshold)?)
        }
        Scope::ItemBreakdown { item_id } => {
            let item = items
                .iter()
                .find(|i| i.id == *item_id && i.course_id == *course)
                .ok_or_else(|| DomainError::UnknownItem(item_id.clone()))?;
            serde_json::to_value(item_breakdown(item, &scores)?)
        }
    };
    Ok(value.expect("domain results serialize"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingJob {
    job: AssessmentJob,
    reply_to: String,
}

/// Assessment Agent: queries the store and computes attainment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssaBehavior {
    pending: BTreeMap<String, PendingJob>,
}

impl AssaBehavior {
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn retrieve(&mut self, ctx: &AgentContext<'_>, env: &MessageEnvelope) -> Result<Outbound, ErrorPayload> {
        let request: DataRetrieveRequest = serde_json::from_value(env.payload.clone())
            .map_err(|e| ErrorPayload::new("Malformed", e.to_string()))?;
        match ctx.agent_kind(&request.origin) {
            Some(AgentKind::AA) | Some(AgentKind::SA) => {}
            _ => return Err(ErrorPayload::new("Malformed", format!("bad origin {}", request.origin))),
        }
        let query = store_query_for(&request);
        self.pending.insert(
            env.correlation_id.clone(),
            PendingJob {
                job: request.job,
                reply_to: request.origin,
            },
        );
        Ok(Outbound::new(
            STORE_ENDPOINT,
            MessageKind::StoreQuery,
            &env.correlation_id,
            serde_json::to_value(&query).expect("query serializes"),
        ))
    }
}

impl Behavior for AssaBehavior {
    fn kind(&self) -> AgentKind {
        AgentKind::AssA
    }

    fn handle(&mut self, ctx: &AgentContext<'_>, env: &MessageEnvelope) -> Vec<Outbound> {
        let cid = &env.correlation_id;
        match env.kind {
            MessageKind::DataRetrieveRequest => match self.retrieve(ctx, env) {
                Ok(out) => vec![out],
                // an AA can be answered directly; a relayed SA request is answered via its origin
                Err(error) => {
                    let origin = env.payload.get("origin").and_then(Value::as_str).unwrap_or(&env.from);
                    vec![Outbound::error(origin, cid, &error)]
                }
            },
            MessageKind::StoreResult => {
                let Some(pending) = self.pending.remove(cid) else {
                    return Vec::new();
                };
                let outcome = serde_json::from_value::<StoreResult>(env.payload.clone())
                    .map_err(|e| DomainError::Malformed(e.to_string()))
                    .and_then(|result| assess(&pending.job, &result.records));
                match outcome {
                    Ok(value) => vec![Outbound::new(&pending.reply_to, MessageKind::AssessResult, cid, value)],
                    Err(e) => vec![Outbound::error(
                        &pending.reply_to,
                        cid,
                        &ErrorPayload::new(e.code(), e.to_string()),
                    )],
                }
            }
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
