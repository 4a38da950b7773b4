use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::check_threshold;
use crate::kinds::AgentKind;
use crate::protocol::payload::{AssessRequest, AssessmentJob, ErrorPayload};
use crate::protocol::{MessageEnvelope, MessageKind};
use crate::runtime::{AgentContext, Behavior, Outbound};

use super::{delegate_for, save};

/// User Interface Agent: takes client requests, hands them to the session's
/// Academic or Student Agent, relays student retrievals and presents results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UiaBehavior {
    /// correlation id -> client session waiting for it
    pending: BTreeMap<String, String>,
}

impl UiaBehavior {
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn intake(&mut self, ctx: &AgentContext<'_>, env: &MessageEnvelope) -> Result<Outbound, ErrorPayload> {
        let request: AssessRequest = serde_json::from_value(env.payload.clone())
            .map_err(|e| ErrorPayload::new("Malformed", e.to_string()))?;
        let privileges = ctx
            .authenticate(&env.credentials)
            .map_err(|e| ErrorPayload::new(e.code(), e.to_string()))?;
        let threshold = request.threshold.unwrap_or_else(|| ctx.default_threshold());
        check_threshold(threshold).map_err(|e| ErrorPayload::new(e.code(), e.to_string()))?;
        let job = AssessmentJob {
            correlation_id: env.correlation_id.clone(),
            requested_by: privileges.principal.clone(),
            roles: privileges.roles.iter().copied().collect(),
            course_id: request.course_id,
            scope: request.scope,
            threshold,
        };
        if !job.scope_permitted() {
            return Err(ErrorPayload::new(
                "ScopeForbidden",
                format!("{} may not request {:?}", job.requested_by, job.scope),
            ));
        }
        let kind = delegate_for(&privileges);
        let container = ctx.session_container(&env.from);
        let delegate = ctx
            .find_agent(kind, container.as_deref())
            .ok_or_else(|| ErrorPayload::new("NoDelegate", format!("no {kind} in this session")))?;
        self.pending.insert(env.correlation_id.clone(), env.from.clone());
        Ok(Outbound::new(
            &delegate,
            MessageKind::JobDelegate,
            &env.correlation_id,
            serde_json::to_value(&job).expect("job serializes"),
        ))
    }
}

impl Behavior for UiaBehavior {
    fn kind(&self) -> AgentKind {
        AgentKind::UIA
    }

    fn handle(&mut self, ctx: &AgentContext<'_>, env: &MessageEnvelope) -> Vec<Outbound> {
        let cid = &env.correlation_id;
        match env.kind {
            MessageKind::AssessRequest => match self.intake(ctx, env) {
                Ok(out) => vec![out],
                Err(error) => vec![Outbound::error(&env.from, cid, &error)],
            },
            MessageKind::DataRetrieveRequest => match ctx.find_agent(AgentKind::AssA, None) {
                Some(assa) => vec![Outbound::new(&assa, MessageKind::DataRetrieveRequest, cid, env.payload.clone())],
                None => vec![Outbound::error(&env.from, cid, &ErrorPayload::new("AgentUnknown", "no assessment agent"))],
            },
            MessageKind::JobResult => match self.pending.remove(cid) {
                Some(client) => vec![Outbound::new(&client, MessageKind::Present, cid, env.payload.clone())],
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
