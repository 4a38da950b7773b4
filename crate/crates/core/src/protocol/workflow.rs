//! The assessment workflow as a state machine over observed envelopes.
//!
//! One workflow per correlation id. The academician path is
//!
//! ```text
//! client -> UIA   ASSESS_REQUEST
//! UIA    -> AA    JOB_DELEGATE
//! AA     -> AssA  DATA_RETRIEVE_REQUEST
//! AssA   -> store STORE_QUERY
//! store  -> AssA  STORE_RESULT
//! AssA   -> AA    ASSESS_RESULT
//! AA     -> UIA   JOB_RESULT
//! UIA    -> client PRESENT
//! ```
//!
//! The student path delegates to the SA and its retrieval request is relayed
//! by the UIA (`SA -> UIA`, then `UIA -> AssA`).
//!
//! [`advance`] is pure. Each state remembers the single envelope it waits for
//! next; anything else is a protocol violation. Emissions are the envelopes the
//! protocol requires next. Agents produce all of them except failure notices,
//! which [`WorkflowEngine`] hands to the runtime to send.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kinds::{AgentKind, EndpointKind};

use super::envelope::{MessageEnvelope, MessageKind};
use super::payload::ErrorPayload;

pub const DEFAULT_PHASE_TIMEOUT_MS: u64 = 5_000;
pub const DEFAULT_WORKFLOW_BUDGET_MS: u64 = 15_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Received,
    Delegated,
    Retrieving,
    Queried,
    Computed,
    Returned,
    Presented,
    Failed,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Presented | Phase::Failed)
    }
}

/// One hop of the protocol, by endpoint kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub from: EndpointKind,
    pub to: EndpointKind,
    pub kind: MessageKind,
}

impl Step {
    pub const fn new(from: EndpointKind, to: EndpointKind, kind: MessageKind) -> Self {
        Step { from, to, kind }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {} {}", self.from, self.to, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub correlation_id: String,
    pub step: Step,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum FailureReason {
    ProtocolViolation { detail: String },
    Timeout { phase: Phase },
    /// An ERROR raised by an agent, the store or the runtime.
    Reported { code: String, reason: String },
}

impl FailureReason {
    pub fn to_error(&self) -> ErrorPayload {
        match self {
            FailureReason::ProtocolViolation { detail } => ErrorPayload::new("ProtocolViolation", detail.clone()),
            FailureReason::Timeout { phase } => {
                ErrorPayload::new("Timeout", format!("workflow timed out in phase {phase:?}"))
            }
            FailureReason::Reported { code, reason } => ErrorPayload::new(code.clone(), reason.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub correlation_id: String,
    pub phase: Phase,
    /// AA for academician requests, SA for student requests.
    pub delegate: AgentKind,
    pub started_ts: u64,
    pub last_ts: u64,
    pub failure_reason: Option<FailureReason>,
    /// The next envelope this workflow accepts.
    pub awaiting: Option<Step>,
}

impl WorkflowState {
    pub fn new(correlation_id: impl Into<String>, delegate: AgentKind, now: u64) -> Self {
        WorkflowState {
            correlation_id: correlation_id.into(),
            phase: Phase::Received,
            delegate,
            started_ts: now,
            last_ts: now,
            failure_reason: None,
            awaiting: Some(Step::new(
                EndpointKind::Client,
                EndpointKind::Agent(AgentKind::UIA),
                MessageKind::AssessRequest,
            )),
        }
    }
}

/// An envelope together with the resolved kinds of its endpoints.
#[derive(Debug, Clone, Copy)]
pub struct Routed<'a> {
    pub envelope: &'a MessageEnvelope,
    pub from: EndpointKind,
    pub to: EndpointKind,
}

impl Routed<'_> {
    pub fn step(&self) -> Step {
        Step::new(self.from, self.to, self.envelope.kind)
    }
}

const UIA: EndpointKind = EndpointKind::Agent(AgentKind::UIA);
const ASSA: EndpointKind = EndpointKind::Agent(AgentKind::AssA);
const CLIENT: EndpointKind = EndpointKind::Client;
const STORE: EndpointKind = EndpointKind::Store;
const CLIENT_ERROR: Step = Step::new(UIA, CLIENT, MessageKind::Error);

/// The fixed envelope sequence of a successful workflow, AUDIT_EVENTs aside.
pub fn canonical_trace(delegate: AgentKind) -> Vec<Step> {
    let d = EndpointKind::Agent(delegate);
    let mut steps = vec![
        Step::new(CLIENT, UIA, MessageKind::AssessRequest),
        Step::new(UIA, d, MessageKind::JobDelegate),
    ];
    if delegate == AgentKind::SA {
        steps.push(Step::new(d, UIA, MessageKind::DataRetrieveRequest));
        steps.push(Step::new(UIA, ASSA, MessageKind::DataRetrieveRequest));
    } else {
        steps.push(Step::new(d, ASSA, MessageKind::DataRetrieveRequest));
    }
    steps.extend([
        Step::new(ASSA, STORE, MessageKind::StoreQuery),
        Step::new(STORE, ASSA, MessageKind::StoreResult),
        Step::new(ASSA, d, MessageKind::AssessResult),
        Step::new(d, UIA, MessageKind::JobResult),
        Step::new(UIA, CLIENT, MessageKind::Present),
    ]);
    steps
}

fn fail(mut state: WorkflowState, reason: FailureReason, ts: u64, notify: bool) -> (WorkflowState, Vec<Emission>) {
    state.phase = Phase::Failed;
    state.failure_reason = Some(reason);
    state.last_ts = ts;
    if notify {
        state.awaiting = Some(CLIENT_ERROR);
        let emission = Emission {
            correlation_id: state.correlation_id.clone(),
            step: CLIENT_ERROR,
        };
        (state, vec![emission])
    } else {
        state.awaiting = None;
        (state, Vec::new())
    }
}

/// Applies one observed envelope. Terminal states only take the envelope
/// they still await (the final PRESENT or ERROR) and are otherwise unchanged.
pub fn advance(state: &WorkflowState, event: &Routed<'_>) -> (WorkflowState, Vec<Emission>) {
    let step = event.step();
    let ts = event.envelope.ts;
    let mut next = state.clone();

    if state.phase.is_terminal() {
        if state.awaiting == Some(step) {
            next.awaiting = None;
        }
        return (next, Vec::new());
    }

    if event.envelope.correlation_id != state.correlation_id {
        let detail = format!("envelope for {} fed to {}", event.envelope.correlation_id, state.correlation_id);
        return fail(next, FailureReason::ProtocolViolation { detail }, ts, true);
    }

    if step.kind == MessageKind::Error {
        let error = ErrorPayload::from_value(&event.envelope.payload);
        let reason = FailureReason::Reported {
            code: error.code,
            reason: error.reason,
        };
        // an ERROR already on its way to the client is the notification
        return fail(next, reason, ts, step != CLIENT_ERROR);
    }

    if state.awaiting != Some(step) {
        let detail = match state.awaiting {
            Some(expected) => format!("expected {expected}, got {step} in phase {:?}", state.phase),
            None => format!("unexpected {step} in phase {:?}", state.phase),
        };
        return fail(next, FailureReason::ProtocolViolation { detail }, ts, true);
    }

    let d = EndpointKind::Agent(state.delegate);
    let (phase, awaiting, emits) = match (state.phase, step.kind) {
        (Phase::Received, MessageKind::AssessRequest) => {
            let s = Step::new(UIA, d, MessageKind::JobDelegate);
            (Phase::Delegated, s, true)
        }
        (Phase::Delegated, MessageKind::JobDelegate) => {
            let s = if state.delegate == AgentKind::SA {
                Step::new(d, UIA, MessageKind::DataRetrieveRequest)
            } else {
                Step::new(d, ASSA, MessageKind::DataRetrieveRequest)
            };
            (Phase::Retrieving, s, true)
        }
        (Phase::Retrieving, MessageKind::DataRetrieveRequest) if step.to == UIA => {
            (Phase::Retrieving, Step::new(UIA, ASSA, MessageKind::DataRetrieveRequest), true)
        }
        (Phase::Retrieving, MessageKind::DataRetrieveRequest) => {
            (Phase::Queried, Step::new(ASSA, STORE, MessageKind::StoreQuery), true)
        }
        // the query is out; wait for its answer
        (Phase::Queried, MessageKind::StoreQuery) => {
            (Phase::Queried, Step::new(STORE, ASSA, MessageKind::StoreResult), false)
        }
        (Phase::Queried, MessageKind::StoreResult) => {
            (Phase::Computed, Step::new(ASSA, d, MessageKind::AssessResult), true)
        }
        (Phase::Computed, MessageKind::AssessResult) => {
            (Phase::Returned, Step::new(d, UIA, MessageKind::JobResult), true)
        }
        (Phase::Returned, MessageKind::JobResult) => {
            (Phase::Presented, Step::new(UIA, CLIENT, MessageKind::Present), true)
        }
        (phase, _) => {
            let detail = format!("no transition for {step} in phase {phase:?}");
            return fail(next, FailureReason::ProtocolViolation { detail }, ts, true);
        }
    };
    if phase != state.phase {
        next.last_ts = ts;
    }
    next.phase = phase;
    next.awaiting = Some(awaiting);
    let emissions = if emits {
        vec![Emission {
            correlation_id: state.correlation_id.clone(),
            step: awaiting,
        }]
    } else {
        Vec::new()
    };
    (next, emissions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeouts {
    pub phase_ms: u64,
    pub budget_ms: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            phase_ms: DEFAULT_PHASE_TIMEOUT_MS,
            budget_ms: DEFAULT_WORKFLOW_BUDGET_MS,
        }
    }
}

/// Fails a live workflow that has sat in one phase longer than the phase
/// timeout or run past the overall budget.
pub fn check_deadline(state: &WorkflowState, now: u64, timeouts: &Timeouts) -> Option<(WorkflowState, Vec<Emission>)> {
    if state.phase.is_terminal() {
        return None;
    }
    let stalled = now.saturating_sub(state.last_ts) > timeouts.phase_ms;
    let over_budget = now.saturating_sub(state.started_ts) > timeouts.budget_ms;
    if stalled || over_budget {
        Some(fail(state.clone(), FailureReason::Timeout { phase: state.phase }, now, true))
    } else {
        None
    }
}

/// An ERROR the runtime must send to a client on the workflow's behalf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notice {
    pub correlation_id: String,
    pub client: String,
    pub error: ErrorPayload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    /// Not part of any tracked workflow.
    Untracked,
    Accept { notices: Vec<Notice> },
    Drop { notices: Vec<Notice> },
}

#[derive(Debug, Clone)]
struct Tracked {
    state: WorkflowState,
    client: String,
}

/// All live and finished workflows of one runtime. Callers serialize access,
/// which serializes events per correlation id.
#[derive(Debug, Default)]
pub struct WorkflowEngine {
    flows: BTreeMap<String, Tracked>,
    timeouts: Timeouts,
}

impl WorkflowEngine {
    pub fn new(timeouts: Timeouts) -> Self {
        WorkflowEngine {
            flows: BTreeMap::new(),
            timeouts,
        }
    }

    pub fn is_tracked(&self, correlation_id: &str) -> bool {
        self.flows.contains_key(correlation_id)
    }

    /// Begins tracking; returns false if the correlation id is already known.
    pub fn start(&mut self, correlation_id: &str, client: &str, delegate: AgentKind, now: u64) -> bool {
        if self.flows.contains_key(correlation_id) {
            return false;
        }
        self.flows.insert(
            correlation_id.to_string(),
            Tracked {
                state: WorkflowState::new(correlation_id, delegate, now),
                client: client.to_string(),
            },
        );
        true
    }

    pub fn state(&self, correlation_id: &str) -> Option<&WorkflowState> {
        self.flows.get(correlation_id).map(|t| &t.state)
    }

    pub fn client_of(&self, correlation_id: &str) -> Option<&str> {
        self.flows.get(correlation_id).map(|t| t.client.as_str())
    }

    fn notices(tracked: &Tracked, emissions: &[Emission]) -> Vec<Notice> {
        let error = tracked
            .state
            .failure_reason
            .as_ref()
            .map(FailureReason::to_error)
            .unwrap_or_else(|| ErrorPayload::new("Failed", "workflow failed"));
        emissions
            .iter()
            .filter(|e| e.step == CLIENT_ERROR)
            .map(|e| Notice {
                correlation_id: e.correlation_id.clone(),
                client: tracked.client.clone(),
                error: error.clone(),
            })
            .collect()
    }

    pub fn observe(&mut self, event: &Routed<'_>) -> Verdict {
        let Some(tracked) = self.flows.get_mut(&event.envelope.correlation_id) else {
            return Verdict::Untracked;
        };
        if event.envelope.kind == MessageKind::AuditEvent {
            return Verdict::Accept { notices: Vec::new() };
        }
        // Client endpoints must be the workflow's own client.
        let wrong_client = (event.from == CLIENT && event.envelope.from != tracked.client)
            || (event.to == CLIENT && event.envelope.to != tracked.client);
        let was_terminal = tracked.state.phase.is_terminal();
        let awaited = tracked.state.awaiting == Some(event.step());

        if was_terminal {
            if awaited && !wrong_client {
                tracked.state = advance(&tracked.state, event).0;
                return Verdict::Accept { notices: Vec::new() };
            }
            // lets agents learn about the failure and drop pending work
            if event.envelope.kind == MessageKind::Error && event.to != CLIENT && event.from != CLIENT {
                return Verdict::Accept { notices: Vec::new() };
            }
            return Verdict::Drop { notices: Vec::new() };
        }

        if wrong_client {
            let detail = format!("{} is not this workflow's client", event.envelope.from);
            let (state, emissions) = fail(
                tracked.state.clone(),
                FailureReason::ProtocolViolation { detail },
                event.envelope.ts,
                true,
            );
            tracked.state = state;
            return Verdict::Drop {
                notices: Self::notices(tracked, &emissions),
            };
        }

        let (state, emissions) = advance(&tracked.state, event);
        let violation = matches!(state.failure_reason, Some(FailureReason::ProtocolViolation { .. }));
        tracked.state = state;
        let notices = Self::notices(tracked, &emissions);
        if violation {
            Verdict::Drop { notices }
        } else {
            Verdict::Accept { notices }
        }
    }

    /// Fails a live workflow from outside, e.g. when the runtime refuses one
    /// of its envelopes.
    pub fn fail(&mut self, correlation_id: &str, error: ErrorPayload, now: u64) -> Vec<Notice> {
        let Some(tracked) = self.flows.get_mut(correlation_id) else {
            return Vec::new();
        };
        if tracked.state.phase.is_terminal() {
            return Vec::new();
        }
        let reason = FailureReason::Reported {
            code: error.code,
            reason: error.reason,
        };
        let (state, emissions) = fail(tracked.state.clone(), reason, now, true);
        tracked.state = state;
        Self::notices(tracked, &emissions)
    }

    pub fn tick(&mut self, now: u64) -> Vec<Notice> {
        let mut notices = Vec::new();
        for tracked in self.flows.values_mut() {
            if let Some((state, emissions)) = check_deadline(&tracked.state, now, &self.timeouts) {
                tracked.state = state;
                notices.extend(Self::notices(tracked, &emissions));
            }
        }
        notices
    }
}
