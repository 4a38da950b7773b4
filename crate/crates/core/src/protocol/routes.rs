//! The route table: which endpoint kind may send which message kind to
//! which other endpoint kind. Anything not listed is refused.
//!
//! Clients only ever talk to the UIA. The Assessment Agent is reached from
//! the Academic Agent directly, and from the Student Agent through the UIA,
//! which relays its retrieval request. Only the Assessment Agent queries the
//! store; the store and the UIA feed audit events to the SAA.

use crate::kinds::{AgentKind, EndpointKind};

use super::envelope::MessageKind;

use AgentKind::*;
use EndpointKind::{Agent, Client, Store};
use MessageKind as M;

pub const ROUTES: &[(EndpointKind, EndpointKind, MessageKind)] = &[
    (Client, Agent(UIA), M::Login),
    (Client, Agent(UIA), M::AssessRequest),
    (Agent(UIA), Agent(AA), M::JobDelegate),
    (Agent(UIA), Agent(SA), M::JobDelegate),
    (Agent(AA), Agent(AssA), M::DataRetrieveRequest),
    (Agent(SA), Agent(UIA), M::DataRetrieveRequest),
    (Agent(UIA), Agent(AssA), M::DataRetrieveRequest),
    (Agent(AssA), Store, M::StoreQuery),
    (Store, Agent(AssA), M::StoreResult),
    (Agent(AssA), Agent(AA), M::AssessResult),
    (Agent(AssA), Agent(SA), M::AssessResult),
    (Agent(AA), Agent(UIA), M::JobResult),
    (Agent(SA), Agent(UIA), M::JobResult),
    (Agent(UIA), Client, M::Present),
    (Store, Agent(SAA), M::AuditEvent),
    (Agent(UIA), Agent(SAA), M::AuditEvent),
    // failures travel back along the request path
    (Agent(UIA), Client, M::Error),
    (Agent(AA), Agent(UIA), M::Error),
    (Agent(SA), Agent(UIA), M::Error),
    (Agent(UIA), Agent(SA), M::Error),
    (Agent(AssA), Agent(AA), M::Error),
    (Agent(AssA), Agent(SA), M::Error),
    (Store, Agent(AssA), M::Error),
];

pub fn route_allowed(from: EndpointKind, to: EndpointKind, kind: MessageKind) -> bool {
    ROUTES.iter().any(|r| *r == (from, to, kind))
}
