//! Wire envelope, message kinds, route table and the assessment workflow.

mod envelope;
pub mod payload;
pub mod routes;
pub mod workflow;

pub use envelope::{canonical_json, decode, encode, DecodeError, MessageEnvelope, MessageKind, ENVELOPE_VERSION};
pub use routes::route_allowed;
pub use workflow::{advance, canonical_trace, Phase, Routed, Step, WorkflowState};
