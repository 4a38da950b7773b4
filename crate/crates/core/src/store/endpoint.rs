use serde_json::json;

use crate::kinds::EndpointKind;
use crate::protocol::payload::ErrorPayload;
use crate::protocol::{MessageEnvelope, MessageKind};
use crate::runtime::{Outbound, StoreEndpoint};

use super::{ObeStore, StoreQuery};

impl StoreEndpoint for ObeStore {
    fn is_available(&self) -> bool {
        ObeStore::is_available(self)
    }

    fn handle(&self, envelope: &MessageEnvelope, caller: EndpointKind) -> Vec<Outbound> {
        let cid = &envelope.correlation_id;
        let error = |code: &str, reason: String| Outbound::error(&envelope.from, cid, &ErrorPayload::new(code, reason));
        let reply = match envelope.kind {
            MessageKind::StoreQuery if !self.is_available() => error("StoreUnavailable", "log file missing".into()),
            MessageKind::StoreQuery => match serde_json::from_value::<StoreQuery>(envelope.payload.clone()) {
                Ok(query) => match self.query(&query, caller) {
                    Ok(records) => Outbound::new(&envelope.from, MessageKind::StoreResult, cid, json!({ "records": records })),
                    Err(e) => error(e.code(), e.to_string()),
                },
                Err(e) => error("Malformed", e.to_string()),
            },
            other => error("Unsupported", format!("the store does not handle {other}")),
        };
        vec![reply]
    }
}
