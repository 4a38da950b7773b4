//! Reactive logic of the five agents.
//!
//! Each behavior keeps its state in one serde struct so checkpoints are the
//! JSON of that struct. Agents never forward an ERROR they receive; the
//! workflow engine already told the client, so they only drop pending work.

mod assa;
mod delegate;
mod saa;
mod uia;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::audit::AnomalyRule;
use crate::auth::{PrivilegeSet, Role};
use crate::kinds::AgentKind;
use crate::runtime::{Behavior, BehaviorFactory};

pub use assa::{assess, store_query_for, AssaBehavior};
pub use delegate::{aa_handle, sa_handle, DelegateBehavior};
pub use saa::{saa_manage_account, AccountError, AccountOp, SaaBehavior};
pub use uia::UiaBehavior;

/// Which agent handles an assessment request for these privileges.
pub fn delegate_for(privileges: &PrivilegeSet) -> AgentKind {
    if privileges.has(Role::Academician) || privileges.has(Role::System) {
        AgentKind::AA
    } else {
        AgentKind::SA
    }
}

fn save<T: Serialize>(state: &T) -> Vec<u8> {
    serde_json::to_vec(state).expect("behavior state serializes")
}

fn load<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, String> {
    serde_json::from_slice(bytes).map_err(|e| e.to_string())
}

/// The behaviors the platform ships with.
#[derive(Debug, Clone, Copy, Default)]
pub struct StandardBehaviors {
    pub anomaly_rule: AnomalyRule,
}

impl BehaviorFactory for StandardBehaviors {
    fn create(&self, kind: AgentKind) -> Box<dyn Behavior> {
        match kind {
            AgentKind::UIA => Box::new(UiaBehavior::default()),
            AgentKind::AA | AgentKind::SA => Box::new(DelegateBehavior::new(kind)),
            AgentKind::AssA => Box::new(AssaBehavior::default()),
            AgentKind::SAA => Box::new(SaaBehavior::new(self.anomaly_rule)),
        }
    }

    fn restore(&self, kind: AgentKind, state: &[u8]) -> Result<Box<dyn Behavior>, String> {
        Ok(match kind {
            AgentKind::UIA => Box::new(load::<UiaBehavior>(state)?),
            AgentKind::AA | AgentKind::SA => {
                let behavior: DelegateBehavior = load(state)?;
                if behavior.kind != kind {
                    return Err(format!("state is for {}, not {kind}", behavior.kind));
                }
                Box::new(behavior)
            }
            AgentKind::AssA => Box::new(load::<AssaBehavior>(state)?),
            AgentKind::SAA => Box::new(load::<SaaBehavior>(state)?),
        })
    }
}
