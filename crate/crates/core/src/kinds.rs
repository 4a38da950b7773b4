use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentKind {
    /// Academic Agent.
    AA,
    /// Student Agent.
    SA,
    /// User Interface Agent.
    UIA,
    /// System Administrator Agent.
    SAA,
    /// Assessment Agent.
    AssA,
}

impl AgentKind {
    pub const ALL: [AgentKind; 5] = [AgentKind::AA, AgentKind::SA, AgentKind::UIA, AgentKind::SAA, AgentKind::AssA];

    pub fn accessibility(self) -> Accessibility {
        match self {
            AgentKind::AssA => Accessibility::Private,
            _ => Accessibility::Public,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            AgentKind::AA => 0,
            AgentKind::SA => 1,
            AgentKind::UIA => 2,
            AgentKind::SAA => 3,
            AgentKind::AssA => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<AgentKind> {
        AgentKind::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Accessibility {
    Public,
    Private,
}

/// What sits at either end of an envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EndpointKind {
    Client,
    Agent(AgentKind),
    Store,
}

impl EndpointKind {
    pub const ALL: [EndpointKind; 7] = [
        EndpointKind::Client,
        EndpointKind::Agent(AgentKind::AA),
        EndpointKind::Agent(AgentKind::SA),
        EndpointKind::Agent(AgentKind::UIA),
        EndpointKind::Agent(AgentKind::SAA),
        EndpointKind::Agent(AgentKind::AssA),
        EndpointKind::Store,
    ];
}

impl fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EndpointKind::Client => f.write_str("client"),
            EndpointKind::Agent(kind) => write!(f, "{kind}"),
            EndpointKind::Store => f.write_str("store"),
        }
    }
}
