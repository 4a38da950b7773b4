//! Agent runtime: containers, agent lifecycle, credential-checked routing
//! into per-agent FIFO mailboxes, and checkpoint/resume.
//!
//! Every envelope goes through [`Runtime::deliver`], which authenticates it,
//! checks the route table, lets the workflow engine observe it and only then
//! appends it to the target's mailbox. Agents never run two envelopes at once.
//!
//! Two schedulers share the same state. The deterministic one is driven by
//! the caller through [`Runtime::step`] and visits endpoints round-robin in
//! registration order. The concurrent one runs worker threads over a ready
//! queue plus a ticker thread for timeouts and audit forwarding.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::mpsc::Receiver;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audit::{AuditAction, AuditDraft, AuditEvent, AuditLog, AuditSource};
use crate::auth::{AuthError, Authenticator, Credentials, PrivilegeSet};
use crate::clock::Clock;
use crate::kinds::{Accessibility, AgentKind, EndpointKind};
use crate::protocol::payload::ErrorPayload;
use crate::protocol::workflow::{Notice, Timeouts, Verdict, WorkflowEngine};
use crate::protocol::{route_allowed, MessageEnvelope, MessageKind, Routed, Step, WorkflowState, ENVELOPE_VERSION};

pub use checkpoint::{encode_image, AgentImage, CheckpointBlob, CheckpointError, FORMAT_VERSION, MAGIC};

pub const MAIN_CONTAINER: &str = "main";
pub const STORE_ENDPOINT: &str = "store";
const MAX_TRACES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDescriptor {
    pub agent_id: String,
    pub kind: AgentKind,
    pub accessibility: Accessibility,
    pub home_container: String,
}

impl AgentDescriptor {
    pub fn new(agent_id: &str, kind: AgentKind, home_container: &str) -> Self {
        AgentDescriptor {
            agent_id: agent_id.to_string(),
            kind,
            accessibility: kind.accessibility(),
            home_container: home_container.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lifecycle {
    Active,
    Sleeping,
    Terminated,
}

impl Lifecycle {
    pub fn code(self) -> u8 {
        match self {
            Lifecycle::Active => 0,
            Lifecycle::Sleeping => 1,
            Lifecycle::Terminated => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Lifecycle> {
        [Lifecycle::Active, Lifecycle::Sleeping, Lifecycle::Terminated]
            .into_iter()
            .find(|l| l.code() == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContainerKind {
    Main,
    Client,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Container {
    pub container_id: String,
    pub kind: ContainerKind,
    pub hosted: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentHandle {
    pub agent_id: String,
    pub container: String,
}

/// An envelope an agent wants sent. The runtime fills in ids, time, sender
/// and credentials.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: String,
    pub kind: MessageKind,
    pub correlation_id: String,
    pub payload: Value,
}

impl Outbound {
    pub fn new(to: &str, kind: MessageKind, correlation_id: &str, payload: Value) -> Self {
        Outbound {
            to: to.to_string(),
            kind,
            correlation_id: correlation_id.to_string(),
            payload,
        }
    }

    pub fn error(to: &str, correlation_id: &str, error: &ErrorPayload) -> Self {
        Outbound::new(
            to,
            MessageKind::Error,
            correlation_id,
            serde_json::to_value(error).expect("error payload serializes"),
        )
    }
}

/// Reactive agent logic. All state lives in the behavior and must survive
/// a `save_state` / [`BehaviorFactory::restore`] round trip.
pub trait Behavior: Send {
    fn kind(&self) -> AgentKind;
    fn handle(&mut self, ctx: &AgentContext<'_>, envelope: &MessageEnvelope) -> Vec<Outbound>;
    fn save_state(&self) -> Vec<u8>;
}

pub trait BehaviorFactory: Send + Sync {
    fn create(&self, kind: AgentKind) -> Box<dyn Behavior>;
    fn restore(&self, kind: AgentKind, state: &[u8]) -> Result<Box<dyn Behavior>, String>;
}

/// The store as a message endpoint.
pub trait StoreEndpoint: Send + Sync {
    fn is_available(&self) -> bool;
    fn handle(&self, envelope: &MessageEnvelope, caller: EndpointKind) -> Vec<Outbound>;
}

/// What a behavior may ask of the runtime while handling an envelope.
pub struct AgentContext<'a> {
    pub agent_id: &'a str,
    pub kind: AgentKind,
    pub container: String,
    pub now: u64,
    inner: &'a Inner,
}

impl AgentContext<'_> {
    /// First live agent of `kind` in `container`, or anywhere (main first) when `None`.
    pub fn find_agent(&self, kind: AgentKind, container: Option<&str>) -> Option<String> {
        self.inner.lock().find_agent(kind, container)
    }

    pub fn session_container(&self, session_id: &str) -> Option<String> {
        self.inner.lock().clients.get(session_id).map(|c| c.container.clone())
    }

    pub fn agent_kind(&self, agent_id: &str) -> Option<AgentKind> {
        self.inner.lock().agents.get(agent_id).map(|s| s.descriptor.kind)
    }

    pub fn authenticate(&self, credentials: &Credentials) -> Result<PrivilegeSet, AuthError> {
        self.inner.auth.authenticate(credentials)
    }

    pub fn default_threshold(&self) -> f64 {
        self.inner.threshold
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("{principal} may not dispatch {kind}")]
    Unauthorized { principal: String, kind: AgentKind },
    #[error("agent id {0} is already in use")]
    DuplicateAgentId(String),
    #[error("no container {0}")]
    NoSuchContainer(String),
    #[error("container {0} already exists")]
    DuplicateContainer(String),
    #[error("no agent {0}")]
    AgentUnknown(String),
    #[error("agent {0} is terminated")]
    AgentTerminated(String),
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition { from: Lifecycle, to: Lifecycle },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot restore behavior: {0}")]
    Restore(String),
}

impl RuntimeError {
    pub fn code(&self) -> &'static str {
        match self {
            RuntimeError::Auth(e) => e.code(),
            RuntimeError::Unauthorized { .. } => "Unauthorized",
            RuntimeError::DuplicateAgentId(_) => "DuplicateAgentId",
            RuntimeError::NoSuchContainer(_) => "NoSuchContainer",
            RuntimeError::DuplicateContainer(_) => "DuplicateContainer",
            RuntimeError::AgentUnknown(_) => "AgentUnknown",
            RuntimeError::AgentTerminated(_) => "AgentTerminated",
            RuntimeError::IllegalTransition { .. } => "IllegalTransition",
            RuntimeError::Checkpoint(CheckpointError::DigestMismatch) => "DigestMismatch",
            RuntimeError::Checkpoint(CheckpointError::Malformed(_)) => "Malformed",
            RuntimeError::Restore(_) => "Malformed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    Auth(AuthError),
    RouteForbidden,
    AgentTerminated,
    AgentUnknown,
    EndpointUnavailable,
    DuplicateCorrelation,
    ProtocolViolation,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::Auth(e) => e.code(),
            RejectReason::RouteForbidden => "RouteForbidden",
            RejectReason::AgentTerminated => "AgentTerminated",
            RejectReason::AgentUnknown => "AgentUnknown",
            RejectReason::EndpointUnavailable => "StoreUnavailable",
            RejectReason::DuplicateCorrelation => "DuplicateCorrelation",
            RejectReason::ProtocolViolation => "ProtocolViolation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}: {detail}", reason.code())]
pub struct Rejection {
    pub reason: RejectReason,
    pub detail: String,
}

/// One accepted envelope with the endpoint kinds it travelled between.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub envelope: MessageEnvelope,
    pub from: EndpointKind,
    pub to: EndpointKind,
}

impl TraceEntry {
    pub fn step(&self) -> Step {
        Step::new(self.from, self.to, self.envelope.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Deterministic,
    Concurrent,
}

pub struct RuntimeConfig {
    pub timeouts: Timeouts,
    pub threshold: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            timeouts: Timeouts::default(),
            threshold: crate::domain::DEFAULT_THRESHOLD,
        }
    }
}

struct Slot {
    descriptor: AgentDescriptor,
    lifecycle: Lifecycle,
    mailbox: VecDeque<MessageEnvelope>,
    behavior: Option<Box<dyn Behavior>>,
    generation: u64,
    queued: bool,
}

impl Slot {
    fn runnable(&self) -> bool {
        self.lifecycle == Lifecycle::Active && self.behavior.is_some() && !self.mailbox.is_empty()
    }
}

struct ClientEndpoint {
    principal: String,
    container: String,
    inbox: VecDeque<MessageEnvelope>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ready {
    Agent(String),
    Store,
}

struct State {
    agents: BTreeMap<String, Slot>,
    order: Vec<String>,
    containers: BTreeMap<String, Container>,
    clients: BTreeMap<String, ClientEndpoint>,
    store_mailbox: VecDeque<MessageEnvelope>,
    store_busy: bool,
    ready: VecDeque<Ready>,
    cursor: usize,
    engine: WorkflowEngine,
    traces: BTreeMap<String, Vec<TraceEntry>>,
    trace_order: VecDeque<String>,
    next_msg: u64,
    next_generation: u64,
    shutdown: bool,
}

impl State {
    fn find_agent(&self, kind: AgentKind, container: Option<&str>) -> Option<String> {
        let live = |id: &&String| {
            let slot = &self.agents[*id];
            slot.descriptor.kind == kind && slot.lifecycle != Lifecycle::Terminated
        };
        let in_container = |c: &str| {
            self.order
                .iter()
                .filter(live)
                .find(|id| self.agents[*id].descriptor.home_container == c)
                .cloned()
        };
        match container {
            Some(c) => in_container(c),
            None => in_container(MAIN_CONTAINER).or_else(|| self.order.iter().find(live).cloned()),
        }
    }

    fn endpoint_kind(&self, id: &str, has_store: bool) -> Option<EndpointKind> {
        if let Some(slot) = self.agents.get(id) {
            return Some(EndpointKind::Agent(slot.descriptor.kind));
        }
        if id == STORE_ENDPOINT && has_store {
            return Some(EndpointKind::Store);
        }
        self.clients.get(id).map(|_| EndpointKind::Client)
    }

    fn id_in_use(&self, id: &str) -> bool {
        self.agents.contains_key(id) || self.clients.contains_key(id) || id == STORE_ENDPOINT
    }

    fn msg_id(&mut self) -> String {
        self.next_msg += 1;
        format!("m-{}", self.next_msg)
    }

    fn record_trace(&mut self, entry: TraceEntry) {
        let cid = entry.envelope.correlation_id.clone();
        if !self.traces.contains_key(&cid) {
            if self.trace_order.len() >= MAX_TRACES {
                if let Some(old) = self.trace_order.pop_front() {
                    self.traces.remove(&old);
                }
            }
            self.trace_order.push_back(cid.clone());
        }
        self.traces.entry(cid).or_default().push(entry);
    }
}

struct Inner {
    mode: Mode,
    clock: Arc<dyn Clock>,
    auth: Authenticator,
    audit: Arc<AuditLog>,
    audit_feed: Mutex<Receiver<(AuditEvent, AuditSource)>>,
    factory: Arc<dyn BehaviorFactory>,
    store: Option<Arc<dyn StoreEndpoint>>,
    threshold: f64,
    state: Mutex<State>,
    changed: Condvar,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Side effects collected under the state lock and carried out after it.
#[derive(Default)]
struct Effects {
    audits: Vec<AuditDraft>,
    bounce: Option<MessageEnvelope>,
    notices: Vec<Notice>,
}

#[derive(Clone)]
pub struct Runtime {
    inner: Arc<Inner>,
}

impl Runtime {
    pub fn new(
        mode: Mode,
        config: RuntimeConfig,
        auth: Authenticator,
        audit: Arc<AuditLog>,
        factory: Arc<dyn BehaviorFactory>,
        store: Option<Arc<dyn StoreEndpoint>>,
    ) -> Runtime {
        let mut containers = BTreeMap::new();
        containers.insert(
            MAIN_CONTAINER.to_string(),
            Container {
                container_id: MAIN_CONTAINER.to_string(),
                kind: ContainerKind::Main,
                hosted: BTreeSet::new(),
            },
        );
        let state = State {
            agents: BTreeMap::new(),
            order: Vec::new(),
            containers,
            clients: BTreeMap::new(),
            store_mailbox: VecDeque::new(),
            store_busy: false,
            ready: VecDeque::new(),
            cursor: 0,
            engine: WorkflowEngine::new(config.timeouts),
            traces: BTreeMap::new(),
            trace_order: VecDeque::new(),
            next_msg: 0,
            next_generation: 0,
            shutdown: false,
        };
        let runtime = Runtime {
            inner: Arc::new(Inner {
                mode,
                clock: auth.signer.clock(),
                audit_feed: Mutex::new(audit.subscribe()),
                auth,
                audit,
                factory,
                store,
                threshold: config.threshold,
                state: Mutex::new(state),
                changed: Condvar::new(),
                workers: Mutex::new(Vec::new()),
            }),
        };
        if mode == Mode::Concurrent {
            runtime.spawn_threads(4);
        }
        runtime
    }

    pub fn mode(&self) -> Mode {
        self.inner.mode
    }

    pub fn now_ms(&self) -> u64 {
        self.inner.clock.now_ms()
    }

    pub fn authenticator(&self) -> &Authenticator {
        &self.inner.auth
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.inner.audit
    }

    // ---- registry -------------------------------------------------------

    pub fn dispatch(
        &self,
        descriptor: AgentDescriptor,
        container: &str,
        credentials: &Credentials,
    ) -> Result<AgentHandle, RuntimeError> {
        let privileges = self.inner.auth.authenticate(credentials)?;
        if !privileges.may_dispatch(descriptor.kind) {
            return Err(RuntimeError::Unauthorized {
                principal: credentials.principal.clone(),
                kind: descriptor.kind,
            });
        }
        let behavior = self.inner.factory.create(descriptor.kind);
        let mut st = self.inner.lock();
        if !st.containers.contains_key(container) {
            return Err(RuntimeError::NoSuchContainer(container.to_string()));
        }
        if st.id_in_use(&descriptor.agent_id) {
            return Err(RuntimeError::DuplicateAgentId(descriptor.agent_id));
        }
        let descriptor = AgentDescriptor {
            accessibility: descriptor.kind.accessibility(),
            home_container: container.to_string(),
            ..descriptor
        };
        let id = descriptor.agent_id.clone();
        st.next_generation += 1;
        let generation = st.next_generation;
        st.containers.get_mut(container).expect("checked").hosted.insert(id.clone());
        st.order.push(id.clone());
        st.agents.insert(
            id.clone(),
            Slot {
                descriptor,
                lifecycle: Lifecycle::Active,
                mailbox: VecDeque::new(),
                behavior: Some(behavior),
                generation,
                queued: false,
            },
        );
        Ok(AgentHandle {
            agent_id: id,
            container: container.to_string(),
        })
    }

    pub fn descriptor(&self, agent_id: &str) -> Option<AgentDescriptor> {
        self.inner.lock().agents.get(agent_id).map(|s| s.descriptor.clone())
    }

    pub fn lifecycle(&self, agent_id: &str) -> Option<Lifecycle> {
        self.inner.lock().agents.get(agent_id).map(|s| s.lifecycle)
    }

    pub fn mailbox_len(&self, agent_id: &str) -> Option<usize> {
        self.inner.lock().agents.get(agent_id).map(|s| s.mailbox.len())
    }

    pub fn find_agent(&self, kind: AgentKind, container: Option<&str>) -> Option<String> {
        self.inner.lock().find_agent(kind, container)
    }

    pub fn containers(&self) -> Vec<Container> {
        self.inner.lock().containers.values().cloned().collect()
    }

    /// Creates the client endpoint and container for a session.
    pub fn open_client(&self, session_id: &str, principal: &str) -> Result<String, RuntimeError> {
        let container = format!("client-{session_id}");
        let mut st = self.inner.lock();
        if st.id_in_use(session_id) {
            return Err(RuntimeError::DuplicateAgentId(session_id.to_string()));
        }
        if st.containers.contains_key(&container) {
            return Err(RuntimeError::DuplicateContainer(container));
        }
        st.containers.insert(
            container.clone(),
            Container {
                container_id: container.clone(),
                kind: ContainerKind::Client,
                hosted: BTreeSet::new(),
            },
        );
        st.clients.insert(
            session_id.to_string(),
            ClientEndpoint {
                principal: principal.to_string(),
                container: container.clone(),
                inbox: VecDeque::new(),
            },
        );
        Ok(container)
    }

    /// Removes a session's endpoint and container along with the agents it hosts.
    pub fn close_client(&self, session_id: &str) {
        let mut st = self.inner.lock();
        let Some(client) = st.clients.remove(session_id) else {
            return;
        };
        if let Some(container) = st.containers.remove(&client.container) {
            for id in &container.hosted {
                st.agents.remove(id);
            }
            st.order.retain(|id| !container.hosted.contains(id));
        }
    }

    // ---- lifecycle ------------------------------------------------------

    fn transition(&self, agent_id: &str, to: Lifecycle) -> Result<Lifecycle, RuntimeError> {
        let mut st = self.inner.lock();
        let slot = st
            .agents
            .get_mut(agent_id)
            .ok_or_else(|| RuntimeError::AgentUnknown(agent_id.to_string()))?;
        let legal = matches!(
            (slot.lifecycle, to),
            (Lifecycle::Active, Lifecycle::Sleeping)
                | (Lifecycle::Sleeping, Lifecycle::Active)
                | (Lifecycle::Active, Lifecycle::Terminated)
                | (Lifecycle::Sleeping, Lifecycle::Terminated)
        );
        if !legal {
            return Err(RuntimeError::IllegalTransition {
                from: slot.lifecycle,
                to,
            });
        }
        slot.lifecycle = to;
        if to == Lifecycle::Terminated {
            slot.mailbox.clear();
        }
        let id = agent_id.to_string();
        self.mark_ready(&mut st, &id);
        drop(st);
        self.inner.changed.notify_all();
        Ok(to)
    }

    pub fn sleep(&self, agent_id: &str) -> Result<Lifecycle, RuntimeError> {
        self.transition(agent_id, Lifecycle::Sleeping)
    }

    pub fn wake(&self, agent_id: &str) -> Result<Lifecycle, RuntimeError> {
        self.transition(agent_id, Lifecycle::Active)
    }

    pub fn terminate(&self, agent_id: &str) -> Result<Lifecycle, RuntimeError> {
        self.transition(agent_id, Lifecycle::Terminated)
    }

    // ---- checkpoint -----------------------------------------------------

    /// Captures the agent and puts it to sleep. The image records the
    /// post-checkpoint lifecycle, so re-checkpointing an unchanged agent
    /// gives the same bytes.
    pub fn checkpoint(&self, agent_id: &str) -> Result<CheckpointBlob, RuntimeError> {
        let mut st = self.inner.lock();
        loop {
            let slot = st
                .agents
                .get(agent_id)
                .ok_or_else(|| RuntimeError::AgentUnknown(agent_id.to_string()))?;
            if slot.lifecycle == Lifecycle::Terminated {
                return Err(RuntimeError::AgentTerminated(agent_id.to_string()));
            }
            if slot.behavior.is_some() {
                break;
            }
            st = self.inner.changed.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        let slot = st.agents.get_mut(agent_id).expect("checked");
        slot.lifecycle = Lifecycle::Sleeping;
        let image = AgentImage {
            descriptor: slot.descriptor.clone(),
            lifecycle: Lifecycle::Sleeping,
            mailbox: slot.mailbox.iter().cloned().collect(),
            internal: slot.behavior.as_ref().expect("checked").save_state(),
        };
        Ok(encode_image(&image))
    }

    /// Re-registers a checkpointed agent in `container`, Active. A sleeping
    /// agent with the same id (the checkpoint's source) is replaced; mail it
    /// buffered after the checkpoint is kept behind the restored mailbox.
    pub fn resume(&self, blob: &CheckpointBlob, container: &str) -> Result<AgentHandle, RuntimeError> {
        let image = blob.decode()?;
        let behavior = self
            .inner
            .factory
            .restore(image.descriptor.kind, &image.internal)
            .map_err(RuntimeError::Restore)?;
        let mut st = self.inner.lock();
        if !st.containers.contains_key(container) {
            return Err(RuntimeError::NoSuchContainer(container.to_string()));
        }
        let id = image.descriptor.agent_id.clone();
        let mut mailbox: VecDeque<MessageEnvelope> = image.mailbox.into();
        match st.agents.get(&id) {
            Some(old) if old.lifecycle == Lifecycle::Sleeping && old.behavior.is_some() => {
                let seen: BTreeSet<&str> = mailbox.iter().map(|e| e.msg_id.as_str()).collect();
                let later: Vec<MessageEnvelope> = old
                    .mailbox
                    .iter()
                    .filter(|e| !seen.contains(e.msg_id.as_str()))
                    .cloned()
                    .collect();
                mailbox.extend(later);
                let home = old.descriptor.home_container.clone();
                if let Some(c) = st.containers.get_mut(&home) {
                    c.hosted.remove(&id);
                }
            }
            Some(_) => return Err(RuntimeError::DuplicateAgentId(id)),
            None if st.id_in_use(&id) => return Err(RuntimeError::DuplicateAgentId(id)),
            None => st.order.push(id.clone()),
        }
        st.next_generation += 1;
        let generation = st.next_generation;
        st.containers.get_mut(container).expect("checked").hosted.insert(id.clone());
        st.agents.insert(
            id.clone(),
            Slot {
                descriptor: AgentDescriptor {
                    home_container: container.to_string(),
                    ..image.descriptor
                },
                lifecycle: Lifecycle::Active,
                mailbox,
                behavior: Some(behavior),
                generation,
                queued: false,
            },
        );
        self.mark_ready(&mut st, &id);
        drop(st);
        self.inner.changed.notify_all();
        Ok(AgentHandle {
            agent_id: id,
            container: container.to_string(),
        })
    }

    // ---- delivery -------------------------------------------------------

    /// Routes one envelope into its target's mailbox.
    pub fn deliver(&self, envelope: MessageEnvelope) -> Result<(), Rejection> {
        let auth = self.inner.auth.authenticate(&envelope.credentials);
        let mut fx = Effects::default();
        let result = {
            let mut st = self.inner.lock();
            self.route(&mut st, envelope, auth, &mut fx)
        };
        self.inner.changed.notify_all();
        self.apply(fx);
        result
    }

    /// Client ingress: builds an envelope from a session endpoint.
    pub fn submit(
        &self,
        session_id: &str,
        to: &str,
        kind: MessageKind,
        correlation_id: &str,
        credentials: &Credentials,
        payload: Value,
    ) -> Result<String, Rejection> {
        let envelope = self.envelope(session_id, to, kind, correlation_id, credentials.clone(), payload);
        let msg_id = envelope.msg_id.clone();
        self.deliver(envelope).map(|_| msg_id)
    }

    /// A fresh envelope with the next msg id and the current time.
    pub fn envelope(
        &self,
        from: &str,
        to: &str,
        kind: MessageKind,
        correlation_id: &str,
        credentials: Credentials,
        payload: Value,
    ) -> MessageEnvelope {
        let msg_id = self.inner.lock().msg_id();
        MessageEnvelope {
            v: ENVELOPE_VERSION,
            msg_id,
            correlation_id: correlation_id.to_string(),
            ts: self.inner.clock.now_ms(),
            from: from.to_string(),
            to: to.to_string(),
            kind,
            credentials,
            payload,
        }
    }

    fn route(
        &self,
        st: &mut State,
        envelope: MessageEnvelope,
        auth: Result<PrivilegeSet, AuthError>,
        fx: &mut Effects,
    ) -> Result<(), Rejection> {
        let has_store = self.inner.store.is_some();
        let Some(from) = st.endpoint_kind(&envelope.from, has_store) else {
            return Err(self.reject(st, &envelope, None, RejectReason::AgentUnknown, "unknown sender", fx));
        };
        let privileges = match auth {
            Ok(p) => p,
            Err(e) => {
                let detail = format!("{} from {}", envelope.kind, envelope.from);
                return Err(self.reject(st, &envelope, Some(from), RejectReason::Auth(e), &detail, fx));
            }
        };
        if from == EndpointKind::Client {
            let client = &st.clients[&envelope.from];
            if client.principal != envelope.credentials.principal {
                let detail = "credentials do not belong to this session";
                return Err(self.reject(st, &envelope, Some(from), RejectReason::RouteForbidden, detail, fx));
            }
            if st.engine.is_tracked(&envelope.correlation_id) {
                let detail = "correlation id already in use";
                return Err(self.reject(st, &envelope, Some(from), RejectReason::DuplicateCorrelation, detail, fx));
            }
        }
        let Some(to) = st.endpoint_kind(&envelope.to, has_store) else {
            let detail = format!("no endpoint {}", envelope.to);
            return Err(self.reject(st, &envelope, Some(from), RejectReason::AgentUnknown, &detail, fx));
        };
        if to == EndpointKind::Store && !self.inner.store.as_ref().is_some_and(|s| s.is_available()) {
            let detail = "store is not available";
            return Err(self.reject(st, &envelope, Some(from), RejectReason::EndpointUnavailable, detail, fx));
        }
        if st.agents.get(&envelope.to).is_some_and(|s| s.lifecycle == Lifecycle::Terminated) {
            let detail = format!("{} is terminated", envelope.to);
            return Err(self.reject(st, &envelope, Some(from), RejectReason::AgentTerminated, &detail, fx));
        }
        let reachable = from != EndpointKind::Client || privileges.reachable_kinds.contains(&to);
        if !reachable || !route_allowed(from, to, envelope.kind) {
            let detail = format!("{from} -> {to} {} is not a permitted route", envelope.kind);
            return Err(self.reject(st, &envelope, Some(from), RejectReason::RouteForbidden, &detail, fx));
        }

        let routed = Routed {
            envelope: &envelope,
            from,
            to,
        };
        if from == EndpointKind::Client && envelope.kind == MessageKind::AssessRequest {
            let delegate = crate::behaviors::delegate_for(&privileges);
            st.engine
                .start(&envelope.correlation_id, &envelope.from, delegate, envelope.ts);
        }
        match st.engine.observe(&routed) {
            Verdict::Untracked => {}
            Verdict::Accept { notices } => fx.notices.extend(notices),
            Verdict::Drop { notices } => {
                fx.notices.extend(notices);
                log::warn!("dropping {} {} -> {}: out of protocol", envelope.kind, envelope.from, envelope.to);
                fx.audits.push(AuditDraft::new(
                    envelope.ts,
                    &envelope.credentials.principal,
                    AuditAction::RequestError,
                    &envelope.correlation_id,
                    serde_json::json!({"code": "ProtocolViolation", "kind": envelope.kind}),
                    AuditSource::Gateway,
                ));
                return Err(Rejection {
                    reason: RejectReason::ProtocolViolation,
                    detail: format!("{} out of protocol order", envelope.kind),
                });
            }
        }

        if envelope.kind != MessageKind::AuditEvent {
            st.record_trace(TraceEntry {
                envelope: envelope.clone(),
                from,
                to,
            });
        }
        let target = envelope.to.clone();
        match to {
            EndpointKind::Client => {
                st.clients.get_mut(&target).expect("resolved").inbox.push_back(envelope);
            }
            EndpointKind::Store => {
                st.store_mailbox.push_back(envelope);
                if self.inner.mode == Mode::Concurrent && !st.store_busy && !st.ready.contains(&Ready::Store) {
                    st.ready.push_back(Ready::Store);
                }
            }
            EndpointKind::Agent(_) => {
                st.agents.get_mut(&target).expect("resolved").mailbox.push_back(envelope);
                self.mark_ready(st, &target);
            }
        }
        Ok(())
    }

    fn reject(
        &self,
        st: &mut State,
        envelope: &MessageEnvelope,
        from: Option<EndpointKind>,
        reason: RejectReason,
        detail: &str,
        fx: &mut Effects,
    ) -> Rejection {
        log::debug!("rejected {} {} -> {}: {}", envelope.kind, envelope.from, envelope.to, reason.code());
        let quiet = matches!(envelope.kind, MessageKind::AuditEvent | MessageKind::Error);
        if envelope.kind != MessageKind::AuditEvent {
            let action = match reason {
                RejectReason::Auth(_) => AuditAction::AuthFailure,
                _ => AuditAction::RouteRejection,
            };
            fx.audits.push(AuditDraft::new(
                self.inner.clock.now_ms(),
                &envelope.credentials.principal,
                action,
                &envelope.to,
                serde_json::json!({"code": reason.code(), "kind": envelope.kind, "from": envelope.from}),
                AuditSource::Gateway,
            ));
        }
        let error = ErrorPayload::new(reason.code(), detail);
        let has_store = self.inner.store.is_some();
        match from {
            Some(EndpointKind::Client) if !quiet => {
                if let Some(uia) = st.find_agent(AgentKind::UIA, None) {
                    fx.bounce = Some(self.system_envelope(st, &uia, &envelope.from, &envelope.correlation_id, &error));
                }
            }
            Some(EndpointKind::Agent(kind)) if !quiet => {
                let authenticated = !matches!(reason, RejectReason::Auth(_));
                if authenticated {
                    fx.notices.extend(st.engine.fail(&envelope.correlation_id, error.clone(), envelope.ts));
                }
                let back = st.endpoint_kind(&envelope.to, has_store);
                if back.is_some_and(|k| route_allowed(k, EndpointKind::Agent(kind), MessageKind::Error)) {
                    fx.bounce = Some(self.system_envelope(st, &envelope.to, &envelope.from, &envelope.correlation_id, &error));
                }
            }
            _ => {}
        }
        Rejection {
            reason,
            detail: detail.to_string(),
        }
    }

    fn system_envelope(&self, st: &mut State, from: &str, to: &str, correlation_id: &str, error: &ErrorPayload) -> MessageEnvelope {
        MessageEnvelope {
            v: ENVELOPE_VERSION,
            msg_id: st.msg_id(),
            correlation_id: correlation_id.to_string(),
            ts: self.inner.clock.now_ms(),
            from: from.to_string(),
            to: to.to_string(),
            kind: MessageKind::Error,
            credentials: self.inner.auth.system_credentials(),
            payload: serde_json::to_value(error).expect("error payload serializes"),
        }
    }

    fn apply(&self, fx: Effects) {
        for draft in fx.audits {
            self.inner.audit.record(draft);
        }
        if let Some(bounce) = fx.bounce {
            if let Err(e) = self.deliver(bounce) {
                log::debug!("could not return error to sender: {e}");
            }
        }
        self.send_notices(fx.notices);
    }

    fn send_notices(&self, notices: Vec<Notice>) {
        for notice in notices {
            let envelope = {
                let mut st = self.inner.lock();
                let Some(uia) = st.find_agent(AgentKind::UIA, None) else {
                    log::warn!("no UIA to notify {} of {}", notice.client, notice.correlation_id);
                    continue;
                };
                self.system_envelope(&mut st, &uia, &notice.client, &notice.correlation_id, &notice.error)
            };
            if let Err(e) = self.deliver(envelope) {
                log::warn!("failure notice for {} not delivered: {e}", notice.correlation_id);
            }
        }
    }

    fn mark_ready(&self, st: &mut State, id: &str) {
        if self.inner.mode != Mode::Concurrent {
            return;
        }
        if let Some(slot) = st.agents.get_mut(id) {
            if slot.runnable() && !slot.queued {
                slot.queued = true;
                st.ready.push_back(Ready::Agent(id.to_string()));
            }
        }
    }

    fn send_from(&self, from: &str, out: Outbound) {
        let envelope = self.envelope(
            from,
            &out.to,
            out.kind,
            &out.correlation_id,
            self.inner.auth.system_credentials(),
            out.payload,
        );
        if let Err(e) = self.deliver(envelope) {
            log::debug!("{from} -> {} {} refused: {e}", out.to, out.kind);
        }
    }

    // ---- processing -----------------------------------------------------

    /// Handles the head of one agent's mailbox. False if it had nothing runnable.
    fn run_agent(&self, id: &str) -> bool {
        let (envelope, mut behavior, generation, ctx_parts) = {
            let mut st = self.inner.lock();
            let Some(slot) = st.agents.get_mut(id) else {
                return false;
            };
            slot.queued = false;
            if !slot.runnable() {
                return false;
            }
            let envelope = slot.mailbox.pop_front().expect("runnable");
            let behavior = slot.behavior.take().expect("runnable");
            (
                envelope,
                behavior,
                slot.generation,
                (slot.descriptor.kind, slot.descriptor.home_container.clone()),
            )
        };
        let ctx = AgentContext {
            agent_id: id,
            kind: ctx_parts.0,
            container: ctx_parts.1,
            now: self.inner.clock.now_ms(),
            inner: &self.inner,
        };
        let outs = behavior.handle(&ctx, &envelope);
        {
            let mut st = self.inner.lock();
            if let Some(slot) = st.agents.get_mut(id) {
                if slot.generation == generation {
                    slot.behavior = Some(behavior);
                }
            }
            self.mark_ready(&mut st, id);
        }
        self.inner.changed.notify_all();
        for out in outs {
            self.send_from(id, out);
        }
        true
    }

    fn run_store(&self) -> bool {
        let Some(store) = self.inner.store.clone() else {
            return false;
        };
        let (envelope, caller) = {
            let mut st = self.inner.lock();
            if st.store_busy {
                return false;
            }
            let Some(envelope) = st.store_mailbox.pop_front() else {
                return false;
            };
            st.store_busy = true;
            let caller = st.endpoint_kind(&envelope.from, true).unwrap_or(EndpointKind::Client);
            (envelope, caller)
        };
        let outs = store.handle(&envelope, caller);
        {
            let mut st = self.inner.lock();
            st.store_busy = false;
            if self.inner.mode == Mode::Concurrent && !st.store_mailbox.is_empty() && !st.ready.contains(&Ready::Store) {
                st.ready.push_back(Ready::Store);
            }
        }
        self.inner.changed.notify_all();
        for out in outs {
            self.send_from(STORE_ENDPOINT, out);
        }
        true
    }

    /// Forwards new audit events to the SAA as AUDIT_EVENT envelopes.
    pub fn pump_audit(&self) -> usize {
        let drained: Vec<(AuditEvent, AuditSource)> = {
            let feed = self.inner.audit_feed.lock().unwrap_or_else(|e| e.into_inner());
            feed.try_iter().collect()
        };
        let mut sent = 0;
        for (event, source) in drained {
            let (saa, uia) = {
                let st = self.inner.lock();
                (st.find_agent(AgentKind::SAA, None), st.find_agent(AgentKind::UIA, None))
            };
            let Some(saa) = saa else {
                continue;
            };
            let from = match source {
                AuditSource::Store if self.inner.store.is_some() => STORE_ENDPOINT.to_string(),
                _ => match uia {
                    Some(uia) => uia,
                    None => continue,
                },
            };
            let envelope = self.envelope(
                &from,
                &saa,
                MessageKind::AuditEvent,
                &format!("audit-{}", event.event_id),
                self.inner.auth.system_credentials(),
                serde_json::to_value(&event).expect("audit event serializes"),
            );
            if self.deliver(envelope).is_ok() {
                sent += 1;
            }
        }
        sent
    }

    /// Deterministic scheduler: handles exactly one envelope, choosing the
    /// next endpoint with work after the previous one in registration order
    /// (agents first, then the store). False when nothing is runnable.
    pub fn step(&self) -> bool {
        self.pump_audit();
        let (candidates, cursor) = {
            let st = self.inner.lock();
            let mut c: Vec<Ready> = st.order.iter().map(|id| Ready::Agent(id.clone())).collect();
            c.push(Ready::Store);
            (c, st.cursor)
        };
        let n = candidates.len();
        for i in 0..n {
            let idx = (cursor + i) % n;
            let ran = match &candidates[idx] {
                Ready::Agent(id) => self.run_agent(id),
                Ready::Store => self.run_store(),
            };
            if ran {
                self.inner.lock().cursor = idx + 1;
                return true;
            }
        }
        false
    }

    /// Steps until no endpoint has work. Returns the number of envelopes handled.
    pub fn run_until_idle(&self) -> usize {
        let mut n = 0;
        while self.step() {
            n += 1;
        }
        n
    }

    /// Applies workflow deadlines at the current clock time.
    pub fn tick(&self) -> usize {
        let notices = {
            let mut st = self.inner.lock();
            let now = self.inner.clock.now_ms();
            st.engine.tick(now)
        };
        let n = notices.len();
        self.send_notices(notices);
        n
    }

    fn spawn_threads(&self, workers: usize) {
        let mut handles = self.inner.workers.lock().unwrap_or_else(|e| e.into_inner());
        for i in 0..workers {
            let rt = self.clone();
            let handle = std::thread::Builder::new()
                .name(format!("imobe-worker-{i}"))
                .spawn(move || rt.worker_loop())
                .expect("spawn worker");
            handles.push(handle);
        }
        let rt = self.clone();
        let handle = std::thread::Builder::new()
            .name("imobe-ticker".into())
            .spawn(move || rt.ticker_loop())
            .expect("spawn ticker");
        handles.push(handle);
    }

    fn worker_loop(&self) {
        loop {
            let next = {
                let mut st = self.inner.lock();
                loop {
                    if st.shutdown {
                        return;
                    }
                    if let Some(next) = st.ready.pop_front() {
                        break next;
                    }
                    st = self.inner.changed.wait(st).unwrap_or_else(|e| e.into_inner());
                }
            };
            match next {
                Ready::Agent(id) => {
                    self.run_agent(&id);
                }
                Ready::Store => {
                    self.run_store();
                }
            }
            self.pump_audit();
        }
    }

    fn ticker_loop(&self) {
        loop {
            {
                let st = self.inner.lock();
                if st.shutdown {
                    return;
                }
                let (st, _) = self
                    .inner
                    .changed
                    .wait_timeout(st, Duration::from_millis(50))
                    .unwrap_or_else(|e| e.into_inner());
                if st.shutdown {
                    return;
                }
            }
            self.pump_audit();
            self.tick();
        }
    }

    /// Stops the concurrent scheduler's threads. Idempotent.
    pub fn shutdown(&self) {
        self.inner.lock().shutdown = true;
        self.inner.changed.notify_all();
        let handles: Vec<JoinHandle<()>> = self
            .inner
            .workers
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .drain(..)
            .collect();
        for handle in handles {
            let _ = handle.join();
        }
    }

    // ---- client side ----------------------------------------------------

    fn take_reply(st: &mut State, session_id: &str, correlation_id: &str) -> Option<MessageEnvelope> {
        let inbox = &mut st.clients.get_mut(session_id)?.inbox;
        let pos = inbox.iter().position(|e| {
            e.correlation_id == correlation_id && matches!(e.kind, MessageKind::Present | MessageKind::Error)
        })?;
        inbox.remove(pos)
    }

    /// Waits for the PRESENT or ERROR answering `correlation_id`. The
    /// deterministic scheduler runs to idle first and never blocks.
    pub fn await_reply(&self, session_id: &str, correlation_id: &str, max_wait: Duration) -> Option<MessageEnvelope> {
        if self.inner.mode == Mode::Deterministic {
            self.run_until_idle();
            return Self::take_reply(&mut self.inner.lock(), session_id, correlation_id);
        }
        let deadline = Instant::now() + max_wait;
        let mut st = self.inner.lock();
        loop {
            if let Some(reply) = Self::take_reply(&mut st, session_id, correlation_id) {
                return Some(reply);
            }
            let now = Instant::now();
            if now >= deadline || !st.clients.contains_key(session_id) {
                return None;
            }
            let wait = (deadline - now).min(Duration::from_millis(50));
            st = self.inner.changed.wait_timeout(st, wait).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    /// Everything waiting in a session's inbox, oldest first.
    pub fn drain_client(&self, session_id: &str) -> Vec<MessageEnvelope> {
        self.inner
            .lock()
            .clients
            .get_mut(session_id)
            .map(|c| c.inbox.drain(..).collect())
            .unwrap_or_default()
    }

    // ---- observation ----------------------------------------------------

    /// Accepted envelopes of one correlation, in acceptance order.
    pub fn trace(&self, correlation_id: &str) -> Vec<TraceEntry> {
        self.inner.lock().traces.get(correlation_id).cloned().unwrap_or_default()
    }

    pub fn workflow(&self, correlation_id: &str) -> Option<WorkflowState> {
        self.inner.lock().engine.state(correlation_id).cloned()
    }

    pub fn correlations(&self) -> Vec<String> {
        self.inner.lock().trace_order.iter().cloned().collect()
    }
}
