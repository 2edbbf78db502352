//! Per-node execution: operation dispatch and the bounded tool-calling loop.
//!
//! A request enters through [`Node::handle_operation`]. The operation's
//! policy is asked for a turn (a message plus tool calls). The runtime runs
//! the permitted tools, hands the results back, and repeats until the policy
//! stops asking for tools or the iteration bound is hit. Policies never see
//! node state directly; everything they learn arrives as a [`ToolResult`].

mod tools;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use tools::{ToolCall, ToolName, ToolOutput, ToolResult};

use crate::config::{NodeConfig, OperationConfig};
use crate::datastore::{Datasets, DatastoreError, ProtectedValueIndex, protected_values};
use crate::locality::{TraceRecorder, hex_token_regex};
use crate::policies;
use crate::pseudonym::{derive_token, load_secret, normalize_id};
use crate::relay::{self, RelayError, Transport};

/// What a policy sees on each turn.
#[derive(Debug, Clone, Copy)]
pub struct TurnContext<'a> {
    pub request: &'a str,
    pub params: &'a BTreeMap<String, String>,
    /// Every tool result so far, oldest first.
    pub results: &'a [ToolResult],
    /// 1-based turn number.
    pub turn: usize,
}

impl TurnContext<'_> {
    pub fn param(&self, name: &str) -> Result<&str, PolicyError> {
        self.params
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| PolicyError::MissingParam(name.to_owned()))
    }

    /// Most recent result of the given tool.
    pub fn last(&self, tool: ToolName) -> Option<&ToolOutput> {
        self.results
            .iter()
            .rev()
            .find(|r| r.call.tool == tool.as_str())
            .map(|r| &r.output)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyTurn {
    pub message: String,
    pub tool_calls: Vec<ToolCall>,
}

impl PolicyTurn {
    pub fn reply(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            tool_calls: Vec::new(),
        }
    }

    pub fn call(message: impl Into<String>, tool_calls: Vec<ToolCall>) -> Self {
        Self {
            message: message.into(),
            tool_calls,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("no clinical record for the requested patient")]
    PatientNotFound,
    #[error("could not parse `{0}` from the request")]
    Parse(String),
    #[error("operation parameter `{0}` is not configured")]
    MissingParam(String),
    #[error("unexpected tool output: {0}")]
    Unexpected(String),
}

/// The reasoner behind an operation. Implementations must be pure functions
/// of the turn context.
pub trait Policy: Send + Sync {
    fn step(&self, ctx: &TurnContext<'_>) -> Result<PolicyTurn, PolicyError>;
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("operation `{0}` not found")]
    OperationNotFound(String),
    #[error("access key rejected for operation `{0}`")]
    Auth(String),
    #[error("request body is empty")]
    EmptyRequest,
    #[error("policy did not finish within {0} iterations")]
    LoopLimitExceeded(usize),
    #[error("tool `{tool}` is not permitted for operation `{operation}`")]
    ToolNotPermitted { tool: String, operation: String },
    #[error("tool `{tool}` failed: {message}")]
    Tool { tool: String, message: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Relay(#[from] RelayError),
}

impl RuntimeError {
    /// Stable code carried in relay error responses.
    pub fn code(&self) -> &str {
        match self {
            Self::OperationNotFound(_) => "not_found",
            Self::Auth(_) => "auth",
            Self::EmptyRequest => "protocol",
            Self::LoopLimitExceeded(_) => "loop_limit",
            Self::ToolNotPermitted { .. } => "tool_not_permitted",
            Self::Tool { .. } => "tool_error",
            Self::Policy(PolicyError::PatientNotFound) => "patient_not_found",
            Self::Policy(PolicyError::Parse(_)) => "parse_error",
            Self::Policy(_) => "policy_error",
            Self::Relay(e) => e.code(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Data(#[from] DatastoreError),
    #[error("node `{node}`: {reason}")]
    Invalid { node: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperationRequest {
    pub operation_id: String,
    pub access_key: String,
    pub conversation_id: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperationResponse {
    pub body: String,
    /// Policy turns taken, including the final one.
    pub iterations: usize,
    /// Every tool the runtime executed, in order.
    pub tool_log: Vec<ToolCall>,
}

/// Whether the outbound leak guard blocks sends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuardMode {
    #[default]
    Enforce,
    /// Test hook: findings are ignored so the audit path can be exercised.
    Bypass,
}

/// Seeded faults applied to outbound relay bodies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Faults {
    pub splice: Option<Splice>,
    /// Copy any 64-hex string from the inbound request into relay bodies.
    pub forward_token: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splice {
    pub value: String,
    /// Byte offset, clamped to the body and moved back to a char boundary.
    pub at: usize,
}

impl Faults {
    fn apply(&self, body: &str, request: &str) -> String {
        let mut out = body.to_owned();
        if let Some(s) = &self.splice {
            let mut at = s.at.min(out.len());
            while !out.is_char_boundary(at) {
                at -= 1;
            }
            out.insert_str(at, &s.value);
        }
        if self.forward_token
            && let Some(m) = hex_token_regex().find(request)
        {
            out.push_str("\nReference: ");
            out.push_str(m.as_str());
        }
        out
    }
}

pub struct NodeBuilder {
    config: NodeConfig,
    transport: Option<Arc<dyn Transport>>,
    trace: Option<Arc<TraceRecorder>>,
    policies: HashMap<String, Arc<dyn Policy>>,
    guard: GuardMode,
    faults: Faults,
}

impl NodeBuilder {
    pub fn transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn trace(mut self, trace: Arc<TraceRecorder>) -> Self {
        self.trace = Some(trace);
        self
    }

    /// Registers or overrides a policy by name.
    pub fn policy(mut self, name: impl Into<String>, policy: Arc<dyn Policy>) -> Self {
        self.policies.insert(name.into(), policy);
        self
    }

    pub fn guard(mut self, guard: GuardMode) -> Self {
        self.guard = guard;
        self
    }

    pub fn faults(mut self, faults: Faults) -> Self {
        self.faults = faults;
        self
    }

    pub fn build(self) -> Result<Node, BuildError> {
        let config = self.config;
        config.validate().map_err(|e| BuildError::Invalid {
            node: config.node_id.clone(),
            reason: e.to_string(),
        })?;
        let mut policies = self.policies;
        for op in &config.operations {
            if !policies.contains_key(&op.policy) {
                let p = policies::builtin(&op.policy).ok_or_else(|| BuildError::Invalid {
                    node: config.node_id.clone(),
                    reason: format!("operation `{}` uses unknown policy `{}`", op.id, op.policy),
                })?;
                policies.insert(op.policy.clone(), p);
            }
        }
        let datasets = Datasets::load(&config.datasets)?;
        let index = protected_values(&config.protect, &datasets)?;
        let trace = self
            .trace
            .unwrap_or_else(|| Arc::new(TraceRecorder::new(format!("{}-local", config.node_id))));
        let transport = self.transport.unwrap_or_else(|| Arc::new(relay::HttpTransport::new()));
        Ok(Node {
            config,
            datasets,
            index,
            policies,
            transport,
            trace,
            guard: self.guard,
            faults: self.faults,
            conversations: Mutex::new(HashMap::new()),
            outbound_seq: AtomicU64::new(0),
            data_reads: AtomicU64::new(0),
        })
    }
}

/// One organisation's isolated deployment.
pub struct Node {
    config: NodeConfig,
    datasets: Datasets,
    index: ProtectedValueIndex,
    policies: HashMap<String, Arc<dyn Policy>>,
    transport: Arc<dyn Transport>,
    trace: Arc<TraceRecorder>,
    guard: GuardMode,
    faults: Faults,
    conversations: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    outbound_seq: AtomicU64,
    data_reads: AtomicU64,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("node_id", &self.config.node_id)
            .finish_non_exhaustive()
    }
}

impl Node {
    pub fn builder(config: NodeConfig) -> NodeBuilder {
        NodeBuilder {
            config,
            transport: None,
            trace: None,
            policies: HashMap::new(),
            guard: GuardMode::default(),
            faults: Faults::default(),
        }
    }

    pub fn id(&self) -> &str {
        &self.config.node_id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn index(&self) -> &ProtectedValueIndex {
        &self.index
    }

    pub fn trace(&self) -> &Arc<TraceRecorder> {
        &self.trace
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn guard(&self) -> GuardMode {
        self.guard
    }

    /// Number of dataset or secret reads performed by tools so far.
    pub fn data_reads(&self) -> u64 {
        self.data_reads.load(Ordering::SeqCst)
    }

    pub(crate) fn next_conversation_id(&self) -> String {
        let n = self.outbound_seq.fetch_add(1, Ordering::SeqCst) + 1;
        format!("{}-{n}", self.config.node_id)
    }

    fn conversation_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut map = self.conversations.lock().expect("conversation map poisoned");
        map.entry(id.to_owned()).or_default().clone()
    }

    fn release_conversation(&self, id: &str, lock: Arc<Mutex<()>>) {
        let mut map = self.conversations.lock().expect("conversation map poisoned");
        drop(lock);
        if map.get(id).is_some_and(|l| Arc::strong_count(l) == 1) {
            map.remove(id);
        }
    }

    pub fn handle_operation(&self, req: &OperationRequest) -> Result<OperationResponse, RuntimeError> {
        let op = self
            .config
            .operation(&req.operation_id)
            .ok_or_else(|| RuntimeError::OperationNotFound(req.operation_id.clone()))?;
        if req.access_key != op.access_key {
            return Err(RuntimeError::Auth(op.id.clone()));
        }
        if req.body.trim().is_empty() {
            return Err(RuntimeError::EmptyRequest);
        }
        let policy = self.policies.get(&op.policy).expect("policies resolved at build");

        // One request at a time per conversation.
        let lock = self.conversation_lock(&req.conversation_id);
        let result = {
            let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
            self.run_loop(op, policy.as_ref(), req)
        };
        self.release_conversation(&req.conversation_id, lock);
        result
    }

    fn run_loop(
        &self,
        op: &OperationConfig,
        policy: &dyn Policy,
        req: &OperationRequest,
    ) -> Result<OperationResponse, RuntimeError> {
        let bound = self.config.max_iterations;
        let mut results: Vec<ToolResult> = Vec::new();
        let mut tool_log = Vec::new();
        for turn in 1..=bound {
            let ctx = TurnContext {
                request: &req.body,
                params: &op.params,
                results: &results,
                turn,
            };
            let step = policy.step(&ctx)?;
            if step.tool_calls.is_empty() {
                return Ok(OperationResponse {
                    body: step.message,
                    iterations: turn,
                    tool_log,
                });
            }
            if turn == bound {
                break;
            }
            for call in step.tool_calls {
                let result = self.execute_tool(op, &call, &req.body)?;
                tool_log.push(call);
                results.push(result);
            }
        }
        Err(RuntimeError::LoopLimitExceeded(bound))
    }

    /// Runs one tool call on behalf of `op`. `request` is the inbound body of
    /// the current operation; only fault injection looks at it.
    pub fn execute_tool(
        &self,
        op: &OperationConfig,
        call: &ToolCall,
        request: &str,
    ) -> Result<ToolResult, RuntimeError> {
        if !op.permits(&call.tool) {
            return Err(RuntimeError::ToolNotPermitted {
                tool: call.tool.clone(),
                operation: op.id.clone(),
            });
        }
        let tool: ToolName = call.tool.parse().map_err(|message| RuntimeError::Tool {
            tool: call.tool.clone(),
            message,
        })?;
        let fail = |message: String| RuntimeError::Tool {
            tool: call.tool.clone(),
            message,
        };
        let arg = |name: &str| call.arg(name).ok_or_else(|| fail(format!("missing argument `{name}`")));
        let not_loaded = |what: &str| fail(format!("{what} is not available on this node"));

        let output = match tool {
            ToolName::CsvLookup => {
                let store = self.datasets.clinic.as_ref().ok_or_else(|| not_loaded("clinic data"))?;
                let id = normalize_id(arg("patient_id")?).map_err(|e| fail(e.to_string()))?;
                self.data_reads.fetch_add(1, Ordering::SeqCst);
                ToolOutput::Observation(store.lookup_observation(&id).cloned())
            }
            ToolName::EnrollmentMatch => {
                let store = self
                    .datasets
                    .insurer
                    .as_ref()
                    .ok_or_else(|| not_loaded("enrolment data"))?;
                self.data_reads.fetch_add(1, Ordering::SeqCst);
                ToolOutput::Enrollment(store.match_enrollment(arg("token")?).cloned())
            }
            ToolName::CoverageLookup => {
                let store = self
                    .datasets
                    .insurer
                    .as_ref()
                    .ok_or_else(|| not_loaded("coverage rules"))?;
                self.data_reads.fetch_add(1, Ordering::SeqCst);
                ToolOutput::Coverage(store.coverage_rule(arg("plan_id")?, arg("treatment_code")?).cloned())
            }
            ToolName::GuidanceSearch => {
                let docs = self.datasets.guidance.as_ref().ok_or_else(|| not_loaded("guidance"))?;
                self.data_reads.fetch_add(1, Ordering::SeqCst);
                let topic = call.arg("topic").unwrap_or("").to_lowercase();
                ToolOutput::Guidance(
                    docs.iter()
                        .filter(|d| {
                            topic.is_empty() || d.title.to_lowercase().contains(&topic) || d.doc_id.contains(&topic)
                        })
                        .cloned()
                        .collect(),
                )
            }
            ToolName::HmacToken => {
                let name = arg("secret")?;
                let source = self
                    .config
                    .secret_source(name)
                    .ok_or_else(|| fail(format!("secret `{name}` is not declared on this node")))?;
                let key = load_secret(name, &source).map_err(|e| fail(e.to_string()))?;
                let id = normalize_id(arg("id")?).map_err(|e| fail(e.to_string()))?;
                self.data_reads.fetch_add(1, Ordering::SeqCst);
                ToolOutput::Token(derive_token(&key, &id))
            }
            ToolName::RelayCall => {
                let body = self.faults.apply(arg("body")?, request);
                let conversation = self.next_conversation_id();
                ToolOutput::Relay(relay::relay_call(self, arg("target")?, &body, &conversation)?)
            }
        };
        Ok(ToolResult {
            call: call.clone(),
            output,
        })
    }
}
