//! Boots a set of nodes in one process, submits one request to the entry
//! operation, and audits the resulting trace.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{ConfigError, NodeConfig, ScenarioConfig, topology};
use crate::datastore::{Datasets, DatastoreError, protected_values};
use crate::locality::{TraceLog, TraceRecorder, Violation, check_trace};
use crate::policies::templates::{VerdictFields, parse_verdict};
use crate::relay::{HttpTransport, InProcessBus, RelayError, RelayServer, Transport};
use crate::runtime::{BuildError, Faults, GuardMode, Node, OperationRequest, RuntimeError};

/// Conversation id for the operator's request into the entry node.
pub const ENTRY_CONVERSATION: &str = "entry-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    /// Real HTTP listeners on ephemeral loopback ports.
    Network,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub transport: TransportKind,
    /// Replaces the scenario's request text.
    pub request: Option<String>,
    pub guard: GuardMode,
    /// Faults keyed by node id.
    pub faults: BTreeMap<String, Faults>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Bind(#[from] RelayError),
    #[error(transparent)]
    Data(#[from] DatastoreError),
}

/// Everything a run produced.
#[derive(Debug)]
pub struct ScenarioRun {
    pub run_id: String,
    pub entry_node: String,
    pub entry_operation: String,
    pub request: String,
    pub outcome: Result<String, RuntimeError>,
    pub trace: TraceLog,
    pub violations: Vec<Violation>,
    pub elapsed: Duration,
    /// Bytes handed to each node's transport.
    pub bytes_sent: BTreeMap<String, u64>,
}

impl ScenarioRun {
    pub fn succeeded(&self) -> bool {
        self.outcome.is_ok() && self.violations.is_empty()
    }

    /// 0 clean success, 2 violations found, 1 any other failure.
    pub fn exit_code(&self) -> i32 {
        if !self.violations.is_empty() {
            2
        } else if self.outcome.is_err() {
            1
        } else {
            0
        }
    }

    pub fn verdict(&self) -> Option<VerdictFields> {
        self.outcome.as_ref().ok().and_then(|b| parse_verdict(b).ok())
    }

    /// Human-readable log of the request, every relayed message, and the
    /// outcome. Contains no timing, so it is stable across transports.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "== request: user -> {} ({})",
            self.entry_node, self.entry_operation
        );
        let _ = writeln!(out, "{}", self.request);
        for e in &self.trace.envelopes {
            let _ = writeln!(
                out,
                "== [{}] {} -> {} ({}, {})",
                e.seq, e.from, e.to, e.operation_id, e.conversation_id
            );
            let _ = writeln!(out, "{}", e.body);
        }
        match &self.outcome {
            Ok(body) => {
                let _ = writeln!(out, "== verdict: {} -> user", self.entry_node);
                let _ = writeln!(out, "{body}");
            }
            Err(e) => {
                let _ = writeln!(out, "== failed [{}]", e.code());
                let _ = writeln!(out, "{e}");
            }
        }
        out
    }
}

/// Loads the scenario and its node configs from disk and runs it.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<ScenarioRun, ScenarioError> {
    let nodes = cfg.load_nodes()?;
    run_with_nodes(cfg, nodes, opts)
}

/// Runs a scenario over already-loaded (possibly edited) node configs.
pub fn run_with_nodes(
    cfg: &ScenarioConfig,
    mut nodes: Vec<NodeConfig>,
    opts: &RunOptions,
) -> Result<ScenarioRun, ScenarioError> {
    let trace = Arc::new(TraceRecorder::new(cfg.run_id.clone()));
    let topo = topology(&nodes);

    let build = |config: NodeConfig, transport: Arc<dyn Transport>| -> Result<Arc<Node>, ScenarioError> {
        let faults = opts.faults.get(&config.node_id).cloned().unwrap_or_default();
        Ok(Arc::new(
            Node::builder(config)
                .transport(transport)
                .trace(Arc::clone(&trace))
                .guard(opts.guard)
                .faults(faults)
                .build()?,
        ))
    };

    let mut servers = Vec::new();
    let mut built: Vec<(Arc<Node>, Arc<dyn Transport>)> = Vec::new();
    match opts.transport {
        TransportKind::InProcess => {
            let bus = Arc::new(InProcessBus::new());
            for config in nodes.iter().cloned() {
                let meter: Arc<dyn Transport> = Arc::new(Metered::new(bus.clone()));
                built.push((build(config, meter.clone())?, meter));
            }
            // Route each declared target URL to the node it names.
            for (node, _) in &built {
                for target in &node.config().relay_targets {
                    if let Some((dest, _)) = built.iter().find(|(n, _)| n.id() == target.node) {
                        bus.register(&target.url, dest);
                    }
                }
            }
        }
        TransportKind::Network => {
            let mut listeners = Vec::new();
            let mut urls = BTreeMap::new();
            for n in &nodes {
                let server = RelayServer::bind("127.0.0.1:0")?;
                let addr = server.server_addr().to_ip().expect("TCP listener");
                urls.insert(n.node_id.clone(), format!("http://{addr}"));
                listeners.push(server);
            }
            for n in &mut nodes {
                for target in &mut n.relay_targets {
                    if let Some(url) = urls.get(&target.node) {
                        target.url = url.clone();
                    }
                }
            }
            for (config, listener) in nodes.into_iter().zip(listeners) {
                let http: Arc<dyn Transport> = Arc::new(HttpTransport::new());
                let node = build(config, http.clone())?;
                servers.push(RelayServer::start(Arc::clone(&node), listener));
                built.push((node, http));
            }
        }
    }

    let entry = built
        .iter()
        .map(|(n, _)| n)
        .find(|n| n.id() == cfg.entry.node)
        .ok_or_else(|| ConfigError::Invalid {
            node: cfg.entry.node.clone(),
            reason: "entry node is not part of the scenario".into(),
        })?;
    let request = opts.request.clone().unwrap_or_else(|| cfg.request.clone());
    let started = Instant::now();
    let outcome = entry
        .handle_operation(&OperationRequest {
            operation_id: cfg.entry.operation.clone(),
            access_key: cfg.entry.access_key.clone(),
            conversation_id: ENTRY_CONVERSATION.into(),
            body: request.clone(),
        })
        .map(|r| r.body);
    let elapsed = started.elapsed();
    drop(servers);

    let log = trace.snapshot();
    let indexes: BTreeMap<_, _> = built
        .iter()
        .map(|(n, _)| (n.id().to_owned(), n.index().clone()))
        .collect();
    let violations = check_trace(&log, &topo, &indexes);
    let bytes_sent = built.iter().map(|(n, t)| (n.id().to_owned(), t.bytes_sent())).collect();

    Ok(ScenarioRun {
        run_id: cfg.run_id.clone(),
        entry_node: cfg.entry.node.clone(),
        entry_operation: cfg.entry.operation.clone(),
        request,
        outcome,
        trace: log,
        violations,
        elapsed,
        bytes_sent,
    })
}

/// Audits a recorded trace against the topology and protected values of
/// `nodes`, loading each node's datasets to build its index.
pub fn audit_trace(nodes: &[NodeConfig], trace: &TraceLog) -> Result<Vec<Violation>, ScenarioError> {
    let mut indexes = BTreeMap::new();
    for n in nodes {
        let data = Datasets::load(&n.datasets)?;
        indexes.insert(n.node_id.clone(), protected_values(&n.protect, &data)?);
    }
    Ok(check_trace(trace, &topology(nodes), &indexes))
}

/// Per-node byte counter over a shared transport.
struct Metered {
    inner: Arc<dyn Transport>,
    sent: AtomicU64,
}

impl Metered {
    fn new(inner: Arc<dyn Transport>) -> Self {
        Self {
            inner,
            sent: AtomicU64::new(0),
        }
    }
}

impl Transport for Metered {
    fn post(&self, base_url: &str, operation_id: &str, payload: &[u8]) -> Result<Vec<u8>, String> {
        self.sent.fetch_add(payload.len() as u64, Ordering::SeqCst);
        self.inner.post(base_url, operation_id, payload)
    }

    fn bytes_sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }
}
