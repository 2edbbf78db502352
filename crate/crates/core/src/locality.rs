//! Data-locality enforcement and audit.
//!
//! Every message that crosses a node boundary is a [`MessageEnvelope`]. Before
//! a node sends one, [`scan_outbound`] checks the body against the node's
//! [`ProtectedValueIndex`]; after a run, [`check_trace`] audits the whole
//! [`TraceLog`] against the relay topology.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::ProtectedValueIndex;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

impl Edge {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("envelope body is empty")]
    EmptyBody,
    #[error("envelope from `{0}` to itself")]
    SelfAddressed(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("trace I/O: {0}")]
    Io(String),
}

/// One cross-node message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub operation_id: String,
    pub conversation_id: String,
    pub body: String,
}

impl MessageEnvelope {
    pub fn edge(&self) -> Edge {
        Edge::new(&self.from, &self.to)
    }

    fn validate(&self) -> Result<(), TraceError> {
        if self.body.trim().is_empty() {
            return Err(TraceError::EmptyBody);
        }
        if self.from == self.to {
            return Err(TraceError::SelfAddressed(self.from.clone()));
        }
        Ok(())
    }
}

/// Wire form of one trace line. Field set is fixed.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    run_id: String,
    seq: u64,
    from: String,
    to: String,
    operation_id: String,
    conversation_id: String,
    body: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceLog {
    pub run_id: String,
    pub envelopes: Vec<MessageEnvelope>,
}

impl TraceLog {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.envelopes {
            let line = TraceLine {
                run_id: self.run_id.clone(),
                seq: e.seq,
                from: e.from.clone(),
                to: e.to.clone(),
                operation_id: e.operation_id.clone(),
                conversation_id: e.conversation_id.clone(),
                body: e.body.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    /// Parses a JSONL trace. Blank lines are skipped; line numbers in errors
    /// are 1-based.
    pub fn read_jsonl(input: impl BufRead) -> Result<Self, TraceError> {
        let mut log = TraceLog::default();
        let mut last_seq = None;
        for (i, line) in input.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| TraceError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| TraceError::Malformed { line: lineno, reason };
            let rec: TraceLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            if last_seq.is_none() {
                log.run_id = rec.run_id.clone();
            } else if rec.run_id != log.run_id {
                return Err(malformed(format!(
                    "run_id `{}` differs from `{}`",
                    rec.run_id, log.run_id
                )));
            }
            if last_seq.is_some_and(|s| rec.seq <= s) {
                return Err(malformed("sequence numbers must strictly increase".into()));
            }
            last_seq = Some(rec.seq);
            let env = MessageEnvelope {
                seq: rec.seq,
                from: rec.from,
                to: rec.to,
                operation_id: rec.operation_id,
                conversation_id: rec.conversation_id,
                body: rec.body,
            };
            env.validate().map_err(|e| malformed(e.to_string()))?;
            log.envelopes.push(env);
        }
        Ok(log)
    }
}

/// Append-only trace shared by the nodes of one run. Sequence numbers are
/// assigned here, so they are strictly increasing by construction.
#[derive(Debug)]
pub struct TraceRecorder {
    run_id: String,
    envelopes: Mutex<Vec<MessageEnvelope>>,
}

impl TraceRecorder {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            envelopes: Mutex::new(Vec::new()),
        }
    }

    pub fn record(
        &self,
        edge: &Edge,
        operation_id: &str,
        conversation_id: &str,
        body: &str,
    ) -> Result<u64, TraceError> {
        let mut envelopes = self.envelopes.lock().expect("trace lock poisoned");
        let seq = envelopes.last().map_or(1, |e| e.seq + 1);
        let env = MessageEnvelope {
            seq,
            from: edge.from.clone(),
            to: edge.to.clone(),
            operation_id: operation_id.to_owned(),
            conversation_id: conversation_id.to_owned(),
            body: body.to_owned(),
        };
        env.validate()?;
        envelopes.push(env);
        Ok(seq)
    }

    pub fn snapshot(&self) -> TraceLog {
        TraceLog {
            run_id: self.run_id.clone(),
            envelopes: self.envelopes.lock().expect("trace lock poisoned").clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakFinding {
    pub offending_value: String,
    pub source_column: String,
    pub edge: Edge,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeakVerdict {
    pub findings: Vec<LeakFinding>,
}

impl LeakVerdict {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Reports every protected value occurring in `body`, except values the
/// index allows on this edge. Never modifies the body.
pub fn scan_outbound(body: &str, index: &ProtectedValueIndex, edge: &Edge) -> LeakVerdict {
    let findings = index
        .iter()
        .filter(|v| !v.allowed_on(&edge.to) && v.occurs_in(body))
        .map(|v| LeakFinding {
            offending_value: v.value.clone(),
            source_column: v.column.clone(),
            edge: edge.clone(),
        })
        .collect();
    LeakVerdict { findings }
}

/// Matches any 64-hex run, whether or not it is a known token.
pub fn hex_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)[0-9a-f]{64}").expect("valid regex"))
}

/// The declared relay graph plus per-node audit rules.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    /// (from, to, operation_id) for every configured relay target.
    targets: BTreeSet<(String, String, String)>,
    token_free: BTreeSet<String>,
    raw_id_patterns: BTreeMap<String, Regex>,
}

impl Topology {
    pub fn declare_target(&mut self, from: &str, to: &str, operation_id: &str) {
        self.targets
            .insert((from.to_owned(), to.to_owned(), operation_id.to_owned()));
    }

    /// Nothing addressed to `node` may carry a 64-hex token.
    pub fn forbid_tokens_into(&mut self, node: &str) {
        self.token_free.insert(node.to_owned());
    }

    /// Nothing sent by `node` may match `pattern` (raw local identifiers).
    pub fn forbid_pattern_from(&mut self, node: &str, pattern: Regex) {
        self.raw_id_patterns.insert(node.to_owned(), pattern);
    }

    pub fn declares(&self, from: &str, to: &str, operation_id: &str) -> bool {
        self.targets
            .contains(&(from.to_owned(), to.to_owned(), operation_id.to_owned()))
    }

    pub fn edges(&self) -> BTreeSet<Edge> {
        self.targets.iter().map(|(f, t, _)| Edge::new(f, t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ViolationKind {
    /// A protected dataset value crossed an edge.
    #[serde(rename = "V1")]
    ProtectedValueLeak,
    /// A token-shaped string reached a node that must never see tokens.
    #[serde(rename = "V2")]
    TokenToTokenFreeNode,
    /// An envelope travelled an edge the topology does not declare.
    #[serde(rename = "V3")]
    UndeclaredEdge,
    /// A raw local identifier left its node.
    #[serde(rename = "V4")]
    RawIdentifier,
}

impl ViolationKind {
    pub fn code(self) -> &'static str {
        match self {
            Self::ProtectedValueLeak => "V1",
            Self::TokenToTokenFreeNode => "V2",
            Self::UndeclaredEdge => "V3",
            Self::RawIdentifier => "V4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub seq: u64,
    #[serde(rename = "rule")]
    pub kind: ViolationKind,
    pub edge: Edge,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} seq={} {}: {}",
            self.kind.code(),
            self.seq,
            self.edge,
            self.detail
        )
    }
}

/// Audits a finished run. An empty result means every envelope respected
/// the locality model.
pub fn check_trace(
    trace: &TraceLog,
    topology: &Topology,
    indexes: &BTreeMap<String, ProtectedValueIndex>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    // Requests awaiting a reply, keyed by (requester, responder, op, conversation).
    let mut pending: HashMap<(String, String, String, String), usize> = HashMap::new();

    for env in &trace.envelopes {
        let edge = env.edge();
        let mut push = |kind, detail: String| {
            out.push(Violation {
                seq: env.seq,
                kind,
                edge: edge.clone(),
                detail,
            })
        };

        if let Some(index) = indexes.get(&env.from) {
            for f in scan_outbound(&env.body, index, &edge).findings {
                push(
                    ViolationKind::ProtectedValueLeak,
                    format!("value from `{}` in body: {:?}", f.source_column, f.offending_value),
                );
            }
        }

        if topology.token_free.contains(&env.to) {
            for m in hex_token_regex().find_iter(&env.body) {
                push(
                    ViolationKind::TokenToTokenFreeNode,
                    format!("64-hex string at byte {} in body", m.start()),
                );
            }
        }

        if let Some(re) = topology.raw_id_patterns.get(&env.from) {
            for m in re.find_iter(&env.body) {
                push(
                    ViolationKind::RawIdentifier,
                    format!("raw identifier {:?} in body", m.as_str()),
                );
            }
        }

        if topology.declares(&env.from, &env.to, &env.operation_id) {
            *pending
                .entry((
                    env.from.clone(),
                    env.to.clone(),
                    env.operation_id.clone(),
                    env.conversation_id.clone(),
                ))
                .or_default() += 1;
        } else {
            let key = (
                env.to.clone(),
                env.from.clone(),
                env.operation_id.clone(),
                env.conversation_id.clone(),
            );
            match pending.get_mut(&key) {
                Some(n) if *n > 0 => *n -= 1,
                _ => push(
                    ViolationKind::UndeclaredEdge,
                    format!("no relay target for operation `{}` on this edge", env.operation_id),
                ),
            }
        }
    }
    out
}

pub fn violations_to_jsonl(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| serde_json::to_string(v).expect("serialisable") + "\n")
        .collect()
}
