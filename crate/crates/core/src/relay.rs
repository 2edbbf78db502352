//! Cross-node operation relay.
//!
//! A node may call a remote operation only through a relay target declared in
//! its own config. Requests and responses are single JSON objects carried by
//! HTTP POST to `/operations/<operation_id>`, or by an in-process bus that
//! runs the same server-side dispatch without sockets.
//!
//! Every outbound body passes [`scan_outbound`] first; a finding aborts the
//! call before any byte reaches the transport.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::locality::{Edge, scan_outbound};
use crate::runtime::{GuardMode, Node, OperationRequest};

pub const RELAY_TIMEOUT: Duration = Duration::from_secs(30);

/// Peer label used when scanning response bodies; no allowance matches it.
const ANY_CALLER: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayRequest {
    pub operation_id: String,
    pub access_key: String,
    pub conversation_id: String,
    pub body: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelayStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayResponse {
    pub status: RelayStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl RelayResponse {
    pub fn ok(body: impl Into<String>) -> Self {
        Self {
            status: RelayStatus::Ok,
            body: Some(body.into()),
            error: None,
        }
    }

    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status: RelayStatus::Error,
            body: None,
            error: Some(ErrorBody {
                code: code.into(),
                message: message.into(),
            }),
        }
    }

    fn http_status(&self) -> u16 {
        match self.error.as_ref().map(|e| e.code.as_str()) {
            None => 200,
            Some("protocol") => 400,
            Some("auth") => 401,
            Some("not_found") => 404,
            Some(_) => 500,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RelayError {
    #[error("relay target `{target}` is not configured on node `{node}`")]
    TargetNotConfigured { node: String, target: String },
    #[error("outbound message on {edge} blocked: contains protected values from {columns:?}")]
    LeakBlocked { edge: Edge, columns: Vec<String> },
    #[error("remote operation `{0}` rejected the access key")]
    Auth(String),
    #[error("relay transport failure: {0}")]
    Transport(String),
    #[error("remote error `{code}`: {message}")]
    Remote { code: String, message: String },
    #[error("could not bind relay listener on {address}: {reason}")]
    Bind { address: String, reason: String },
}

impl RelayError {
    pub fn code(&self) -> &str {
        match self {
            Self::TargetNotConfigured { .. } => "target_not_configured",
            Self::LeakBlocked { .. } => "leak_blocked",
            Self::Auth(_) => "relay_auth",
            Self::Transport(_) => "relay_transport",
            Self::Remote { code, .. } => code,
            Self::Bind { .. } => "bind",
        }
    }
}

/// Moves request bytes to a remote node and returns the response bytes.
pub trait Transport: Send + Sync {
    fn post(&self, base_url: &str, operation_id: &str, payload: &[u8]) -> Result<Vec<u8>, String>;

    /// Total payload bytes handed to the wire so far.
    fn bytes_sent(&self) -> u64;
}

/// Sends `body` to the remote operation behind `target_name`.
pub fn relay_call(node: &Node, target_name: &str, body: &str, conversation_id: &str) -> Result<String, RelayError> {
    let target = node
        .config()
        .relay_target(target_name)
        .ok_or_else(|| RelayError::TargetNotConfigured {
            node: node.id().to_owned(),
            target: target_name.to_owned(),
        })?;
    let edge = Edge::new(node.id(), &target.node);

    let verdict = scan_outbound(body, node.index(), &edge);
    if !verdict.is_clean() && node.guard() == GuardMode::Enforce {
        let mut columns: Vec<String> = verdict.findings.into_iter().map(|f| f.source_column).collect();
        columns.sort();
        columns.dedup();
        return Err(RelayError::LeakBlocked { edge, columns });
    }

    let trace_err = |e: crate::locality::TraceError| RelayError::Transport(format!("trace: {e}"));
    node.trace()
        .record(&edge, &target.operation_id, conversation_id, body)
        .map_err(trace_err)?;

    let request = RelayRequest {
        operation_id: target.operation_id.clone(),
        access_key: target.access_key.clone(),
        conversation_id: conversation_id.to_owned(),
        body: body.to_owned(),
    };
    let payload = serde_json::to_vec(&request).expect("serialisable");
    let raw = node
        .transport()
        .post(&target.url, &target.operation_id, &payload)
        .map_err(RelayError::Transport)?;
    let response: RelayResponse =
        serde_json::from_slice(&raw).map_err(|e| RelayError::Transport(format!("malformed response: {e}")))?;

    let back = Edge::new(&target.node, node.id());
    match (response.status, response.body, response.error) {
        (RelayStatus::Ok, Some(body), None) => {
            node.trace()
                .record(&back, &target.operation_id, conversation_id, &body)
                .map_err(trace_err)?;
            Ok(body)
        }
        (RelayStatus::Error, None, Some(err)) => {
            let text = format!("[error {}] {}", err.code, err.message);
            node.trace()
                .record(&back, &target.operation_id, conversation_id, &text)
                .map_err(trace_err)?;
            if err.code == "auth" {
                Err(RelayError::Auth(target.operation_id.clone()))
            } else {
                Err(RelayError::Remote {
                    code: err.code,
                    message: err.message,
                })
            }
        }
        _ => Err(RelayError::Transport("response has inconsistent status fields".into())),
    }
}

/// Server side of the relay: decode, authenticate, run, guard the reply.
/// Shared by the HTTP listener and the in-process bus.
pub fn dispatch(node: &Node, path_operation: &str, payload: &[u8]) -> RelayResponse {
    let req: RelayRequest = match serde_json::from_slice(payload) {
        Ok(r) => r,
        Err(e) => return RelayResponse::error("protocol", format!("malformed request: {e}")),
    };
    if req.operation_id != path_operation {
        return RelayResponse::error("protocol", "operation id in body does not match the path");
    }
    let op_req = OperationRequest {
        operation_id: req.operation_id,
        access_key: req.access_key,
        conversation_id: req.conversation_id,
        body: req.body,
    };
    let edge = Edge::new(node.id(), ANY_CALLER);
    let enforce = node.guard() == GuardMode::Enforce;
    match node.handle_operation(&op_req) {
        Ok(resp) => {
            let verdict = scan_outbound(&resp.body, node.index(), &edge);
            if enforce && !verdict.is_clean() {
                RelayResponse::error("leak_blocked", "response withheld: it contains protected values")
            } else {
                RelayResponse::ok(resp.body)
            }
        }
        Err(e) => {
            let message = e.to_string();
            let message = if enforce && !scan_outbound(&message, node.index(), &edge).is_clean() {
                "operation failed".to_owned()
            } else {
                message
            };
            RelayResponse::error(e.code(), message)
        }
    }
}

/// Routes relay traffic between nodes of one process by base URL.
#[derive(Default)]
pub struct InProcessBus {
    routes: RwLock<HashMap<String, Weak<Node>>>,
    sent: AtomicU64,
}

impl InProcessBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, base_url: &str, node: &Arc<Node>) {
        self.routes
            .write()
            .expect("routes poisoned")
            .insert(base_url.trim_end_matches('/').to_owned(), Arc::downgrade(node));
    }
}

impl Transport for InProcessBus {
    fn post(&self, base_url: &str, operation_id: &str, payload: &[u8]) -> Result<Vec<u8>, String> {
        let node = self
            .routes
            .read()
            .expect("routes poisoned")
            .get(base_url.trim_end_matches('/'))
            .and_then(Weak::upgrade)
            .ok_or_else(|| format!("no node listening at {base_url}"))?;
        self.sent.fetch_add(payload.len() as u64, Ordering::SeqCst);
        let resp = dispatch(&node, operation_id, payload);
        Ok(serde_json::to_vec(&resp).expect("serialisable"))
    }

    fn bytes_sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }
}

/// JSON over HTTP POST with a fixed per-call timeout. No retries.
pub struct HttpTransport {
    agent: ureq::Agent,
    sent: AtomicU64,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::with_timeout(RELAY_TIMEOUT)
    }

    pub fn with_timeout(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            sent: AtomicU64::new(0),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn post(&self, base_url: &str, operation_id: &str, payload: &[u8]) -> Result<Vec<u8>, String> {
        let url = format!("{}/operations/{operation_id}", base_url.trim_end_matches('/'));
        self.sent.fetch_add(payload.len() as u64, Ordering::SeqCst);
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(payload)
            .map_err(|e| e.to_string())?;
        resp.body_mut().read_to_vec().map_err(|e| e.to_string())
    }

    fn bytes_sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }
}

/// A running HTTP listener. Each request is served on its own thread so a
/// handler blocked on an outbound relay never stalls new inbound work.
pub struct RelayServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    accept: Option<JoinHandle<()>>,
}

impl RelayServer {
    pub fn bind(address: &str) -> Result<tiny_http::Server, RelayError> {
        tiny_http::Server::http(address).map_err(|e| RelayError::Bind {
            address: address.to_owned(),
            reason: e.to_string(),
        })
    }

    /// Starts serving `node` on an already-bound listener.
    pub fn start(node: Arc<Node>, server: tiny_http::Server) -> Self {
        let addr = server.server_addr().to_ip().expect("TCP listener");
        let server = Arc::new(server);
        let accept_server = Arc::clone(&server);
        let accept = std::thread::spawn(move || {
            for request in accept_server.incoming_requests() {
                let node = Arc::clone(&node);
                std::thread::spawn(move || handle_http(&node, request));
            }
        });
        Self {
            server,
            addr,
            accept: Some(accept),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RelayServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `bind_address` and serves `node` until the returned handle drops.
pub fn serve(node: Arc<Node>, bind_address: &str) -> Result<RelayServer, RelayError> {
    let server = RelayServer::bind(bind_address)?;
    Ok(RelayServer::start(node, server))
}

fn handle_http(node: &Node, mut request: tiny_http::Request) {
    let response = match (request.method(), request.url().strip_prefix("/operations/")) {
        (tiny_http::Method::Post, Some(op)) if !op.is_empty() && !op.contains('/') => {
            let op = op.to_owned();
            let mut payload = Vec::new();
            match request.as_reader().read_to_end(&mut payload) {
                Ok(_) => dispatch(node, &op, &payload),
                Err(e) => RelayResponse::error("protocol", format!("could not read request: {e}")),
            }
        }
        (tiny_http::Method::Post, _) => RelayResponse::error("not_found", "unknown path"),
        _ => RelayResponse::error("protocol", "only POST /operations/<operation_id> is served"),
    };
    let status = response.http_status();
    let bytes = serde_json::to_vec(&response).expect("serialisable");
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("valid header");
    let _ = request.respond(
        tiny_http::Response::from_data(bytes)
            .with_status_code(status)
            .with_header(header),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_json_shapes() {
        let ok = serde_json::to_string(&RelayResponse::ok("hi")).unwrap();
        assert_eq!(ok, r#"{"status":"ok","body":"hi"}"#);
        let err = serde_json::to_string(&RelayResponse::error("auth", "no")).unwrap();
        assert_eq!(err, r#"{"status":"error","error":{"code":"auth","message":"no"}}"#);
        let req = RelayRequest {
            operation_id: "o".into(),
            access_key: "k".into(),
            conversation_id: "c".into(),
            body: "b".into(),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"operation_id":"o","access_key":"k","conversation_id":"c","body":"b"}"#
        );
    }

    #[test]
    fn error_codes_map_to_http_status() {
        assert_eq!(RelayResponse::ok("x").http_status(), 200);
        assert_eq!(RelayResponse::error("protocol", "").http_status(), 400);
        assert_eq!(RelayResponse::error("auth", "").http_status(), 401);
        assert_eq!(RelayResponse::error("not_found", "").http_status(), 404);
        assert_eq!(RelayResponse::error("loop_limit", "").http_status(), 500);
    }
}
