//! Node and scenario configuration files (TOML).
//!
//! Relative paths inside a config file resolve against the directory that
//! holds the file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::datastore::{DatasetPaths, ProtectRule};
use crate::locality::Topology;
use crate::pseudonym::SecretSource;
use crate::runtime::ToolName;

pub const DEFAULT_MAX_ITERATIONS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Read { path: String, reason: String },
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("node `{node}`: {reason}")]
    Invalid { node: String, reason: String },
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SecretSpec {
    /// Environment variable to read; defaults to `FEDMESH_SECRET_<NAME>`.
    pub env: Option<String>,
    /// Key file consulted when the variable is unset.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct OperationConfig {
    pub id: String,
    pub policy: String,
    pub tools: Vec<String>,
    pub access_key: String,
    /// Policy parameters, e.g. which relay target or secret to use.
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl OperationConfig {
    pub fn permits(&self, tool: &str) -> bool {
        self.tools.iter().any(|t| t == tool)
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct RelayTarget {
    pub name: String,
    /// Node id of the remote side; used for edge identity.
    pub node: String,
    pub url: String,
    pub operation_id: String,
    pub access_key: String,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// Raw local identifiers that must never appear in outbound bodies.
    pub raw_id_pattern: Option<String>,
    /// Inbound bodies must never contain 64-hex strings.
    #[serde(default)]
    pub forbid_tokens_inbound: bool,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub datasets: DatasetPaths,
    #[serde(default)]
    pub secrets: BTreeMap<String, SecretSpec>,
    #[serde(default)]
    pub operations: Vec<OperationConfig>,
    #[serde(default)]
    pub relay_targets: Vec<RelayTarget>,
    #[serde(default)]
    pub protect: Vec<ProtectRule>,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_bind() -> String {
    "127.0.0.1:0".into()
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { reason, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: NodeConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<node config>".into(),
            reason: e.to_string(),
        })?;
        cfg.datasets.resolve_against(base_dir);
        for spec in cfg.secrets.values_mut() {
            if let Some(f) = spec.file.as_mut().filter(|f| f.is_relative()) {
                *f = base_dir.join(&*f);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |reason: String| ConfigError::Invalid {
            node: self.node_id.clone(),
            reason,
        };
        if self.node_id.trim().is_empty() {
            return Err(invalid("node_id is empty".into()));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be at least 1".into()));
        }
        let mut ids = BTreeSet::new();
        for op in &self.operations {
            if !ids.insert(&op.id) {
                return Err(invalid(format!("duplicate operation `{}`", op.id)));
            }
            if op.access_key.is_empty() {
                return Err(invalid(format!("operation `{}` has an empty access_key", op.id)));
            }
            if let Some(t) = op.tools.iter().find(|t| t.parse::<ToolName>().is_err()) {
                return Err(invalid(format!("operation `{}` references unknown tool `{t}`", op.id)));
            }
        }
        let mut names = BTreeSet::new();
        for t in &self.relay_targets {
            if [&t.name, &t.node, &t.url, &t.operation_id, &t.access_key]
                .iter()
                .any(|f| f.trim().is_empty())
            {
                return Err(invalid(format!("relay target `{}` has an empty field", t.name)));
            }
            if t.node == self.node_id {
                return Err(invalid(format!("relay target `{}` points at this node", t.name)));
            }
            if !names.insert(&t.name) {
                return Err(invalid(format!("duplicate relay target `{}`", t.name)));
            }
        }
        if let Some(p) = &self.audit.raw_id_pattern {
            Regex::new(p).map_err(|e| invalid(format!("raw_id_pattern: {e}")))?;
        }
        Ok(())
    }

    pub fn operation(&self, id: &str) -> Option<&OperationConfig> {
        self.operations.iter().find(|o| o.id == id)
    }

    pub fn relay_target(&self, name: &str) -> Option<&RelayTarget> {
        self.relay_targets.iter().find(|t| t.name == name)
    }

    /// Where the named secret is looked up, or `None` if the node does not
    /// declare it.
    pub fn secret_source(&self, name: &str) -> Option<SecretSource> {
        let spec = self.secrets.get(name)?;
        let env = match &spec.env {
            Some(var) => SecretSource::EnvVar(var.clone()),
            None => SecretSource::Env,
        };
        let mut chain = vec![env];
        chain.extend(spec.file.clone().map(SecretSource::KeyFile));
        Some(SecretSource::Chain(chain))
    }
}

/// Relay graph and audit rules across a set of nodes.
pub fn topology(nodes: &[NodeConfig]) -> Topology {
    let mut t = Topology::default();
    for n in nodes {
        for target in &n.relay_targets {
            t.declare_target(&n.node_id, &target.node, &target.operation_id);
        }
        if n.audit.forbid_tokens_inbound {
            t.forbid_tokens_into(&n.node_id);
        }
        if let Some(p) = &n.audit.raw_id_pattern {
            t.forbid_pattern_from(&n.node_id, Regex::new(p).expect("validated at load"));
        }
    }
    t
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct EntryPoint {
    pub node: String,
    pub operation: String,
    pub access_key: String,
}

/// A multi-node run: which node configs to boot and what to ask.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub request: String,
    pub nodes: Vec<PathBuf>,
    pub entry: EntryPoint,
}

fn default_run_id() -> String {
    "run".into()
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        let mut cfg: ScenarioConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.nodes {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_nodes(&self) -> Result<Vec<NodeConfig>, ConfigError> {
        let nodes: Vec<NodeConfig> = self
            .nodes
            .iter()
            .map(|p| NodeConfig::load(p))
            .collect::<Result<_, _>>()?;
        let mut seen = BTreeSet::new();
        for n in &nodes {
            if !seen.insert(n.node_id.as_str()) {
                return Err(ConfigError::Invalid {
                    node: n.node_id.clone(),
                    reason: "node id appears twice in scenario".into(),
                });
            }
        }
        if !seen.contains(self.entry.node.as_str()) {
            return Err(ConfigError::Invalid {
                node: self.entry.node.clone(),
                reason: "entry node is not part of the scenario".into(),
            });
        }
        Ok(nodes)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixtures() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
    }

    #[test]
    fn loads_fixture_scenario() {
        let s = ScenarioConfig::load(&fixtures().join("scenario.toml")).unwrap();
        assert_eq!(s.request, "Confirm coverage for CLN-0001");
        let nodes = s.load_nodes().unwrap();
        assert_eq!(nodes.len(), 3);
        let clinic = &nodes[0];
        assert!(clinic.datasets.observations.as_ref().unwrap().is_file());
        assert_eq!(clinic.max_iterations, DEFAULT_MAX_ITERATIONS);
        assert!(clinic.operation("clinic_coverage").unwrap().permits("hmac_token"));
        assert!(!nodes[2].operation("specialist_consult").unwrap().permits("relay_call"));

        let topo = topology(&nodes);
        assert!(topo.declares("clinic", "insurer", "insurer_coverage"));
        assert!(topo.declares("insurer", "specialist", "specialist_consult"));
        assert!(!topo.declares("clinic", "specialist", "specialist_consult"));
    }

    #[test]
    fn secret_source_chains_env_then_file() {
        let s = ScenarioConfig::load(&fixtures().join("scenario.toml")).unwrap();
        let clinic = &s.load_nodes().unwrap()[0];
        match clinic.secret_source("clinic_hmac_key").unwrap() {
            SecretSource::Chain(c) => {
                assert_eq!(c[0], SecretSource::EnvVar("FEDMESH_SECRET_CLINIC_HMAC_KEY".into()));
                assert!(matches!(&c[1], SecretSource::KeyFile(p) if p.is_file()));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(clinic.secret_source("other").is_none());
    }

    #[test]
    fn rejects_unknown_tool_and_empty_key() {
        let base = Path::new(".");
        let bad_tool = r#"
            node_id = "n"
            [[operations]]
            id = "op"
            policy = "clinic"
            tools = ["web_fetch"]
            access_key = "k"
        "#;
        assert!(matches!(
            NodeConfig::from_toml(bad_tool, base),
            Err(ConfigError::Invalid { .. })
        ));
        let empty_key = bad_tool.replace("web_fetch", "csv_lookup").replace("\"k\"", "\"\"");
        assert!(matches!(
            NodeConfig::from_toml(&empty_key, base),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            NodeConfig::from_toml("node_id = 3", base),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            NodeConfig::from_toml("node_id = \"n\"\nmystery = 1", base),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn rejects_self_targets() {
        let text = r#"
            node_id = "n"
            [[relay_targets]]
            name = "loop"
            node = "n"
            url = "http://x"
            operation_id = "o"
            access_key = "k"
        "#;
        assert!(NodeConfig::from_toml(text, Path::new(".")).is_err());
    }
}
