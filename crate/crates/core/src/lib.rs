//! Federated agent nodes that answer cross-organisation questions without
//! moving protected rows between sites.

pub mod config;
pub mod datastore;
pub mod locality;
pub mod policies;
pub mod pseudonym;
pub mod relay;
pub mod runtime;
pub mod scenario;

pub use config::{NodeConfig, ScenarioConfig};
pub use runtime::{Node, OperationRequest, OperationResponse, RuntimeError};
pub use scenario::{RunOptions, ScenarioRun, TransportKind, run_scenario};
