use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result, bail};
use clap::{Parser, Subcommand, ValueEnum};

use fedmesh::config::ScenarioConfig;
use fedmesh::datastore::{generate_enrollment, load_enrollment_template, load_patients};
use fedmesh::locality::{TraceLog, Violation};
use fedmesh::pseudonym::{SecretKey, SecretSource, derive_token, load_secret, normalize_id};
use fedmesh::runtime::{Faults, GuardMode, Splice};
use fedmesh::scenario::{RunOptions, TransportKind, audit_trace, run_with_nodes};

const EXIT_FAILURE: u8 = 1;
const EXIT_VIOLATIONS: u8 = 2;

#[derive(Parser)]
#[command(
    name = "fedmesh",
    version,
    about = "Federated coverage-check nodes with a locality audit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Inprocess,
    Network,
}

#[derive(Subcommand)]
enum Command {
    /// Boot every node of a scenario, submit its request, and audit the trace.
    RunScenario {
        #[arg(long, default_value = "fixtures/scenario.toml")]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value_t = Transport::Inprocess)]
        transport: Transport,
        /// Where to write the JSONL trace.
        #[arg(long, default_value = "trace.jsonl")]
        trace: PathBuf,
        /// Overrides the scenario's request text.
        #[arg(long)]
        request: Option<String>,
        /// Append this text to every relay body the fault node sends.
        #[arg(long, value_name = "TEXT")]
        inject_leak: Option<String>,
        /// Node whose relay bodies get the injected text (default: entry node).
        #[arg(long, value_name = "NODE")]
        inject_node: Option<String>,
        /// Make every node copy inbound tokens into its relay bodies.
        #[arg(long)]
        inject_token_forward: bool,
        /// Let outbound messages through even when the leak guard objects.
        #[arg(long)]
        bypass_guard: bool,
    },
    /// Print the pseudonymous token for a patient id.
    Token {
        id: String,
        /// Secret name; read from FEDMESH_SECRET_<NAME>.
        #[arg(long, default_value = "clinic_hmac_key")]
        secret: String,
        /// Fallback key file when the env var is unset.
        #[arg(long)]
        key_file: Option<PathBuf>,
    },
    /// Regenerate the enrolment file with tokens derived under a given key.
    GenFixtures {
        #[arg(long)]
        patients: PathBuf,
        /// Enrolment CSV supplying (insurance_number, plan_id, status) in row order.
        #[arg(long)]
        template: PathBuf,
        #[arg(long, default_value = "clinic_hmac_key")]
        secret: String,
        #[arg(long)]
        key_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit a JSONL trace against a scenario's topology and protected data.
    CheckTrace {
        trace: PathBuf,
        #[arg(long, default_value = "fixtures/scenario.toml")]
        scenario: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RunScenario {
            scenario,
            transport,
            trace,
            request,
            inject_leak,
            inject_node,
            inject_token_forward,
            bypass_guard,
        } => cmd_run_scenario(
            &scenario,
            transport,
            &trace,
            request,
            inject_leak.map(|v| (v, inject_node)),
            inject_token_forward,
            bypass_guard,
        ),
        Command::Token { id, secret, key_file } => cmd_token(&id, &secret, key_file),
        Command::GenFixtures {
            patients,
            template,
            secret,
            key_file,
            out,
        } => cmd_gen_fixtures(&patients, &template, &secret, key_file, &out),
        Command::CheckTrace { trace, scenario } => cmd_check_trace(&trace, &scenario),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn secret(name: &str, key_file: Option<PathBuf>) -> Result<SecretKey> {
    let source = match key_file {
        Some(p) => SecretSource::Chain(vec![SecretSource::Env, SecretSource::KeyFile(p)]),
        None => SecretSource::Env,
    };
    Ok(load_secret(name, &source)?)
}

fn print_violations(violations: &[Violation]) {
    for v in violations {
        println!("violation {v}");
    }
}

fn cmd_run_scenario(
    scenario: &Path,
    transport: Transport,
    trace_path: &Path,
    request: Option<String>,
    leak: Option<(String, Option<String>)>,
    token_forward: bool,
    bypass_guard: bool,
) -> Result<u8> {
    let cfg = ScenarioConfig::load(scenario)?;
    let nodes = cfg.load_nodes()?;
    let mut faults: BTreeMap<String, Faults> = BTreeMap::new();
    if token_forward {
        for n in &nodes {
            faults.entry(n.node_id.clone()).or_default().forward_token = true;
        }
    }
    if let Some((value, node)) = leak {
        let node = node.unwrap_or_else(|| cfg.entry.node.clone());
        if !nodes.iter().any(|n| n.node_id == node) {
            bail!("fault node `{node}` is not part of the scenario");
        }
        faults.entry(node).or_default().splice = Some(Splice { value, at: usize::MAX });
    }
    let opts = RunOptions {
        transport: match transport {
            Transport::Inprocess => TransportKind::InProcess,
            Transport::Network => TransportKind::Network,
        },
        request,
        guard: if bypass_guard {
            GuardMode::Bypass
        } else {
            GuardMode::Enforce
        },
        faults,
    };
    let run = run_with_nodes(&cfg, nodes, &opts)?;

    print!("{}", run.transcript());
    let file = fs::File::create(trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    let mut out = BufWriter::new(file);
    run.trace
        .write_jsonl(&mut out)
        .and_then(|()| out.flush())
        .with_context(|| format!("writing {}", trace_path.display()))?;
    println!(
        "== trace: {} envelopes written to {}",
        run.trace.envelopes.len(),
        trace_path.display()
    );
    print_violations(&run.violations);
    println!("== audit: {} violation(s)", run.violations.len());
    if let Err(e) = &run.outcome {
        eprintln!("error [{}]: {e}", e.code());
    }
    Ok(run.exit_code() as u8)
}

fn cmd_token(id: &str, secret_name: &str, key_file: Option<PathBuf>) -> Result<u8> {
    let key = secret(secret_name, key_file)?;
    let id = normalize_id(id)?;
    println!("{}", derive_token(&key, &id));
    Ok(0)
}

fn cmd_gen_fixtures(
    patients: &Path,
    template: &Path,
    secret_name: &str,
    key_file: Option<PathBuf>,
    out: &Path,
) -> Result<u8> {
    let ids: Vec<_> = load_patients(patients)?.into_iter().map(|p| p.patient_id).collect();
    let triples = load_enrollment_template(template)?;
    let key = secret(secret_name, key_file)?;
    let csv = generate_enrollment(&key, &ids, &triples)?;
    fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} enrolment rows to {}", ids.len(), out.display());
    Ok(0)
}

fn cmd_check_trace(trace_path: &Path, scenario: &Path) -> Result<u8> {
    let file = fs::File::open(trace_path).with_context(|| format!("opening {}", trace_path.display()))?;
    let trace =
        TraceLog::read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", trace_path.display()))?;
    let cfg = ScenarioConfig::load(scenario)?;
    let violations = audit_trace(&cfg.load_nodes()?, &trace)?;
    print_violations(&violations);
    println!(
        "{} envelope(s), {} violation(s)",
        trace.envelopes.len(),
        violations.len()
    );
    Ok(if violations.is_empty() { 0 } else { EXIT_VIOLATIONS })
}
