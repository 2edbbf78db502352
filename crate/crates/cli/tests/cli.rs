use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const T1: &str = "e5aa44dc52f67331c3022c00653efaf0e5a307dc0a2df5bae51efc198d7d35bf";
const SECRET_ENV: &str = "FEDMESH_SECRET_CLINIC_HMAC_KEY";

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fedmesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmesh"))
        .args(args)
        .env_remove(SECRET_ENV)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dest);
        } else {
            fs::copy(entry.path(), dest).unwrap();
        }
    }
}

fn run_scenario(scenario: &Path, trace: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run-scenario",
        "--scenario",
        scenario.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    fedmesh(&args)
}

#[test]
fn canonical_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let out = run_scenario(&fixtures().join("scenario.toml"), &trace, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("Coverage: Not covered"));
    assert!(stdout.contains("Clinical Appropriateness: Appropriate now"));
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 4);
}

#[test]
fn network_transport_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let out = run_scenario(&fixtures().join("scenario.toml"), &trace, &["--transport", "network"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("Coverage: Not covered"));
}

#[test]
fn removing_specialist_target_fails_the_run() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixtures(), dir.path());
    let insurer = dir.path().join("nodes/insurer.toml");
    let cfg = fs::read_to_string(&insurer).unwrap();
    let start = cfg.find("# BEGIN specialist target").expect("marker");
    let end = cfg.find("# END specialist target").expect("marker");
    fs::write(&insurer, format!("{}{}", &cfg[..start], &cfg[end..])).unwrap();

    let out = run_scenario(&dir.path().join("scenario.toml"), &dir.path().join("t.jsonl"), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        text(&out.stderr).contains("target_not_configured"),
        "{}",
        text(&out.stderr)
    );
}

#[test]
fn injected_name_is_blocked() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = run_scenario(
        &fixtures().join("scenario.toml"),
        &trace,
        &["--inject-leak", "Marina Kovacs"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("leak_blocked"));
    // Nothing left the clinic.
    assert_eq!(fs::read_to_string(&trace).unwrap(), "");
}

#[test]
fn bypassed_guard_is_caught_by_audit() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = run_scenario(
        &fixtures().join("scenario.toml"),
        &trace,
        &["--inject-leak", "Marina Kovacs", "--bypass-guard"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stdout).contains("violation V1"));

    let out = fedmesh(&[
        "check-trace",
        trace.to_str().unwrap(),
        "--scenario",
        fixtures().join("scenario.toml").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn token_command() {
    let key_file = fixtures().join("secrets/clinic_hmac_key");
    let key_file = key_file.to_str().unwrap();
    let out = fedmesh(&["token", "CLN-0001", "--key-file", key_file]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout).trim(), T1);
    let out = fedmesh(&["token", " cln-0001 ", "--key-file", key_file]);
    assert_eq!(text(&out.stdout).trim(), T1);

    let out = Command::new(env!("CARGO_BIN_EXE_fedmesh"))
        .args(["token", "CLN-0001"])
        .env(SECRET_ENV, "demo-secret-key-000")
        .output()
        .unwrap();
    assert_eq!(text(&out.stdout).trim(), T1);

    let out = fedmesh(&["token", "CLN-0001"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn gen_fixtures_reproduces_enrolment() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let gen_into = |out: &Path, template: &Path| {
        fedmesh(&[
            "gen-fixtures",
            "--patients",
            f.join("clinic/patients.csv").to_str().unwrap(),
            "--template",
            template.to_str().unwrap(),
            "--key-file",
            f.join("secrets/clinic_hmac_key").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let template = f.join("insurer/enrollment_template.csv");
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(gen_into(&a, &template).status.code(), Some(0));
    assert_eq!(gen_into(&b, &template).status.code(), Some(0));
    let generated = fs::read_to_string(&a).unwrap();
    assert_eq!(generated, fs::read_to_string(&b).unwrap());
    assert_eq!(generated, fs::read_to_string(f.join("insurer/enrollment.csv")).unwrap());
    let plans: Vec<&str> = generated
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(plans, ["PLAN-A", "PLAN-B", "PLAN-C", "PLAN-A", "PLAN-B"]);

    let short = dir.path().join("short.csv");
    let full = fs::read_to_string(&template).unwrap();
    let header_and_four: Vec<&str> = full.lines().take(5).collect();
    fs::write(&short, header_and_four.join("\n") + "\n").unwrap();
    let out = gen_into(&dir.path().join("c.csv"), &short);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("c.csv").exists());
}

#[test]
fn check_trace_command() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = fixtures().join("scenario.toml");
    let scenario = scenario.to_str().unwrap();
    let check = |p: &Path| fedmesh(&["check-trace", p.to_str().unwrap(), "--scenario", scenario]);

    let golden = dir.path().join("golden.jsonl");
    assert_eq!(run_scenario(Path::new(scenario), &golden, &[]).status.code(), Some(0));
    assert_eq!(check(&golden).status.code(), Some(0));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(check(&empty).status.code(), Some(0));

    let tampered = dir.path().join("tampered.jsonl");
    let original = fs::read_to_string(&golden).unwrap();
    let lines: Vec<String> = original
        .lines()
        .map(|l| {
            if l.contains("\"to\":\"specialist\"") {
                l.replacen(
                    "Specialist consult request",
                    &format!("Specialist consult request {T1}"),
                    1,
                )
            } else {
                l.to_owned()
            }
        })
        .collect();
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    let out = check(&tampered);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stdout).contains("V2"));

    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, format!("{}\nnot json\n", original.lines().next().unwrap())).unwrap();
    let out = check(&broken);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("line 2"), "{}", text(&out.stderr));
}
