//! Black-box checks of the `tcx` binary: exit codes, offline image and
//! boot commands, configuration precedence, and scenario output. Anything
//! needing a live testbed lives in the acceptance gate instead.

use std::path::Path;
use std::process::{Command, Output};

use tcx_core::sim::{run_scenario, SCENARIOS};

const EXIT_VERIFY: i32 = 2;
const EXIT_TRANSPORT: i32 = 3;
const EXIT_USAGE: i32 = 4;

fn tcx_in(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tcx"));
    cmd.current_dir(dir).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run tcx")
}

fn tcx(dir: &Path, args: &[&str]) -> Output {
    let state = dir.join("state");
    let mut full = vec!["--state-dir", state.to_str().unwrap()];
    full.extend_from_slice(args);
    tcx_in(dir, &full, &[])
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).trim_end().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn assert_exit(out: &Output, code: i32, what: &str) {
    assert_eq!(out.status.code(), Some(code), "{what}: stderr: {}", stderr(out));
}

#[test]
fn seal_inspect_verify_and_catch_tampering_offline() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("app"), b"application bytes").unwrap();
    std::fs::write(dir.path().join("data"), vec![7u8; 5000]).unwrap();

    // Sealing records the image key in the owner's state.
    assert_exit(&tcx(dir.path(), &["owner", "init", "--name", "alice"]), 0, "init");

    let out = tcx(
        dir.path(),
        &[
            "image", "seal",
            "--layer", "app.bin=app",
            "--layer", "data.bin=data",
            "--out", "demo.tcximg",
            "--key-out", "demo.key",
        ],
    );
    assert_exit(&out, 0, "seal");
    let image_id = stdout(&out);
    assert_eq!(image_id.len(), 64, "image id is 32 bytes hex: {image_id}");

    let out = tcx(dir.path(), &["image", "inspect", "demo.tcximg"]);
    assert_exit(&out, 0, "inspect");
    let report = stdout(&out);
    assert!(report.contains(&image_id), "inspect names the image id:\n{report}");
    assert!(report.contains("app.bin"), "inspect lists layers:\n{report}");
    assert!(report.contains("data.bin"), "inspect lists layers:\n{report}");

    let out = tcx(dir.path(), &["image", "verify", "demo.tcximg", "--key-file", "demo.key"]);
    assert_exit(&out, 0, "verify intact");

    // Flip one byte near the end (inside block data or its tag).
    let path = dir.path().join("demo.tcximg");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();

    let out = tcx(dir.path(), &["image", "verify", "demo.tcximg", "--key-file", "demo.key"]);
    assert_exit(&out, EXIT_VERIFY, "verify tampered");
    assert!(
        stderr(&out).contains("block"),
        "failure names the block: {}",
        stderr(&out)
    );
}

#[test]
fn boot_measure_is_deterministic_and_input_sensitive() {
    let dir = tempfile::tempdir().unwrap();

    let a = tcx(dir.path(), &["boot", "measure", "--preset", "rootvm"]);
    assert_exit(&a, 0, "preset rootvm");
    let b = tcx(dir.path(), &["boot", "measure", "--preset", "rootvm"]);
    assert_eq!(stdout(&a), stdout(&b), "same preset, same measurement");
    assert_eq!(stdout(&a).len(), 64);

    let c = tcx(dir.path(), &["boot", "measure", "--preset", "scvm"]);
    assert_exit(&c, 0, "preset scvm");
    assert_ne!(stdout(&a), stdout(&c), "different images measure differently");

    std::fs::write(dir.path().join("fw"), b"firmware").unwrap();
    std::fs::write(dir.path().join("kernel"), b"kernel").unwrap();
    std::fs::write(dir.path().join("params"), b"console=off").unwrap();
    std::fs::write(dir.path().join("fs"), vec![3u8; 9000]).unwrap();
    let files = [
        "boot", "measure",
        "--firmware", "fw",
        "--kernel", "kernel",
        "--params", "params",
        "--fs", "fs",
    ];
    let d = tcx(dir.path(), &files);
    assert_exit(&d, 0, "measure from files");
    assert_eq!(stdout(&d).len(), 64);

    std::fs::write(dir.path().join("kernel"), b"kernel-v2").unwrap();
    let e = tcx(dir.path(), &files);
    assert_ne!(stdout(&d), stdout(&e), "kernel change moves the measurement");

    let out = tcx(dir.path(), &["boot", "measure"]);
    assert_exit(&out, EXIT_USAGE, "neither preset nor files");
}

#[test]
fn usage_mistakes_exit_4() {
    let dir = tempfile::tempdir().unwrap();

    let out = tcx(dir.path(), &["--bogus-flag"]);
    assert_exit(&out, EXIT_USAGE, "unknown flag");

    let out = tcx(dir.path(), &[]);
    assert_exit(&out, EXIT_USAGE, "missing subcommand");

    let out = tcx(dir.path(), &["owner", "show"]);
    assert_exit(&out, EXIT_USAGE, "owner state missing");
    assert!(stderr(&out).contains("owner init"), "hints at init: {}", stderr(&out));

    let out = tcx(dir.path(), &["vm", "status", "--vm", "notahexid"]);
    assert_exit(&out, EXIT_USAGE, "malformed vm id");

    let out = tcx(dir.path(), &["sim", "run", "no-such-scenario"]);
    assert_exit(&out, EXIT_USAGE, "unknown scenario");
    assert!(stderr(&out).contains("sim list"), "hints at the list: {}", stderr(&out));

    let out = tcx(dir.path(), &["image", "verify", "missing.tcximg"]);
    assert_exit(&out, EXIT_USAGE, "missing file");
}

#[test]
fn unreachable_testbed_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state");

    let out = tcx(dir.path(), &["owner", "init", "--name", "alice"]);
    assert_exit(&out, 0, "owner init");

    // No endpoint table at all: the error says how to start one.
    let out = tcx(dir.path(), &["owner", "enroll"]);
    assert_exit(&out, EXIT_TRANSPORT, "no endpoint table");
    assert!(stderr(&out).contains("testbed up"), "{}", stderr(&out));

    // A table pointing at a dead port: connection refused.
    std::fs::write(state.join("endpoints.net"), "deploy 127.0.0.1:1\n").unwrap();
    let out = tcx(dir.path(), &["owner", "enroll"]);
    assert_exit(&out, EXIT_TRANSPORT, "dead endpoint");
}

#[test]
fn owner_init_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();

    let first = tcx(dir.path(), &["owner", "init", "--name", "alice"]);
    assert_exit(&first, 0, "first init");

    let again = tcx(dir.path(), &["owner", "init", "--name", "alice"]);
    assert_exit(&again, EXIT_USAGE, "second init");

    let forced = tcx(dir.path(), &["owner", "init", "--name", "alice", "--force"]);
    assert_exit(&forced, 0, "forced init");
    assert_ne!(stdout(&first), stdout(&forced), "forced init mints a fresh key");
}

#[test]
fn settings_resolve_flag_over_env_over_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tcx.toml"), "state_dir = \"from-config\"\n").unwrap();

    // Config file alone decides.
    let out = tcx_in(dir.path(), &["owner", "init", "--name", "a"], &[]);
    assert_exit(&out, 0, "init via config");
    assert!(dir.path().join("from-config/owner.tcxo").exists());

    // Environment beats the config file.
    let out = tcx_in(
        dir.path(),
        &["owner", "init", "--name", "a"],
        &[("TCX_STATE_DIR", "from-env")],
    );
    assert_exit(&out, 0, "init via env");
    assert!(dir.path().join("from-env/owner.tcxo").exists());

    // A flag beats both.
    let out = tcx_in(
        dir.path(),
        &["--state-dir", "from-flag", "owner", "init", "--name", "a"],
        &[("TCX_STATE_DIR", "from-env-2")],
    );
    assert_exit(&out, 0, "init via flag");
    assert!(dir.path().join("from-flag/owner.tcxo").exists());
    assert!(!dir.path().join("from-env-2").exists());

    // Unknown keys in the config file are refused, not ignored.
    std::fs::write(dir.path().join("tcx.toml"), "state_dri = \"oops\"\n").unwrap();
    let out = tcx_in(dir.path(), &["owner", "show"], &[]);
    assert_exit(&out, EXIT_USAGE, "unknown config key");
    assert!(stderr(&out).contains("state_dri"), "{}", stderr(&out));

    // An explicitly named config file must exist.
    let out = tcx_in(dir.path(), &["--config", "absent.toml", "owner", "show"], &[]);
    assert_exit(&out, EXIT_USAGE, "missing explicit config");
}

#[test]
fn sim_run_prints_the_library_transcript() {
    let dir = tempfile::tempdir().unwrap();

    let listed = tcx(dir.path(), &["sim", "list"]);
    assert_exit(&listed, 0, "sim list");
    let names: Vec<&str> = SCENARIOS.iter().copied().collect();
    for name in &names {
        assert!(stdout(&listed).contains(name), "sim list misses {name}");
    }

    let outcome = run_scenario("full-lifecycle", 3).unwrap();
    let mut expected = String::new();
    for line in &outcome.log {
        expected.push_str(line);
        expected.push('\n');
    }
    expected.push_str(&format!("transcript {}\n", hex::encode(outcome.transcript_hash)));

    let out = tcx(dir.path(), &["sim", "run", "full-lifecycle", "--seed", "3"]);
    assert_exit(&out, 0, "sim run");
    assert_eq!(String::from_utf8_lossy(&out.stdout), expected, "cli output == library run");

    // A failing scenario still prints its refusal in the log but the step
    // error carries exit code 2.
    let out = tcx(dir.path(), &["sim", "run", "tamper-image", "--seed", "1"]);
    assert_exit(&out, 0, "adversarial scenarios conclude normally");
    assert!(
        stdout(&out).contains("refused [integrity-failure]"),
        "{}",
        stdout(&out)
    );
}
