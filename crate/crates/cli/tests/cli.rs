use std::path::Path;
use std::process::{Command, Output};

fn containment(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_containment"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

#[test]
fn check_read_agent_passes() {
    let out = containment(&["check", "--flow", "read-agent", "--depth", "4"]);
    assert_eq!(code(&out), 0);
    let r = json(&out);
    assert_eq!(r["schema_version"], "containment-report/1");
    assert_eq!(r["passed"], true);
    assert!(r["refinement_next"]["explored_states"].as_u64().unwrap() > 0);
    assert_eq!(r["sweep"]["sequences"], 1296);
}

#[test]
fn check_with_dropped_allowlist_fails_with_tool_counterexample() {
    let out = containment(&[
        "check",
        "--flow",
        "read-agent",
        "--mutation",
        "drop-allowlist-guard",
    ]);
    assert_eq!(code(&out), 1);
    let r = json(&out);
    let cex = &r["safety_preserved"]["counterexample"];
    assert_eq!(cex["action"], r#"ToolCallAction("rm")"#);
    assert_eq!(cex["violated"][0], "ToolAllowlisted");
}

#[test]
fn check_depth_zero_warns() {
    let out = containment(&["check", "--flow", "read-agent", "--depth", "0"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(json(&out)["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn gates_exit_codes() {
    let ok = containment(&["gates", "--flow", "read-agent"]);
    assert_eq!(code(&ok), 0);
    let r = json(&ok);
    assert_eq!(r["g3"]["mutants"].as_array().unwrap().len(), 4);

    let nb = containment(&["gates", "--flow", "rag-flow-no-barrier"]);
    assert_eq!(code(&nb), 1);
    let r = json(&nb);
    assert_eq!(r["failing_gates"], serde_json::json!(["fitness"]));
    assert_eq!(r["fitness"]["conjuncts"][1]["conjunct"], "ToolAllowlisted");
    assert_eq!(r["fitness"]["conjuncts"][1]["status"], "vacuous");

    assert_eq!(
        code(&containment(&["gates", "--flow", "rag-flow-barrier"])),
        0
    );

    let id = containment(&["gates", "--flow", "read-agent", "--mutation", "identity"]);
    assert_eq!(code(&id), 1);
    assert_eq!(
        json(&id)["g3"]["survivors"],
        serde_json::json!(["identity"])
    );

    let zero = containment(&["gates", "--flow", "read-agent", "--depth", "0"]);
    assert_eq!(code(&zero), 2);
}

#[test]
fn usage_and_load_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "provenance = 3\n").unwrap();
    let bad = bad.to_str().unwrap();
    assert_eq!(code(&containment(&["run", "--flow", bad])), 2);
    assert_eq!(code(&containment(&["check", "--flow", "no-such-flow"])), 2);
    assert_eq!(
        code(&containment(&[
            "run",
            "--flow",
            "read-agent",
            "--strategy",
            "psychic"
        ])),
        2
    );
    assert_eq!(
        code(&containment(&[
            "check",
            "--flow",
            "read-agent",
            "--mutation",
            "nope"
        ])),
        2
    );
    assert_eq!(code(&containment(&["frobnicate"])), 2);
    assert_eq!(
        code(&containment(&[
            "check",
            "--flow",
            "read-agent",
            "--prefix-mode",
            "loose"
        ])),
        2
    );
}

#[test]
fn run_scripted_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.actions");
    std::fs::write(
        &script,
        "# mixed\nReadPathAction(\"/ws/a\")\nReadPathAction(\"/etc/pw\")\nToolCallAction(\"search\")\n",
    )
    .unwrap();
    let strategy = format!("scripted:{}", script.display());
    let out = containment(&[
        "run",
        "--flow",
        "read-agent",
        "--strategy",
        &strategy,
        "--steps",
        "3",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[2].contains(r#""event":"NoEffect""#));
    assert!(lines[1].contains(r#"ReadEvent(\"/ws/a\")"#));

    let empty = containment(&["run", "--flow", "read-agent", "--steps", "0"]);
    assert_eq!(code(&empty), 0);
    assert_eq!(stdout(&empty).lines().count(), 1);
}

#[test]
fn loop_faults_surface_in_run_and_sweep() {
    let sweep = containment(&[
        "sweep",
        "--flow",
        "read-agent",
        "--mutation",
        "drop-allowlist-guard",
    ]);
    assert_eq!(code(&sweep), 1);
    let r = json(&sweep);
    let seq = r["violation"]["sequence"].as_array().unwrap();
    assert!(seq.contains(&serde_json::json!(r#"ToolCallAction("rm")"#)));

    let run = containment(&[
        "run",
        "--flow",
        "read-agent",
        "--strategy",
        "adversarial",
        "--steps",
        "60",
        "--seed",
        "1",
        "--mutation",
        "drop-allowlist-guard",
    ]);
    assert_eq!(code(&run), 1);

    assert_eq!(
        code(&containment(&[
            "sweep",
            "--flow",
            "read-agent",
            "--depth",
            "0"
        ])),
        0
    );
}

#[test]
fn outputs_are_deterministic() {
    for args in [
        &[
            "run",
            "--flow",
            "read-agent",
            "--seed",
            "11",
            "--strategy",
            "adversarial",
        ][..],
        &["check", "--flow", "rag-flow-barrier"][..],
        &["gates", "--flow", "read-agent"][..],
    ] {
        assert_eq!(
            stdout(&containment(args)),
            stdout(&containment(args)),
            "{args:?}"
        );
    }
}

fn write_log(dir: &Path, seed: &str) -> String {
    let log = dir.join(format!("run-{seed}.jsonl"));
    let log_s = log.to_str().unwrap().to_string();
    let out = containment(&[
        "run",
        "--flow",
        "read-agent",
        "--seed",
        seed,
        "--steps",
        "30",
        "--out",
        &log_s,
    ]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    log_s
}

#[test]
fn replay_round_trip_and_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let log = write_log(dir.path(), "5");
    let ok = containment(&["replay", "--flow", "read-agent", &log]);
    assert_eq!(code(&ok), 0);
    assert_eq!(json(&ok)["records"], 30);

    let text = std::fs::read_to_string(&log).unwrap();
    let tampered = text.replacen("\"event\":\"NoEffect\"", "\"event\":\"StepEvent\"", 1);
    assert_ne!(tampered, text);
    std::fs::write(&log, tampered).unwrap();
    let bad = containment(&["replay", "--flow", "read-agent", &log]);
    assert_eq!(code(&bad), 1);
    assert_eq!(json(&bad)["mismatch"]["column"], "event");

    let other = containment(&[
        "replay",
        "--flow",
        "rag-flow-barrier",
        &write_log(dir.path(), "6"),
    ]);
    assert_eq!(code(&other), 1);
    assert_eq!(json(&other)["constants_match"], false);
}

#[test]
fn bare_prefix_mode_admits_sibling_directories() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.actions");
    std::fs::write(&script, "ReadPathAction(\"/wsx/escape\")\n").unwrap();
    let strategy = format!("scripted:{}", script.display());
    let guarded = containment(&[
        "run",
        "--flow",
        "read-agent",
        "--strategy",
        &strategy,
        "--steps",
        "1",
    ]);
    assert!(stdout(&guarded)
        .lines()
        .nth(1)
        .unwrap()
        .contains(r#""event":"NoEffect""#));
    let bare = containment(&[
        "run",
        "--flow",
        "read-agent",
        "--strategy",
        &strategy,
        "--steps",
        "1",
        "--prefix-mode",
        "bare",
    ]);
    assert_eq!(code(&bare), 0);
    assert!(stdout(&bare).lines().nth(1).unwrap().contains("ReadEvent"));
}
