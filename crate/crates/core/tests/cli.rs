//! CLI surface: exit codes, manifests, the serve/replay pair over a real
//! socket, and the virtual-time live demo.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};

use stepwatch::graph::StepId;
use stepwatch::policy::{InterventionKind, InterventionSpec};
use stepwatch::simulator::Scenario;
use stepwatch::testutil::linear_graph_std;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stepwatch"))
}

fn write_fixtures(root: &Path) {
    let graph = linear_graph_std(&[10.0, 15.0, 20.0, 10.0], &[1.0, 1.5, 2.0, 1.0]);
    let mut scenario = Scenario::with_adjacent_confusion(graph.clone(), 0.85, 111);
    scenario.skip.insert(4, 1.0);
    stepwatch::io::save_graph(&root.join("graph.json"), &graph).unwrap();
    stepwatch::io::save_json(&root.join("scenario.json"), &scenario).unwrap();
    let specs = vec![
        InterventionSpec {
            target: StepId(3),
            kind: InterventionKind::RemindInAdvance,
            k_minus: 5.0,
            k_plus: 15.0,
            h: 3.0,
        },
        InterventionSpec {
            target: StepId(4),
            kind: InterventionKind::NotifyIfForgotten,
            k_minus: 15.0,
            k_plus: 15.0,
            h: 3.0,
        },
    ];
    stepwatch::io::save_json(&root.join("specs.json"), &specs).unwrap();
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_66() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["simulate", "--scenario", "nope.json", "--out", "o"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(66));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stepwatch:"), "single-line diagnostic: {err}");
}

#[test]
fn invalid_graph_exits_1_with_module_message() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixtures(tmp.path());
    // Corrupt the graph: break the outgoing probability of s1.
    let mut graph: stepwatch::graph::TransitionGraph =
        stepwatch::io::load_json(&tmp.path().join("graph.json")).unwrap();
    graph.edges[0].prob = 0.5;
    stepwatch::io::save_graph(&tmp.path().join("bad.json"), &graph).unwrap();
    let out = bin()
        .args([
            "run", "--graph", "bad.json", "--specs", "specs.json", "--frames", "missing.csv",
            "--out", "o",
        ])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    // Missing frames is caught first as 66; now supply frames and hit validation.
    assert_eq!(out.status.code(), Some(66));

    std::fs::write(tmp.path().join("frames.csv"), "t,p_1,p_2,p_3,p_4\n0.2,1,0,0,0\n").unwrap();
    let out = bin()
        .args([
            "run", "--graph", "bad.json", "--specs", "specs.json", "--frames", "frames.csv",
            "--out", "o",
        ])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("violation"), "{err}");
}

#[test]
fn run_emits_events_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixtures(tmp.path());
    assert!(bin()
        .args(["simulate", "--scenario", "scenario.json", "--count", "2", "--out", "sim"])
        .current_dir(tmp.path())
        .output()
        .unwrap()
        .status
        .success());
    let out = bin()
        .args([
            "run", "--graph", "graph.json", "--specs", "specs.json", "--frames",
            "sim/sim-0000.frames.csv", "--out", "run", "--tick", "1.0", "--n-samples", "600",
            "--seed", "5",
        ])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    // s4 is always skipped in the fixture scenario: the notification fires.
    assert!(stdout.contains("notify-if-forgotten"), "{stdout}");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["subcommand"], "run");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
    assert!(manifest["inputs"][0]["sha256"].as_str().unwrap().len() == 64);
    let outputs: Vec<&str> =
        manifest["outputs"].as_array().unwrap().iter().filter_map(|v| v.as_str()).collect();
    assert_eq!(outputs, vec!["events.ndjson", "ticks.ndjson"]);
    let events_text = std::fs::read_to_string(tmp.path().join("run/events.ndjson")).unwrap();
    let first: serde_json::Value = serde_json::from_str(events_text.lines().next().unwrap()).unwrap();
    for key in ["t", "target", "kind", "message"] {
        assert!(first.get(key).is_some(), "event log line carries `{key}`");
    }
}

#[test]
fn build_graph_accepts_a_names_map() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixtures(tmp.path());
    // Building with a full names map needs every named step observed: use a
    // skip-free copy of the fixture scenario.
    let mut scenario: Scenario =
        stepwatch::io::load_json(&tmp.path().join("scenario.json")).unwrap();
    scenario.skip.clear();
    stepwatch::io::save_json(&tmp.path().join("noskip.json"), &scenario).unwrap();
    assert!(bin()
        .args(["simulate", "--scenario", "noskip.json", "--count", "3", "--out", "sim"])
        .current_dir(tmp.path())
        .output()
        .unwrap()
        .status
        .success());
    std::fs::write(
        tmp.path().join("names.json"),
        r#"{"1": "wash hands", "2": "heat the pan", "3": "cook", "4": "clean the table"}"#,
    )
    .unwrap();
    let out = bin()
        .args([
            "build-graph", "--sessions", "sim", "--out", "model", "--names", "names.json",
            "--alpha", "0.5",
        ])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let graph: stepwatch::graph::TransitionGraph =
        stepwatch::io::load_json(&tmp.path().join("model/graph.json")).unwrap();
    assert_eq!(graph.step(StepId(2)).unwrap().name, "heat the pan");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("model/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["args"]["alpha"], "0.5");
}

#[test]
fn serve_and_replay_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixtures(tmp.path());
    assert!(bin()
        .args(["simulate", "--scenario", "scenario.json", "--count", "1", "--out", "sim"])
        .current_dir(tmp.path())
        .output()
        .unwrap()
        .status
        .success());

    let mut server = bin()
        .args([
            "serve", "--bind", "127.0.0.1:0", "--graph", "graph.json", "--specs", "specs.json",
            "--n-samples", "2000", "--seed", "7",
        ])
        .current_dir(tmp.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let addr = {
        use std::io::BufRead;
        let stdout = server.stdout.take().unwrap();
        let mut line = String::new();
        std::io::BufReader::new(stdout).read_line(&mut line).unwrap();
        line.trim().strip_prefix("listening on ").expect("address line").to_string()
    };

    let replay = |out: &str| {
        let o = bin()
            .args([
                "replay", "--endpoint", &addr, "--graph", "graph.json", "--frames",
                "sim/sim-0000.frames.csv", "--out", out, "--session", "cli",
            ])
            .current_dir(tmp.path())
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    replay("r1");
    replay("r2");
    server.kill().ok();
    server.wait().ok();

    for file in ["events.ndjson", "ticks.ndjson", "manifest.json"] {
        let a = std::fs::read(tmp.path().join("r1").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("r2").join(file)).unwrap();
        assert_eq!(a, b, "replay outputs deterministic: {file}");
    }
    let events = std::fs::read_to_string(tmp.path().join("r1/events.ndjson")).unwrap();
    assert!(events.contains("notify-if-forgotten"), "skipped s4 notified: {events}");
}

#[test]
fn live_demo_is_scriptable_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixtures(tmp.path());
    let script = "step 1\nwait 10\nstep 2\nwait 15\nstep 3\nwait 20\nend\n";
    let run = |out: &str| {
        let mut child = bin()
            .args([
                "live", "--graph", "graph.json", "--specs", "specs.json", "--out", out,
                "--tick", "1.0", "--n-samples", "600", "--seed", "3",
            ])
            .current_dir(tmp.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        child.stdin.as_mut().unwrap().write_all(script.as_bytes()).unwrap();
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success());
        String::from_utf8_lossy(&out.stdout).to_string()
    };
    let first = run("l1");
    let second = run("l2");
    assert_eq!(first, second, "stdout reruns identical");
    // The user typed steps 1..3 and never did s4: the notification fires
    // during the run-down after `end`.
    assert!(first.contains("notify-if-forgotten"), "{first}");
    let a = std::fs::read(tmp.path().join("l1/events.ndjson")).unwrap();
    let b = std::fs::read(tmp.path().join("l2/events.ndjson")).unwrap();
    assert_eq!(a, b);
}
