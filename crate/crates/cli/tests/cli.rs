// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

/// Public key for the signing seed 0x2a repeated, which signed
/// `enclave1.signed.json`.
const TEST_VENDOR_KEY: &str = "197f6b23e16c8532c6abc838facd5ea789be0c76b2920334039bfa8b3d368d61";

fn examples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/examples")
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tee-fabric")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn honest_scenario_exits_zero_and_trace_ends_completed() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("run.jsonl");
    let scenario = examples().join("scenarios/honest-two-rack.json");
    let out = cli(&["run", "--scenario", path(&scenario), "--trace-out", path(&trace)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["outcome"], "Completed");
    assert_eq!(report["passed"], true);
    let text = fs::read_to_string(&trace).unwrap();
    let last: Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["event"], "state");
    assert_eq!(last["what"], "JobCompleted");
}

#[test]
fn every_example_scenario_meets_its_expectation() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run".to_string(), "--jobs".into(), "4".into(), "--trace-out".into(), path(dir.path()).into()];
    let mut count = 0;
    for entry in fs::read_dir(examples().join("scenarios")).unwrap() {
        let p = entry.unwrap().path();
        args.extend(["--scenario".into(), path(&p).to_owned()]);
        count += 1;
    }
    let out = cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let reports = json(&out);
    assert_eq!(reports.as_array().unwrap().len(), count);
    assert!(reports.as_array().unwrap().iter().all(|r| r["passed"] == true && r["outcome"] != "LEAK"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), count);
}

#[test]
fn missing_topology_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.json");
    fs::write(
        &s,
        r#"{"strategy": "honest", "topology": "nowhere.json", "manifests": ["m.json"], "expected": "Completed"}"#,
    )
    .unwrap();
    assert_eq!(cli(&["run", "--scenario", path(&s)]).status.code(), Some(2));
    fs::write(&s, r#"{"strategy": "teleport", "expected": "Blocked"}"#).unwrap();
    assert_eq!(cli(&["run", "--scenario", path(&s)]).status.code(), Some(2));
    fs::write(&s, "{").unwrap();
    assert_eq!(cli(&["run", "--scenario", path(&s)]).status.code(), Some(2));
    assert_eq!(cli(&["run", "--scenario", path(&dir.path().join("absent.json"))]).status.code(), Some(2));
}

#[test]
fn mismatch_and_strict_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.json");
    fs::write(&s, r#"{"strategy": "fake_interrupt", "expected": "Blocked"}"#).unwrap();
    let out = cli(&["run", "--scenario", path(&s)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["outcome"], "Harmless");

    let harmless = examples().join("scenarios/attack-fake-interrupt.json");
    assert_eq!(cli(&["run", "--scenario", path(&harmless)]).status.code(), Some(0));
    assert_eq!(cli(&["run", "--strict", "--scenario", path(&harmless)]).status.code(), Some(1));
}

#[test]
fn seed_flag_overrides_and_traces_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = examples().join("scenarios/honest-single-rack.json");
    let run = |seed: &str, name: &str| {
        let trace = dir.path().join(name);
        let out = cli(&["run", "--scenario", path(&scenario), "--seed", seed, "--trace-out", path(&trace)]);
        assert_eq!(out.status.code(), Some(0));
        assert_eq!(json(&out)["seed"], seed.parse::<u64>().unwrap());
        fs::read(trace).unwrap()
    };
    let a = run("99", "a.jsonl");
    assert_eq!(a, run("99", "b.jsonl"));
    assert_ne!(a, run("100", "c.jsonl"));
}

#[test]
fn verify_manifest_exit_codes() {
    let signed = examples().join("manifests/enclave1.signed.json");
    let out = cli(&["verify-manifest", path(&signed), "--vendor-key", TEST_VENDOR_KEY]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["valid"], true);

    let dir = tempfile::tempdir().unwrap();
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, fs::read_to_string(&signed).unwrap().replace("\"Cores\":20", "\"Cores\":40")).unwrap();
    assert_eq!(cli(&["verify-manifest", path(&tampered), "--vendor-key", TEST_VENDOR_KEY]).status.code(), Some(1));

    let other_key = "00".repeat(32);
    let unsigned = examples().join("manifests/enclave1.json");
    assert_eq!(cli(&["verify-manifest", path(&signed), "--vendor-key", &other_key]).status.code(), Some(1));
    assert_eq!(cli(&["verify-manifest", path(&unsigned), "--vendor-key", TEST_VENDOR_KEY]).status.code(), Some(1));

    let malformed = dir.path().join("malformed.json");
    fs::write(&malformed, "{\"Enclave\": ").unwrap();
    assert_eq!(cli(&["verify-manifest", path(&malformed), "--vendor-key", TEST_VENDOR_KEY]).status.code(), Some(2));
    assert_eq!(cli(&["verify-manifest", path(&signed), "--vendor-key", "beef"]).status.code(), Some(2));
}

#[test]
fn sign_then_verify_round_trip() {
    let seed = "07".repeat(32);
    let out = cli(&["sign-manifest", path(&examples().join("manifests/cpu-ai.json")), "--key-seed", &seed]);
    assert_eq!(out.status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let signed = dir.path().join("signed.json");
    fs::write(&signed, &out.stdout).unwrap();
    let key = json(&cli(&["public-key", "--key-seed", &seed]))["public_key"].as_str().unwrap().to_owned();
    assert_eq!(cli(&["verify-manifest", path(&signed), "--vendor-key", &key]).status.code(), Some(0));
}

#[test]
fn capacity_reference_numbers() {
    let one = json(&cli(&["capacity"]));
    assert_eq!(one["capacity"]["streams_per_core"], 19);
    assert!((one["capacity"]["jobs_per_sec_per_core"].as_f64().unwrap() - 6.97).abs() < 1e-9);
    assert_eq!(one["convention"], "binary");

    let many = json(&cli(&["capacity", "--cores", "48", "--transfer-bytes", "4096"]));
    assert_eq!(many["capacity"]["total_streams"], 912);
    assert_eq!(many["capacity"]["total_jobs_per_sec"], 334);
    assert_eq!(many["transfer_overhead"]["blocks"], 1);
    assert_eq!(many["transfer_overhead"]["added_latency_us"], 1.47);

    assert_eq!(json(&cli(&["capacity", "--convention", "decimal"]))["capacity"]["streams_per_core"], 18);

    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    fs::write(&params, serde_json::to_vec(&many["params"]).unwrap()).unwrap();
    let from_file = json(&cli(&["capacity", "--params", path(&params)]));
    assert_eq!(from_file["capacity"], many["capacity"]);
    assert_eq!(cli(&["capacity", "--stream-rate", "0"]).status.code(), Some(2));
}

#[test]
fn trace_filters_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let scenario = examples().join("scenarios/honest-two-rack.json");
    assert_eq!(cli(&["run", "--scenario", path(&scenario), "--trace-out", path(&trace)]).status.code(), Some(0));
    let total = fs::read_to_string(&trace).unwrap().lines().count() as u64;

    let summary = json(&cli(&["trace", path(&trace), "--summary"]));
    assert_eq!(summary["events"], total);
    let by_type = summary["by_type"].as_object().unwrap();
    assert_eq!(by_type.values().map(|v| v.as_u64().unwrap()).sum::<u64>(), total);

    let states = cli(&["trace", path(&trace), "--event", "state", "--job", "1"]);
    assert_eq!(states.status.code(), Some(0));
    let lines: Vec<Value> =
        String::from_utf8(states.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|v| v["event"] == "state" && v["job"] == 1));
    assert!(lines.iter().any(|v| v["what"] == "JobCompleted"));

    let junk = dir.path().join("junk.jsonl");
    fs::write(&junk, "not json\n").unwrap();
    assert_eq!(cli(&["trace", path(&junk)]).status.code(), Some(2));
}

#[test]
fn attestation_demo_cases_hold() {
    let out = cli(&["attest-demo", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json(&out);
    let cases = v["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 5);
    assert!(cases.iter().all(|c| c["ok"] == true));
    assert_eq!(cases[0]["verdict"], "Accept");
    assert_eq!(v["report"]["FDU"]["Config"].as_array().unwrap().len(), 1);
}
