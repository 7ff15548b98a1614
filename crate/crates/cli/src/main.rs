// SPDX-License-Identifier: Apache-2.0

//! `tee-fabric` command line: scenario runner, manifest tools, attestation
//! demo, capacity calculator and trace inspection.
//!
//! Exit codes: 0 success, 1 mismatch / LEAK / failed verification, 2 bad
//! input. JSON goes to stdout, diagnostics to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tee_fabric::attestation::{
    pba_events_for, verify_report, ChallengeBook, ConfigWhitelist, DeviceRot, FduConfig, FduSection, PbaEvent,
    Requirement, RevocationList, SecurityProperties, Verdict,
};
use tee_fabric::capacity::{sc_capacity, transfer_overhead, UnitConvention, DEFAULT_BLOCK_SIZE};
use tee_fabric::crypto::{hash, PublicKey, SigningKeyPair};
use tee_fabric::manifest::{parse_manifest, verify_manifest, DeviceKind, Policy};
use tee_fabric::scenario::{self, Scenario, ScenarioOutcome, ScenarioReport};
use tee_fabric::ScCapacityParams;

const OK: u8 = 0;
const FAILED: u8 = 1;
const BAD_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "tee-fabric", version, about = "Hybrid distributed-TEE data center simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenario files and compare each outcome with its expectation.
    Run(RunArgs),
    /// Check a manifest's digest and vendor signature.
    VerifyManifest {
        path: PathBuf,
        /// Vendor public key, 32 bytes hex.
        #[arg(long)]
        vendor_key: String,
    },
    /// Sign a manifest with a key derived from a 32-byte hex seed; the
    /// signed document goes to stdout.
    SignManifest {
        path: PathBuf,
        #[arg(long)]
        key_seed: String,
    },
    /// Print the public key for a 32-byte hex signing seed.
    PublicKey {
        #[arg(long)]
        key_seed: String,
    },
    /// Controller capacity and transfer-overhead arithmetic.
    Capacity(CapacityArgs),
    /// Filter or summarise a JSONL trace.
    Trace(TraceArgs),
    /// Walk one device through boot, report and verification, plus the
    /// standard rejections.
    AttestDemo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file; repeat for several.
    #[arg(long, required = true)]
    scenario: Vec<PathBuf>,
    /// Overrides the seed in every scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Trace file, or a directory when several scenarios run.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Count Harmless outcomes as failures.
    #[arg(long)]
    strict: bool,
    /// Worker threads; each scenario runs in its own world.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    /// 1 GB = 1024 MB.
    Binary,
    /// 1 GB = 1000 MB.
    Decimal,
}

#[derive(Args)]
struct CapacityArgs {
    /// JSON file with all parameters; flags below override its fields.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Convention::Binary)]
    convention: Convention,
    #[arg(long)]
    cores: Option<u32>,
    /// Encryption bandwidth per core, MB/s.
    #[arg(long)]
    enc_bw: Option<f64>,
    /// Copy bandwidth per core, MB/s.
    #[arg(long)]
    copy_bw: Option<f64>,
    /// Per-stream rate, MB/s.
    #[arg(long)]
    stream_rate: Option<f64>,
    /// Model size, MB.
    #[arg(long)]
    model_size: Option<f64>,
    /// Staging buffer, MB.
    #[arg(long)]
    buffer: Option<f64>,
    /// Also report the overhead of moving this many bytes.
    #[arg(long)]
    transfer_bytes: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    block_size: u64,
    /// Per-block encryption latency in microseconds.
    #[arg(long, default_value_t = 1.47)]
    block_latency: f64,
}

#[derive(Args)]
struct TraceArgs {
    /// JSONL trace file, `-` for stdin.
    path: PathBuf,
    /// Keep only events of this type (send, deliver, state, ...).
    #[arg(long)]
    event: Option<String>,
    /// Keep only events that mention this job id.
    #[arg(long)]
    job: Option<u32>,
    /// Print counts per event type instead of the events.
    #[arg(long)]
    summary: bool,
}

/// A failure that maps to an exit code, with a diagnostic for stderr.
struct Exit(u8, String);

fn bad_input(msg: impl Into<String>) -> Exit {
    Exit(BAD_INPUT, msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::VerifyManifest { path, vendor_key } => cmd_verify_manifest(&path, &vendor_key),
        Command::SignManifest { path, key_seed } => cmd_sign_manifest(&path, &key_seed),
        Command::PublicKey { key_seed } => {
            signing_key(&key_seed).map(|k| print_json(&json!({ "public_key": k.public().to_hex() })))
        }
        Command::Capacity(a) => cmd_capacity(&a),
        Command::Trace(a) => cmd_trace(&a),
        Command::AttestDemo { seed } => cmd_attest_demo(seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, msg)) => {
            eprintln!("tee-fabric: {msg}");
            ExitCode::from(code)
        }
    }
}

fn print_json(v: &Value) -> u8 {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON value"));
    OK
}

fn cmd_run(a: &RunArgs) -> Result<u8, Exit> {
    let scenarios = a
        .scenario
        .iter()
        .map(|p| Scenario::load(p).map_err(|e| bad_input(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let trace_paths: Vec<Option<PathBuf>> = match (&a.trace_out, scenarios.len()) {
        (None, _) => vec![None; scenarios.len()],
        (Some(p), 1) => vec![Some(p.clone())],
        (Some(dir), _) => {
            fs::create_dir_all(dir).map_err(|e| bad_input(format!("{}: {e}", dir.display())))?;
            a.scenario.iter().map(|s| Some(dir.join(trace_name(s)))).collect()
        }
    };

    let results: Mutex<Vec<Option<Result<ScenarioReport, String>>>> = Mutex::new(vec![None; scenarios.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(s) = scenarios.get(i) else { break };
        let r = scenario::run(s, a.seed).map_err(|e| e.to_string()).and_then(|(report, world)| {
            if let Some(path) = &trace_paths[i] {
                fs::write(path, world.trace_jsonl()).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(report)
        });
        results.lock().expect("no poisoned workers")[i] = Some(r);
    };
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.clamp(1, scenarios.len().max(1)) {
            scope.spawn(worker);
        }
    });

    let mut reports = Vec::new();
    let mut code = OK;
    for (path, r) in a.scenario.iter().zip(results.into_inner().expect("no poisoned workers")) {
        match r.expect("every scenario ran") {
            Ok(report) => {
                let passed = report.passed(a.strict) && report.outcome != ScenarioOutcome::Leak;
                if !passed {
                    code = code.max(FAILED);
                    eprintln!("{}: got {}, expected {}", path.display(), report.outcome, report.expected);
                }
                let mut v = serde_json::to_value(&report).expect("report serializes");
                v["passed"] = json!(passed);
                reports.push(v);
            }
            Err(e) => {
                code = BAD_INPUT;
                eprintln!("{}: {e}", path.display());
                reports.push(json!({ "scenario": path, "error": e }));
            }
        }
    }
    if reports.len() == 1 {
        print_json(&reports.pop().expect("one report"));
    } else {
        print_json(&Value::Array(reports));
    }
    Ok(code)
}

fn trace_name(scenario: &Path) -> String {
    let stem = scenario.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
    format!("{stem}.jsonl")
}

fn read(path: &Path) -> Result<Vec<u8>, Exit> {
    fs::read(path).map_err(|e| bad_input(format!("{}: {e}", path.display())))
}

fn signing_key(seed_hex: &str) -> Result<SigningKeyPair, Exit> {
    let bytes = hex32(seed_hex).ok_or_else(|| bad_input("key seed must be 32 bytes of hex"))?;
    Ok(SigningKeyPair::from_seed(bytes))
}

fn hex32(s: &str) -> Option<[u8; 32]> {
    let s = s.trim();
    hex::decode(s.strip_prefix("0x").unwrap_or(s)).ok()?.try_into().ok()
}

fn cmd_verify_manifest(path: &Path, vendor_key: &str) -> Result<u8, Exit> {
    let key = PublicKey(hex32(vendor_key).ok_or_else(|| bad_input("vendor key must be 32 bytes of hex"))?);
    let m = parse_manifest(&read(path)?).map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
    let valid = verify_manifest(&m, &key);
    print_json(&json!({
        "manifest": path,
        "enclave": m.enclave_name,
        "manifest_id": m.manifest_id.to_hex(),
        "valid": valid,
    }));
    Ok(if valid { OK } else { FAILED })
}

fn cmd_sign_manifest(path: &Path, seed: &str) -> Result<u8, Exit> {
    let key = signing_key(seed)?;
    let m = parse_manifest(&read(path)?).map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
    let mut out = io::stdout().lock();
    out.write_all(&m.sign(&key).to_json()).and_then(|()| writeln!(out)).map_err(|e| Exit(FAILED, e.to_string()))?;
    Ok(OK)
}

fn cmd_capacity(a: &CapacityArgs) -> Result<u8, Exit> {
    let convention = match a.convention {
        Convention::Binary => UnitConvention::Binary,
        Convention::Decimal => UnitConvention::Decimal,
    };
    let mut p: ScCapacityParams = match &a.params {
        Some(path) => serde_json::from_slice(&read(path)?).map_err(|e| bad_input(format!("{}: {e}", path.display())))?,
        None => ScCapacityParams::reference(convention, 1),
    };
    let overrides = [
        (&mut p.enc_bw_per_core, a.enc_bw),
        (&mut p.copy_bw_per_core, a.copy_bw),
        (&mut p.per_stream_rate, a.stream_rate),
        (&mut p.model_size, a.model_size),
        (&mut p.buffer, a.buffer),
    ];
    for (field, v) in overrides {
        if let Some(v) = v {
            *field = v;
        }
    }
    if let Some(c) = a.cores {
        p.cores = c;
    }
    let cap = sc_capacity(&p).map_err(|e| bad_input(e.to_string()))?;
    let mut out = json!({ "params": p, "capacity": cap });
    if a.params.is_none() {
        out["convention"] = json!(convention);
    }
    if let Some(bytes) = a.transfer_bytes {
        let o = transfer_overhead(bytes, a.block_size, a.block_latency).map_err(|e| bad_input(e.to_string()))?;
        out["transfer_overhead"] = json!({ "bytes": bytes, "block_size": a.block_size, "blocks": o.blocks, "added_latency_us": o.added_latency });
    }
    Ok(print_json(&out))
}

fn mentions_job(v: &Value, job: u32) -> bool {
    let id = json!(job);
    v.get("job") == Some(&id) || v.get("taint").or_else(|| v.get("jobs")).and_then(Value::as_array).is_some_and(|a| a.contains(&id))
}

fn cmd_trace(a: &TraceArgs) -> Result<u8, Exit> {
    let input: Box<dyn BufRead> = if a.path == Path::new("-") {
        Box::new(io::stdin().lock())
    } else {
        Box::new(io::BufReader::new(fs::File::open(&a.path).map_err(|e| bad_input(format!("{}: {e}", a.path.display())))?))
    };
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut out = io::stdout().lock();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| bad_input(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| bad_input(format!("line {}: {e}", n + 1)))?;
        let event = v.get("event").and_then(Value::as_str).unwrap_or("?").to_owned();
        if a.event.as_ref().is_some_and(|e| *e != event) || a.job.is_some_and(|j| !mentions_job(&v, j)) {
            continue;
        }
        if a.summary {
            *counts.entry(event).or_default() += 1;
        } else {
            writeln!(out, "{line}").map_err(|e| Exit(FAILED, e.to_string()))?;
        }
    }
    if a.summary {
        let total: u64 = counts.values().sum();
        print_json(&json!({ "events": total, "by_type": counts }));
    }
    Ok(OK)
}

fn cmd_attest_demo(seed: u64) -> Result<u8, Exit> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let manufacturer = SigningKeyPair::generate(&mut rng);
    let firmware = hash(b"demo accelerator firmware 1.0");
    let props: SecurityProperties = [(Policy::Debug, false), (Policy::MemIsolation, true)].into_iter().collect();
    let mut whitelist = ConfigWhitelist::new(manufacturer.public());
    whitelist.allow_firmware("1.0", firmware);
    let leaf = whitelist.allow_configuration(&props);
    whitelist.sign(&manufacturer);
    let mut revoked = RevocationList::default();

    let fdu = FduSection {
        fdu_support: true,
        numbers: 4,
        config: vec![FduConfig { bar: 0xffff_0000, stream_id: "0xc1".into(), core_config: 4, memory: 1 << 30 }],
    };
    let req = Requirement {
        device_type: DeviceKind::AiAccelerator,
        policies: [Policy::MemIsolation].into_iter().collect(),
        cores: 4,
        memory: 1 << 30,
    };
    let boot = |rng: &mut rand_chacha::ChaCha20Rng, events: &[PbaEvent]| {
        let mut dev = DeviceRot::manufacture(rng, "Manuf1", &manufacturer, DeviceKind::AiAccelerator, "1.0", props.clone());
        dev.measured_boot(&firmware, events).expect("fresh device boots");
        dev
    };
    let tenant_key = PublicKey([0x11; 32]);
    let mut book = ChallengeBook::default();
    let challenge = book.issue(&mut rng);
    let honest_events = pba_events_for(&props);
    let dev = boot(&mut rng, &honest_events);
    let report = dev.generate_report(&challenge, tenant_key, fdu.clone()).map_err(|e| Exit(FAILED, e.to_string()))?;

    let mut cases = Vec::new();
    let mut check = |name: &str, verdict: Verdict, expected: Verdict| {
        cases.push(json!({ "case": name, "verdict": verdict, "expected": expected, "ok": verdict == expected }));
    };
    check("honest", verify_report(&report, &req, &whitelist, &revoked, &challenge), Verdict::Accept);

    let fresh = book.issue(&mut rng);
    check(
        "replayed report",
        verify_report(&report, &req, &whitelist, &revoked, &fresh),
        Verdict::Reject(tee_fabric::attestation::RejectReason::Stale),
    );

    let mut events = honest_events.clone();
    events[0] = PbaEvent::new(Policy::Debug.name(), true);
    let debug_dev = boot(&mut rng, &events);
    let r = debug_dev.generate_report(&fresh, tenant_key, fdu.clone()).map_err(|e| Exit(FAILED, e.to_string()))?;
    check(
        "debug port left open",
        verify_report(&r, &req, &whitelist, &revoked, &fresh),
        Verdict::Reject(tee_fabric::attestation::RejectReason::BadMeasurement),
    );

    let mut forged = report.clone();
    forged.fdu.config[0].memory *= 2;
    check(
        "edited report",
        verify_report(&forged, &req, &whitelist, &revoked, &challenge),
        Verdict::Reject(tee_fabric::attestation::RejectReason::BadQuote),
    );

    revoked.revoke_firmware("1.0");
    check(
        "revoked firmware",
        verify_report(&report, &req, &whitelist, &revoked, &challenge),
        Verdict::Reject(tee_fabric::attestation::RejectReason::Revoked),
    );

    let all_ok = cases.iter().all(|c| c["ok"] == json!(true));
    let report_json: Value = serde_json::from_slice(&report.to_json()).expect("report JSON");
    print_json(&json!({
        "seed": seed,
        "pba_leaf": leaf.to_hex(),
        "report": report_json,
        "cases": cases,
    }));
    Ok(if all_ok { OK } else { FAILED })
}
