// SPDX-License-Identifier: Apache-2.0

//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tee_fabric::adversary::{fuzz_world, run_attack, AttackKind, Outcome};
use tee_fabric::attestation::{
    pba_events_for, pba_leaf, verify_report, ChallengeBook, ConfigWhitelist, DeviceRot, FduConfig, FduSection,
    PbaEvent, RejectReason, Requirement, RevocationList, SecurityProperties, Verdict,
};
use tee_fabric::capacity::{sc_capacity, transfer_overhead, UnitConvention, DEFAULT_BLOCK_SIZE};
use tee_fabric::crypto::{hash, PublicKey, SigningKeyPair};
use tee_fabric::device::ai::{ai_compute, encode_tensor};
use tee_fabric::device::ssd::{execute, fio_workload, BlockCommand, BlockOp, BlockResponse, FioPattern, Namespace, BLOCK_SIZE};
use tee_fabric::ids::{FduId, JobId, NodeId, PrincipalId, ScId, TenantId};
use tee_fabric::manifest::{DeviceKind, Manifest, Policy, ResourceRequest};
use tee_fabric::memory::SparseMemory;
use tee_fabric::mgmt::Strategy;
use tee_fabric::protocol::{AppOp, Assignment};
use tee_fabric::samples::{self, sample_code_digest, SAMPLE_CODE};
use tee_fabric::scenario::{self, Scenario, ScenarioConfig, ScenarioOutcome, ScenarioParams};
use tee_fabric::sc::ScError;
use tee_fabric::tee_node::{Access, FduSpec, Owner};
use tee_fabric::topology::{NodeSpec, RackSpec, ScSpec, Topology};
use tee_fabric::world::World;
use tee_fabric::{Matrix, ScCapacityParams, TensorJob};

const MIB: u64 = 1 << 20;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("attack suite", attack_suite),
        ("adversary fuzzing", fuzzing),
        ("oracle equivalence", oracle_equivalence),
        ("capacity", capacity),
        ("transparency", transparency),
        ("lifecycle hygiene", hygiene),
        ("determinism", determinism),
        ("property-based attestation", pba),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{took:.2?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail} [{took:.2?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1. Every scripted attack ends with its expected outcome, never LEAK, in under 5 s.
fn attack_suite() -> Check {
    let limit = Duration::from_secs(5);
    let mut slowest = Duration::ZERO;
    let mut summary = Vec::new();
    for (letter, &kind) in ('a'..).zip(AttackKind::ALL.iter()) {
        let start = Instant::now();
        let (report, _) = run_attack(kind, &kind.default_topology(), 1).map_err(|e| format!("({letter}) {kind}: {e}"))?;
        let took = start.elapsed();
        slowest = slowest.max(took);
        ensure(report.outcome != Outcome::Leak && report.findings.is_empty(), || {
            format!("({letter}) {kind} leaked: {:?}", report.findings)
        })?;
        ensure(report.outcome == kind.expected(), || {
            format!("({letter}) {kind}: {:?}, expected {:?}; {:?}", report.outcome, kind.expected(), report.notes)
        })?;
        ensure(took < limit, || format!("({letter}) {kind} took {took:?}"))?;
        summary.push(format!("{letter}={}", report.outcome));
    }
    Ok(format!("{} scenarios matched ({}), slowest {slowest:.2?}", summary.len(), summary.join(" ")))
}

// 2. 1000 random worlds with at most 8 nodes and 3 jobs, zero LEAK, under 60 s.
fn fuzzing() -> Check {
    let start = Instant::now();
    let mut jobs = 0;
    let mut actions = 0;
    for seed in 0..1000u64 {
        let r = fuzz_world(seed);
        ensure(r.nodes <= 8 && r.jobs <= 3, || format!("seed {seed}: {} nodes, {} jobs", r.nodes, r.jobs))?;
        ensure(r.outcome != Outcome::Leak, || format!("seed {seed} leaked: {:?}", r.findings))?;
        jobs += r.jobs;
        actions += r.actions;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("1000 worlds, {jobs} jobs, {actions} actions, no LEAK in {took:.2?}"))
}

/// Every assignment of `units` units to nothing or one of three jobs.
fn owner_patterns(units: u32) -> impl Iterator<Item = Vec<Option<u32>>> {
    (0..4u32.pow(units)).map(move |code| (0..units).map(|i| Some((code / 4u32.pow(i)) % 4).filter(|&j| j != 0)).collect())
}

fn primary_cpu(id: u32) -> NodeSpec {
    let parts = vec![FduSpec::new(2, 8 * MIB); 3];
    NodeSpec::tee(id, DeviceKind::Cpu, 6, 32 * MIB, parts).with_properties([Policy::MemIsolation])
}

fn one_rack(nodes: Vec<NodeSpec>) -> Topology {
    let mut sc = ScSpec::new(0);
    sc.staging = 64 * MIB;
    Topology {
        suite: Default::default(),
        vendor: Default::default(),
        racks: vec![RackSpec { name: "r0".into(), scs: vec![sc], nodes }],
        tenants: 3,
        links: Vec::new(),
    }
}

/// Launches one job per label in `owners`, each with a CPU unit plus the
/// units the pattern gives it, pinned through a placement override.
/// Returns the label of each unit's owning job as seen by its session.
fn launch_pattern(
    w: &mut World,
    owners: &[Option<u32>],
    request: ResourceRequest,
    assign: impl Fn(usize, usize) -> Assignment,
) -> Result<BTreeMap<u32, JobId>, String> {
    let labels: BTreeSet<u32> = owners.iter().flatten().copied().collect();
    let mut jobs = BTreeMap::new();
    for &label in &labels {
        let units: Vec<usize> = (0..owners.len()).filter(|&u| owners[u] == Some(label)).collect();
        let mut resources = vec![ResourceRequest::new(DeviceKind::Cpu, 1, MIB).with_policies([Policy::MemIsolation])];
        resources.extend(units.iter().map(|_| request.clone()));
        let m = w.sign_manifest(Manifest::new(&format!("job{label}"), "acme", "1.0", resources, vec![sample_code_digest()]));
        w.mp.strategy = Strategy::Override(units.iter().enumerate().map(|(k, &u)| (k + 1, assign(k + 1, u))).collect());
        let job = w.launch(TenantId(label - 1), &m, SAMPLE_CODE).map_err(|e| format!("{owners:?} job {label}: {e}"))?;
        jobs.insert(label, job);
    }
    w.mp.strategy = Strategy::Honest;
    Ok(jobs)
}

// 3. SC local_transfer and node acu_check / acu_core_check against
// membership oracles, over every owner assignment of up to four units to
// up to three jobs, all ordered pairs.
fn oracle_equivalence() -> Check {
    let mut worlds = 0;
    let mut decisions = 0u64;
    for units in 1..=4u32 {
        for owners in owner_patterns(units) {
            decisions += sc_world(&owners)?;
            worlds += 1;
            for kind in [DeviceKind::Ssd, DeviceKind::AiAccelerator] {
                decisions += node_world(kind, &owners)?;
                worlds += 1;
            }
        }
    }
    Ok(format!("{worlds} worlds, {decisions} decisions matched"))
}

fn sc_world(owners: &[Option<u32>]) -> Result<u64, String> {
    let mut nodes = vec![primary_cpu(1)];
    nodes.extend((0..owners.len() as u32).map(|i| NodeSpec::non_tee(10 + i, DeviceKind::Gpu, 4, 4 * MIB, 0)));
    let mut w = World::new(&one_rack(nodes), 7).map_err(|e| e.to_string())?;
    let jobs = launch_pattern(&mut w, owners, ResourceRequest::new(DeviceKind::Gpu, 1, MIB).non_tee(), |resource, u| {
        Assignment::NonTee { resource, node: NodeId(10 + u as u32), sc: ScId(0) }
    })?;
    // Membership as the tenants see it.
    let mut owner: BTreeMap<NodeId, JobId> = BTreeMap::new();
    for &job in jobs.values() {
        for n in w.session(job).expect("launched").nodes() {
            owner.insert(n, job);
        }
    }
    for (u, label) in owners.iter().enumerate() {
        let got = owner.get(&NodeId(10 + u as u32)).copied();
        ensure(got == label.map(|l| jobs[&l]), || format!("{owners:?}: node {u} placed in {got:?}"))?;
    }
    let outside = NodeId(99);
    let mut all: Vec<NodeId> = (0..owners.len() as u32).map(|i| NodeId(10 + i)).collect();
    all.push(outside);
    let sc = w.scs.get_mut(&ScId(0)).expect("sc 0");
    let mut n = 0;
    for &a in &all {
        for &b in &all {
            let expected = if a == outside || b == outside {
                Err(ScError::NotAttached(outside))
            } else if a == b || (owner.contains_key(&a) && owner.get(&a) == owner.get(&b)) {
                Ok(())
            } else {
                Err(ScError::AccessDenied)
            };
            let got = sc.local_transfer(a, b, 0, 16);
            ensure(got == expected, || format!("{owners:?}: local_transfer {a} -> {b} = {got:?}, oracle {expected:?}"))?;
            n += 1;
        }
    }
    Ok(n)
}

fn node_world(kind: DeviceKind, owners: &[Option<u32>]) -> Result<u64, String> {
    const UNIT: u64 = MIB;
    let count = owners.len() as u32;
    let dev = NodeSpec::tee(2, kind, 2 * count, (u64::from(count) + 1) * UNIT, vec![FduSpec::new(2, UNIT); owners.len()]);
    let mut w = World::new(&one_rack(vec![primary_cpu(1), dev]), 7).map_err(|e| e.to_string())?;
    let jobs = launch_pattern(&mut w, owners, ResourceRequest::new(kind, 1, 64 * 1024), |resource, u| {
        Assignment::Fdu { resource, fdu: FduId::new(NodeId(2), u as u16) }
    })?;
    let mut owner: BTreeMap<FduId, JobId> = BTreeMap::new();
    for &job in jobs.values() {
        for f in w.session(job).expect("launched").fdus().into_iter().filter(|f| f.node == NodeId(2)) {
            owner.insert(f, job);
        }
    }
    let ids: Vec<FduId> = (0..count as u16).map(|i| FduId::new(NodeId(2), i)).collect();
    for (u, label) in owners.iter().enumerate() {
        let got = owner.get(&ids[u]).copied();
        ensure(got == label.map(|l| jobs[&l]), || format!("{kind:?} {owners:?}: unit {u} placed in {got:?}"))?;
    }
    let node = &w.nodes[&NodeId(2)];
    // Packed layout: unit i holds memory [i, i+1) MiB and cores 2i, 2i+1.
    for (i, e) in node.fmt().iter().enumerate() {
        let i = i as u64;
        ensure(e.base == i * UNIT && e.len == UNIT && e.cores == (2 * i as u32..2 * i as u32 + 2), || {
            format!("unexpected layout of {}", e.fdu)
        })?;
    }
    let unit_of = |addr: u64| ids.get((addr / UNIT) as usize).copied();
    let share = kind == DeviceKind::AiAccelerator;
    let mut addrs: Vec<u64> = (0..u64::from(count)).flat_map(|i| [i * UNIT, i * UNIT + UNIT / 2, (i + 1) * UNIT - 1]).collect();
    addrs.extend([u64::from(count) * UNIT, u64::MAX]);
    let mut n = 0;
    for &acc in &ids {
        for &addr in &addrs {
            let oracle = match (owner.get(&acc), unit_of(addr).and_then(|u| owner.get(&u))) {
                (Some(_), _) if unit_of(addr) == Some(acc) => true,
                (Some(a), Some(b)) => share && a == b,
                _ => false,
            };
            let got = node.acu_check(acc, addr) == Access::Allow;
            ensure(got == oracle, || format!("{kind:?} {owners:?}: acu_check({acc}, {addr:#x}) = {got}, oracle {oracle}"))?;
            n += 1;
        }
    }
    for s in 0..2 * count + 1 {
        for d in 0..2 * count + 1 {
            let job_of = |c: u32| ids.get((c / 2) as usize).and_then(|f| owner.get(f));
            let oracle = job_of(s).is_some() && job_of(s) == job_of(d);
            let got = node.acu_core_check(s, d) == Access::Allow;
            ensure(got == oracle, || format!("{kind:?} {owners:?}: acu_core_check({s}, {d}) = {got}, oracle {oracle}"))?;
            n += 1;
        }
    }
    Ok(n)
}

// 4. Reference controller numbers with 1 GB = 1024 MB.
fn capacity() -> Check {
    let one = sc_capacity(&ScCapacityParams::reference(UnitConvention::Binary, 1)).map_err(|e| e.to_string())?;
    let many = sc_capacity(&ScCapacityParams::reference(UnitConvention::Binary, 48)).map_err(|e| e.to_string())?;
    let o = transfer_overhead(4096, DEFAULT_BLOCK_SIZE, 1.47f64).map_err(|e| e.to_string())?;
    ensure(one.streams_per_core == 19, || format!("streams_per_core {}", one.streams_per_core))?;
    ensure(many.total_streams == 912, || format!("total_streams {}", many.total_streams))?;
    ensure((one.jobs_per_sec_per_core - 6.97).abs() <= 0.01, || format!("jobs/s/core {}", one.jobs_per_sec_per_core))?;
    ensure(many.total_jobs_per_sec == 334, || format!("total_jobs_per_sec {}", many.total_jobs_per_sec))?;
    ensure(o.added_latency == 1.47 && o.blocks == 1, || format!("overhead {o:?}"))?;
    Ok(format!(
        "streams/core {}, total {}, jobs/s/core {:.2}, jobs/s {}, overhead(4096) {} us",
        one.streams_per_core, many.total_streams, one.jobs_per_sec_per_core, many.total_jobs_per_sec, o.added_latency
    ))
}

/// Block store keyed by LBA; absent blocks read as zeros.
#[derive(Default)]
struct MapOracle(HashMap<u64, Vec<u8>>);

impl MapOracle {
    fn apply(&mut self, cmd: &BlockCommand) -> Vec<u8> {
        let lbas = cmd.lba..cmd.lba + u64::from(cmd.block_count);
        match cmd.op {
            BlockOp::Read => lbas.flat_map(|l| self.0.get(&l).cloned().unwrap_or_else(|| vec![0; BLOCK_SIZE as usize])).collect(),
            BlockOp::Write => {
                for (l, chunk) in lbas.zip(cmd.data.chunks(BLOCK_SIZE as usize)) {
                    self.0.insert(l, chunk.to_vec());
                }
                Vec::new()
            }
            BlockOp::Trim => {
                lbas.for_each(|l| {
                    self.0.remove(&l);
                });
                Vec::new()
            }
            BlockOp::Flush => Vec::new(),
        }
    }
}

// 5. FIO-like SSD workloads and toy inference give identical bytes through
// the protected path and on an unprotected device; SSD also matches a map.
fn transparency() -> Check {
    let mut w = World::new(&samples::single_rack(), 11).map_err(|e| e.to_string())?;
    let storage = w.launch(TenantId(0), &w.sign_manifest(samples::cpu_ssd("fio")), SAMPLE_CODE).map_err(|e| e.to_string())?;
    let ssd = w.session(storage).expect("launched").fdus().into_iter().find(|f| f.node == NodeId(2)).ok_or("no SSD unit")?;
    let ns_blocks = w.fdu_entry(ssd).expect("unit").len / BLOCK_SIZE;
    let patterns = [FioPattern::SeqWrite, FioPattern::SeqRead, FioPattern::RandWrite, FioPattern::RandRead, FioPattern::Mixed];
    let mut moved = 0u64;
    let mut commands = 0;
    for (p, pattern) in patterns.into_iter().enumerate() {
        let mut plain = SparseMemory::new(ns_blocks * BLOCK_SIZE);
        let ns = Namespace { base: 0, blocks: ns_blocks };
        let mut oracle = MapOracle::default();
        // Protected runs share one namespace across patterns, so trim it first.
        w.exchange(storage, PrincipalId::Fdu(ssd), AppOp::Block(BlockCommand::trim(ssd, 0, ns_blocks as u32)))
            .map_err(|e| e.to_string())?;
        for (i, cmd) in fio_workload(pattern, ssd, ns_blocks, 16 * MIB, 32, 100 + p as u64).into_iter().enumerate() {
            let protected = w.exchange(storage, PrincipalId::Fdu(ssd), AppOp::Block(cmd.clone())).map_err(|e| format!("{pattern:?} #{i}: {e}"))?;
            let bare = match execute(&mut plain, ns, &cmd, None).map_err(|e| format!("{pattern:?} #{i}: {e}"))? {
                BlockResponse::Data(b) => b,
                BlockResponse::Ack => Vec::new(),
            };
            let expected = oracle.apply(&cmd);
            ensure(protected == bare, || format!("{pattern:?} #{i}: protected and unprotected differ"))?;
            ensure(bare == expected, || format!("{pattern:?} #{i}: device and map oracle differ"))?;
            moved += cmd.data.len() as u64 + protected.len() as u64;
            commands += 1;
        }
    }
    ensure(moved >= 16 * MIB * patterns.len() as u64, || format!("only {moved} bytes moved"))?;

    let inference = w.launch(TenantId(1), &w.sign_manifest(samples::cpu_ai("inference")), SAMPLE_CODE).map_err(|e| e.to_string())?;
    let ai = w.session(inference).expect("launched").fdus().into_iter().find(|f| f.node == NodeId(3)).ok_or("no AI unit")?;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut random_matrix = |rows: usize, cols: usize| {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("dimensions")
    };
    let model = vec![random_matrix(32, 16), random_matrix(32, 32), random_matrix(8, 32)];
    let mut inferences = 0;
    for k in 0..8 {
        let input: Vec<f64> = (0..16).map(|i| f64::from(i * k) / 7.0 - 1.0).collect();
        let job = TensorJob { model: model.clone(), input, fdu: ai };
        let bare = encode_tensor(&ai_compute(&job).map_err(|e| e.to_string())?);
        let protected = w.exchange(inference, PrincipalId::Fdu(ai), AppOp::Tensor(job)).map_err(|e| e.to_string())?;
        ensure(protected == bare, || format!("inference {k}: protected and unprotected outputs differ"))?;
        inferences += 1;
    }
    let findings = w.audit();
    ensure(findings.is_empty(), || format!("audit: {findings:?}"))?;
    Ok(format!(
        "{commands} block commands over {} MiB identical to unprotected device and map oracle; {inferences} inferences identical",
        moved / MIB
    ))
}

// 6. After termination: units Free, no routing entries, released memory
// zero, no live key handles. The scan below reads device state directly.
fn hygiene() -> Check {
    let mut w = World::new(&samples::two_rack(), 5).map_err(|e| e.to_string())?;
    let manifests = [samples::cpu_gpu("a"), samples::cpu_ssd("b"), samples::cpu_ai("c")];
    let mut jobs = Vec::new();
    for (t, m) in manifests.into_iter().enumerate() {
        let job = w.launch(TenantId(t as u32), &w.sign_manifest(m), SAMPLE_CODE).map_err(|e| e.to_string())?;
        jobs.push(job);
    }
    // Put job data into every unit, node and controller buffer first.
    for &job in &jobs {
        let s = w.session(job).expect("launched");
        let (fdus, nodes) = (s.fdus(), s.nodes());
        for f in fdus {
            let data = vec![0xa5; 4096];
            w.exchange(job, PrincipalId::Fdu(f), AppOp::Write { offset: 0, data }).map_err(|e| e.to_string())?;
        }
        for n in nodes {
            w.exchange(job, PrincipalId::Node(n), AppOp::Echo(vec![0x5a; 4096])).map_err(|e| e.to_string())?;
        }
    }
    let dirty = jobs.iter().all(|&job| {
        let s = w.session(job).expect("launched");
        s.fdus().iter().all(|f| {
            let e = w.fdu_entry(*f).expect("unit");
            !w.nodes[&f.node].memory.is_zero(e.base, e.len)
        })
    });
    ensure(dirty, || "unit memory still zero before termination".into())?;
    let mut scanned = 0;
    for &job in &jobs {
        let (fdus, nodes) = {
            let s = w.session(job).expect("launched");
            (s.fdus(), s.nodes())
        };
        w.terminate(job).map_err(|e| e.to_string())?;
        for node in w.nodes.values() {
            for e in node.fmt() {
                if fdus.contains(&e.fdu) {
                    ensure(e.owner() == Owner::Free, || format!("{} is {:?}", e.fdu, e.owner()))?;
                    ensure(e.key().is_none(), || format!("{} keeps a key", e.fdu))?;
                    ensure(node.memory.is_zero(e.base, e.len), || format!("{} memory not zero", e.fdu))?;
                    ensure(node.host.all_labels().is_empty(), || format!("{} staging holds data", e.fdu))?;
                    scanned += 1;
                }
            }
        }
        for sc in w.scs.values() {
            ensure(!sc.ert().contains_key(&job), || format!("{} still routes {job}", sc.id))?;
            ensure(!sc.staging.all_labels().contains(&job), || format!("{} staging holds {job}", sc.id))?;
            for n in nodes.iter().filter_map(|n| sc.nodes.get(n)) {
                ensure(n.memory.resident_pages() == 0, || format!("{} memory not zero", n.id))?;
                scanned += 1;
            }
        }
        let live = w.keys.live_for(job);
        ensure(live == 0, || format!("{live} key handles of {job} alive"))?;
        let reported = w.hygiene(job);
        ensure(reported.is_empty(), || format!("{reported:?}"))?;
    }
    let all_free = w.nodes.values().flat_map(|n| n.fmt()).all(|e| e.owner() == Owner::Free);
    ensure(all_free, || "some unit not Free after all jobs ended".into())?;
    ensure(w.mp.busy_fdus().is_empty() && w.mp.busy_nodes().is_empty(), || "placement still marks units busy".into())?;
    Ok(format!("{} jobs terminated, {scanned} units and nodes scanned clean", jobs.len()))
}

// 7. Same topology, scenario and seed give byte-identical JSONL traces.
fn determinism() -> Check {
    let mut runs = 0;
    let honest = Scenario {
        config: ScenarioConfig {
            name: "honest".into(),
            topology: None,
            manifests: Vec::new(),
            strategy: "honest".into(),
            params: ScenarioParams { rounds: 2, ..Default::default() },
            seed: 42,
            expected: ScenarioOutcome::Completed,
        },
        topology: Some(samples::two_rack()),
        manifests: vec![samples::cpu_gpu("a"), samples::cpu_ssd("b"), samples::cpu_ai("c")],
    };
    let trace = |s: &Scenario, seed: u64| scenario::run(s, Some(seed)).map(|(_, w)| w.trace_jsonl()).map_err(|e| e.to_string());
    let first = trace(&honest, 42)?;
    ensure(first == trace(&honest, 42)?, || "honest run traces differ".into())?;
    ensure(first != trace(&honest, 43)?, || "seed has no effect on the trace".into())?;
    runs += 1;
    for &kind in AttackKind::ALL.iter() {
        let t = |seed| run_attack(kind, &kind.default_topology(), seed).map(|(_, w)| w.trace_jsonl()).map_err(|e| e.to_string());
        ensure(t(9)? == t(9)?, || format!("{kind} traces differ"))?;
        runs += 1;
    }
    for seed in 0..20 {
        ensure(fuzz_world(seed) == fuzz_world(seed), || format!("fuzz seed {seed} differs"))?;
    }
    Ok(format!("{runs} scenarios and 20 fuzzed worlds replayed identically ({} trace bytes honest)", first.len()))
}

// 8. Four-leaf configuration tree: distinct whitelistable leaves, and any
// single mutated boot event is rejected as a bad measurement.
fn pba() -> Check {
    // Leaf values computed independently with Python's hashlib.sha3_256.
    let tree = [
        (false, Policy::CoreIsolation, "f59f0c3a6e4dc660d9a63b8d251d447ede4c1e4f7b5e450d46aaef6fb10e6b24"),
        (false, Policy::MemIsolation, "861843134d9f55ece1c51185360e303cfb43ac53cf908b7595df0cc4592d4be6"),
        (true, Policy::CoreIsolation, "18f8229dc3ec9f8894b1211d3ffccf8ffed5593f4da5be36398c2f0c8fa76c50"),
        (true, Policy::MemIsolation, "88e94eee551239c974f5ec5ac0d45c7054ffa6186b56224f8032eb091111f260"),
    ];
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let manufacturer = SigningKeyPair::generate(&mut rng);
    let firmware = hash(b"firmware/ai-1.0");
    let mut whitelist = ConfigWhitelist::new(manufacturer.public());
    whitelist.allow_firmware("1.0", firmware);
    let revocation = RevocationList::default();
    let mut leaves = BTreeSet::new();
    let mut mutants = 0;
    let fdu = FduSection {
        fdu_support: true,
        numbers: 1,
        config: vec![FduConfig { bar: 0, stream_id: "0".into(), core_config: 4, memory: MIB }],
    };
    let req = Requirement { device_type: DeviceKind::AiAccelerator, policies: BTreeSet::new(), cores: 1, memory: MIB };
    for (debug, iso, hex) in tree {
        let props: SecurityProperties = [(Policy::Debug, debug), (iso, true)].into_iter().collect();
        let honest = pba_events_for(&props);
        let leaf = pba_leaf(&honest);
        ensure(leaf.to_hex() == hex, || format!("leaf for debug={debug} {iso:?} is {}", leaf.to_hex()))?;
        ensure(whitelist.allow_configuration(&props) == leaf, || "whitelist entry differs from leaf".into())?;
        leaves.insert(leaf);

        let boot = |events: &[PbaEvent], rng: &mut ChaCha20Rng| {
            let mut dev = DeviceRot::manufacture(rng, "Manuf1", &manufacturer, DeviceKind::AiAccelerator, "1.0", props.clone());
            dev.measured_boot(&firmware, events).expect("fresh device");
            dev
        };
        let mut book = ChallengeBook::default();
        let ch = book.issue(&mut rng);
        let dev = boot(&honest, &mut rng);
        let r = dev.generate_report(&ch, PublicKey([7; 32]), fdu.clone()).map_err(|e| e.to_string())?;
        ensure(verify_report(&r, &req, &whitelist, &revocation, &ch) == Verdict::Accept, || format!("honest {hex} rejected"))?;

        for i in 0..honest.len() {
            let flipped = PbaEvent::new(&honest[i].property, honest[i] == PbaEvent::new(&honest[i].property, false));
            let foreign = PbaEvent::new("noHT", true);
            for mutant in [flipped, foreign] {
                let mut events = honest.clone();
                events[i] = mutant;
                let dev = boot(&events, &mut rng);
                ensure(pba_leaf(&events) != leaf, || format!("mutating event {i} kept the leaf"))?;
                let r = dev.generate_report(&ch, PublicKey([7; 32]), fdu.clone()).map_err(|e| e.to_string())?;
                let v = verify_report(&r, &req, &whitelist, &revocation, &ch);
                ensure(v == Verdict::Reject(RejectReason::BadMeasurement), || format!("mutating event {i}: {v:?}"))?;
                mutants += 1;
            }
        }
    }
    ensure(leaves.len() == 4, || format!("{} distinct leaves", leaves.len()))?;
    Ok(format!("4 distinct whitelisted leaves; {mutants} single-event mutations rejected as BadMeasurement"))
}
