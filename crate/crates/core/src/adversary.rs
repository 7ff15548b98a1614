// SPDX-License-Identifier: Apache-2.0

//! Scripted attacks by the management plane, the hypervisor, co-tenants,
//! compromised non-TEE firmware and a physical attacker on open links, plus
//! a seeded fuzzer that interleaves such actions with honest jobs.
//!
//! Outcomes are measured, never assumed: a script reports `Blocked` only if
//! every attempt was refused, `Detected` only if a verifier or receiver
//! raised the failure, `Harmless` only if the attack ran. Any audit finding
//! turns the outcome into `Leak`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attestation::RejectReason;
use crate::crypto::{hash, Key256, SendChannel};
use crate::device::ai::{Matrix, TensorJob};
use crate::device::ssd::{BlockCommand, BLOCK_SIZE};
use crate::fabric::{FabricError, TapMode};
use crate::ids::{FduId, JobId, NodeId, PrincipalId, ScId, TenantId};
use crate::manifest::{DeviceKind, Manifest, Policy, ResourceRequest};
use crate::memory::{TaintedBytes, PAGE_SIZE};
use crate::mgmt::Strategy;
use crate::protocol::{AppMessage, AppOp, Assignment, Body, DmaDirection, MessageKind, Wire};
use crate::samples::{self, SAMPLE_CODE};
use crate::tee_node::{FduSpec, STAGING_SLOT};
use crate::tenant::{SessionState, TenantError};
use crate::topology::{NodeSpec, Topology};
use crate::world::{World, WorldError};

const T0: TenantId = TenantId(0);
const T1: TenantId = TenantId(1);
const MIB: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    /// Refused synchronously by an enforcement point.
    Blocked,
    /// A verifier or receiver raised an authenticated failure.
    Detected,
    /// Ran to completion with a clean audit.
    Harmless,
    #[serde(rename = "LEAK")]
    Leak,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Blocked => "Blocked",
            Outcome::Detected => "Detected",
            Outcome::Harmless => "Harmless",
            Outcome::Leak => "LEAK",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    DoubleAllocate,
    RevokedFirmware,
    WrongSize,
    MaliciousReconfig,
    StaleReport,
    CoTenantDma,
    FakeInterrupt,
    CrossJobBuffer,
    ScBypass,
    HypervisorRemap,
    ForgedTermination,
    OpenLinkTap,
    OverlappingDma,
}

impl AttackKind {
    pub const ALL: [AttackKind; 13] = [
        AttackKind::DoubleAllocate,
        AttackKind::RevokedFirmware,
        AttackKind::WrongSize,
        AttackKind::MaliciousReconfig,
        AttackKind::StaleReport,
        AttackKind::CoTenantDma,
        AttackKind::FakeInterrupt,
        AttackKind::CrossJobBuffer,
        AttackKind::ScBypass,
        AttackKind::HypervisorRemap,
        AttackKind::ForgedTermination,
        AttackKind::OpenLinkTap,
        AttackKind::OverlappingDma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::DoubleAllocate => "double_allocate",
            AttackKind::RevokedFirmware => "revoked_firmware",
            AttackKind::WrongSize => "wrong_size",
            AttackKind::MaliciousReconfig => "malicious_reconfig",
            AttackKind::StaleReport => "stale_report",
            AttackKind::CoTenantDma => "co_tenant_dma",
            AttackKind::FakeInterrupt => "fake_interrupt",
            AttackKind::CrossJobBuffer => "cross_job_buffer",
            AttackKind::ScBypass => "sc_bypass",
            AttackKind::HypervisorRemap => "hypervisor_remap",
            AttackKind::ForgedTermination => "forged_termination",
            AttackKind::OpenLinkTap => "open_link_tap",
            AttackKind::OverlappingDma => "overlapping_dma",
        }
    }

    pub fn expected(self) -> Outcome {
        match self {
            AttackKind::DoubleAllocate
            | AttackKind::CrossJobBuffer
            | AttackKind::ScBypass
            | AttackKind::HypervisorRemap
            | AttackKind::ForgedTermination => Outcome::Blocked,
            AttackKind::RevokedFirmware | AttackKind::WrongSize | AttackKind::StaleReport => Outcome::Detected,
            AttackKind::MaliciousReconfig
            | AttackKind::CoTenantDma
            | AttackKind::FakeInterrupt
            | AttackKind::OpenLinkTap
            | AttackKind::OverlappingDma => Outcome::Harmless,
        }
    }

    /// The world the script is written against.
    pub fn default_topology(self) -> Topology {
        match self {
            AttackKind::RevokedFirmware => revoked_topology(),
            AttackKind::OpenLinkTap => samples::two_rack(),
            _ => samples::single_rack(),
        }
    }

    fn script(self) -> fn(&mut World) -> Result<Observed, AttackError> {
        match self {
            AttackKind::DoubleAllocate => double_allocate,
            AttackKind::RevokedFirmware => revoked_firmware,
            AttackKind::WrongSize => wrong_size,
            AttackKind::MaliciousReconfig => malicious_reconfig,
            AttackKind::StaleReport => stale_report,
            AttackKind::CoTenantDma => co_tenant_dma,
            AttackKind::FakeInterrupt => fake_interrupt,
            AttackKind::CrossJobBuffer => cross_job_buffer,
            AttackKind::ScBypass => sc_bypass,
            AttackKind::HypervisorRemap => hypervisor_remap,
            AttackKind::ForgedTermination => forged_termination,
            AttackKind::OpenLinkTap => open_link_tap,
            AttackKind::OverlappingDma => overlapping_dma,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| AttackError::UnknownAttack(s.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttackError {
    #[error("unknown attack {0:?}")]
    UnknownAttack(String),
    #[error(transparent)]
    World(#[from] WorldError),
    /// The honest part of the scenario could not be set up.
    #[error("scenario setup failed: {0}")]
    Setup(String),
}

fn setup<E: fmt::Display>(what: &str) -> impl FnOnce(E) -> AttackError + '_ {
    move |e| AttackError::Setup(format!("{what}: {e}"))
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub name: String,
    pub outcome: Outcome,
    pub expected: Outcome,
    #[serde(with = "millis")]
    pub elapsed: Duration,
    /// What each attempt ran into.
    pub notes: Vec<String>,
    /// Confidentiality or integrity failures; non-empty means `Leak`.
    pub findings: Vec<String>,
}

impl AttackReport {
    pub fn matches(&self) -> bool {
        self.outcome == self.expected
    }
}

mod millis {
    use serde::Serializer;
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }
}

/// What a script saw before the audit.
struct Observed {
    outcome: Outcome,
    notes: Vec<String>,
}

impl Observed {
    fn new(outcome: Outcome) -> Self {
        Self { outcome, notes: Vec::new() }
    }
}

/// Runs one scripted attack in a fresh world.
pub fn run_attack(kind: AttackKind, topology: &Topology, seed: u64) -> Result<(AttackReport, World), AttackError> {
    let start = Instant::now();
    let mut w = World::new(topology, seed)?;
    w.fabric.note_state(format!("attack {kind}"), None);
    let obs = (kind.script())(&mut w)?;
    let findings = w.audit();
    let outcome = if findings.is_empty() { obs.outcome } else { Outcome::Leak };
    w.fabric.note_state(format!("outcome {outcome}"), None);
    let report = AttackReport {
        name: kind.name().into(),
        outcome,
        expected: kind.expected(),
        elapsed: start.elapsed(),
        notes: obs.notes,
        findings,
    };
    Ok((report, w))
}

pub fn run_suite(seed: u64) -> Result<Vec<AttackReport>, AttackError> {
    AttackKind::ALL.iter().map(|&k| run_attack(k, &k.default_topology(), seed).map(|(r, _)| r)).collect()
}

/// Recognisable plaintext for a job, 64 bytes.
pub fn secret(tag: &str) -> Vec<u8> {
    let mut s = format!("SECRET<{tag}>").into_bytes();
    while s.len() < 64 {
        s.push(b'#');
    }
    s.truncate(64);
    s
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Searches everything an outsider could read for `needles`: every captured
/// message, host memory on every node, and the loot.
pub fn outsider_view_contains(w: &World, needles: &[Vec<u8>]) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |what: String, bytes: &[u8]| {
        for n in needles {
            if contains(bytes, n) {
                out.push(format!("{what} contains {:?}", String::from_utf8_lossy(n)));
            }
        }
    };
    for m in w.fabric.captures() {
        check(format!("capture of message {}", m.id), &m.body.to_wire());
    }
    for node in w.nodes.values() {
        for (addr, _) in node.host.resident() {
            let len = (PAGE_SIZE + 64).min(node.host.size() - addr);
            if let Ok(b) = node.host.read(addr, len) {
                check(format!("{} host memory at {addr:#x}", node.id), &b.bytes);
            }
        }
    }
    for (i, l) in w.loot.iter().enumerate() {
        check(format!("loot {i}"), &l.bytes);
    }
    out
}

fn unit_of(w: &World, job: JobId, kind: DeviceKind) -> Option<FduId> {
    let s = w.session(job)?;
    s.placement.iter().find_map(|a| match *a {
        Assignment::Fdu { resource, fdu } if s.manifest.resources[resource].resource_type == kind => Some(fdu),
        _ => None,
    })
}

fn node_of(w: &World, job: JobId) -> Option<NodeId> {
    w.session(job)?.nodes().into_iter().next()
}

fn primary(w: &World, job: JobId) -> FduId {
    w.session(job).and_then(|s| s.primary()).expect("provisioned job has a primary unit")
}

fn launch(w: &mut World, tenant: TenantId, m: Manifest) -> Result<JobId, AttackError> {
    let m = w.sign_manifest(m);
    w.launch(tenant, &m, SAMPLE_CODE).map_err(setup("honest launch"))
}

/// The victim still answers and `secret` is still where it left it.
fn victim_intact(w: &mut World, job: JobId, at: u64, expect: &[u8], notes: &mut Vec<String>) -> bool {
    let p = PrincipalId::Fdu(primary(w, job));
    let echo = w.exchange(job, p, AppOp::Echo(b"ping".to_vec()));
    let read = w.exchange(job, p, AppOp::Read { offset: at, len: expect.len() as u64 });
    let ok = echo.as_deref() == Ok(b"ping") && read.as_deref() == Ok(expect);
    if !ok {
        notes.push(format!("victim disturbed: echo {echo:?}, read {read:?}"));
        w.integrity_violations.push(format!("{job} lost integrity without any principal noticing"));
    }
    ok
}

fn record<T: fmt::Debug, E: fmt::Debug>(notes: &mut Vec<String>, what: &str, r: &Result<T, E>) {
    notes.push(match r {
        Ok(v) => format!("{what}: succeeded ({v:?})"),
        Err(e) => format!("{what}: refused ({e:?})"),
    });
}

/// Blocked iff every attempt was refused.
fn all_refused(results: &[bool]) -> Outcome {
    if results.iter().all(|&refused| refused) {
        Outcome::Blocked
    } else {
        Outcome::Harmless
    }
}

// (a) The management plane hands a unit that is already in use to a
// second tenant.
fn double_allocate(w: &mut World) -> Result<Observed, AttackError> {
    let victim = launch(w, T0, samples::cpu_ssd("victim"))?;
    let vfdus = w.session(victim).expect("session").fdus();
    let mut obs = Observed::new(Outcome::Harmless);
    w.mp.strategy = Strategy::IgnoreBusy;
    let m = w.sign_manifest(samples::cpu_ssd("intruder"));
    let job = w.submit_job(T1, &m).map_err(setup("submit"))?;
    let stolen = w.session(job).expect("session").fdus();
    obs.notes.push(format!("placement for {job} reuses {:?}", stolen.intersection(&vfdus).collect::<Vec<_>>()));
    if stolen.is_disjoint(&vfdus) {
        return Err(AttackError::Setup("management plane did not double-allocate".into()));
    }
    let r = w.verify_and_provision(job);
    record(&mut obs.notes, "provision on the victim's units", &r);
    let owners_kept = vfdus.iter().all(|f| w.fdu_entry(*f).and_then(|e| e.owner().job()) == Some(victim));
    let keys = w.keys.live_for(job);
    let intact = victim_intact(w, victim, 0, SAMPLE_CODE, &mut obs.notes);
    if matches!(r, Err(TenantError::AllocationRefused(_))) && owners_kept && keys == 0 && intact {
        obs.outcome = Outcome::Blocked;
    }
    Ok(obs)
}

fn revoked_topology() -> Topology {
    let mut t = samples::single_rack();
    let cpu = |id, firmware: &str| {
        let mut n = NodeSpec::tee(id, DeviceKind::Cpu, 4, 32 * MIB, vec![FduSpec::new(4, 32 * MIB)])
            .with_properties([Policy::MemIsolation, Policy::NoHt]);
        n.firmware = firmware.into();
        n
    };
    let old = cpu(6, "cpu-0.9");
    let revoked = cpu(7, "cpu-1.0");
    let mut rogue = cpu(8, "cpu-1.0");
    rogue.firmware_digest = Some(hash(b"rogue firmware image"));
    t.racks[0].nodes.extend([old, revoked, rogue]);
    t.vendor.revoked_firmware.push("cpu-0.9".into());
    t.vendor.revoked_nodes.push(7);
    t
}

// (b) The management plane places jobs on a node with revoked firmware, a
// revoked device and a node running an unpublished image.
fn revoked_firmware(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Detected);
    for (node, want) in [(6, RejectReason::Revoked), (7, RejectReason::Revoked), (8, RejectReason::BadMeasurement)] {
        let fdu = FduId::new(NodeId(node), 0);
        if w.fdu_entry(fdu).is_none() {
            return Err(AttackError::Setup(format!("topology lacks {fdu}")));
        }
        w.mp.strategy = Strategy::Override([(0, Assignment::Fdu { resource: 0, fdu })].into());
        let m = w.sign_manifest(samples::cpu_only(&format!("on-node-{node}")));
        let job = w.submit_job(T0, &m).map_err(setup("submit"))?;
        let r = w.verify_and_provision(job);
        record(&mut obs.notes, &format!("provision on {fdu}"), &r);
        let freed = w.fdu_entry(fdu).and_then(|e| e.owner().job()).is_none();
        if r != Err(TenantError::AttestationFailed(want)) || w.keys.live_for(job) != 0 || !freed {
            obs.outcome = Outcome::Harmless;
        }
    }
    Ok(obs)
}

// (c) The management plane hands out a smaller unit than requested.
fn wrong_size(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Harmless);
    w.mp.strategy = Strategy::Undersize;
    let big = ResourceRequest::new(DeviceKind::Cpu, 4, 32 * MIB).with_policies([Policy::MemIsolation]);
    let m = Manifest::new("big", "acme", "1.0", vec![big], vec![samples::sample_code_digest()]);
    let m = w.sign_manifest(m);
    let job = w.submit_job(T0, &m).map_err(setup("submit"))?;
    let fdu = w.session(job).expect("session").fdus().into_iter().next().expect("one unit");
    let cores = w.fdu_entry(fdu).map(|e| e.cores.len()).unwrap_or(0);
    obs.notes.push(format!("placed on {fdu} with {cores} cores"));
    let r = w.verify_and_provision(job);
    record(&mut obs.notes, "provision", &r);
    if r == Err(TenantError::AttestationFailed(RejectReason::PolicyUnsatisfied)) && w.keys.live_for(job) == 0 {
        obs.outcome = Outcome::Detected;
    }
    Ok(obs)
}

// (d) The management plane pushes exfiltrating firmware to a non-TEE node
// before it is bound, and again while it is bound.
fn malicious_reconfig(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Blocked);
    let target = NodeId(4);
    let sc = w.sc_of(target).ok_or_else(|| AttackError::Setup(format!("{target} not attached")))?;
    let evil = hash(b"exfiltrating firmware");
    let pushed = w.scs.get_mut(&sc).expect("sc").mp_reconfigure(target, evil, true);
    record(&mut obs.notes, "firmware push before bind", &pushed);
    let job = launch(w, T0, samples::cpu_gpu("victim"))?;
    if node_of(w, job) != Some(target) {
        return Err(AttackError::Setup(format!("victim not placed on {target}")));
    }
    let s = secret("gpu");
    let echoed = w.exchange(job, PrincipalId::Node(target), AppOp::Echo(s.clone()));
    record(&mut obs.notes, "victim echo through the node", &echoed.as_ref().map(|b| b.len()));
    let again = w.scs.get_mut(&sc).expect("sc").mp_reconfigure(target, evil, true);
    record(&mut obs.notes, "firmware push while bound", &again);
    let node = &w.scs[&sc].nodes[&target];
    let clean = !node.malicious && node.firmware == node.factory_firmware && node.shadow.is_empty();
    if pushed.is_ok() && again.is_err() && clean && echoed.as_deref() == Ok(&s[..]) {
        obs.outcome = Outcome::Harmless;
    }
    w.terminate(job).map_err(setup("terminate"))?;
    Ok(obs)
}

// (e) Old evidence from an earlier allocation of the same unit is replayed
// while the fresh evidence is dropped.
fn stale_report(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Harmless);
    w.fabric.tap_all(TapMode::Observe, Some([MessageKind::AttResponse].into()));
    let first = launch(w, T0, samples::cpu_only("first"))?;
    w.terminate(first).map_err(setup("terminate"))?;
    w.fabric.clear_taps();
    let old = w
        .fabric
        .captures()
        .iter()
        .find_map(|m| match &m.body {
            Body::FduEvidence { job, fdu, report } if *job == first => Some((*fdu, report.clone())),
            _ => None,
        })
        .ok_or_else(|| AttackError::Setup("no evidence captured".into()))?;
    let m = w.sign_manifest(samples::cpu_only("second"));
    let job = w.submit_job(T0, &m).map_err(setup("submit"))?;
    let (fdu, report) = old;
    if !w.session(job).expect("session").fdus().contains(&fdu) {
        return Err(AttackError::Setup("second job not placed on the same unit".into()));
    }
    let (src, dst) = (PrincipalId::Fdu(fdu), PrincipalId::Tenant(T0));
    w.fabric.attacker_tap(src, dst, TapMode::Drop, Some([MessageKind::AttResponse].into())).map_err(setup("tap"))?;
    let injected = w.fabric.inject(src, dst, Body::FduEvidence { job, fdu, report });
    record(&mut obs.notes, "inject old evidence", &injected);
    let r = w.verify_and_provision(job);
    record(&mut obs.notes, "provision", &r);
    w.fabric.clear_taps();
    let freed = w.fdu_entry(fdu).and_then(|e| e.owner().job()).is_none();
    if r == Err(TenantError::AttestationFailed(RejectReason::Stale)) && w.keys.live_for(job) == 0 && freed {
        obs.outcome = Outcome::Detected;
    }
    Ok(obs)
}

/// Writes `data` at `offset` in the primary unit and sends it to the tenant
/// by DMA.
fn dma_to_tenant(w: &mut World, job: JobId, offset: u64, data: Vec<u8>) -> Result<(), AttackError> {
    let p = PrincipalId::Fdu(primary(w, job));
    let tenant = PrincipalId::Tenant(w.session(job).expect("session").tenant);
    let len = data.len() as u64;
    w.exchange(job, p, AppOp::Write { offset, data }).map_err(setup("write"))?;
    let region = AppOp::RegisterDma { offset, len, direction: DmaDirection::Egress, peer: tenant };
    let v = w.exchange(job, p, region).map_err(setup("register DMA"))?;
    let vector = u32::from_le_bytes(v.try_into().map_err(|_| AttackError::Setup("bad vector".into()))?);
    w.exchange(job, p, AppOp::DmaKick { vector }).map_err(setup("DMA kick"))?;
    Ok(())
}

// (f) A co-tenant on the same devices goes after the victim's memory
// through MMIO, DMA, block commands and the shared staging area.
fn co_tenant_dma(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Blocked);
    w.fabric.tap_all(TapMode::Observe, None);
    let victim = launch(w, T0, samples::cpu_ssd("victim"))?;
    let attacker = launch(w, T1, samples::cpu_ssd("attacker"))?;
    let (vcpu, vssd) = (primary(w, victim), unit_of(w, victim, DeviceKind::Ssd).expect("ssd"));
    let (acpu, assd) = (primary(w, attacker), unit_of(w, attacker, DeviceKind::Ssd).expect("ssd"));
    if vcpu.node != acpu.node || vssd.node != assd.node {
        return Err(AttackError::Setup("jobs do not share devices".into()));
    }
    let s = secret("victim");
    let mut block = s.clone();
    block.resize(BLOCK_SIZE as usize, 0);
    w.exchange(victim, PrincipalId::Fdu(vssd), AppOp::Block(BlockCommand::write(vssd, 3, block.clone())))
        .map_err(setup("victim block write"))?;
    dma_to_tenant(w, victim, 8192, s.clone())?;

    // Untrusted host software reads the victim's staging slot, which held
    // the DMA transfer.
    let staging = w.fdu_entry(vcpu).expect("entry").staging;
    let slot = w.nodes[&vcpu.node].host.read(staging, STAGING_SLOT);
    record(&mut obs.notes, "host read of victim staging", &slot.as_ref().map(|b| b.bytes.len()));
    let executed = slot.is_ok();
    if let Ok(b) = slot {
        w.loot.push(b);
    }
    let mut refused = Vec::new();
    let block_read = w.exchange(attacker, PrincipalId::Fdu(assd), AppOp::Block(BlockCommand::read(vssd, 3, 1)));
    record(&mut obs.notes, "block read of the victim's namespace", &block_read);
    refused.push(block_read.is_err());
    let mmio = w.exchange(attacker, PrincipalId::Fdu(acpu), AppOp::MapMmio { page: 4, device: vssd, device_page: 0 });
    record(&mut obs.notes, "MMIO map of the victim's SSD", &mmio);
    refused.push(mmio.is_err());
    let dma = AppOp::RegisterDma { offset: 0, len: 64, direction: DmaDirection::Egress, peer: PrincipalId::Fdu(vcpu) };
    let dma = w.exchange(attacker, PrincipalId::Fdu(acpu), dma);
    record(&mut obs.notes, "DMA region towards the victim", &dma);
    refused.push(dma.is_err());
    // Steer the attacker's own DMA staging onto the victim's slot.
    let remap = w.nodes.get_mut(&acpu.node).expect("node").remap_staging(acpu, staging);
    record(&mut obs.notes, "staging remap onto the victim's slot", &remap);
    dma_to_tenant(w, attacker, 8192, secret("attacker"))?;
    // Re-address the attacker's own sealed traffic to the victim's unit.
    let forged = w.fabric.captures().iter().rev().find_map(|m| match (&m.body, m.dst) {
        (Body::Data { env, .. }, PrincipalId::Fdu(f)) if f == acpu => Some(env.clone()),
        _ => None,
    });
    let before = w.incident_count("AuthFailure");
    if let Some(env) = forged {
        let r = w.fabric.inject(PrincipalId::Tenant(T1), PrincipalId::Fdu(vcpu), Body::Data { job: victim, env });
        record(&mut obs.notes, "attacker envelope sent to the victim", &r);
        w.run_until_quiescent().map_err(setup("pump"))?;
    }
    obs.notes.push(format!("victim raised {} AuthFailure", w.incident_count("AuthFailure") - before));
    let readback = w.exchange(victim, PrincipalId::Fdu(vssd), AppOp::Block(BlockCommand::read(vssd, 3, 1)));
    let intact = victim_intact(w, victim, 8192, &s, &mut obs.notes) && readback.as_deref() == Ok(&block[..]);
    let got = w.session(victim).expect("session").dma_received().iter().any(|(_, d)| *d == s);
    let exposed = outsider_view_contains(w, &[s.clone()]);
    obs.notes.extend(exposed.iter().cloned());
    w.integrity_violations.extend(exposed);
    if !intact || !got {
        obs.notes.push("victim data or DMA transfer lost".into());
    } else if executed {
        obs.outcome = Outcome::Harmless;
    } else {
        obs.outcome = all_refused(&refused);
    }
    Ok(obs)
}

// (g) The hypervisor forges device interrupts to trigger the victim's
// registered DMA and to poke vectors that do not exist.
fn fake_interrupt(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Blocked);
    let victim = launch(w, T0, samples::cpu_ssd("victim"))?;
    let vcpu = primary(w, victim);
    let s = secret("interrupt");
    dma_to_tenant(w, victim, 4096, s.clone())?;
    let before = w.session(victim).expect("session").dma_received().len();
    w.fabric.tap_all(TapMode::Observe, None);
    let mut delivered = 0;
    for vector in [0, 0, 7] {
        let r = w.fabric.inject(PrincipalId::Mp, PrincipalId::Fdu(vcpu), Body::Interrupt { fdu: vcpu, vector });
        record(&mut obs.notes, &format!("interrupt vector {vector}"), &r);
        delivered += usize::from(r.is_ok());
    }
    w.run_until_quiescent().map_err(setup("pump"))?;
    w.collect(victim);
    let triggered = w.session(victim).expect("session").dma_received().len() - before;
    obs.notes.push(format!("{triggered} DMA transfers triggered, {} interrupts ignored", w.incident_count("IgnoredInterrupt")));
    let intact = victim_intact(w, victim, 4096, &s, &mut obs.notes);
    let exposed = outsider_view_contains(w, &[s]);
    obs.notes.extend(exposed.iter().cloned());
    w.integrity_violations.extend(exposed);
    if intact && delivered > 0 {
        obs.outcome = Outcome::Harmless;
    }
    Ok(obs)
}

// (h) A non-TEE node of one job tries to read another job's buffer at the
// shared controller.
fn cross_job_buffer(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Harmless);
    let victim = launch(w, T0, samples::cpu_gpu("victim"))?;
    let attacker = launch(w, T1, samples::cpu_gpu("attacker"))?;
    let (vn, an) = (node_of(w, victim).expect("node"), node_of(w, attacker).expect("node"));
    let sc = w.sc_of(vn).expect("attached");
    if w.sc_of(an) != Some(sc) {
        return Err(AttackError::Setup("nodes behind different controllers".into()));
    }
    let s = secret("buffer");
    w.exchange(victim, PrincipalId::Node(vn), AppOp::Echo(s.clone())).map_err(setup("victim echo"))?;
    let mut refused = Vec::new();
    let c = w.scs.get_mut(&sc).expect("sc");
    let r = c.direct_access(an, vn, 0, 64);
    record(&mut obs.notes, "direct read of the victim's buffer", &r.as_ref().map(|b| b.bytes.len()));
    refused.push(r.is_err());
    if let Ok(b) = r {
        w.loot.push(b);
    }
    let c = w.scs.get_mut(&sc).expect("sc");
    let r = c.local_transfer(vn, an, 0, 64);
    record(&mut obs.notes, "copy victim buffer to attacker", &r);
    refused.push(r.is_err());
    let r = c.setup_shared_region(vn, an, 0, 64);
    record(&mut obs.notes, "shared region over the victim's buffer", &r);
    refused.push(r.is_err());
    let r = c.setup_shared_region(an, vn, 0, 64);
    record(&mut obs.notes, "shared region into the victim's buffer", &r);
    refused.push(r.is_err());
    let before = w.incident_count("AccessDenied");
    let fwd = AppOp::Forward { route: vec![PrincipalId::Node(vn)], payload: b"hello".to_vec() };
    let r = w.exchange(attacker, PrincipalId::Node(an), fwd);
    record(&mut obs.notes, "forward to the victim's node", &r);
    refused.push(r.is_err() && w.incident_count("AccessDenied") > before);
    let intact = w.exchange(victim, PrincipalId::Node(vn), AppOp::Echo(s.clone())).as_deref() == Ok(&s[..]);
    if intact {
        obs.outcome = all_refused(&refused);
    }
    Ok(obs)
}

// (i) A non-TEE node tries to talk to anything but its controller, and a
// physical attacker tries to splice into its shielded link.
fn sc_bypass(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Harmless);
    let victim = launch(w, T0, samples::cpu_gpu("victim"))?;
    let n = node_of(w, victim).expect("node");
    let sc = w.sc_of(n).expect("attached");
    let me = PrincipalId::Node(n);
    let s = secret("bypass");
    let raw = |to| Body::Raw { job: victim, to, bytes: s.clone() };
    let mut refused = Vec::new();
    let targets =
        [PrincipalId::Tenant(T0), PrincipalId::Mp, PrincipalId::Fdu(primary(w, victim)), PrincipalId::Node(NodeId(5))];
    for to in targets {
        let out = crate::protocol::Outgoing::new(me, to, raw(to)).tainted([victim].into());
        let r = w.fabric.send(out);
        record(&mut obs.notes, &format!("send {me} -> {to}"), &r);
        refused.push(matches!(r, Err(FabricError::NoRoute(..))));
        let r = w.fabric.inject(me, to, raw(to));
        record(&mut obs.notes, &format!("inject {me} -> {to}"), &r);
        refused.push(r.is_err());
    }
    let r = w.fabric.attacker_tap(me, PrincipalId::Sc(sc), TapMode::Observe, None);
    record(&mut obs.notes, "tap of the shielded link", &r);
    refused.push(matches!(r, Err(FabricError::TamperProof(..))));
    let r = w.fabric.inject(PrincipalId::Sc(sc), me, raw(me));
    record(&mut obs.notes, "injection on the shielded link", &r);
    refused.push(matches!(r, Err(FabricError::TamperProof(..))));
    w.run_until_quiescent().map_err(setup("pump"))?;
    obs.outcome = all_refused(&refused);
    Ok(obs)
}

// (j) The hypervisor tries to move, page out or read enclave memory.
fn hypervisor_remap(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Harmless);
    let victim = launch(w, T0, samples::cpu_only("victim"))?;
    let f = primary(w, victim);
    let s = secret("enclave");
    w.exchange(victim, PrincipalId::Fdu(f), AppOp::Write { offset: 4096, data: s.clone() }).map_err(setup("write"))?;
    let (base, len) = w.fdu_entry(f).map(|e| (e.base, e.len)).expect("entry");
    let node = w.nodes.get_mut(&f.node).expect("node");
    let mut refused = Vec::new();
    let r = node.hypervisor_remap(f, base + len);
    record(&mut obs.notes, "remap", &r);
    refused.push(r.is_err());
    let r = node.hypervisor_page_out(f, 1);
    record(&mut obs.notes, "page out", &r.as_ref().map(|b| b.bytes.len()));
    refused.push(r.is_err());
    let mut loot: Vec<TaintedBytes> = r.into_iter().collect();
    let r = node.host_read(base + 4096, 64);
    record(&mut obs.notes, "host read", &r.as_ref().map(|b| b.bytes.len()));
    refused.push(r.is_err());
    loot.extend(r);
    let r = node.host_write(base + 4096, &[0; 64]);
    record(&mut obs.notes, "host write", &r);
    refused.push(r.is_err());
    w.loot.extend(loot);
    if victim_intact(w, victim, 4096, &s, &mut obs.notes) {
        obs.outcome = all_refused(&refused);
    }
    Ok(obs)
}

/// An envelope with a correct-looking header under a key nobody holds.
fn forged_envelope(w: &mut World, job: JobId, sender: PrincipalId, plaintext: &[u8]) -> crate::crypto::Envelope {
    let key = Key256::random(w.rng());
    let handle = w.keys.mint(None, key);
    let mut ch = SendChannel::new(w.suite, handle, 0xF0F0, job, sender);
    ch.seal_next(b"", plaintext)
}

// (k) Forged and replayed termination commands against a running job.
fn forged_termination(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Harmless);
    let victim = launch(w, T0, samples::cpu_gpu("victim"))?;
    let vp = primary(w, victim);
    let vn = node_of(w, victim).expect("node");
    let sc = w.sc_of(vn).expect("attached");

    // Capture a genuine teardown of another job for replay.
    w.fabric.tap_all(TapMode::Observe, Some([MessageKind::Control, MessageKind::Dma].into()));
    let other = launch(w, T1, samples::cpu_gpu("other"))?;
    let op = primary(w, other);
    w.terminate(other).map_err(setup("terminate"))?;
    w.fabric.clear_taps();
    let captured_sc = w.fabric.captures().iter().find_map(|m| match &m.body {
        Body::Terminate { job, env } if *job == other => Some(env.clone()),
        _ => None,
    });
    let captured_req = w.fabric.captures().iter().rev().find_map(|m| match &m.body {
        Body::Data { job, env } if *job == other && m.dst == PrincipalId::Fdu(op) => Some(env.clone()),
        _ => None,
    });

    let mut attempts: Vec<(String, PrincipalId, PrincipalId, Body)> = Vec::new();
    let stmt = crate::protocol::termination_statement(victim);
    let env = forged_envelope(w, victim, PrincipalId::Fdu(vp), &stmt);
    attempts.push(("forged controller teardown".into(), PrincipalId::Mp, PrincipalId::Sc(sc), Body::Terminate {
        job: victim,
        env: Wire::new(env, MessageKind::Control),
    }));
    let cmd = AppMessage { req: 99, reply_to: PrincipalId::Tenant(T0), op: AppOp::Terminate }.encode();
    let env = forged_envelope(w, victim, PrincipalId::Tenant(T0), &cmd);
    attempts.push(("forged tenant terminate".into(), PrincipalId::Tenant(T0), PrincipalId::Fdu(vp), Body::Data {
        job: victim,
        env: Wire::new(env, MessageKind::Control),
    }));
    let dealloc = AppMessage { req: 0, reply_to: PrincipalId::Fdu(vp), op: AppOp::Deallocate }.encode();
    let env = forged_envelope(w, victim, PrincipalId::Fdu(vp), &dealloc);
    attempts.push(("forged deallocate".into(), PrincipalId::Mp, PrincipalId::Fdu(vp), Body::Data {
        job: victim,
        env: Wire::new(env, MessageKind::Control),
    }));
    if let Some(env) = captured_sc {
        attempts.push(("replayed controller teardown".into(), PrincipalId::Fdu(op), PrincipalId::Sc(sc), Body::Terminate {
            job: victim,
            env,
        }));
    }
    if let Some(env) = captured_req {
        attempts.push(("replayed tenant terminate".into(), PrincipalId::Tenant(T0), PrincipalId::Fdu(vp), Body::Data {
            job: victim,
            env,
        }));
    }
    let mut refused = Vec::new();
    for (what, src, dst, body) in attempts {
        let before = w.incidents.len();
        let r = w.fabric.inject(src, dst, body);
        w.run_until_quiescent().map_err(setup("pump"))?;
        let raised = w.incidents[before..].iter().map(|i| i.what.clone()).collect::<Vec<_>>();
        obs.notes.push(format!("{what}: {r:?}, raised {raised:?}"));
        refused.push(!raised.is_empty());
    }
    let still_bound = w.scs[&sc].ert().contains_key(&victim)
        && w.fdu_entry(vp).and_then(|e| e.owner().job()) == Some(victim)
        && w.session(victim).map(|s| s.state) == Some(SessionState::Running);
    let s = secret("after");
    let works = w.exchange(victim, PrincipalId::Node(vn), AppOp::Echo(s.clone())).as_deref() == Ok(&s[..]);
    obs.notes.push(format!("victim still bound: {still_bound}, still answering: {works}"));
    if still_bound && works {
        obs.outcome = all_refused(&refused);
    }
    w.terminate(victim).map_err(setup("terminate"))?;
    let dirty = w.hygiene(victim);
    w.integrity_violations.extend(dirty);
    Ok(obs)
}

// (l) Honest three-job run across two racks with every open link tapped.
fn open_link_tap(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Blocked);
    w.fabric.tap_all(TapMode::Observe, None);
    let gpu = |mem| ResourceRequest::new(DeviceKind::Gpu, 4, mem).non_tee();
    let j0 = launch(w, T0, samples::manifest("cross-rack", vec![gpu(16 * MIB), gpu(32 * MIB)]))?;
    let j1 = launch(w, T1, samples::cpu_ssd("storage"))?;
    let j2 = launch(w, TenantId(2), samples::manifest("inference", vec![
        ResourceRequest::new(DeviceKind::AiAccelerator, 2, 8 * MIB),
        gpu(4 * MIB),
    ]))?;
    let scs: BTreeSet<ScId> = w.session(j0).and_then(|s| s.membership.as_ref()).map(|m| m.scs()).unwrap_or_default();
    if scs.len() < 2 {
        return Err(AttackError::Setup("first job does not span both controllers".into()));
    }
    let mut secrets = Vec::new();
    let check = |w: &mut World, job, to, op: AppOp, want: Vec<u8>| -> Result<(), AttackError> {
        let got = w.exchange(job, to, op).map_err(setup("honest exchange"))?;
        if got != want {
            w.integrity_violations.push(format!("{job}: response from {to} corrupted"));
        }
        Ok(())
    };
    let nodes: Vec<NodeId> = w.session(j0).expect("session").nodes().into_iter().collect();
    for (i, &n) in nodes.iter().enumerate() {
        let s = secret(&format!("j0-{i}"));
        secrets.push(s.clone());
        check(w, j0, PrincipalId::Node(n), AppOp::Echo(s.clone()), s)?;
    }
    let s = secret("j0-hop");
    secrets.push(s.clone());
    let route = nodes.iter().map(|&n| PrincipalId::Node(n)).collect();
    check(w, j0, PrincipalId::Fdu(primary(w, j0)), AppOp::Forward { route, payload: s.clone() }, s)?;

    let ssd = unit_of(w, j1, DeviceKind::Ssd).expect("ssd");
    let mut block = secret("j1-block");
    secrets.push(block.clone());
    block.resize(BLOCK_SIZE as usize, b'.');
    check(w, j1, PrincipalId::Fdu(ssd), AppOp::Block(BlockCommand::write(ssd, 0, block.clone())), Vec::new())?;
    check(w, j1, PrincipalId::Fdu(ssd), AppOp::Block(BlockCommand::read(ssd, 0, 1)), block)?;

    let ai = unit_of(w, j2, DeviceKind::AiAccelerator).expect("ai");
    let model = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 3.0]).expect("2x2");
    let t = TensorJob { model: vec![model], input: vec![1.5, -4.0], fdu: ai };
    let out = crate::device::ai::encode_tensor(&[3.0f64, -12.0]);
    check(w, j2, PrincipalId::Fdu(ai), AppOp::Tensor(t), out)?;
    let gn = node_of(w, j2).expect("gpu");
    let s = secret("j2-gpu");
    secrets.push(s.clone());
    check(w, j2, PrincipalId::Node(gn), AppOp::Echo(s.clone()), s)?;

    for j in [j0, j1, j2] {
        w.terminate(j).map_err(setup("terminate"))?;
        let dirty = w.hygiene(j);
        w.integrity_violations.extend(dirty);
    }
    let captures = w.fabric.captures();
    let tainted: usize = captures.iter().filter(|m| !m.taint.is_empty()).map(|m| m.body.to_wire().len()).sum();
    obs.notes.push(format!("{} messages captured on {} open links, {tainted} tainted bytes", captures.len(), w.fabric.open_links().len()));
    let exposed = outsider_view_contains(w, &secrets);
    obs.notes.extend(exposed.iter().cloned());
    w.integrity_violations.extend(exposed);
    if !captures.is_empty() && tainted == 0 {
        obs.outcome = Outcome::Harmless;
    }
    Ok(obs)
}

// Two jobs' DMA staging steered onto the same untrusted range.
fn overlapping_dma(w: &mut World) -> Result<Observed, AttackError> {
    let mut obs = Observed::new(Outcome::Blocked);
    let a = launch(w, T0, samples::cpu_only("a"))?;
    let b = launch(w, T1, samples::cpu_only("b"))?;
    let (fa, fb) = (primary(w, a), primary(w, b));
    if fa.node != fb.node {
        return Err(AttackError::Setup("jobs on different nodes".into()));
    }
    let shared = w.fdu_entry(fa).expect("entry").staging;
    let r = w.nodes.get_mut(&fb.node).expect("node").remap_staging(fb, shared);
    record(&mut obs.notes, "remap second job's staging onto the first's", &r);
    let (sa, sb) = (secret("dma-a"), secret("dma-b"));
    dma_to_tenant(w, a, 0, sa.clone())?;
    dma_to_tenant(w, b, 0, sb.clone())?;
    dma_to_tenant(w, a, 64, sa.clone())?;
    let own = |w: &World, j, s: &Vec<u8>| {
        let got = w.session(j).expect("session").dma_received();
        !got.is_empty() && got.iter().all(|(_, d)| d == s)
    };
    let (ok_a, ok_b) = (own(w, a, &sa), own(w, b, &sb));
    obs.notes.push(format!("each tenant received only its own data: {}", ok_a && ok_b));
    let exposed = outsider_view_contains(w, &[sa, sb]);
    obs.notes.extend(exposed.iter().cloned());
    w.integrity_violations.extend(exposed);
    if r.is_ok() && ok_a && ok_b {
        obs.outcome = Outcome::Harmless;
    } else if r.is_ok() {
        w.integrity_violations.push("overlapping staging corrupted a transfer unnoticed".into());
    }
    Ok(obs)
}

/// Result of one fuzzed world.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FuzzReport {
    pub seed: u64,
    pub nodes: usize,
    pub jobs: usize,
    /// Jobs that got past provisioning and were started.
    pub started: usize,
    pub actions: usize,
    pub outcome: Outcome,
    pub findings: Vec<String>,
}

/// A random topology with at most eight nodes.
pub fn random_topology<R: Rng + ?Sized>(rng: &mut R) -> Topology {
    let racks = rng.random_range(1..=2u32);
    let mut t = samples::single_rack();
    t.racks.clear();
    t.tenants = rng.random_range(1..=3);
    let total = rng.random_range(2..=8u32);
    let mut id = 1;
    for r in 0..racks {
        let mut rack = samples::single_rack().racks.remove(0);
        rack.name = format!("r{r}");
        rack.scs[0].id = r;
        rack.nodes.clear();
        let here = if r + 1 == racks { total + 1 - id } else { (total / racks).max(1) };
        for k in 0..here {
            let kind = if k == 0 && r == 0 {
                0
            } else {
                rng.random_range(0..4)
            };
            let n = match kind {
                0 => {
                    let parts = rng.random_range(1..=3);
                    let fdus = (0..parts).map(|_| FduSpec::new(2, 16 * MIB)).collect();
                    NodeSpec::tee(id, DeviceKind::Cpu, 2 * parts, 16 * MIB * u64::from(parts), fdus)
                        .with_properties([Policy::MemIsolation])
                }
                1 => NodeSpec::tee(id, DeviceKind::Ssd, 2, 32 * MIB, vec![FduSpec::new(1, 16 * MIB); 2]),
                2 => NodeSpec::tee(id, DeviceKind::AiAccelerator, 2, 16 * MIB, vec![]),
                _ => NodeSpec::non_tee(id, DeviceKind::Gpu, 8, 8 * MIB, r),
            };
            rack.nodes.push(n);
            id += 1;
        }
        t.racks.push(rack);
    }
    t
}

fn random_manifest<R: Rng + ?Sized>(rng: &mut R, i: usize) -> Manifest {
    let name = format!("fuzz-{i}");
    match rng.random_range(0..5) {
        0 => samples::cpu_only(&name),
        1 => samples::cpu_gpu(&name),
        2 => samples::cpu_ssd(&name),
        3 => samples::cpu_ai(&name),
        _ => samples::manifest(&name, vec![
            ResourceRequest::new(DeviceKind::Gpu, 2, MIB).non_tee(),
            ResourceRequest::new(DeviceKind::Gpu, 2, MIB).non_tee(),
        ]),
    }
}

fn pick<'a, T, R: Rng + ?Sized>(rng: &mut R, items: &'a [T]) -> Option<&'a T> {
    (!items.is_empty()).then(|| &items[rng.random_range(0..items.len())])
}

/// One random honest operation against a member of `job`. Echo responses
/// that come back altered are integrity violations nobody noticed.
fn random_op<R: Rng + ?Sized>(w: &mut World, rng: &mut R, job: JobId) {
    let Some(s) = w.session(job) else { return };
    if s.state != SessionState::Running {
        return;
    }
    let mut members: Vec<PrincipalId> = s.fdus().into_iter().map(PrincipalId::Fdu).collect();
    members.extend(s.nodes().into_iter().map(PrincipalId::Node));
    let Some(&to) = pick(rng, &members) else { return };
    let payload = secret(&format!("{job}-{}", rng.random::<u32>()));
    let op = match (to, rng.random_range(0..3)) {
        (PrincipalId::Fdu(f), 1) if unit_of(w, job, DeviceKind::Ssd) == Some(f) => {
            let mut b = payload.clone();
            b.resize(BLOCK_SIZE as usize, 0);
            AppOp::Block(BlockCommand::write(f, rng.random_range(0..8), b))
        }
        (_, 2) => {
            let route: Vec<PrincipalId> = (0..rng.random_range(1..3)).filter_map(|_| pick(rng, &members).copied()).collect();
            AppOp::Forward { route, payload: payload.clone() }
        }
        _ => AppOp::Echo(payload.clone()),
    };
    let echo = matches!(op, AppOp::Echo(_) | AppOp::Forward { .. });
    if let Ok(got) = w.exchange(job, to, op) {
        if echo && got != payload {
            w.integrity_violations.push(format!("{job}: altered response from {to} accepted"));
        }
    }
}

fn random_attack<R: Rng + ?Sized>(w: &mut World, rng: &mut R) {
    let links = w.fabric.open_links();
    let fdus: Vec<FduId> = w.nodes.values().flat_map(|n| n.fdus().collect::<Vec<_>>()).collect();
    match rng.random_range(0..10) {
        0 => {
            let mode = match rng.random_range(0..5) {
                0 => TapMode::Observe,
                1 => TapMode::Drop,
                2 => TapMode::Duplicate,
                3 => TapMode::FlipBit,
                _ => TapMode::Delay(rng.random_range(1..5)),
            };
            let kinds = rng.random_bool(0.5).then(|| {
                let all = [MessageKind::Dma, MessageKind::Control, MessageKind::AttResponse, MessageKind::AttChallenge];
                BTreeSet::from([all[rng.random_range(0..all.len())]])
            });
            match pick(rng, &links) {
                Some(l) if rng.random_bool(0.7) => {
                    let _ = w.fabric.attacker_tap(l.a, l.b, mode, kinds);
                }
                _ => w.fabric.tap_all(mode, kinds),
            }
        }
        1 => w.fabric.clear_taps(),
        2 => {
            let n = w.fabric.captures().len();
            if n > 0 {
                let _ = w.fabric.replay(rng.random_range(0..n));
            }
        }
        3 => {
            // Re-address a captured message to another principal.
            let n = w.fabric.captures().len();
            let principals: Vec<PrincipalId> = w.fabric.principals().iter().copied().collect();
            if n > 0 {
                let m = w.fabric.captures()[rng.random_range(0..n)].clone();
                if let Some(&dst) = pick(rng, &principals) {
                    let _ = w.fabric.inject(m.src, dst, m.body);
                }
            }
        }
        4 => {
            if let Some(&f) = pick(rng, &fdus) {
                let _ = w.fabric.inject(PrincipalId::Mp, PrincipalId::Fdu(f), Body::Interrupt { fdu: f, vector: rng.random_range(0..3) });
            }
        }
        5 => {
            let nodes: Vec<(ScId, NodeId)> = w.scs.iter().flat_map(|(&s, c)| c.nodes.keys().map(move |&n| (s, n))).collect();
            if let Some(&(s, n)) = pick(rng, &nodes) {
                let _ = w.scs.get_mut(&s).expect("sc").mp_reconfigure(n, hash(b"evil"), true);
            }
        }
        6 => {
            if let (Some(&f), Some(&g)) = (pick(rng, &fdus), pick(rng, &fdus)) {
                if f.node == g.node {
                    let to = w.fdu_entry(g).expect("entry").staging;
                    let _ = w.nodes.get_mut(&f.node).expect("node").remap_staging(f, to);
                }
            }
        }
        7 => {
            if let Some(&f) = pick(rng, &fdus) {
                let e = w.fdu_entry(f).expect("entry");
                let (staging, base) = (e.staging, e.base);
                let node = w.nodes.get_mut(&f.node).expect("node");
                let loot: Vec<TaintedBytes> = [
                    node.host.read(staging, STAGING_SLOT).ok(),
                    node.host_read(base, PAGE_SIZE).ok(),
                    node.hypervisor_page_out(f, 0).ok(),
                ]
                .into_iter()
                .flatten()
                .collect();
                w.loot.extend(loot);
            }
        }
        8 => {
            let nodes: Vec<(ScId, NodeId)> = w.scs.iter().flat_map(|(&s, c)| c.nodes.keys().map(move |&n| (s, n))).collect();
            if let (Some(&(s, a)), Some(&(t, b))) = (pick(rng, &nodes), pick(rng, &nodes)) {
                if s == t {
                    let sc = w.scs.get_mut(&s).expect("sc");
                    // A member reading its own job's data is not loot.
                    if let Ok(mut l) = sc.direct_access(a, b, 0, 64) {
                        let own = sc.job_of(a);
                        l.labels.retain(|&j| Some(j) != own);
                        w.loot.push(l);
                    }
                    let _ = sc.local_transfer(b, a, 0, 64);
                    let _ = sc.setup_shared_region(b, a, 0, 64);
                }
            }
        }
        _ => {
            w.mp.strategy = match rng.random_range(0..4) {
                0 => Strategy::IgnoreBusy,
                1 => Strategy::Undersize,
                _ => Strategy::Honest,
            };
        }
    }
    let _ = w.run_until_quiescent();
}

/// One seeded world: random topology, up to three jobs and a random
/// interleaving of honest operations and attacker actions.
pub fn fuzz_world(seed: u64) -> FuzzReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_f022);
    let topology = random_topology(&mut rng);
    let nodes = topology.nodes().count();
    let mut w = World::new(&topology, seed).expect("generated topologies are valid");
    let n_jobs = rng.random_range(1..=3usize);
    let mut jobs = Vec::new();
    let mut actions = 0;
    for step in 0..rng.random_range(8..24) {
        actions += 1;
        let launch = jobs.len() < n_jobs && rng.random_bool(0.4);
        match if launch { 0 } else { rng.random_range(1..6) } {
            0 => {
                let m = w.sign_manifest(random_manifest(&mut rng, step));
                let tenant = TenantId(rng.random_range(0..topology.tenants));
                let known: BTreeSet<JobId> = w.sessions().map(|s| s.job).collect();
                let _ = w.launch(tenant, &m, SAMPLE_CODE);
                jobs.extend(w.sessions().map(|s| s.job).filter(|j| !known.contains(j)));
            }
            1 | 2 => {
                if let Some(&j) = pick(&mut rng, &jobs) {
                    random_op(&mut w, &mut rng, j);
                }
            }
            3 if rng.random_bool(0.3) => {
                if let Some(&j) = pick(&mut rng, &jobs) {
                    let _ = w.terminate(j);
                }
            }
            _ => random_attack(&mut w, &mut rng),
        }
    }
    w.fabric.clear_taps();
    for &j in &jobs {
        let _ = w.terminate(j);
    }
    let findings = w.audit();
    let started = w.sessions().filter(|s| matches!(s.state, SessionState::Running | SessionState::Terminated)).count();
    FuzzReport {
        seed,
        nodes,
        jobs: jobs.len(),
        started,
        actions,
        outcome: if findings.is_empty() { Outcome::Harmless } else { Outcome::Leak },
        findings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Outgoing;

    #[test]
    fn names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
        assert!("nope".parse::<AttackKind>().is_err());
    }

    // The audit has to be able to fail for a clean result to mean anything.
    #[test]
    fn audit_flags_plaintext_on_open_links_and_in_loot() {
        let mut w = World::new(&samples::single_rack(), 1).unwrap();
        let job = launch(&mut w, T0, samples::cpu_gpu("j")).unwrap();
        assert!(w.audit().is_empty());
        let out = Outgoing::new(PrincipalId::Sc(ScId(0)), PrincipalId::Tenant(T0), Body::Raw {
            job,
            to: PrincipalId::Tenant(T0),
            bytes: secret("x"),
        });
        w.fabric.send(out.tainted([job].into())).unwrap();
        assert_eq!(w.audit().len(), 1);
        w.loot.push(TaintedBytes::labelled(secret("y"), job));
        assert_eq!(w.audit().len(), 2);
    }

    #[test]
    fn outsider_scan_finds_plaintext_in_host_memory() {
        let mut w = World::new(&samples::single_rack(), 1).unwrap();
        let s = secret("host");
        w.nodes.get_mut(&NodeId(1)).unwrap().host.write(STAGING_SLOT * 2 + 100, &TaintedBytes::clean(s.clone())).unwrap();
        assert_eq!(outsider_view_contains(&w, &[s]).len(), 1);
    }

    #[test]
    fn same_seed_same_fuzz_world() {
        let (a, b) = (fuzz_world(17), fuzz_world(17));
        assert_eq!((a.nodes, a.jobs, a.actions, a.outcome), (b.nodes, b.jobs, b.actions, b.outcome));
    }

    #[test]
    fn random_topologies_are_valid_and_small() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = random_topology(&mut rng);
            t.validate().unwrap();
            assert!((2..=8).contains(&t.nodes().count()));
        }
    }
}
