// SPDX-License-Identifier: Apache-2.0

//! A complete simulated data center: devices, controllers, tenants, the
//! management plane and the fabric between them, driven by one event loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::attestation::{pba_events_for, ChallengeBook, ConfigWhitelist, DeviceRot, RevocationList, SecurityProperties};
use crate::crypto::{KeyRegistry, SigningKeyPair, Suite};
use crate::fabric::{Fabric, FabricError, Message};
use crate::ids::{FduId, JobId, NodeId, PrincipalId, ScId, TenantId};
use crate::manifest::{DeviceKind, Manifest};
use crate::memory::{TaintedBytes, PAGE_SIZE};
use crate::mgmt::{FduInfo, Inventory, ManagementPlane, NodeInfo};
use crate::protocol::{Ctx, Effects, Incident, Outgoing};
use crate::sc::{NonTeeNode, ScState};
use crate::tee_node::{NodeError, Owner, TeeNode};
use crate::tenant::JobSession;
use crate::topology::{Topology, TopologyError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorldError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("{0} failed measured boot")]
    Boot(PrincipalId),
    #[error("partitioning {0}: {1}")]
    Partition(NodeId, NodeError),
}

/// Device manufacturer and enclave developer trust material.
pub struct Vendor {
    pub name: String,
    manufacturer: SigningKeyPair,
    developer: SigningKeyPair,
    pub whitelist: ConfigWhitelist,
    pub revocation: RevocationList,
}

impl Vendor {
    /// Signs enclave manifests.
    pub fn developer(&self) -> &SigningKeyPair {
        &self.developer
    }

    /// Certifies device roots of trust.
    pub fn manufacturer(&self) -> &SigningKeyPair {
        &self.manufacturer
    }
}

#[derive(Debug, Default)]
pub struct TenantState {
    pub inbox: Vec<Message>,
    pub challenges: ChallengeBook,
}

pub struct World {
    pub seed: u64,
    pub suite: Suite,
    pub(crate) rng: ChaCha20Rng,
    pub fabric: Fabric,
    pub keys: KeyRegistry,
    pub(crate) next_channel: u32,
    pub nodes: BTreeMap<NodeId, TeeNode>,
    pub scs: BTreeMap<ScId, ScState>,
    pub vendor: Vendor,
    pub tenants: BTreeMap<TenantId, TenantState>,
    pub mp: ManagementPlane,
    pub(crate) sessions: BTreeMap<JobId, JobSession>,
    pub incidents: Vec<Incident>,
    /// Data untrusted software obtained directly from device memory.
    pub loot: Vec<TaintedBytes>,
    /// Integrity failures a scenario observed that no principal flagged.
    pub integrity_violations: Vec<String>,
}

type Nodes = BTreeMap<NodeId, TeeNode>;
type Scs = BTreeMap<ScId, ScState>;

impl World {
    pub fn new(topology: &Topology, seed: u64) -> Result<Self, WorldError> {
        topology.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let manufacturer = SigningKeyPair::generate(&mut rng);
        let developer = SigningKeyPair::generate(&mut rng);
        let vspec = &topology.vendor;
        let mut whitelist = ConfigWhitelist::new(manufacturer.public());
        let mut revocation = RevocationList::default();
        let mut fabric = Fabric::default();
        fabric.add_principal(PrincipalId::Mp);
        let props_of = |ps: &[crate::manifest::Policy]| -> SecurityProperties { ps.iter().map(|&p| (p, true)).collect() };

        let mut scs = BTreeMap::new();
        for s in topology.scs() {
            let props = SecurityProperties::new();
            whitelist.allow_firmware(s.firmware.clone(), vspec.published_digest(&s.firmware));
            whitelist.allow_configuration(&props);
            let rot = DeviceRot::manufacture(&mut rng, &vspec.name, &manufacturer, DeviceKind::SecurityController, &s.firmware, props);
            if vspec.revoked_scs.contains(&s.id) {
                revocation.revoke_device(rot.device_id);
            }
            let fw = s.firmware_digest.unwrap_or_else(|| vspec.published_digest(&s.firmware));
            let mut sc = ScState::new(ScId(s.id), rot, fw, s.staging, s.buffer);
            sc.boot().map_err(|_| WorldError::Boot(PrincipalId::Sc(ScId(s.id))))?;
            fabric.add_principal(PrincipalId::Sc(ScId(s.id)));
            scs.insert(ScId(s.id), sc);
        }

        let mut nodes = BTreeMap::new();
        let mut inventory = Inventory::default();
        for n in topology.nodes() {
            whitelist.allow_firmware(n.firmware.clone(), vspec.published_digest(&n.firmware));
            let fw = n.firmware_digest.unwrap_or_else(|| vspec.published_digest(&n.firmware));
            let id = NodeId(n.id);
            if !n.tee {
                let sc = ScId(n.sc.expect("validated"));
                scs.get_mut(&sc).expect("validated").attach(NonTeeNode::new(id, n.kind, n.cores, n.memory, &n.firmware, fw));
                fabric.attach(id, sc);
                inventory.nodes.push(NodeInfo { node: id, sc, kind: n.kind, cores: n.cores, memory: n.memory });
                continue;
            }
            let props = props_of(&n.properties);
            whitelist.allow_configuration(&props);
            let rot = DeviceRot::manufacture(&mut rng, &vspec.name, &manufacturer, n.kind, &n.firmware, props.clone());
            if vspec.revoked_nodes.contains(&n.id) {
                revocation.revoke_device(rot.device_id);
            }
            let mut node = TeeNode::new(id, n.kind, n.cores, n.memory, rot, fw, pba_events_for(&props));
            node.boot().map_err(|_| WorldError::Boot(PrincipalId::Node(id)))?;
            node.partition_fdus(&n.partitions()).map_err(|e| WorldError::Partition(id, e))?;
            for e in node.fmt() {
                fabric.add_principal(PrincipalId::Fdu(e.fdu));
                inventory.fdus.push(FduInfo {
                    fdu: e.fdu,
                    kind: n.kind,
                    cores: e.cores.len() as u32,
                    memory: e.len,
                    properties: n.properties.iter().copied().collect(),
                });
            }
            nodes.insert(id, node);
        }
        for v in &vspec.revoked_firmware {
            revocation.revoke_firmware(v.clone());
        }
        whitelist.sign(&manufacturer);
        revocation.sign(&manufacturer);

        let mut tenants = BTreeMap::new();
        for t in 0..topology.tenants {
            fabric.add_principal(PrincipalId::Tenant(TenantId(t)));
            tenants.insert(TenantId(t), TenantState::default());
        }
        Ok(Self {
            seed,
            suite: topology.suite,
            rng,
            fabric,
            keys: KeyRegistry::default(),
            next_channel: 0,
            nodes,
            scs,
            vendor: Vendor { name: vspec.name.clone(), manufacturer, developer, whitelist, revocation },
            tenants,
            mp: ManagementPlane::new(inventory),
            sessions: BTreeMap::new(),
            incidents: Vec::new(),
            loot: Vec::new(),
            integrity_violations: Vec::new(),
        })
    }

    /// Signs `m` with the world's developer key.
    pub fn sign_manifest(&self, m: Manifest) -> Manifest {
        m.sign(&self.vendor.developer)
    }

    /// Runs `f` with handler services alongside the devices and controllers.
    pub fn with_ctx<R>(&mut self, f: impl FnOnce(&mut Ctx, &mut Nodes, &mut Scs) -> R) -> R {
        let mut ctx =
            Ctx { rng: &mut self.rng, keys: &mut self.keys, suite: self.suite, next_channel: &mut self.next_channel };
        f(&mut ctx, &mut self.nodes, &mut self.scs)
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn send(&mut self, out: Outgoing) -> Result<(), FabricError> {
        self.fabric.send(out).map(|_| ())
    }

    /// Sends handler output and records its incidents. Refused sends are
    /// already traced by the fabric.
    pub fn apply(&mut self, fx: Effects) {
        for inc in fx.incidents {
            self.record_incident(inc);
        }
        for o in fx.out {
            let _ = self.fabric.send(o);
        }
    }

    pub fn record_incident(&mut self, inc: Incident) {
        self.fabric.note_incident(inc.at, inc.job, inc.what.clone());
        self.incidents.push(inc);
    }

    pub fn incident_count(&self, what: &str) -> usize {
        self.incidents.iter().filter(|i| i.what == what).count()
    }

    pub fn sc_of(&self, node: NodeId) -> Option<ScId> {
        self.scs.iter().find(|(_, s)| s.nodes.contains_key(&node)).map(|(&id, _)| id)
    }

    /// Delivers messages until the fabric is idle. Returns how many were
    /// delivered.
    pub fn run_until_quiescent(&mut self) -> Result<usize, FabricError> {
        let mut n = 0;
        while let Some(msg) = self.fabric.next()? {
            self.deliver(msg);
            n += 1;
        }
        self.fabric.advance();
        Ok(n)
    }

    fn deliver(&mut self, msg: Message) {
        let Message { src, dst, body, .. } = msg.clone();
        let fx = match dst {
            PrincipalId::Fdu(f) => {
                let mut ctx =
                    Ctx { rng: &mut self.rng, keys: &mut self.keys, suite: self.suite, next_channel: &mut self.next_channel };
                match self.nodes.get_mut(&f.node) {
                    Some(node) => node.handle(&mut ctx, src, f, body),
                    None => Effects::default(),
                }
            }
            PrincipalId::Sc(s) => {
                let mut ctx =
                    Ctx { rng: &mut self.rng, keys: &mut self.keys, suite: self.suite, next_channel: &mut self.next_channel };
                match self.scs.get_mut(&s) {
                    Some(sc) => sc.handle(&mut ctx, src, body),
                    None => Effects::default(),
                }
            }
            PrincipalId::Node(n) => match self.sc_of(n) {
                Some(s) => self.scs.get_mut(&s).expect("present").handle_node(n, body),
                None => Effects::default(),
            },
            PrincipalId::Tenant(t) => {
                if let Some(ts) = self.tenants.get_mut(&t) {
                    ts.inbox.push(msg);
                }
                Effects::default()
            }
            PrincipalId::Mp => self.mp.handle(src, body),
        };
        self.apply(fx);
    }

    /// Placement-independent safety audit. Every finding is a confidentiality
    /// or isolation failure.
    pub fn audit(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in self.fabric.leaks() {
            out.push(format!("tick {}: plaintext of {:?} on open link {} -> {}", l.tick, l.jobs, l.src, l.dst));
        }
        for node in self.nodes.values() {
            for e in node.fmt() {
                if let Owner::Owned(j) = e.owner() {
                    if e.key().and_then(|k| k.job()) != Some(j) {
                        out.push(format!("{}: key does not belong to owner {j}", e.fdu));
                    }
                }
            }
            for (addr, labels) in node.memory.resident() {
                let mut allowed = node.permitted_labels(addr);
                allowed.extend(node.permitted_labels(addr + PAGE_SIZE - 1));
                if !labels.is_subset(&allowed) {
                    out.push(format!("{}: page {addr:#x} holds data of {labels:?}, allowed {allowed:?}", node.id));
                }
            }
            if !node.host.all_labels().is_empty() {
                out.push(format!("{}: plaintext of {:?} in host memory", node.id, node.host.all_labels()));
            }
        }
        for sc in self.scs.values() {
            out.extend(sc.audit());
        }
        for t in self.tenants.values() {
            for m in &t.inbox {
                if !m.taint.is_empty() {
                    out.push(format!("tenant received raw plaintext of {:?} from {}", m.taint, m.src));
                }
            }
        }
        for l in &self.loot {
            if l.is_tainted() {
                out.push(format!("untrusted software obtained plaintext of {:?}", l.labels));
            }
        }
        out.extend(self.integrity_violations.iter().cloned());
        out
    }

    /// Post-termination checks for `job`: units free, routing entries gone,
    /// released memory zero and no key handles alive.
    pub fn hygiene(&mut self, job: JobId) -> Vec<String> {
        let mut out = Vec::new();
        let (fdus, nodes) = match self.sessions.get(&job) {
            Some(s) => (s.fdus(), s.nodes()),
            None => (BTreeSet::new(), BTreeSet::new()),
        };
        for node in self.nodes.values() {
            for e in node.fmt() {
                if e.owner().job() == Some(job) {
                    out.push(format!("{} still held by {job}", e.fdu));
                }
                if fdus.contains(&e.fdu) {
                    if e.owner() != Owner::Free {
                        out.push(format!("{} not free", e.fdu));
                    }
                    if !node.memory.is_zero(e.base, e.len) {
                        out.push(format!("{} memory not zeroed", e.fdu));
                    }
                    if !node.host.is_zero(e.staging, crate::tee_node::STAGING_SLOT) {
                        out.push(format!("{} staging not zeroed", e.fdu));
                    }
                }
            }
        }
        for sc in self.scs.values() {
            if sc.ert().contains_key(&job) {
                out.push(format!("{} still routes {job}", sc.id));
            }
            if sc.staging.all_labels().contains(&job) {
                out.push(format!("{} staging holds data of {job}", sc.id));
            }
            for n in nodes.iter().filter_map(|n| sc.nodes.get(n)) {
                if n.memory.resident_pages() != 0 {
                    out.push(format!("{} memory not zeroed", n.id));
                }
            }
        }
        let live = self.keys.live_for(job);
        if live != 0 {
            out.push(format!("{live} key handles of {job} alive"));
        }
        out
    }

    pub fn fdu_entry(&self, fdu: FduId) -> Option<&crate::tee_node::FmtEntry> {
        self.nodes.get(&fdu.node).and_then(|n| n.entry(fdu))
    }

    pub fn trace_jsonl(&self) -> String {
        self.fabric.trace_jsonl()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::AppOp;
    use crate::samples;
    use crate::tenant::{SessionState, TenantError};

    const T0: TenantId = TenantId(0);

    #[test]
    fn honest_job_end_to_end() {
        let mut w = World::new(&samples::single_rack(), 7).unwrap();
        let m = w.sign_manifest(samples::cpu_gpu("e2e"));
        let job = w.launch(T0, &m, samples::SAMPLE_CODE).unwrap();
        let s = w.session(job).unwrap();
        assert_eq!(s.state, SessionState::Running);
        let primary = s.primary().unwrap();
        let gpu = *s.nodes().iter().next().unwrap();

        assert_eq!(w.exchange(job, PrincipalId::Fdu(primary), AppOp::Echo(b"hi".to_vec())).unwrap(), b"hi");
        assert_eq!(w.exchange(job, PrincipalId::Node(gpu), AppOp::Echo(b"gpu".to_vec())).unwrap(), b"gpu");
        let route = vec![PrincipalId::Node(gpu)];
        let fwd = AppOp::Forward { route, payload: b"relay".to_vec() };
        assert_eq!(w.exchange(job, PrincipalId::Fdu(primary), fwd).unwrap(), b"relay");
        assert_eq!(w.audit(), Vec::<String>::new());

        w.terminate(job).unwrap();
        w.terminate(job).unwrap();
        assert_eq!(w.hygiene(job), Vec::<String>::new());
        assert_eq!(
            w.exchange(job, PrincipalId::Fdu(primary), AppOp::Echo(vec![1])),
            Err(TenantError::SessionNotRunning)
        );
        assert!(w.trace_jsonl().contains("JobCompleted"));
        assert!(w.mp.busy_fdus().is_empty() && w.mp.busy_nodes().is_empty());
        assert_eq!(w.audit(), Vec::<String>::new());
    }

    #[test]
    fn unsigned_manifest_and_wrong_code_are_rejected() {
        let mut w = World::new(&samples::single_rack(), 1).unwrap();
        assert!(matches!(w.submit_job(T0, &samples::cpu_only("x")), Err(TenantError::ManifestInvalid(_))));
        let m = w.sign_manifest(samples::cpu_only("x"));
        assert!(matches!(w.launch(T0, &m, b"other code"), Err(TenantError::CodeMismatch(_))));
    }

    #[test]
    fn same_seed_same_trace() {
        let run = |seed| {
            let mut w = World::new(&samples::two_rack(), seed).unwrap();
            let m = w.sign_manifest(samples::cpu_ai("t"));
            let job = w.launch(T0, &m, samples::SAMPLE_CODE).unwrap();
            w.terminate(job).unwrap();
            w.trace_jsonl()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
