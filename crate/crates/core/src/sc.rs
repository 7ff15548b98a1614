// SPDX-License-Identifier: Apache-2.0

//! Security controller: the TEE proxy for the non-TEE nodes attached to it.
//!
//! Plaintext for a job only ever exists in the attached nodes and in that
//! job's staging buffers. Everything leaving the container is sealed under
//! the job key.

use std::collections::{BTreeMap, BTreeSet};

use crate::attestation::{AttestError, AttestationReport, Challenge, DeviceRot, FduSection, NodeVouch, SignedVouch};
use crate::crypto::{hash, CryptoError, DhKeyPair, Digest, Envelope, KeyHandle, PublicKey, ReplayGuard, SendChannel};
use crate::device::ai::{ai_compute, decode_job, encode_job, encode_tensor};
use crate::device::ssd::{self, BlockResponse, Namespace, BLOCK_SIZE};
use crate::ids::{JobId, NodeId, PrincipalId, ScId};
use crate::manifest::DeviceKind;
use crate::memory::{Labels, SparseMemory, TaintedBytes};
use crate::protocol::{
    decode_key_bundle, termination_statement, AppMessage, AppOp, Body, Ctx, Effects, JobMembership, Outgoing,
    Wire,
};

/// 2.5 GiB of staging, matching the reference capacity parameters.
pub const DEFAULT_STAGING_CAPACITY: u64 = 5 << 29;
pub const DEFAULT_BUFFER_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScError {
    #[error("{0} is not attached to this controller")]
    NotAttached(NodeId),
    #[error("{0} already belongs to a job")]
    AlreadyAllocated(NodeId),
    #[error("no pending binding for {0}")]
    NoSuchBinding(JobId),
    #[error("no routing entry for {0}")]
    NoSuchJob(JobId),
    #[error("access denied")]
    AccessDenied,
    #[error("staging capacity exhausted")]
    CapacityExceeded,
    #[error("malformed key bundle")]
    BadBundle,
    #[error("controller not booted")]
    NotBooted,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl ScError {
    pub fn code(&self) -> &'static str {
        match self {
            ScError::NotAttached(_) => "NotAttached",
            ScError::AlreadyAllocated(_) => "AlreadyAllocated",
            ScError::NoSuchBinding(_) => "NoSuchBinding",
            ScError::NoSuchJob(_) => "NoSuchJob",
            ScError::AccessDenied => "AccessDenied",
            ScError::CapacityExceeded => "CapacityExceeded",
            ScError::BadBundle => "BadBundle",
            ScError::NotBooted => "NotBooted",
            ScError::Crypto(CryptoError::ReplayDetected { .. }) => "ReplayDetected",
            ScError::Crypto(CryptoError::AuthFailure) => "AuthFailure",
            ScError::Crypto(_) => "CryptoError",
        }
    }
}

/// A node without its own TEE, reachable only through its controller.
#[derive(Debug)]
pub struct NonTeeNode {
    pub id: NodeId,
    pub kind: DeviceKind,
    pub cores: u32,
    pub memory: SparseMemory,
    pub firmware_version: String,
    pub factory_firmware: Digest,
    pub firmware: Digest,
    /// Set by a malicious firmware push; such firmware hoards job data.
    pub malicious: bool,
    /// Whatever malicious firmware managed to retain.
    pub shadow: Vec<TaintedBytes>,
}

impl NonTeeNode {
    pub fn new(id: NodeId, kind: DeviceKind, cores: u32, memory: u64, firmware_version: &str, firmware: Digest) -> Self {
        Self {
            id,
            kind,
            cores,
            memory: SparseMemory::new(memory),
            firmware_version: firmware_version.to_owned(),
            factory_firmware: firmware,
            firmware,
            malicious: false,
            shadow: Vec::new(),
        }
    }

    /// Factory reset: memory zeroed, factory firmware restored.
    pub fn reset(&mut self) {
        self.memory.zero_all();
        self.firmware = self.factory_firmware;
        self.malicious = false;
        self.shadow.clear();
    }

    /// Executes one application request for `job`. Returns the messages
    /// the node hands back to its controller as `(destination, message)`.
    pub fn run(&mut self, job: JobId, msg: AppMessage) -> Vec<(PrincipalId, AppMessage)> {
        let me = PrincipalId::Node(self.id);
        let AppMessage { req, reply_to, op } = msg;
        let label = |b: Vec<u8>| TaintedBytes::labelled(b, job);
        let result: Result<Option<Vec<u8>>, String> = match op {
            AppOp::Echo(p) => {
                self.hoard(&p, job);
                Ok(Some(p))
            }
            AppOp::Forward { route, payload } => {
                self.hoard(&payload, job);
                match route.split_first() {
                    None => Ok(Some(payload)),
                    Some((&next, rest)) => {
                        let fwd = AppMessage { req, reply_to, op: AppOp::Forward { route: rest.to_vec(), payload } };
                        return vec![(next, fwd)];
                    }
                }
            }
            AppOp::Block(cmd) => {
                let ns = Namespace { base: 0, blocks: self.memory.size() / BLOCK_SIZE };
                ssd::execute(&mut self.memory, ns, &cmd, Some(job))
                    .map(|r| match r {
                        BlockResponse::Data(b) => Some(b),
                        BlockResponse::Ack => Some(Vec::new()),
                    })
                    .map_err(|e| e.to_string())
            }
            AppOp::Tensor(t) => (|| {
                let bytes = encode_job(&t)?;
                let n = bytes.len() as u64;
                self.memory.write(0, &label(bytes)).map_err(|_| crate::device::DeviceError::OutOfRange)?;
                let resident = self.memory.read(0, n).map_err(|_| crate::device::DeviceError::OutOfRange)?;
                let out = encode_tensor(&ai_compute(&decode_job::<f64>(&resident.bytes, t.fdu)?)?);
                self.memory.write(n, &label(out.clone())).map_err(|_| crate::device::DeviceError::OutOfRange)?;
                Ok(Some(out))
            })()
            .map_err(|e: crate::device::DeviceError| e.to_string()),
            AppOp::Load(code) => {
                let d = hash(&code);
                self.memory.write(0, &label(code)).map(|_| Some(d.0.to_vec())).map_err(|e| e.to_string())
            }
            AppOp::Write { offset, data } => {
                self.memory.write(offset, &label(data)).map(|_| Some(Vec::new())).map_err(|e| e.to_string())
            }
            AppOp::Read { offset, len } => self.memory.read(offset, len).map(|t| Some(t.bytes)).map_err(|e| e.to_string()),
            AppOp::Response(_) | AppOp::Fail(_) => Ok(None),
            _ => Err("Unsupported".into()),
        };
        let mut out = Vec::new();
        if self.malicious {
            // Exfiltration attempt straight to the management plane.
            out.push((PrincipalId::Mp, AppMessage { req, reply_to: me, op: AppOp::Echo(b"exfil".to_vec()) }));
        }
        match result {
            Ok(Some(bytes)) => out.push((reply_to, AppMessage { req, reply_to: me, op: AppOp::Response(bytes) })),
            Ok(None) => {}
            Err(e) => out.push((reply_to, AppMessage { req, reply_to: me, op: AppOp::Fail(e) })),
        }
        out
    }

    fn hoard(&mut self, bytes: &[u8], job: JobId) {
        if self.malicious {
            self.shadow.push(TaintedBytes::labelled(bytes.to_vec(), job));
        }
    }
}

/// Enclave routing table entry.
pub struct ErtEntry {
    pub job: JobId,
    key: KeyHandle,
    pub members: BTreeSet<NodeId>,
    /// Per-node `(offset, length)` in staging memory.
    pub buffers: BTreeMap<NodeId, (u64, u64)>,
    pub membership: JobMembership,
    tx: SendChannel,
}

impl ErtEntry {
    pub fn key(&self) -> &KeyHandle {
        &self.key
    }
}

impl std::fmt::Debug for ErtEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ErtEntry").field("job", &self.job).field("members", &self.members).field("buffers", &self.buffers).finish()
    }
}

/// A mediated zero-copy grant: `dst` may access `[offset, offset+len)` of
/// `src`'s buffer directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grant {
    pub job: JobId,
    pub src: NodeId,
    pub dst: NodeId,
    pub offset: u64,
    pub len: u64,
}

struct Binding {
    nodes: BTreeSet<NodeId>,
    dh: DhKeyPair,
    tenant_pub: PublicKey,
    manifest_id: Digest,
}

pub struct ScState {
    pub id: ScId,
    pub rot: DeviceRot,
    pub firmware_digest: Digest,
    pub buffer_bytes: u64,
    /// Staging memory; sparse, so the capacity is a bound rather than an
    /// allocation.
    pub staging: SparseMemory,
    pub nodes: BTreeMap<NodeId, NonTeeNode>,
    ert: BTreeMap<JobId, ErtEntry>,
    pending: BTreeMap<JobId, Binding>,
    grants: Vec<Grant>,
    rx: ReplayGuard,
}

impl std::fmt::Debug for ScState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScState").field("id", &self.id).field("ert", &self.ert).finish()
    }
}

impl ScState {
    pub fn new(id: ScId, rot: DeviceRot, firmware_digest: Digest, staging_capacity: u64, buffer_bytes: u64) -> Self {
        Self {
            id,
            rot,
            firmware_digest,
            buffer_bytes,
            staging: SparseMemory::new(staging_capacity),
            nodes: BTreeMap::new(),
            ert: BTreeMap::new(),
            pending: BTreeMap::new(),
            grants: Vec::new(),
            rx: ReplayGuard::default(),
        }
    }

    pub fn boot(&mut self) -> Result<(), AttestError> {
        let events = crate::attestation::pba_events_for(&self.rot.properties);
        self.rot.measured_boot(&self.firmware_digest, &events).map(|_| ())
    }

    pub fn attach(&mut self, node: NonTeeNode) {
        self.nodes.insert(node.id, node);
    }

    pub fn ert(&self) -> &BTreeMap<JobId, ErtEntry> {
        &self.ert
    }

    pub fn grants(&self) -> &[Grant] {
        &self.grants
    }

    pub fn job_of(&self, node: NodeId) -> Option<JobId> {
        self.ert.values().find(|e| e.members.contains(&node)).map(|e| e.job)
    }

    fn is_claimed(&self, node: NodeId) -> bool {
        self.job_of(node).is_some() || self.pending.values().any(|b| b.nodes.contains(&node))
    }

    fn attached(&self, node: NodeId) -> Result<(), ScError> {
        if self.nodes.contains_key(&node) {
            Ok(())
        } else {
            Err(ScError::NotAttached(node))
        }
    }

    /// Factory reset of an attached node. Also wipes the node's staging
    /// buffer and revokes its grants.
    pub fn reset_node(&mut self, node: NodeId) -> Result<(), ScError> {
        self.attached(node)?;
        self.nodes.get_mut(&node).expect("attached").reset();
        if let Some(&(off, len)) = self.ert.values().find_map(|e| e.buffers.get(&node)) {
            self.staging.zero(off, len).expect("buffer within staging");
        }
        self.grants.retain(|g| g.src != node && g.dst != node);
        Ok(())
    }

    /// Reserves `nodes` for `job`, resets them and produces the controller's
    /// report plus one vouch per node.
    pub fn bind_job(
        &mut self,
        ctx: &mut Ctx,
        job: JobId,
        nodes: &BTreeSet<NodeId>,
        challenge: &Challenge,
        tenant_pub: PublicKey,
        manifest_id: Digest,
    ) -> Result<(AttestationReport, Vec<SignedVouch>), ScError> {
        for &n in nodes {
            self.attached(n)?;
        }
        if let Some(&n) = nodes.iter().find(|&&n| self.is_claimed(n)) {
            return Err(ScError::AlreadyAllocated(n));
        }
        if self.pending.contains_key(&job) || self.ert.contains_key(&job) {
            return Err(ScError::AlreadyAllocated(*nodes.first().unwrap_or(&NodeId(u32::MAX))));
        }
        for &n in nodes {
            self.reset_node(n)?;
        }
        let dh = DhKeyPair::generate(ctx.rng);
        let section = FduSection { fdu_support: false, numbers: 0, config: Vec::new() };
        let report = self.rot.generate_report(challenge, dh.public(), section).map_err(|_| ScError::NotBooted)?;
        let vouches = nodes
            .iter()
            .map(|n| {
                let node = &self.nodes[n];
                let v = NodeVouch {
                    sc: self.id,
                    node: *n,
                    kind: node.kind,
                    cores: node.cores,
                    memory: node.memory.size(),
                    firmware_version: node.firmware_version.clone(),
                    firmware_digest: node.firmware,
                    challenge: *challenge,
                };
                SignedVouch::sign(v, &self.rot)
            })
            .collect();
        self.pending.insert(job, Binding { nodes: nodes.clone(), dh, tenant_pub, manifest_id });
        Ok((report, vouches))
    }

    pub fn abort_binding(&mut self, job: JobId) -> bool {
        self.pending.remove(&job).is_some()
    }

    /// Installs the job key delivered under the controller/tenant shared key
    /// and allocates a disjoint staging buffer for every member node.
    pub fn provision_key(&mut self, ctx: &mut Ctx, job: JobId, env: &Envelope) -> Result<(), ScError> {
        let b = self.pending.get(&job).ok_or(ScError::NoSuchBinding(job))?;
        let shared = b.dh.derive_shared(&b.tenant_pub.0)?;
        let (header, plaintext) = self.rx.open(ctx.suite, &shared, env)?;
        if header.job != job || header.context != b.manifest_id.0 {
            return Err(ScError::Crypto(CryptoError::AuthFailure));
        }
        let (key, membership) = decode_key_bundle(&plaintext).ok_or(ScError::BadBundle)?;
        let ours: BTreeSet<NodeId> =
            membership.nodes.iter().filter(|&(_, &s)| s == self.id).map(|(&n, _)| n).collect();
        if membership.job != job || membership.manifest_id != b.manifest_id || ours != b.nodes {
            return Err(ScError::BadBundle);
        }
        let buffers = self.allocate_buffers(&b.nodes)?;
        let members = b.nodes.clone();
        let key = ctx.keys.mint(Some(job), key);
        let tx = SendChannel::new(ctx.suite, key.clone(), ctx.channel(), job, PrincipalId::Sc(self.id));
        self.pending.remove(&job);
        self.ert.insert(job, ErtEntry { job, key, members, buffers, membership, tx });
        Ok(())
    }

    /// First fit by ascending offset over all existing buffers.
    fn allocate_buffers(&self, nodes: &BTreeSet<NodeId>) -> Result<BTreeMap<NodeId, (u64, u64)>, ScError> {
        let mut used: Vec<(u64, u64)> = self.ert.values().flat_map(|e| e.buffers.values().copied()).collect();
        let mut out = BTreeMap::new();
        for &n in nodes {
            used.sort_unstable();
            let mut cursor = 0u64;
            for &(off, len) in &used {
                if off >= cursor + self.buffer_bytes {
                    break;
                }
                cursor = cursor.max(off + len);
            }
            if cursor + self.buffer_bytes > self.staging.size() {
                return Err(ScError::CapacityExceeded);
            }
            used.push((cursor, self.buffer_bytes));
            out.insert(n, (cursor, self.buffer_bytes));
        }
        Ok(out)
    }

    fn entry_with(&self, job: JobId, node: NodeId) -> Result<&ErtEntry, ScError> {
        let e = self.ert.get(&job).ok_or(ScError::NoSuchJob(job))?;
        if e.members.contains(&node) {
            Ok(e)
        } else {
            Err(ScError::AccessDenied)
        }
    }

    fn write_buffer(&mut self, job: JobId, node: NodeId, bytes: &[u8]) -> Result<(), ScError> {
        let &(off, len) = self.entry_with(job, node)?.buffers.get(&node).ok_or(ScError::AccessDenied)?;
        if bytes.len() as u64 > len {
            return Err(ScError::CapacityExceeded);
        }
        self.staging.write(off, &TaintedBytes::labelled(bytes.to_vec(), job)).map_err(|_| ScError::CapacityExceeded)
    }

    /// Seals data produced by `node` under the job key and addresses it to
    /// `dst`. Destinations outside the job are refused.
    pub fn proxy_out(&mut self, node: NodeId, job: JobId, data: &[u8], dst: PrincipalId) -> Result<Outgoing, ScError> {
        let entry = self.entry_with(job, node)?;
        if !entry.membership.contains(dst) || matches!(dst, PrincipalId::Sc(_) | PrincipalId::Mp) {
            return Err(ScError::AccessDenied);
        }
        self.write_buffer(job, node, data)?;
        let me = PrincipalId::Sc(self.id);
        if let PrincipalId::Node(m) = dst {
            if self.nodes.contains_key(&m) {
                self.local_transfer(node, m, 0, data.len() as u64)?;
                let taint = Labels::from([job]);
                return Ok(Outgoing::new(me, dst, Body::Raw { job, to: dst, bytes: data.to_vec() }).tainted(taint));
            }
            return self.inter_sc_send(job, data, m);
        }
        let entry = self.ert.get_mut(&job).expect("checked");
        let env = entry.tx.seal_next(b"", data);
        Ok(Outgoing::new(me, dst, Body::Data { job, env: Wire::dma(env) }))
    }

    /// Seals `data` for member node `node` guarded by another controller.
    pub fn inter_sc_send(&mut self, job: JobId, data: &[u8], node: NodeId) -> Result<Outgoing, ScError> {
        let entry = self.ert.get_mut(&job).ok_or(ScError::NoSuchJob(job))?;
        let remote = *entry.membership.nodes.get(&node).ok_or(ScError::AccessDenied)?;
        let env = entry.tx.seal_next(b"", data);
        Ok(Outgoing::new(PrincipalId::Sc(self.id), PrincipalId::Sc(remote), Body::Proxy { job, node, env: Wire::dma(env) }))
    }

    /// Authenticates inbound job traffic and places the plaintext in the
    /// destination node's buffer, from where the node reads it.
    pub fn proxy_in(&mut self, ctx: &mut Ctx, job: JobId, env: &Envelope, dst: NodeId) -> Result<Outgoing, ScError> {
        let entry = self.entry_with(job, dst)?;
        let key = entry.key.clone();
        let header = env.header()?;
        if header.job != job || !entry.membership.contains(header.sender) {
            return Err(ScError::Crypto(CryptoError::AuthFailure));
        }
        let (_, plaintext) = self.rx.open(ctx.suite, key.key(), env)?;
        self.write_buffer(job, dst, &plaintext)?;
        let to = PrincipalId::Node(dst);
        Ok(Outgoing::new(PrincipalId::Sc(self.id), to, Body::Raw { job, to, bytes: plaintext }).tainted(Labels::from([job])))
    }

    /// Copies `[offset, offset+len)` of `src`'s buffer into `dst`'s buffer
    /// iff both belong to the same job.
    pub fn local_transfer(&mut self, src: NodeId, dst: NodeId, offset: u64, len: u64) -> Result<(), ScError> {
        self.attached(src)?;
        self.attached(dst)?;
        if src == dst {
            return Ok(());
        }
        let e = self.ert.values().find(|e| e.members.contains(&src)).ok_or(ScError::AccessDenied)?;
        if !e.members.contains(&dst) {
            return Err(ScError::AccessDenied);
        }
        let (so, sl) = e.buffers[&src];
        let (d_off, dl) = e.buffers[&dst];
        if offset.checked_add(len).is_none_or(|end| end > sl.min(dl)) {
            return Err(ScError::AccessDenied);
        }
        let data = self.staging.read(so + offset, len).map_err(|_| ScError::AccessDenied)?;
        self.staging.write(d_off + offset, &data).map_err(|_| ScError::AccessDenied)
    }

    pub fn setup_shared_region(&mut self, src: NodeId, dst: NodeId, offset: u64, len: u64) -> Result<Grant, ScError> {
        self.attached(src)?;
        self.attached(dst)?;
        let e = self.ert.values().find(|e| e.members.contains(&src)).ok_or(ScError::AccessDenied)?;
        if !e.members.contains(&dst) || offset.checked_add(len).is_none_or(|end| end > e.buffers[&src].1) {
            return Err(ScError::AccessDenied);
        }
        let g = Grant { job: e.job, src, dst, offset, len };
        self.grants.push(g);
        Ok(g)
    }

    /// A node reading a buffer directly: its own, or through a grant.
    pub fn direct_access(&self, accessor: NodeId, owner: NodeId, offset: u64, len: u64) -> Result<TaintedBytes, ScError> {
        self.attached(accessor)?;
        let e = self.ert.values().find(|e| e.members.contains(&owner)).ok_or(ScError::AccessDenied)?;
        let (base, size) = e.buffers[&owner];
        let end = offset.checked_add(len).ok_or(ScError::AccessDenied)?;
        let permitted = if accessor == owner {
            end <= size
        } else {
            self.grants
                .iter()
                .any(|g| g.src == owner && g.dst == accessor && offset >= g.offset && end <= g.offset + g.len)
        };
        if !permitted {
            return Err(ScError::AccessDenied);
        }
        self.staging.read(base + offset, len).map_err(|_| ScError::AccessDenied)
    }

    /// Tears down `job` on an authenticated command from its primary CPU
    /// unit. Returns the nodes now available again.
    pub fn release_job(&mut self, ctx: &mut Ctx, job: JobId, env: &Envelope) -> Result<Vec<NodeId>, ScError> {
        let entry = self.ert.get(&job).ok_or(ScError::NoSuchJob(job))?;
        let header = env.header()?;
        if header.job != job || header.sender != PrincipalId::Fdu(entry.membership.primary) {
            return Err(ScError::Crypto(CryptoError::AuthFailure));
        }
        let key = entry.key.clone();
        let (_, plaintext) = self.rx.open(ctx.suite, key.key(), env)?;
        drop(key);
        if plaintext != termination_statement(job) {
            return Err(ScError::Crypto(CryptoError::AuthFailure));
        }
        let nodes: Vec<NodeId> = entry.members.iter().copied().collect();
        for &n in &nodes {
            self.reset_node(n)?;
        }
        self.ert.remove(&job);
        self.rx.forget_job(job);
        Ok(nodes)
    }

    /// Management-plane firmware push. Refused for nodes bound to a job.
    pub fn mp_reconfigure(&mut self, node: NodeId, firmware: Digest, malicious: bool) -> Result<(), ScError> {
        self.attached(node)?;
        if self.is_claimed(node) {
            return Err(ScError::AlreadyAllocated(node));
        }
        let n = self.nodes.get_mut(&node).expect("attached");
        n.firmware = firmware;
        n.malicious = malicious;
        Ok(())
    }

    /// Handles a message delivered to the controller itself.
    pub fn handle(&mut self, ctx: &mut Ctx, src: PrincipalId, body: Body) -> Effects {
        let me = PrincipalId::Sc(self.id);
        let mut fx = Effects::default();
        let refuse = |fx: &mut Effects, job: JobId, e: ScError| {
            fx.incident(me, Some(job), e.code());
            fx.send(Outgoing::new(me, src, Body::Refused { job, at: me, reason: e.code().into() }));
        };
        match body {
            Body::BindRequest { job, nodes, challenge, tenant_pub, manifest_id } => {
                let nodes: BTreeSet<NodeId> = nodes.into_iter().collect();
                match self.bind_job(ctx, job, &nodes, &challenge, tenant_pub, manifest_id) {
                    Ok((report, vouches)) => fx.send(Outgoing::new(
                        me,
                        src,
                        Body::ScEvidence { job, sc: self.id, report: Box::new(report), vouches },
                    )),
                    Err(e) => refuse(&mut fx, job, e),
                }
            }
            Body::KeyInstall { job, env } => match self.provision_key(ctx, job, &env.env) {
                Ok(()) => fx.send(Outgoing::new(me, src, Body::KeyAck { job, at: me })),
                Err(e) => refuse(&mut fx, job, e),
            },
            Body::Abort { job } => {
                self.abort_binding(job);
            }
            Body::Proxy { job, node, env } => match self.proxy_in(ctx, job, &env.env, node) {
                Ok(o) => fx.send(o),
                Err(e) => fx.incident(me, Some(job), e.code()),
            },
            Body::Raw { job, to, bytes } => match src {
                PrincipalId::Node(n) if self.nodes.contains_key(&n) => match self.proxy_out(n, job, &bytes, to) {
                    Ok(o) => fx.send(o),
                    Err(e) => fx.incident(me, Some(job), e.code()),
                },
                _ => fx.incident(me, Some(job), "AccessDenied"),
            },
            Body::Terminate { job, env } => match self.release_job(ctx, job, &env.env) {
                Ok(nodes) => fx.send(Outgoing::new(me, PrincipalId::Mp, Body::ReleaseNotice { job, nodes, fdus: vec![] })),
                Err(e) => fx.incident(me, Some(job), e.code()),
            },
            _ => fx.incident(me, None, "UnexpectedMessage"),
        }
        fx
    }

    /// Handles a message the controller delivered to attached `node`.
    pub fn handle_node(&mut self, node: NodeId, body: Body) -> Effects {
        let me = PrincipalId::Node(node);
        let mut fx = Effects::default();
        let Body::Raw { job, bytes, .. } = body else {
            fx.incident(me, None, "UnexpectedMessage");
            return fx;
        };
        let Some(msg) = AppMessage::decode(&bytes) else {
            fx.incident(me, Some(job), "MalformedMessage");
            return fx;
        };
        let Some(n) = self.nodes.get_mut(&node) else {
            return fx;
        };
        for (to, reply) in n.run(job, msg) {
            let raw = Body::Raw { job, to, bytes: reply.encode() };
            fx.send(Outgoing::new(me, PrincipalId::Sc(self.id), raw).tainted(Labels::from([job])));
        }
        fx
    }

    /// Structural invariants and label placement, as human-readable findings.
    pub fn audit(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen: BTreeMap<NodeId, JobId> = BTreeMap::new();
        let mut ranges: Vec<(u64, u64, JobId)> = Vec::new();
        for e in self.ert.values() {
            for &n in &e.members {
                if let Some(prev) = seen.insert(n, e.job) {
                    out.push(format!("{}: {n} in entries for {prev} and {}", self.id, e.job));
                }
            }
            ranges.extend(e.buffers.values().map(|&(o, l)| (o, l, e.job)));
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[0].0 + w[0].1 > w[1].0 {
                out.push(format!("{}: staging buffers of {} and {} overlap", self.id, w[0].2, w[1].2));
            }
        }
        for (addr, labels) in self.staging.resident() {
            match ranges.iter().find(|&&(o, l, _)| addr >= o && addr < o + l) {
                None => out.push(format!("{}: staging {addr:#x} outside any buffer is nonzero", self.id)),
                Some(&(_, _, j)) if labels.iter().any(|&l| l != j) => {
                    out.push(format!("{}: buffer of {j} holds data of {labels:?}", self.id))
                }
                _ => {}
            }
        }
        for g in &self.grants {
            if self.job_of(g.src) != Some(g.job) || self.job_of(g.dst) != Some(g.job) {
                out.push(format!("{}: grant {g:?} spans jobs", self.id));
            }
        }
        for n in self.nodes.values() {
            let allowed: Labels = self.job_of(n.id).into_iter().collect();
            let held = n.memory.all_labels();
            if !held.is_subset(&allowed) {
                out.push(format!("{}: {} holds data of {held:?} while bound to {allowed:?}", self.id, n.id));
            }
            if n.shadow.iter().any(|s| s.is_tainted()) {
                out.push(format!("{}: firmware of {} retained job data", self.id, n.id));
            }
        }
        out
    }
}
