// SPDX-License-Identifier: Apache-2.0

//! TEE-capable node: security monitor, FDU mapping table (FMT), access
//! control units, memory protection engine and the enclave driver hooks for
//! DMA and MMIO.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attestation::{
    AttestError, AttestationReport, BootState, Challenge, DeviceRot, FduConfig, FduSection, PbaEvent,
};
use crate::crypto::{hash, AadHeader, CryptoError, Digest, DhKeyPair, Envelope, KeyHandle, PublicKey, ReplayGuard, SendChannel};
use crate::device::ai::{ai_compute, decode_job, encode_job, encode_tensor};
use crate::device::ssd::{self, BlockResponse, Namespace, BLOCK_SIZE};
use crate::device::DeviceError;
use crate::ids::{FduId, JobId, NodeId, PrincipalId};
use crate::manifest::DeviceKind;
use crate::memory::{Labels, SparseMemory, TaintedBytes, PAGE_SIZE};
use crate::protocol::{
    decode_key_bundle, termination_statement, AppMessage, AppOp, Body, Ctx, DmaDirection, Effects, JobMembership,
    MessageKind, Outgoing, Wire,
};

/// Untrusted host memory reserved per FDU for driver staging.
pub const STAGING_SLOT: u64 = 1 << 20;
/// Headroom for envelope framing inside a staging slot.
const ENVELOPE_SLACK: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NodeError {
    #[error("node not booted")]
    NotBooted,
    #[error("FDU table already partitioned")]
    AlreadyPartitioned,
    #[error("partition ranges overlap")]
    OverlapError,
    #[error("partition exceeds device capacity")]
    CapacityExceeded,
    #[error("unknown {0}")]
    UnknownFdu(FduId),
    #[error("{0} already allocated")]
    AlreadyAllocated(FduId),
    #[error("{0} is not reserved for {1}")]
    NotReserved(FduId, JobId),
    #[error("{0} is not owned by a job")]
    NotOwned(FduId),
    #[error("access denied")]
    AccessDenied,
    #[error("region not registered with the driver")]
    UnregisteredRegion,
    #[error("address {0:#x} is not MMIO-mapped")]
    UnmappedAddress(u64),
    #[error("malformed key bundle")]
    BadBundle,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

impl NodeError {
    /// Stable variant name used in refusal messages.
    pub fn code(&self) -> &'static str {
        match self {
            NodeError::NotBooted => "NotBooted",
            NodeError::AlreadyPartitioned => "AlreadyPartitioned",
            NodeError::OverlapError => "OverlapError",
            NodeError::CapacityExceeded => "CapacityExceeded",
            NodeError::UnknownFdu(_) => "UnknownFdu",
            NodeError::AlreadyAllocated(_) => "AlreadyAllocated",
            NodeError::NotReserved(..) => "NotReserved",
            NodeError::NotOwned(_) => "NotOwned",
            NodeError::AccessDenied | NodeError::Device(DeviceError::AccessDenied) => "AccessDenied",
            NodeError::UnregisteredRegion => "UnregisteredRegion",
            NodeError::UnmappedAddress(_) => "UnmappedAddress",
            NodeError::BadBundle => "BadBundle",
            NodeError::Crypto(CryptoError::ReplayDetected { .. }) => "ReplayDetected",
            NodeError::Crypto(CryptoError::AuthFailure) => "AuthFailure",
            NodeError::Crypto(_) => "CryptoError",
            NodeError::Device(_) => "DeviceError",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Access {
    Allow,
    Deny,
}

/// One partition request. Without `base`, partitions are packed in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FduSpec {
    pub cores: u32,
    #[serde(with = "crate::manifest::size_serde")]
    pub memory: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<u64>,
}

impl FduSpec {
    pub fn new(cores: u32, memory: u64) -> Self {
        Self { cores, memory, base: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Owner {
    Free,
    /// Attested to a tenant, key not yet installed.
    Reserved(JobId),
    Owned(JobId),
}

impl Owner {
    pub fn job(self) -> Option<JobId> {
        match self {
            Owner::Free => None,
            Owner::Reserved(j) | Owner::Owned(j) => Some(j),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmaRegion {
    pub offset: u64,
    pub len: u64,
    pub direction: DmaDirection,
    pub peer: PrincipalId,
}

/// Enclave-side driver bookkeeping. Peer channel keys live in the owning
/// enclave's send channels.
#[derive(Clone, Debug, Default)]
pub struct EnclaveDriverState {
    /// Indexed by interrupt vector.
    pub dma_regions: Vec<DmaRegion>,
    /// Local page number -> (device unit, device register page).
    pub mmio_map: BTreeMap<u64, (FduId, u64)>,
}

struct Reservation {
    job: JobId,
    dh: DhKeyPair,
    tenant_pub: PublicKey,
    manifest_id: Digest,
}

struct Enclave {
    job: JobId,
    key: KeyHandle,
    fdu_key: KeyHandle,
    membership: JobMembership,
    to_tenant: SendChannel,
    to_job: SendChannel,
    driver: EnclaveDriverState,
    registers: BTreeMap<u64, u64>,
}

enum FduState {
    Free,
    Reserved(Box<Reservation>),
    Owned(Box<Enclave>),
}

pub struct FmtEntry {
    pub fdu: FduId,
    pub cores: Range<u32>,
    pub base: u64,
    pub len: u64,
    /// Base of this unit's driver staging slot in host memory. Chosen by
    /// untrusted software.
    pub staging: u64,
    state: FduState,
}

impl FmtEntry {
    pub fn owner(&self) -> Owner {
        match &self.state {
            FduState::Free => Owner::Free,
            FduState::Reserved(r) => Owner::Reserved(r.job),
            FduState::Owned(e) => Owner::Owned(e.job),
        }
    }

    pub fn key(&self) -> Option<&KeyHandle> {
        match &self.state {
            FduState::Owned(e) => Some(&e.key),
            _ => None,
        }
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr - self.base < self.len
    }

    pub fn driver(&self) -> Option<&EnclaveDriverState> {
        match &self.state {
            FduState::Owned(e) => Some(&e.driver),
            _ => None,
        }
    }

    pub fn membership(&self) -> Option<&JobMembership> {
        match &self.state {
            FduState::Owned(e) => Some(&e.membership),
            _ => None,
        }
    }

    fn enclave(&mut self) -> Result<&mut Enclave, NodeError> {
        match &mut self.state {
            FduState::Owned(e) => Ok(e),
            _ => Err(NodeError::NotOwned(self.fdu)),
        }
    }
}

impl std::fmt::Debug for FmtEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FmtEntry")
            .field("fdu", &self.fdu)
            .field("owner", &self.owner())
            .field("cores", &self.cores)
            .field("base", &format_args!("{:#x}", self.base))
            .field("len", &format_args!("{:#x}", self.len))
            .finish()
    }
}

pub struct TeeNode {
    pub id: NodeId,
    pub kind: DeviceKind,
    pub cores: u32,
    pub rot: DeviceRot,
    pub firmware_digest: Digest,
    pub boot_events: Vec<PbaEvent>,
    pub memory: SparseMemory,
    /// Untrusted host memory; holds driver staging (ciphertext only).
    pub host: SparseMemory,
    fmt: Vec<FmtEntry>,
    rx: ReplayGuard,
}

impl std::fmt::Debug for TeeNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TeeNode").field("id", &self.id).field("kind", &self.kind).field("fmt", &self.fmt).finish()
    }
}

impl TeeNode {
    pub fn new(
        id: NodeId,
        kind: DeviceKind,
        cores: u32,
        memory: u64,
        rot: DeviceRot,
        firmware_digest: Digest,
        boot_events: Vec<PbaEvent>,
    ) -> Self {
        Self {
            id,
            kind,
            cores,
            rot,
            firmware_digest,
            boot_events,
            memory: SparseMemory::new(memory),
            host: SparseMemory::new(0),
            fmt: Vec::new(),
            rx: ReplayGuard::default(),
        }
    }

    pub fn boot(&mut self) -> Result<(), AttestError> {
        self.rot.measured_boot(&self.firmware_digest, &self.boot_events).map(|_| ())
    }

    pub fn fmt(&self) -> &[FmtEntry] {
        &self.fmt
    }

    pub fn fdus(&self) -> impl Iterator<Item = FduId> + '_ {
        self.fmt.iter().map(|e| e.fdu)
    }

    pub fn entry(&self, fdu: FduId) -> Option<&FmtEntry> {
        (fdu.node == self.id).then(|| self.fmt.get(usize::from(fdu.index))).flatten()
    }

    fn entry_mut(&mut self, fdu: FduId) -> Result<&mut FmtEntry, NodeError> {
        if fdu.node != self.id {
            return Err(NodeError::UnknownFdu(fdu));
        }
        self.fmt.get_mut(usize::from(fdu.index)).ok_or(NodeError::UnknownFdu(fdu))
    }

    /// Devices whose units may touch memory of other units of the same job.
    pub fn sharing_permitted(&self) -> bool {
        self.kind == DeviceKind::AiAccelerator
    }

    pub fn partition_fdus(&mut self, spec: &[FduSpec]) -> Result<Vec<FduId>, NodeError> {
        if self.rot.state() != BootState::Booted {
            return Err(NodeError::NotBooted);
        }
        if !self.fmt.is_empty() {
            return Err(NodeError::AlreadyPartitioned);
        }
        let total_cores: u64 = spec.iter().map(|s| u64::from(s.cores)).sum();
        if total_cores > u64::from(self.cores) || spec.len() > usize::from(u16::MAX) {
            return Err(NodeError::CapacityExceeded);
        }
        let mut ranges: Vec<(u64, u64)> = Vec::with_capacity(spec.len());
        let mut cursor = 0u64;
        for s in spec {
            let base = s.base.unwrap_or(cursor);
            let end = base.checked_add(s.memory).ok_or(NodeError::CapacityExceeded)?;
            if s.memory == 0 || end > self.memory.size() {
                return Err(NodeError::CapacityExceeded);
            }
            if ranges.iter().any(|&(b, e)| base < e && b < end) {
                return Err(NodeError::OverlapError);
            }
            ranges.push((base, end));
            cursor = end;
        }
        let mut core = 0u32;
        self.fmt = spec
            .iter()
            .zip(&ranges)
            .enumerate()
            .map(|(i, (s, &(base, end)))| {
                let cores = core..core + s.cores;
                core += s.cores;
                FmtEntry {
                    fdu: FduId::new(self.id, i as u16),
                    cores,
                    base,
                    len: end - base,
                    staging: i as u64 * STAGING_SLOT,
                    state: FduState::Free,
                }
            })
            .collect();
        self.host = SparseMemory::new(spec.len() as u64 * STAGING_SLOT);
        Ok(self.fmt.iter().map(|e| e.fdu).collect())
    }

    fn fdu_section(&self, entry: &FmtEntry) -> FduSection {
        FduSection {
            fdu_support: true,
            numbers: self.fmt.len() as u32,
            config: vec![FduConfig {
                bar: entry.base,
                stream_id: format!("{}.{}", entry.fdu.node.0, entry.fdu.index),
                core_config: entry.cores.len() as u32,
                memory: entry.len,
            }],
        }
    }

    /// Reserves a free unit for `job` and attests it. The report's public
    /// key is a fresh per-unit agreement key.
    pub fn sm_allocate_fdu(
        &mut self,
        ctx: &mut Ctx,
        fdu: FduId,
        job: JobId,
        tenant_pub: PublicKey,
        manifest_id: Digest,
        challenge: &Challenge,
    ) -> Result<AttestationReport, NodeError> {
        let entry = self.entry(fdu).ok_or(NodeError::UnknownFdu(fdu))?;
        if entry.owner() != Owner::Free {
            return Err(NodeError::AlreadyAllocated(fdu));
        }
        let dh = DhKeyPair::generate(ctx.rng);
        let report = self
            .rot
            .generate_report(challenge, dh.public(), self.fdu_section(entry))
            .map_err(|_| NodeError::NotBooted)?;
        self.entry_mut(fdu)?.state = FduState::Reserved(Box::new(Reservation { job, dh, tenant_pub, manifest_id }));
        Ok(report)
    }

    /// Opens the tenant's key bundle under the per-unit shared key and
    /// programs the job key into the FMT.
    pub fn sm_install_key(&mut self, ctx: &mut Ctx, fdu: FduId, job: JobId, env: &Envelope) -> Result<(), NodeError> {
        let entry = self.entry(fdu).ok_or(NodeError::UnknownFdu(fdu))?;
        let FduState::Reserved(r) = &entry.state else {
            return Err(NodeError::NotReserved(fdu, job));
        };
        if r.job != job {
            return Err(NodeError::NotReserved(fdu, job));
        }
        let fdu_key = r.dh.derive_shared(&r.tenant_pub.0)?;
        let manifest_id = r.manifest_id;
        let (header, plaintext) = self.rx.open(ctx.suite, &fdu_key, env)?;
        if header.job != job || header.context != manifest_id.0 {
            return Err(NodeError::Crypto(CryptoError::AuthFailure));
        }
        let (key, membership) = decode_key_bundle(&plaintext).ok_or(NodeError::BadBundle)?;
        if membership.job != job || !membership.fdus.contains(&fdu) || membership.manifest_id != manifest_id {
            return Err(NodeError::BadBundle);
        }
        let key = ctx.keys.mint(Some(job), key);
        let fdu_key = ctx.keys.mint(Some(job), fdu_key);
        let me = PrincipalId::Fdu(fdu);
        let to_tenant = SendChannel::new(ctx.suite, fdu_key.clone(), ctx.channel(), job, me);
        let to_job = SendChannel::new(ctx.suite, key.clone(), ctx.channel(), job, me);
        self.entry_mut(fdu)?.state = FduState::Owned(Box::new(Enclave {
            job,
            key,
            fdu_key,
            membership,
            to_tenant,
            to_job,
            driver: EnclaveDriverState::default(),
            registers: BTreeMap::new(),
        }));
        Ok(())
    }

    /// Releases a reservation that never received a key. Owned units are
    /// only released through authenticated deallocation.
    pub fn abort(&mut self, fdu: FduId, job: JobId) -> bool {
        match self.entry_mut(fdu) {
            Ok(e) if e.owner() == Owner::Reserved(job) => {
                e.state = FduState::Free;
                true
            }
            _ => false,
        }
    }

    pub fn acu_check(&self, accessor: FduId, addr: u64) -> Access {
        let Some(acc) = self.entry(accessor) else {
            return Access::Deny;
        };
        let Owner::Owned(job) = acc.owner() else {
            return Access::Deny;
        };
        if acc.contains(addr) {
            return Access::Allow;
        }
        if self.sharing_permitted() && self.fmt.iter().any(|e| e.owner() == Owner::Owned(job) && e.contains(addr)) {
            return Access::Allow;
        }
        Access::Deny
    }

    /// Every byte of `[addr, addr+len)` must pass `acu_check`.
    pub fn acu_check_range(&self, accessor: FduId, addr: u64, len: u64) -> Access {
        let Some(end) = addr.checked_add(len) else {
            return Access::Deny;
        };
        let mut a = addr;
        while a < end {
            let Some(e) = self.fmt.iter().find(|e| e.contains(a)) else {
                return Access::Deny;
            };
            if self.acu_check(accessor, a) == Access::Deny {
                return Access::Deny;
            }
            a = e.base + e.len;
        }
        Access::Allow
    }

    pub fn acu_core_check(&self, src_core: u32, dst_core: u32) -> Access {
        let owner_of = |c: u32| self.fmt.iter().find(|e| e.cores.contains(&c)).map(|e| e.owner());
        match (owner_of(src_core), owner_of(dst_core)) {
            (Some(Owner::Owned(a)), Some(Owner::Owned(b))) if a == b => Access::Allow,
            _ => Access::Deny,
        }
    }

    fn check_range(&self, accessor: FduId, addr: u64, len: u64) -> Result<(), NodeError> {
        match self.acu_check_range(accessor, addr, len) {
            Access::Allow => Ok(()),
            Access::Deny => Err(NodeError::AccessDenied),
        }
    }

    /// MPE egress: seals `plaintext` for `peer` under the key that channel
    /// uses (per-unit key for the tenant, job key otherwise).
    pub fn mpe_out(&mut self, fdu: FduId, peer: PrincipalId, plaintext: &[u8]) -> Result<Envelope, NodeError> {
        let enc = self.entry_mut(fdu)?.enclave()?;
        Ok(seal_for(enc, peer, plaintext))
    }

    /// Authenticates an inbound envelope for `fdu`, enforcing that the
    /// sender is a member of the owning job and that sequence numbers grow.
    pub fn mpe_open(&mut self, ctx: &Ctx, fdu: FduId, env: &Envelope) -> Result<(AadHeader, Vec<u8>), NodeError> {
        let suite = ctx.suite;
        let entry = self.entry(fdu).ok_or(NodeError::UnknownFdu(fdu))?;
        let FduState::Owned(enc) = &entry.state else {
            return Err(NodeError::NotOwned(fdu));
        };
        let header = env.header()?;
        if header.job != enc.job || !enc.membership.contains(header.sender) {
            return Err(NodeError::Crypto(CryptoError::AuthFailure));
        }
        let key = match header.sender {
            PrincipalId::Tenant(_) => enc.fdu_key.clone(),
            _ => enc.key.clone(),
        };
        Ok(self.rx.open(suite, key.key(), env)?)
    }

    /// MPE ingress: authenticates and writes the plaintext at `offset`
    /// within the unit. The only path by which outside data enters.
    pub fn mpe_in(&mut self, ctx: &Ctx, fdu: FduId, env: &Envelope, offset: u64) -> Result<AadHeader, NodeError> {
        let (header, plaintext) = self.mpe_open(ctx, fdu, env)?;
        self.write_enclave(fdu, offset, plaintext)?;
        Ok(header)
    }

    fn write_enclave(&mut self, fdu: FduId, offset: u64, data: Vec<u8>) -> Result<(), NodeError> {
        let entry = self.entry(fdu).ok_or(NodeError::UnknownFdu(fdu))?;
        let job = entry.owner().job().ok_or(NodeError::NotOwned(fdu))?;
        let addr = entry.base.checked_add(offset).ok_or(NodeError::AccessDenied)?;
        self.check_range(fdu, addr, data.len() as u64)?;
        self.memory.write(addr, &TaintedBytes::labelled(data, job)).map_err(|_| NodeError::AccessDenied)
    }

    fn read_enclave(&self, fdu: FduId, offset: u64, len: u64) -> Result<TaintedBytes, NodeError> {
        let entry = self.entry(fdu).ok_or(NodeError::UnknownFdu(fdu))?;
        let addr = entry.base.checked_add(offset).ok_or(NodeError::AccessDenied)?;
        self.check_range(fdu, addr, len)?;
        self.memory.read(addr, len).map_err(|_| NodeError::AccessDenied)
    }

    fn overlaps_fdu(&self, addr: u64, len: u64) -> bool {
        let end = addr.saturating_add(len);
        self.fmt.iter().any(|e| addr < e.base + e.len && e.base < end)
    }

    /// Host software writing device memory directly. Unit memory is only
    /// reachable through the MPE.
    pub fn host_write(&mut self, addr: u64, data: &[u8]) -> Result<(), NodeError> {
        if self.overlaps_fdu(addr, data.len() as u64) {
            return Err(NodeError::AccessDenied);
        }
        self.memory.write(addr, &TaintedBytes::clean(data.to_vec())).map_err(|_| NodeError::AccessDenied)
    }

    pub fn host_read(&self, addr: u64, len: u64) -> Result<TaintedBytes, NodeError> {
        if self.overlaps_fdu(addr, len) {
            return Err(NodeError::AccessDenied);
        }
        self.memory.read(addr, len).map_err(|_| NodeError::AccessDenied)
    }

    /// Hypervisor attempt to move a unit's backing memory. The FMT is only
    /// writable by the security monitor.
    pub fn hypervisor_remap(&mut self, fdu: FduId, _new_base: u64) -> Result<(), NodeError> {
        self.entry(fdu).ok_or(NodeError::UnknownFdu(fdu))?;
        Err(NodeError::AccessDenied)
    }

    /// Hypervisor attempt to page a unit's memory out to host storage.
    pub fn hypervisor_page_out(&mut self, fdu: FduId, page: u64) -> Result<TaintedBytes, NodeError> {
        let entry = self.entry(fdu).ok_or(NodeError::UnknownFdu(fdu))?;
        let addr = entry.base + page * PAGE_SIZE;
        let out = self.host_read(addr, PAGE_SIZE)?;
        self.memory.zero(addr, PAGE_SIZE).map_err(|_| NodeError::AccessDenied)?;
        Ok(out)
    }

    /// Moves a unit's driver staging slot. Staging is untrusted memory, so
    /// this is always permitted.
    pub fn remap_staging(&mut self, fdu: FduId, host_base: u64) -> Result<(), NodeError> {
        if host_base.saturating_add(STAGING_SLOT) > self.host.size() {
            return Err(NodeError::CapacityExceeded);
        }
        self.entry_mut(fdu)?.staging = host_base;
        Ok(())
    }

    /// Zeroes the unit's memory, staging and registers, destroys its keys
    /// and returns it to the free pool. A no-op on a free unit.
    pub fn secure_deallocate(&mut self, fdu: FduId) -> bool {
        let Some(entry) = self.entry(fdu) else {
            return false;
        };
        let Some(job) = entry.owner().job() else {
            return false;
        };
        let (base, len, staging) = (entry.base, entry.len, entry.staging);
        self.memory.zero(base, len).expect("partition within device memory");
        let _ = self.host.zero(staging, STAGING_SLOT);
        let slot = usize::from(fdu.index) as u64 * STAGING_SLOT;
        let e = self.entry_mut(fdu).expect("entry exists");
        e.state = FduState::Free;
        e.staging = slot;
        if self.fmt.iter().all(|e| e.owner().job() != Some(job)) {
            self.rx.forget_job(job);
        }
        true
    }

    pub fn register_dma(&mut self, fdu: FduId, region: DmaRegion) -> Result<u32, NodeError> {
        let entry = self.entry_mut(fdu)?;
        let len = entry.len;
        let enc = entry.enclave()?;
        let end = region.offset.checked_add(region.len).ok_or(NodeError::AccessDenied)?;
        if end > len || region.len == 0 || region.len > STAGING_SLOT - ENVELOPE_SLACK {
            return Err(NodeError::AccessDenied);
        }
        if !enc.membership.contains(region.peer) {
            return Err(NodeError::AccessDenied);
        }
        enc.driver.dma_regions.push(region);
        Ok((enc.driver.dma_regions.len() - 1) as u32)
    }

    /// Egress DMA of `[offset, offset+len)`, which must lie inside a
    /// registered egress region. The sealed transfer is staged in host
    /// memory and addressed to the region's peer.
    pub fn driver_dma_out(&mut self, fdu: FduId, offset: u64, len: u64) -> Result<(PrincipalId, Envelope), NodeError> {
        let region = self
            .entry(fdu)
            .and_then(|e| e.driver())
            .and_then(|d| {
                d.dma_regions.iter().find(|r| {
                    r.direction == DmaDirection::Egress && offset >= r.offset && offset + len <= r.offset + r.len
                })
            })
            .copied()
            .ok_or(NodeError::UnregisteredRegion)?;
        let data = self.read_enclave(fdu, offset, len)?;
        let msg = AppMessage { req: 0, reply_to: PrincipalId::Fdu(fdu), op: AppOp::DmaData { data: data.bytes } };
        let entry = self.entry_mut(fdu)?;
        let staging = entry.staging;
        let env = seal_for(entry.enclave()?, region.peer, &msg.encode());
        self.stage(staging, &env);
        Ok((region.peer, env))
    }

    pub fn dma_kick(&mut self, fdu: FduId, vector: u32) -> Result<(PrincipalId, Envelope), NodeError> {
        let region = self
            .entry(fdu)
            .and_then(|e| e.driver())
            .and_then(|d| d.dma_regions.get(vector as usize))
            .copied()
            .ok_or(NodeError::UnregisteredRegion)?;
        if region.direction != DmaDirection::Egress {
            return Err(NodeError::UnregisteredRegion);
        }
        self.driver_dma_out(fdu, region.offset, region.len)
    }

    /// Ingress DMA: the envelope lands in host staging, is authenticated and
    /// copied into the ingress region registered for its sender.
    pub fn driver_dma_in(&mut self, ctx: &Ctx, fdu: FduId, env: &Envelope) -> Result<u64, NodeError> {
        let staging = self.entry(fdu).ok_or(NodeError::UnknownFdu(fdu))?.staging;
        self.stage(staging, env);
        let (header, plaintext) = self.mpe_open(ctx, fdu, env)?;
        let Some(AppMessage { op: AppOp::DmaData { data }, .. }) = AppMessage::decode(&plaintext) else {
            return Err(NodeError::Crypto(CryptoError::Malformed("not a DMA transfer")));
        };
        self.dma_ingest(fdu, header.sender, data)
    }

    fn dma_ingest(&mut self, fdu: FduId, sender: PrincipalId, data: Vec<u8>) -> Result<u64, NodeError> {
        let region = self
            .entry(fdu)
            .and_then(|e| e.driver())
            .and_then(|d| {
                d.dma_regions.iter().find(|r| r.direction == DmaDirection::Ingress && r.peer == sender)
            })
            .copied()
            .ok_or(NodeError::UnregisteredRegion)?;
        if data.len() as u64 > region.len {
            return Err(NodeError::AccessDenied);
        }
        let n = data.len() as u64;
        self.write_enclave(fdu, region.offset, data)?;
        Ok(n)
    }

    fn stage(&mut self, staging: u64, env: &Envelope) {
        let mut wire = env.to_wire();
        wire.truncate(STAGING_SLOT as usize);
        let _ = self.host.write(staging, &TaintedBytes::clean(wire));
    }

    /// Unauthenticated device interrupt. It can only start the egress path
    /// of a registered region; anything else is ignored.
    pub fn on_interrupt(&mut self, fdu: FduId, vector: u32) -> Option<Outgoing> {
        let (peer, env) = self.dma_kick(fdu, vector).ok()?;
        self.route(fdu, peer, env, MessageKind::Dma).ok()
    }

    pub fn map_mmio(&mut self, fdu: FduId, page: u64, device: FduId, device_page: u64) -> Result<(), NodeError> {
        let enc = self.entry_mut(fdu)?.enclave()?;
        if !enc.membership.fdus.contains(&device) {
            return Err(NodeError::AccessDenied);
        }
        enc.driver.mmio_map.insert(page, (device, device_page));
        Ok(())
    }

    /// Page-fault handler for a trapped MMIO access: resolves the device
    /// register the address maps to.
    pub fn driver_mmio(&self, fdu: FduId, addr: u64) -> Result<(FduId, u64), NodeError> {
        let driver = self.entry(fdu).and_then(|e| e.driver()).ok_or(NodeError::NotOwned(fdu))?;
        let &(device, device_page) = driver.mmio_map.get(&(addr / PAGE_SIZE)).ok_or(NodeError::UnmappedAddress(addr))?;
        Ok((device, device_page * PAGE_SIZE + addr % PAGE_SIZE))
    }

    /// Device-side register file access, bounded by the unit's range.
    pub fn register_access(&mut self, fdu: FduId, reg: u64, store: Option<u64>) -> Result<Option<u64>, NodeError> {
        let entry = self.entry_mut(fdu)?;
        if reg.checked_add(8).is_none_or(|end| end > entry.len) {
            return Err(NodeError::AccessDenied);
        }
        let enc = entry.enclave()?;
        Ok(match store {
            Some(v) => {
                enc.registers.insert(reg, v);
                None
            }
            None => Some(enc.registers.get(&reg).copied().unwrap_or(0)),
        })
    }

    /// Addresses an envelope to `peer`, proxying through the guarding
    /// controller when the peer is a non-TEE node.
    fn route(&self, fdu: FduId, peer: PrincipalId, env: Envelope, kind: MessageKind) -> Result<Outgoing, NodeError> {
        let membership = self.entry(fdu).and_then(|e| e.membership()).ok_or(NodeError::NotOwned(fdu))?;
        let job = membership.job;
        let me = PrincipalId::Fdu(fdu);
        Ok(match peer {
            PrincipalId::Node(n) => {
                let sc = membership.nodes.get(&n).ok_or(NodeError::AccessDenied)?;
                Outgoing::new(me, PrincipalId::Sc(*sc), Body::Proxy { job, node: n, env: Wire::new(env, kind) })
            }
            _ => Outgoing::new(me, peer, Body::Data { job, env: Wire::new(env, kind) }),
        })
    }

    fn send_app(&mut self, fdu: FduId, peer: PrincipalId, msg: &AppMessage, kind: MessageKind) -> Result<Outgoing, NodeError> {
        let env = self.mpe_out(fdu, peer, &msg.encode())?;
        self.route(fdu, peer, env, kind)
    }

    /// Handles one delivered message addressed to `fdu`.
    pub fn handle(&mut self, ctx: &mut Ctx, src: PrincipalId, fdu: FduId, body: Body) -> Effects {
        let me = PrincipalId::Fdu(fdu);
        let mut fx = Effects::default();
        match body {
            Body::AllocRequest { job, fdu: target, challenge, tenant_pub, manifest_id } => {
                let result = if target == fdu {
                    self.sm_allocate_fdu(ctx, fdu, job, tenant_pub, manifest_id, &challenge)
                } else {
                    Err(NodeError::UnknownFdu(target))
                };
                match result {
                    Ok(report) => fx.send(Outgoing::new(me, src, Body::FduEvidence { job, fdu, report: Box::new(report) })),
                    Err(e) => {
                        fx.incident(me, Some(job), e.code());
                        fx.send(Outgoing::new(me, src, Body::Refused { job, at: me, reason: e.code().into() }));
                    }
                }
            }
            Body::KeyInstall { job, env } => match self.sm_install_key(ctx, fdu, job, &env.env) {
                Ok(()) => fx.send(Outgoing::new(me, src, Body::KeyAck { job, at: me })),
                Err(e) => {
                    fx.incident(me, Some(job), e.code());
                    fx.send(Outgoing::new(me, src, Body::Refused { job, at: me, reason: e.code().into() }));
                }
            },
            Body::Abort { job } => {
                self.abort(fdu, job);
            }
            Body::Data { job, env } => fx.extend(self.on_data(ctx, fdu, job, &env.env)),
            Body::Interrupt { fdu: target, vector } if target == fdu => match self.on_interrupt(fdu, vector) {
                Some(o) => fx.send(o),
                None => fx.incident(me, None, "IgnoredInterrupt"),
            },
            _ => fx.incident(me, None, "UnexpectedMessage"),
        }
        fx
    }

    fn on_data(&mut self, ctx: &mut Ctx, fdu: FduId, job: JobId, env: &Envelope) -> Effects {
        let me = PrincipalId::Fdu(fdu);
        let mut fx = Effects::default();
        let (header, plaintext) = match self.mpe_open(ctx, fdu, env) {
            Ok(r) if r.0.job == job => r,
            Ok(_) => {
                fx.incident(me, Some(job), "AuthFailure");
                return fx;
            }
            Err(e) => {
                fx.incident(me, Some(job), e.code());
                return fx;
            }
        };
        let Some(msg) = AppMessage::decode(&plaintext) else {
            fx.incident(me, Some(job), "MalformedMessage");
            return fx;
        };
        let (req, reply_to) = (msg.req, msg.reply_to);
        match self.run_op(fdu, header.sender, msg) {
            Ok(op_fx) => fx.extend(op_fx),
            Err(e) => {
                fx.incident(me, Some(job), e.code());
                let fail = AppMessage { req, reply_to, op: AppOp::Fail(e.code().into()) };
                if let Ok(o) = self.send_app(fdu, reply_to, &fail, MessageKind::Dma) {
                    fx.send(o);
                }
            }
        }
        fx
    }

    fn respond(&mut self, fdu: FduId, req: u64, to: PrincipalId, bytes: Vec<u8>) -> Result<Outgoing, NodeError> {
        let msg = AppMessage { req, reply_to: PrincipalId::Fdu(fdu), op: AppOp::Response(bytes) };
        self.send_app(fdu, to, &msg, MessageKind::Dma)
    }

    fn run_op(&mut self, fdu: FduId, sender: PrincipalId, msg: AppMessage) -> Result<Effects, NodeError> {
        let me = PrincipalId::Fdu(fdu);
        let AppMessage { req, reply_to, op } = msg;
        let entry = self.entry(fdu).ok_or(NodeError::UnknownFdu(fdu))?;
        let membership = entry.membership().ok_or(NodeError::NotOwned(fdu))?.clone();
        let job = membership.job;
        if !membership.contains(reply_to) {
            return Err(NodeError::AccessDenied);
        }
        let mut fx = Effects::default();
        let response = match op {
            AppOp::Echo(p) => Some(p),
            AppOp::Forward { route, payload } => match route.split_first() {
                None => Some(payload),
                Some((&next, rest)) => {
                    let fwd = AppMessage { req, reply_to, op: AppOp::Forward { route: rest.to_vec(), payload } };
                    fx.send(self.send_app(fdu, next, &fwd, MessageKind::Dma)?);
                    None
                }
            },
            AppOp::Block(cmd) => {
                let target = self.entry(cmd.fdu).ok_or(NodeError::AccessDenied)?;
                let ns = Namespace { base: target.base, blocks: target.len / BLOCK_SIZE };
                let (off, len) = cmd.byte_range();
                self.check_range(fdu, ns.base.saturating_add(off), len)?;
                Some(match ssd::execute(&mut self.memory, ns, &cmd, Some(job))? {
                    BlockResponse::Data(b) => b,
                    BlockResponse::Ack => Vec::new(),
                })
            }
            AppOp::Tensor(t) => {
                let target = self.entry(t.fdu).ok_or(NodeError::AccessDenied)?;
                let load = target.base;
                let bytes = encode_job(&t)?;
                let n = bytes.len() as u64;
                self.check_range(fdu, load, n)?;
                self.memory.write(load, &TaintedBytes::labelled(bytes, job)).map_err(|_| NodeError::AccessDenied)?;
                let resident = self.memory.read(load, n).map_err(|_| NodeError::AccessDenied)?;
                let output = encode_tensor(&ai_compute(&decode_job::<f64>(&resident.bytes, t.fdu)?)?);
                self.check_range(fdu, load + n, output.len() as u64)?;
                self.memory
                    .write(load + n, &TaintedBytes::labelled(output.clone(), job))
                    .map_err(|_| NodeError::AccessDenied)?;
                Some(output)
            }
            AppOp::Load(code) => {
                let digest = hash(&code);
                self.write_enclave(fdu, 0, code)?;
                Some(digest.0.to_vec())
            }
            AppOp::Write { offset, data } => {
                self.write_enclave(fdu, offset, data)?;
                Some(Vec::new())
            }
            AppOp::Read { offset, len } => Some(self.read_enclave(fdu, offset, len)?.bytes),
            AppOp::RegisterDma { offset, len, direction, peer } => {
                let v = self.register_dma(fdu, DmaRegion { offset, len, direction, peer })?;
                Some(v.to_le_bytes().to_vec())
            }
            AppOp::MapMmio { page, device, device_page } => {
                self.map_mmio(fdu, page, device, device_page)?;
                Some(Vec::new())
            }
            AppOp::DmaKick { vector } => {
                let (peer, env) = self.dma_kick(fdu, vector)?;
                fx.send(self.route(fdu, peer, env, MessageKind::Dma)?);
                Some(Vec::new())
            }
            AppOp::DmaData { data } => {
                self.dma_ingest(fdu, sender, data)?;
                None
            }
            AppOp::Mmio { addr, store } => {
                let (device, reg) = self.driver_mmio(fdu, addr)?;
                let kind = if store.is_some() { MessageKind::MmioWrite } else { MessageKind::MmioRead };
                let fwd = AppMessage { req, reply_to, op: AppOp::Register { reg, store } };
                fx.send(self.send_app(fdu, PrincipalId::Fdu(device), &fwd, kind)?);
                None
            }
            AppOp::Register { reg, store } => {
                let v = self.register_access(fdu, reg, store)?;
                let msg = AppMessage {
                    req,
                    reply_to: me,
                    op: AppOp::Response(v.map(|v| v.to_le_bytes().to_vec()).unwrap_or_default()),
                };
                fx.send(self.send_app(fdu, reply_to, &msg, MessageKind::MmioRead)?);
                None
            }
            AppOp::Terminate => {
                if sender != PrincipalId::Tenant(membership.tenant) || membership.primary != fdu {
                    return Err(NodeError::AccessDenied);
                }
                fx.extend(self.terminate_job(fdu, req, reply_to, &membership)?);
                None
            }
            AppOp::Deallocate => {
                if sender != PrincipalId::Fdu(membership.primary) && sender != PrincipalId::Tenant(membership.tenant) {
                    return Err(NodeError::AccessDenied);
                }
                self.secure_deallocate(fdu);
                fx.send(Outgoing::new(me, PrincipalId::Mp, Body::ReleaseNotice { job, nodes: vec![], fdus: vec![fdu] }));
                None
            }
            AppOp::Response(_) | AppOp::Fail(_) => None,
        };
        if let Some(bytes) = response {
            fx.send(self.respond(fdu, req, reply_to, bytes)?);
        }
        Ok(fx)
    }

    /// Primary unit: authenticated teardown of the whole job, then itself.
    fn terminate_job(&mut self, fdu: FduId, req: u64, reply_to: PrincipalId, m: &JobMembership) -> Result<Effects, NodeError> {
        let me = PrincipalId::Fdu(fdu);
        let mut fx = Effects::default();
        for &other in m.fdus.iter().filter(|&&f| f != fdu) {
            let msg = AppMessage { req: 0, reply_to: me, op: AppOp::Deallocate };
            fx.send(self.send_app(fdu, PrincipalId::Fdu(other), &msg, MessageKind::Control)?);
        }
        for sc in m.scs() {
            let enc = self.entry_mut(fdu)?.enclave()?;
            let env = enc.to_job.seal_next(b"", &termination_statement(m.job));
            fx.send(Outgoing::new(
                me,
                PrincipalId::Sc(sc),
                Body::Terminate { job: m.job, env: Wire::new(env, MessageKind::Control) },
            ));
        }
        fx.send(self.respond(fdu, req, reply_to, b"terminated".to_vec())?);
        self.secure_deallocate(fdu);
        fx.send(Outgoing::new(me, PrincipalId::Mp, Body::ReleaseNotice { job: m.job, nodes: vec![], fdus: vec![fdu] }));
        Ok(fx)
    }

    /// Jobs whose data may legitimately reside at `addr`.
    pub fn permitted_labels(&self, addr: u64) -> Labels {
        match self.fmt.iter().find(|e| e.contains(addr)) {
            Some(e) => match e.owner() {
                Owner::Owned(j) => Labels::from([j]),
                _ => Labels::new(),
            },
            None => Labels::new(),
        }
    }
}

fn seal_for(enc: &mut Enclave, peer: PrincipalId, plaintext: &[u8]) -> Envelope {
    match peer {
        PrincipalId::Tenant(_) => enc.to_tenant.seal_next(b"", plaintext),
        _ => enc.to_job.seal_next(b"", plaintext),
    }
}
