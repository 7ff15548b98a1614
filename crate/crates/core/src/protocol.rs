// SPDX-License-Identifier: Apache-2.0

//! Wire vocabulary shared by every principal: message bodies, the
//! application payload carried inside envelopes, and key bundles.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attestation::{AttestationReport, Challenge, RejectReason, SignedVouch};
use crate::crypto::{Digest, Envelope, Key256, KeyRegistry, PublicKey, Suite, KEY_LEN};
use crate::device::ai::TensorJob;
use crate::device::ssd::BlockCommand;
use crate::ids::{FduId, JobId, NodeId, PrincipalId, ScId, TenantId};
use crate::memory::Labels;

/// Message classes as seen on the fabric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    MmioRead,
    MmioWrite,
    Dma,
    Interrupt,
    Control,
    AttChallenge,
    AttResponse,
}

/// Everything needed by the members of a job to route and authenticate
/// each other. Distributed inside key bundles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobMembership {
    pub job: JobId,
    pub tenant: TenantId,
    pub manifest_id: Digest,
    /// Issues the authenticated termination command.
    pub primary: FduId,
    pub fdus: BTreeSet<FduId>,
    /// Non-TEE member nodes and the controller guarding each.
    pub nodes: BTreeMap<NodeId, ScId>,
}

impl JobMembership {
    pub fn contains(&self, p: PrincipalId) -> bool {
        match p {
            PrincipalId::Tenant(t) => t == self.tenant,
            PrincipalId::Fdu(f) => self.fdus.contains(&f),
            PrincipalId::Node(n) => self.nodes.contains_key(&n),
            PrincipalId::Sc(s) => self.nodes.values().any(|&x| x == s),
            PrincipalId::Mp => false,
        }
    }

    pub fn scs(&self) -> BTreeSet<ScId> {
        self.nodes.values().copied().collect()
    }
}

/// Plaintext of a key bundle: `K || canonical membership JSON`.
pub fn encode_key_bundle(key: &Key256, membership: &JobMembership) -> Vec<u8> {
    let mut out = key.as_bytes().to_vec();
    out.extend_from_slice(&crate::canonical::canonical_of(membership));
    out
}

pub fn decode_key_bundle(plaintext: &[u8]) -> Option<(Key256, JobMembership)> {
    if plaintext.len() < KEY_LEN {
        return None;
    }
    let key = Key256::from_bytes(plaintext[..KEY_LEN].try_into().ok()?);
    let membership = serde_json::from_slice(&plaintext[KEY_LEN..]).ok()?;
    Some((key, membership))
}

/// Application request or response carried inside an envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppMessage {
    pub req: u64,
    pub reply_to: PrincipalId,
    pub op: AppOp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppOp {
    Echo(#[serde(with = "crate::hexser")] Vec<u8>),
    /// Relay through each hop in turn; the last hop answers `reply_to`.
    Forward {
        route: Vec<PrincipalId>,
        #[serde(with = "crate::hexser")]
        payload: Vec<u8>,
    },
    Block(BlockCommand),
    Tensor(TensorJob<f64>),
    /// Code blob for the receiving unit; answered with its digest.
    Load(#[serde(with = "crate::hexser")] Vec<u8>),
    /// Store into the unit's memory at `offset` from its base.
    Write {
        offset: u64,
        #[serde(with = "crate::hexser")]
        data: Vec<u8>,
    },
    Read { offset: u64, len: u64 },
    RegisterDma { offset: u64, len: u64, direction: DmaDirection, peer: PrincipalId },
    /// Map a locally inaccessible page onto a device unit's register page.
    MapMmio { page: u64, device: FduId, device_page: u64 },
    /// Run the egress transfer of driver region `vector`.
    DmaKick { vector: u32 },
    DmaData {
        #[serde(with = "crate::hexser")]
        data: Vec<u8>,
    },
    /// Application load (`store` absent) or store against a mapped address.
    Mmio { addr: u64, store: Option<u64> },
    /// Device-side register access forwarded by the trapping driver.
    Register { reg: u64, store: Option<u64> },
    Terminate,
    /// Sent by the primary CPU unit to the other units of its job.
    Deallocate,
    Response(#[serde(with = "crate::hexser")] Vec<u8>),
    Fail(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmaDirection {
    Egress,
    Ingress,
}

impl AppMessage {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("app message serializes")
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

/// The termination statement a primary CPU unit seals for controllers.
pub fn termination_statement(job: JobId) -> Vec<u8> {
    let mut out = b"tee-fabric/terminate".to_vec();
    out.extend_from_slice(&job.0.to_be_bytes());
    out
}

/// Typed message bodies. On the wire they are canonical JSON with envelopes
/// hex-encoded in their bit-exact layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Body {
    /// Tenant to management plane.
    Submit { tenant: TenantId, manifest: String },
    /// Management plane to tenant.
    Placement { job: JobId, assignments: Vec<Assignment> },
    PlacementRefused { reason: String },
    /// Tenant to a unit's security monitor: reserve and attest.
    AllocRequest { job: JobId, fdu: FduId, challenge: Challenge, tenant_pub: PublicKey, manifest_id: Digest },
    /// Tenant to a controller: reset, attest and vouch for `nodes`.
    BindRequest { job: JobId, nodes: Vec<NodeId>, challenge: Challenge, tenant_pub: PublicKey, manifest_id: Digest },
    FduEvidence { job: JobId, fdu: FduId, report: Box<AttestationReport> },
    ScEvidence { job: JobId, sc: ScId, report: Box<AttestationReport>, vouches: Vec<SignedVouch> },
    Refused { job: JobId, at: PrincipalId, reason: String },
    Abort { job: JobId },
    KeyInstall { job: JobId, env: Wire },
    KeyAck { job: JobId, at: PrincipalId },
    /// Sealed application traffic addressed to a unit or tenant.
    Data { job: JobId, env: Wire },
    /// Sealed traffic for a non-TEE node, addressed to its controller.
    Proxy { job: JobId, node: NodeId, env: Wire },
    /// Plaintext between a non-TEE node and its controller; shielded links only.
    Raw { job: JobId, to: PrincipalId, #[serde(with = "crate::hexser")] bytes: Vec<u8> },
    Terminate { job: JobId, env: Wire },
    /// Plaintext availability notice; carries identifiers only.
    ReleaseNotice { job: JobId, nodes: Vec<NodeId>, fdus: Vec<FduId> },
    /// Unauthenticated device interrupt; `vector` selects a driver region.
    Interrupt { fdu: FduId, vector: u32 },
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::AllocRequest { .. } | Body::BindRequest { .. } => MessageKind::AttChallenge,
            Body::FduEvidence { .. } | Body::ScEvidence { .. } => MessageKind::AttResponse,
            Body::Interrupt { .. } => MessageKind::Interrupt,
            Body::Data { env, .. } => env.kind,
            Body::Proxy { .. } | Body::Raw { .. } => MessageKind::Dma,
            _ => MessageKind::Control,
        }
    }

    pub fn to_wire(&self) -> Vec<u8> {
        crate::canonical::canonical_of(self)
    }

    pub fn from_wire(bytes: &[u8]) -> Option<Body> {
        serde_json::from_slice(bytes).ok()
    }

    /// True if the body carries bytes that are not inside an envelope.
    pub fn carries_plaintext(&self) -> bool {
        matches!(self, Body::Raw { .. })
    }

    pub fn envelope(&self) -> Option<&Envelope> {
        match self {
            Body::KeyInstall { env, .. }
            | Body::Data { env, .. }
            | Body::Proxy { env, .. }
            | Body::Terminate { env, .. } => Some(&env.env),
            _ => None,
        }
    }

    pub fn envelope_mut(&mut self) -> Option<&mut Envelope> {
        match self {
            Body::KeyInstall { env, .. }
            | Body::Data { env, .. }
            | Body::Proxy { env, .. }
            | Body::Terminate { env, .. } => Some(&mut env.env),
            _ => None,
        }
    }

    pub fn job(&self) -> Option<JobId> {
        match self {
            Body::Placement { job, .. }
            | Body::AllocRequest { job, .. }
            | Body::BindRequest { job, .. }
            | Body::FduEvidence { job, .. }
            | Body::ScEvidence { job, .. }
            | Body::Refused { job, .. }
            | Body::Abort { job }
            | Body::KeyInstall { job, .. }
            | Body::KeyAck { job, .. }
            | Body::Data { job, .. }
            | Body::Proxy { job, .. }
            | Body::Raw { job, .. }
            | Body::Terminate { job, .. }
            | Body::ReleaseNotice { job, .. } => Some(*job),
            Body::Submit { .. } | Body::PlacementRefused { .. } | Body::Interrupt { .. } => None,
        }
    }
}

/// An envelope as carried in a message body, tagged with the transfer class
/// it realizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Wire {
    pub env: Envelope,
    pub kind: MessageKind,
}

impl Wire {
    pub fn new(env: Envelope, kind: MessageKind) -> Self {
        Self { env, kind }
    }

    pub fn dma(env: Envelope) -> Self {
        Self { env, kind: MessageKind::Dma }
    }
}

impl Serialize for Wire {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Wire", 2)?;
        st.serialize_field("kind", &self.kind)?;
        st.serialize_field("envelope", &hex::encode(self.env.to_wire()))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Wire {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            kind: MessageKind,
            envelope: String,
        }
        let raw = Raw::deserialize(d)?;
        let bytes = hex::decode(raw.envelope).map_err(serde::de::Error::custom)?;
        let env = Envelope::from_wire(&bytes).map_err(serde::de::Error::custom)?;
        Ok(Wire { env, kind: raw.kind })
    }
}

/// Where the management plane placed one manifest resource.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "on", rename_all = "snake_case")]
pub enum Assignment {
    Fdu { resource: usize, fdu: FduId },
    NonTee { resource: usize, node: NodeId, sc: ScId },
}

impl Assignment {
    pub fn resource(&self) -> usize {
        match self {
            Assignment::Fdu { resource, .. } | Assignment::NonTee { resource, .. } => *resource,
        }
    }
}

/// A message produced by a handler, sent by the world on its behalf.
#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub src: PrincipalId,
    pub dst: PrincipalId,
    pub body: Body,
    /// Jobs whose plaintext the body carries outside of an envelope.
    pub taint: Labels,
}

impl Outgoing {
    pub fn new(src: PrincipalId, dst: PrincipalId, body: Body) -> Self {
        Self { src, dst, body, taint: Labels::new() }
    }

    pub fn tainted(mut self, taint: Labels) -> Self {
        self.taint = taint;
        self
    }
}

/// Something a handler refused or failed to authenticate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub at: PrincipalId,
    pub job: Option<JobId>,
    pub what: String,
}

/// Output of one handler invocation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Effects {
    pub out: Vec<Outgoing>,
    pub incidents: Vec<Incident>,
}

impl Effects {
    pub fn send(&mut self, o: Outgoing) {
        self.out.push(o);
    }

    pub fn incident(&mut self, at: PrincipalId, job: Option<JobId>, what: impl Into<String>) {
        self.incidents.push(Incident { at, job, what: what.into() });
    }

    pub fn extend(&mut self, other: Effects) {
        self.out.extend(other.out);
        self.incidents.extend(other.incidents);
    }
}

/// World services available to handlers.
pub struct Ctx<'a> {
    pub rng: &'a mut rand_chacha::ChaCha20Rng,
    pub keys: &'a mut KeyRegistry,
    pub suite: Suite,
    pub next_channel: &'a mut u32,
}

impl Ctx<'_> {
    /// A world-unique channel id for a new sender.
    pub fn channel(&mut self) -> u32 {
        *self.next_channel += 1;
        *self.next_channel
    }
}

/// Reason strings used in `Refused` bodies, parsed back by the tenant.
pub fn reject_reason_name(r: RejectReason) -> &'static str {
    match r {
        RejectReason::BadCertificate => "BadCertificate",
        RejectReason::Stale => "Stale",
        RejectReason::BadQuote => "BadQuote",
        RejectReason::Revoked => "Revoked",
        RejectReason::BadMeasurement => "BadMeasurement",
        RejectReason::PolicyUnsatisfied => "PolicyUnsatisfied",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{make_nonce, Suite};

    #[test]
    fn bodies_roundtrip_through_wire() {
        let env = Suite::Deterministic.seal(&Key256::from_bytes([1; 32]), make_nonce(1, 1), b"aad", b"pt");
        let bodies = vec![
            Body::Data { job: JobId(1), env: Wire::dma(env.clone()) },
            Body::Raw { job: JobId(1), to: PrincipalId::Tenant(TenantId(0)), bytes: vec![1, 2] },
            Body::Interrupt { fdu: FduId::new(NodeId(1), 0), vector: 3 },
            Body::ReleaseNotice { job: JobId(2), nodes: vec![NodeId(4)], fdus: vec![] },
        ];
        for b in bodies {
            assert_eq!(Body::from_wire(&b.to_wire()).unwrap(), b);
        }
    }

    #[test]
    fn key_bundle_roundtrip() {
        let m = JobMembership {
            job: JobId(1),
            tenant: TenantId(0),
            manifest_id: Digest::ZERO,
            primary: FduId::new(NodeId(0), 0),
            fdus: BTreeSet::from([FduId::new(NodeId(0), 0)]),
            nodes: BTreeMap::from([(NodeId(5), ScId(0))]),
        };
        let k = Key256::from_bytes([9; 32]);
        let (k2, m2) = decode_key_bundle(&encode_key_bundle(&k, &m)).unwrap();
        assert_eq!(k2, k);
        assert_eq!(m2, m);
        assert!(m.contains(PrincipalId::Sc(ScId(0))));
        assert!(!m.contains(PrincipalId::Mp));
    }

    #[test]
    fn app_message_roundtrip() {
        let m = AppMessage { req: 7, reply_to: PrincipalId::Tenant(TenantId(1)), op: AppOp::Echo(vec![0, 255]) };
        assert_eq!(AppMessage::decode(&m.encode()).unwrap(), m);
    }
}
