// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event network.
//!
//! Messages are delivered one tick after they are sent, ordered by
//! `(tick, sender, sequence)`. Links between a controller and its attached
//! nodes sit inside the shielded container; every other link is open to the
//! physical attacker, who may observe, drop, duplicate, delay, corrupt,
//! inject and replay.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::crypto::{hash, Digest};
use crate::ids::{JobId, NodeId, PrincipalId, ScId};
use crate::memory::Labels;
use crate::protocol::{Body, MessageKind, Outgoing};

pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkTrust {
    ShieldedContainer,
    Open,
}

/// Endpoints are stored in ascending order so a link is unordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub a: PrincipalId,
    pub b: PrincipalId,
}

impl Link {
    pub fn new(x: PrincipalId, y: PrincipalId) -> Self {
        let (x, y) = (x.physical(), y.physical());
        if x <= y {
            Self { a: x, b: y }
        } else {
            Self { a: y, b: x }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub id: u64,
    pub tick: u64,
    pub src: PrincipalId,
    pub dst: PrincipalId,
    pub kind: MessageKind,
    pub body: Body,
    pub taint: Labels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeliveryReceipt {
    pub id: u64,
    pub deliver_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FabricError {
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
    #[error("no link from {0} to {1}")]
    NoRoute(PrincipalId, PrincipalId),
    #[error("link {0}-{1} is inside a shielded container")]
    TamperProof(PrincipalId, PrincipalId),
    #[error("step limit of {0} events exceeded")]
    StepLimitExceeded(u64),
    #[error("no captured message {0}")]
    NotCaptured(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapMode {
    Observe,
    Drop,
    Duplicate,
    /// Flip one bit of the envelope; bodies without an envelope pass untouched.
    FlipBit,
    /// Hold the message back for the given number of extra ticks.
    Delay(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tap {
    /// `None` taps every open link.
    pub link: Option<Link>,
    pub mode: TapMode,
    pub kinds: Option<BTreeSet<MessageKind>>,
}

impl Tap {
    fn matches(&self, link: Link, kind: MessageKind) -> bool {
        self.link.is_none_or(|l| l == link) && self.kinds.as_ref().is_none_or(|k| k.contains(&kind))
    }
}

/// Plaintext observed where it must not be.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub tick: u64,
    pub id: u64,
    pub src: PrincipalId,
    pub dst: PrincipalId,
    pub jobs: Labels,
}

/// One line of the JSONL trace. Carries identifiers, sizes and digests,
/// never key material or plaintext.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Send {
        tick: u64,
        id: u64,
        src: PrincipalId,
        dst: PrincipalId,
        kind: MessageKind,
        link: LinkTrust,
        bytes: usize,
        digest: Digest,
        taint: Labels,
    },
    Deliver { tick: u64, id: u64, src: PrincipalId, dst: PrincipalId, kind: MessageKind },
    Refused { tick: u64, src: PrincipalId, dst: PrincipalId, error: String },
    Tapped { tick: u64, id: u64, mode: TapMode },
    Dropped { tick: u64, id: u64 },
    Injected { tick: u64, id: u64, src: PrincipalId, dst: PrincipalId, kind: MessageKind, replay_of: Option<u64> },
    Leak { tick: u64, id: u64, src: PrincipalId, dst: PrincipalId, jobs: Labels },
    Incident { tick: u64, at: PrincipalId, job: Option<JobId>, what: String },
    State { tick: u64, what: String, job: Option<JobId> },
}

#[derive(Debug)]
pub struct Fabric {
    principals: BTreeSet<PrincipalId>,
    /// Non-TEE node to the controller whose container holds it.
    attached: BTreeMap<NodeId, ScId>,
    queue: BTreeMap<(u64, PrincipalId, u64), Message>,
    now: u64,
    next_id: u64,
    steps: u64,
    pub step_limit: u64,
    taps: Vec<Tap>,
    captures: Vec<Message>,
    leaks: Vec<Leak>,
    trace: Vec<TraceEvent>,
}

impl Default for Fabric {
    fn default() -> Self {
        Self {
            principals: BTreeSet::new(),
            attached: BTreeMap::new(),
            queue: BTreeMap::new(),
            now: 0,
            next_id: 0,
            steps: 0,
            step_limit: DEFAULT_STEP_LIMIT,
            taps: Vec::new(),
            captures: Vec::new(),
            leaks: Vec::new(),
            trace: Vec::new(),
        }
    }
}

impl Fabric {
    pub fn add_principal(&mut self, p: PrincipalId) {
        self.principals.insert(p);
    }

    /// Places non-TEE `node` inside `sc`'s container.
    pub fn attach(&mut self, node: NodeId, sc: ScId) {
        self.principals.insert(PrincipalId::Node(node));
        self.attached.insert(node, sc);
    }

    pub fn principals(&self) -> &BTreeSet<PrincipalId> {
        &self.principals
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn trust(&self, x: PrincipalId, y: PrincipalId) -> LinkTrust {
        let shielded = |p: PrincipalId, q: PrincipalId| match (p.physical(), q.physical()) {
            (PrincipalId::Sc(s), PrincipalId::Node(n)) => self.attached.get(&n) == Some(&s),
            _ => false,
        };
        if shielded(x, y) || shielded(y, x) {
            LinkTrust::ShieldedContainer
        } else {
            LinkTrust::Open
        }
    }

    /// Every open link between registered principals, in deterministic order.
    pub fn open_links(&self) -> Vec<Link> {
        let mut out = BTreeSet::new();
        for &x in &self.principals {
            for &y in &self.principals {
                if x.physical() != y.physical() && self.route(x, y).is_ok() && self.trust(x, y) == LinkTrust::Open {
                    out.insert(Link::new(x, y));
                }
            }
        }
        out.into_iter().collect()
    }

    fn known(&self, p: PrincipalId) -> Result<(), FabricError> {
        if self.principals.contains(&p) {
            Ok(())
        } else {
            Err(FabricError::UnknownPrincipal(p))
        }
    }

    /// Non-TEE nodes have a single physical port: the one into their container.
    fn route(&self, src: PrincipalId, dst: PrincipalId) -> Result<(), FabricError> {
        let confined = |p: PrincipalId, q: PrincipalId| match p {
            PrincipalId::Node(n) => self.attached.get(&n).is_some_and(|&s| q != PrincipalId::Sc(s)),
            _ => false,
        };
        if confined(src, dst) || confined(dst, src) {
            return Err(FabricError::NoRoute(src, dst));
        }
        Ok(())
    }

    pub fn send(&mut self, out: Outgoing) -> Result<DeliveryReceipt, FabricError> {
        let Outgoing { src, dst, body, taint } = out;
        let checked = self.known(src).and_then(|_| self.known(dst)).and_then(|_| self.route(src, dst));
        if let Err(e) = checked {
            self.trace.push(TraceEvent::Refused { tick: self.now, src, dst, error: e.to_string() });
            return Err(e);
        }
        let id = self.fresh_id();
        let msg = Message { id, tick: self.now, src, dst, kind: body.kind(), body, taint };
        Ok(self.transmit(msg))
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn transmit(&mut self, mut msg: Message) -> DeliveryReceipt {
        let link = self.trust(msg.src, msg.dst);
        let wire = msg.body.to_wire();
        self.trace.push(TraceEvent::Send {
            tick: self.now,
            id: msg.id,
            src: msg.src,
            dst: msg.dst,
            kind: msg.kind,
            link,
            bytes: wire.len(),
            digest: hash(&wire),
            taint: msg.taint.clone(),
        });
        let mut deliver_at = self.now + 1;
        let mut copies = 1;
        if link == LinkTrust::Open {
            if !msg.taint.is_empty() {
                let leak = Leak { tick: self.now, id: msg.id, src: msg.src, dst: msg.dst, jobs: msg.taint.clone() };
                self.trace.push(TraceEvent::Leak {
                    tick: leak.tick,
                    id: leak.id,
                    src: leak.src,
                    dst: leak.dst,
                    jobs: leak.jobs.clone(),
                });
                self.leaks.push(leak);
            }
            let l = Link::new(msg.src, msg.dst);
            let modes: Vec<TapMode> = self.taps.iter().filter(|t| t.matches(l, msg.kind)).map(|t| t.mode).collect();
            for mode in modes {
                self.trace.push(TraceEvent::Tapped { tick: self.now, id: msg.id, mode });
                self.captures.push(msg.clone());
                match mode {
                    TapMode::Observe => {}
                    TapMode::Drop => copies = 0,
                    TapMode::Duplicate => copies += 1,
                    TapMode::FlipBit => {
                        if let Some(env) = msg.body.envelope_mut() {
                            match env.ciphertext.first_mut() {
                                Some(b) => *b ^= 1,
                                None => env.tag[0] ^= 1,
                            }
                        }
                    }
                    TapMode::Delay(extra) => deliver_at += extra,
                }
            }
        }
        if copies == 0 {
            self.trace.push(TraceEvent::Dropped { tick: self.now, id: msg.id });
        }
        for i in 0..copies {
            let mut m = msg.clone();
            if i > 0 {
                m.id = self.fresh_id();
            }
            self.queue.insert((deliver_at, m.src, m.id), m);
        }
        DeliveryReceipt { id: msg.id, deliver_at }
    }

    /// `x` and `y` may name a principal or the physical endpoint hosting one,
    /// as returned by [`Fabric::open_links`].
    pub fn attacker_tap(&mut self, x: PrincipalId, y: PrincipalId, mode: TapMode, kinds: Option<BTreeSet<MessageKind>>) -> Result<(), FabricError> {
        for p in [x, y] {
            if !self.principals.iter().any(|q| q.physical() == p.physical()) {
                return Err(FabricError::UnknownPrincipal(p));
            }
        }
        if self.trust(x, y) == LinkTrust::ShieldedContainer {
            return Err(FabricError::TamperProof(x, y));
        }
        self.taps.push(Tap { link: Some(Link::new(x, y)), mode, kinds });
        Ok(())
    }

    /// Taps every open link at once.
    pub fn tap_all(&mut self, mode: TapMode, kinds: Option<BTreeSet<MessageKind>>) {
        self.taps.push(Tap { link: None, mode, kinds });
    }

    pub fn clear_taps(&mut self) {
        self.taps.clear();
    }

    /// Puts an attacker-built message on the open link between `src` and
    /// `dst`. The source address is whatever the attacker writes.
    pub fn inject(&mut self, src: PrincipalId, dst: PrincipalId, body: Body) -> Result<DeliveryReceipt, FabricError> {
        self.inject_inner(src, dst, body, Labels::new(), None)
    }

    /// Re-sends a captured message verbatim.
    pub fn replay(&mut self, capture: usize) -> Result<DeliveryReceipt, FabricError> {
        let m = self.captures.get(capture).cloned().ok_or(FabricError::NotCaptured(capture))?;
        self.inject_inner(m.src, m.dst, m.body, m.taint, Some(m.id))
    }

    fn inject_inner(
        &mut self,
        src: PrincipalId,
        dst: PrincipalId,
        body: Body,
        taint: Labels,
        replay_of: Option<u64>,
    ) -> Result<DeliveryReceipt, FabricError> {
        self.known(src)?;
        self.known(dst)?;
        if self.trust(src, dst) == LinkTrust::ShieldedContainer {
            return Err(FabricError::TamperProof(src, dst));
        }
        self.route(src, dst)?;
        let id = self.fresh_id();
        let kind = body.kind();
        self.trace.push(TraceEvent::Injected { tick: self.now, id, src, dst, kind, replay_of });
        let deliver_at = self.now + 1;
        self.queue.insert((deliver_at, src, id), Message { id, tick: self.now, src, dst, kind, body, taint });
        Ok(DeliveryReceipt { id, deliver_at })
    }

    /// Pops the next message in delivery order.
    pub fn next(&mut self) -> Result<Option<Message>, FabricError> {
        let Some((&key, _)) = self.queue.first_key_value() else {
            return Ok(None);
        };
        if self.steps >= self.step_limit {
            return Err(FabricError::StepLimitExceeded(self.step_limit));
        }
        self.steps += 1;
        let msg = self.queue.remove(&key).expect("present");
        self.now = key.0;
        self.trace.push(TraceEvent::Deliver { tick: self.now, id: msg.id, src: msg.src, dst: msg.dst, kind: msg.kind });
        Ok(Some(msg))
    }

    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty()
    }

    /// Moves the clock forward so later sends are ordered after everything so far.
    pub fn advance(&mut self) {
        self.now += 1;
    }

    pub fn note_state(&mut self, what: impl Into<String>, job: Option<JobId>) {
        self.trace.push(TraceEvent::State { tick: self.now, what: what.into(), job });
    }

    pub fn note_incident(&mut self, at: PrincipalId, job: Option<JobId>, what: impl Into<String>) {
        self.trace.push(TraceEvent::Incident { tick: self.now, at, job, what: what.into() });
    }

    pub fn captures(&self) -> &[Message] {
        &self.captures
    }

    pub fn leaks(&self) -> &[Leak] {
        &self.leaks
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn write_trace<W: Write>(&self, mut w: W) -> io::Result<()> {
        for ev in &self.trace {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn trace_jsonl(&self) -> String {
        let mut out = Vec::new();
        self.write_trace(&mut out).expect("in-memory write");
        String::from_utf8(out).expect("json is utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Key256, ReplayGuard, SendChannel, KeyRegistry, Suite, CryptoError};
    use crate::ids::{FduId, TenantId};
    use crate::protocol::Wire;

    const T: PrincipalId = PrincipalId::Tenant(TenantId(0));
    const SC: PrincipalId = PrincipalId::Sc(ScId(0));
    const N: PrincipalId = PrincipalId::Node(NodeId(5));

    fn fabric() -> Fabric {
        let mut f = Fabric::default();
        for p in [T, SC, PrincipalId::Mp, PrincipalId::Fdu(FduId::new(NodeId(1), 0))] {
            f.add_principal(p);
        }
        f.attach(NodeId(5), ScId(0));
        f
    }

    fn raw(job: u32) -> Body {
        Body::Raw { job: JobId(job), to: T, bytes: b"secret".to_vec() }
    }

    #[test]
    fn unknown_and_unroutable() {
        let mut f = fabric();
        let ghost = PrincipalId::Node(NodeId(77));
        assert_eq!(f.send(Outgoing::new(T, ghost, Body::Abort { job: JobId(1) })), Err(FabricError::UnknownPrincipal(ghost)));
        assert_eq!(f.send(Outgoing::new(N, T, raw(1))), Err(FabricError::NoRoute(N, T)));
        assert!(f.send(Outgoing::new(N, SC, raw(1))).is_ok());
    }

    #[test]
    fn same_tick_orders_by_sender() {
        let mut f = fabric();
        f.send(Outgoing::new(SC, T, Body::Abort { job: JobId(1) })).unwrap();
        f.send(Outgoing::new(PrincipalId::Mp, T, Body::Abort { job: JobId(2) })).unwrap();
        f.send(Outgoing::new(T, SC, Body::Abort { job: JobId(3) })).unwrap();
        let order: Vec<PrincipalId> = std::iter::from_fn(|| f.next().unwrap()).map(|m| m.src).collect();
        assert_eq!(order, vec![PrincipalId::Mp, T, SC]);
    }

    #[test]
    fn tainted_plaintext_on_open_link_is_recorded() {
        let mut f = fabric();
        f.send(Outgoing::new(N, SC, raw(1)).tainted(Labels::from([JobId(1)]))).unwrap();
        assert!(f.leaks().is_empty());
        f.send(Outgoing::new(SC, T, raw(1)).tainted(Labels::from([JobId(1)]))).unwrap();
        assert_eq!(f.leaks().len(), 1);
        assert!(f.next().unwrap().is_some());
    }

    #[test]
    fn shielded_links_refuse_taps_and_injection() {
        let mut f = fabric();
        assert_eq!(f.attacker_tap(SC, N, TapMode::Observe, None), Err(FabricError::TamperProof(SC, N)));
        assert_eq!(f.inject(N, SC, raw(1)), Err(FabricError::TamperProof(N, SC)));
        assert!(f.attacker_tap(T, SC, TapMode::Observe, None).is_ok());
        assert!(!f.open_links().contains(&Link::new(SC, N)));
        assert!(f.open_links().contains(&Link::new(T, SC)));
    }

    #[test]
    fn replayed_capture_is_detected_by_receiver() {
        let mut f = fabric();
        f.attacker_tap(T, SC, TapMode::Observe, None).unwrap();
        let mut keys = KeyRegistry::default();
        let k = Key256::from_bytes([1; 32]);
        let mut ch = SendChannel::new(Suite::Deterministic, keys.mint(None, k.clone()), 1, JobId(1), T);
        let env = ch.seal_next(b"", b"hello");
        f.send(Outgoing::new(T, SC, Body::Data { job: JobId(1), env: Wire::dma(env) })).unwrap();
        f.replay(0).unwrap();
        let mut rx = ReplayGuard::default();
        let mut results = Vec::new();
        while let Some(m) = f.next().unwrap() {
            results.push(rx.open(Suite::Deterministic, &k, m.body.envelope().unwrap()).map(|(_, p)| p));
        }
        assert_eq!(results[0].as_deref().unwrap(), b"hello");
        assert!(matches!(results[1], Err(CryptoError::ReplayDetected { .. })));
    }

    #[test]
    fn flip_bit_breaks_authentication() {
        let mut f = fabric();
        f.tap_all(TapMode::FlipBit, None);
        let k = Key256::from_bytes([1; 32]);
        let mut keys = KeyRegistry::default();
        let mut ch = SendChannel::new(Suite::Deterministic, keys.mint(None, k.clone()), 1, JobId(1), T);
        f.send(Outgoing::new(T, SC, Body::Data { job: JobId(1), env: Wire::dma(ch.seal_next(b"", b"x")) })).unwrap();
        let m = f.next().unwrap().unwrap();
        assert_eq!(Suite::Deterministic.open(&k, m.body.envelope().unwrap()), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn empty_world_has_empty_trace_and_step_limit_holds() {
        let mut f = fabric();
        assert!(f.next().unwrap().is_none());
        assert_eq!(f.trace_jsonl(), "");
        f.step_limit = 1;
        f.send(Outgoing::new(T, SC, Body::Abort { job: JobId(1) })).unwrap();
        f.send(Outgoing::new(T, SC, Body::Abort { job: JobId(1) })).unwrap();
        f.next().unwrap();
        assert_eq!(f.next(), Err(FabricError::StepLimitExceeded(1)));
    }

    #[test]
    fn drop_duplicate_delay() {
        let mut f = fabric();
        f.attacker_tap(T, SC, TapMode::Duplicate, None).unwrap();
        f.send(Outgoing::new(T, SC, Body::Abort { job: JobId(1) })).unwrap();
        assert_eq!(std::iter::from_fn(|| f.next().unwrap()).count(), 2);
        f.clear_taps();
        f.tap_all(TapMode::Drop, Some(BTreeSet::from([MessageKind::Control])));
        f.send(Outgoing::new(T, SC, Body::Abort { job: JobId(1) })).unwrap();
        assert!(f.is_quiescent());
        f.clear_taps();
        f.tap_all(TapMode::Delay(5), None);
        let r = f.send(Outgoing::new(T, SC, Body::Abort { job: JobId(1) })).unwrap();
        assert_eq!(r.deliver_at, f.now() + 6);
    }
}
