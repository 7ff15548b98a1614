// SPDX-License-Identifier: Apache-2.0

//! Tenant side: submit a manifest, verify every piece of evidence, release
//! the job key only if all of it checks out, then drive and tear down the job.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::attestation::{verify_report, verify_vouch, AttestationReport, Challenge, RejectReason, Requirement, SignedVouch, Verdict};
use crate::crypto::{CryptoError, DhKeyPair, Digest, Key256, KeyHandle, ReplayGuard, SendChannel};
use crate::fabric::Message;
use crate::ids::{FduId, JobId, NodeId, PrincipalId, ScId, TenantId};
use crate::manifest::{verify_manifest, Manifest};
use crate::protocol::{encode_key_bundle, AppMessage, AppOp, Assignment, Body, Incident, JobMembership, MessageKind, Outgoing, Wire};
use crate::world::World;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TenantError {
    #[error("manifest invalid: {0}")]
    ManifestInvalid(String),
    #[error("insufficient resources: {0}")]
    InsufficientResources(String),
    #[error("no evidence requested for resource {0}")]
    CoverageGap(usize),
    #[error("attestation failed: {0}")]
    AttestationFailed(RejectReason),
    #[error("allocation refused: {0}")]
    AllocationRefused(String),
    #[error("no answer")]
    Timeout,
    #[error("authentication failure")]
    AuthFailure,
    #[error("session not running")]
    SessionNotRunning,
    #[error("no such job {0}")]
    UnknownJob(JobId),
    #[error("{0} is not a member of the job")]
    NotAMember(PrincipalId),
    #[error("loaded code digest {0} is not in the manifest")]
    CodeMismatch(Digest),
    #[error("remote failure: {0}")]
    Remote(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum SessionState {
    Submitted,
    Attested,
    Provisioned,
    Running,
    Terminated,
    /// Provisioning was abandoned; nothing was released.
    Aborted,
}

struct SessionKeys {
    k: KeyHandle,
    to_fdu: BTreeMap<FduId, SendChannel>,
    to_job: SendChannel,
}

pub struct JobSession {
    pub job: JobId,
    pub tenant: TenantId,
    pub manifest: Manifest,
    pub state: SessionState,
    pub placement: Vec<Assignment>,
    pub membership: Option<JobMembership>,
    keys: Option<SessionKeys>,
    rx: ReplayGuard,
    next_req: u64,
    responses: BTreeMap<u64, AppOp>,
    dma_in: Vec<(PrincipalId, Vec<u8>)>,
}

impl JobSession {
    pub fn manifest_id(&self) -> Digest {
        self.manifest.manifest_id
    }

    pub fn fdus(&self) -> BTreeSet<FduId> {
        self.placement
            .iter()
            .filter_map(|a| match a {
                Assignment::Fdu { fdu, .. } => Some(*fdu),
                _ => None,
            })
            .collect()
    }

    pub fn nodes(&self) -> BTreeSet<NodeId> {
        self.placement
            .iter()
            .filter_map(|a| match a {
                Assignment::NonTee { node, .. } => Some(*node),
                _ => None,
            })
            .collect()
    }

    /// DMA transfers received so far, with their authenticated sender.
    pub fn dma_received(&self) -> &[(PrincipalId, Vec<u8>)] {
        &self.dma_in
    }

    pub fn per_fdu_key_count(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.to_fdu.len())
    }

    pub fn primary(&self) -> Option<FduId> {
        self.membership.as_ref().map(|m| m.primary)
    }
}

enum Evidence {
    Fdu(Box<AttestationReport>),
    Sc(Box<AttestationReport>, Vec<SignedVouch>),
    Refused(String),
}

impl World {
    pub fn session(&self, job: JobId) -> Option<&JobSession> {
        self.sessions.get(&job)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &JobSession> {
        self.sessions.values()
    }

    fn take_inbox(&mut self, tenant: TenantId, mut pred: impl FnMut(&Message) -> bool) -> Vec<Message> {
        let inbox = &mut self.tenants.get_mut(&tenant).expect("tenant exists").inbox;
        let (take, keep) = std::mem::take(inbox).into_iter().partition(|m| pred(m));
        *inbox = keep;
        take
    }

    fn tenant_incident(&mut self, tenant: TenantId, job: JobId, what: &str) {
        self.record_incident(Incident { at: PrincipalId::Tenant(tenant), job: Some(job), what: what.into() });
    }

    /// Checks and submits `manifest`; returns the job the management plane
    /// assigned.
    pub fn submit_job(&mut self, tenant: TenantId, manifest: &Manifest) -> Result<JobId, TenantError> {
        if !verify_manifest(manifest, &self.vendor.developer().public()) {
            return Err(TenantError::ManifestInvalid("signature or digest does not verify".into()));
        }
        if !manifest.has_cpu() {
            return Err(TenantError::ManifestInvalid("a CPU resource is required".into()));
        }
        let me = PrincipalId::Tenant(tenant);
        let body = Body::Submit { tenant, manifest: String::from_utf8(manifest.to_json()).expect("json") };
        self.send(Outgoing::new(me, PrincipalId::Mp, body)).map_err(|e| TenantError::InsufficientResources(e.to_string()))?;
        self.run_until_quiescent().map_err(|_| TenantError::Timeout)?;
        let replies = self.take_inbox(tenant, |m| {
            m.src == PrincipalId::Mp && matches!(m.body, Body::Placement { .. } | Body::PlacementRefused { .. })
        });
        match replies.into_iter().next().map(|m| m.body) {
            Some(Body::Placement { job, assignments }) => {
                if self.sessions.contains_key(&job) {
                    return Err(TenantError::AllocationRefused(format!("{job} already in use")));
                }
                self.fabric.note_state("Submitted", Some(job));
                self.sessions.insert(
                    job,
                    JobSession {
                        job,
                        tenant,
                        manifest: manifest.clone(),
                        state: SessionState::Submitted,
                        placement: assignments,
                        membership: None,
                        keys: None,
                        rx: ReplayGuard::default(),
                        next_req: 1,
                        responses: BTreeMap::new(),
                        dma_in: Vec::new(),
                    },
                );
                Ok(job)
            }
            Some(Body::PlacementRefused { reason }) => Err(TenantError::InsufficientResources(reason)),
            _ => Err(TenantError::Timeout),
        }
    }

    /// Attests every placed resource and, only if all evidence is accepted,
    /// distributes the job key. Any failure aborts the whole job.
    pub fn verify_and_provision(&mut self, job: JobId) -> Result<(), TenantError> {
        let s = self.sessions.get(&job).ok_or(TenantError::UnknownJob(job))?;
        if s.state != SessionState::Submitted {
            return Err(TenantError::SessionNotRunning);
        }
        let tenant = s.tenant;
        let manifest = s.manifest.clone();
        let placement = s.placement.clone();
        let manifest_id = manifest.manifest_id;

        // Every resource needs exactly one assignment of the right class.
        let mut by_resource: BTreeMap<usize, &Assignment> = BTreeMap::new();
        for a in &placement {
            if a.resource() >= manifest.resources.len() || by_resource.insert(a.resource(), a).is_some() {
                return self.abort(job, TenantError::AttestationFailed(RejectReason::PolicyUnsatisfied));
            }
        }
        if let Some(i) = (0..manifest.resources.len()).find(|i| !by_resource.contains_key(i)) {
            return self.abort(job, TenantError::CoverageGap(i));
        }
        let mut fdu_reqs: Vec<(usize, FduId)> = Vec::new();
        let mut sc_reqs: BTreeMap<ScId, Vec<(usize, NodeId)>> = BTreeMap::new();
        for (&i, a) in &by_resource {
            match ((*a).clone(), manifest.resources[i].non_tee) {
                (Assignment::Fdu { fdu, .. }, false) => fdu_reqs.push((i, fdu)),
                (Assignment::NonTee { node, sc, .. }, true) => sc_reqs.entry(sc).or_default().push((i, node)),
                _ => return self.abort(job, TenantError::AttestationFailed(RejectReason::PolicyUnsatisfied)),
            }
        }
        let primary_idx = manifest.primary_cpu().expect("checked at submit");
        let primary = match by_resource[&primary_idx] {
            Assignment::Fdu { fdu, .. } => *fdu,
            Assignment::NonTee { .. } => unreachable!("CPU resources are TEE-only"),
        };

        let me = PrincipalId::Tenant(tenant);
        let dh = DhKeyPair::generate(&mut self.rng);
        let mut challenges: BTreeMap<PrincipalId, Challenge> = BTreeMap::new();
        for &(_, fdu) in &fdu_reqs {
            let challenge = self.tenants.get_mut(&tenant).expect("tenant").challenges.issue(&mut self.rng);
            challenges.insert(PrincipalId::Fdu(fdu), challenge);
            let body = Body::AllocRequest { job, fdu, challenge, tenant_pub: dh.public(), manifest_id };
            let _ = self.send(Outgoing::new(me, PrincipalId::Fdu(fdu), body));
        }
        for (&sc, nodes) in &sc_reqs {
            let challenge = self.tenants.get_mut(&tenant).expect("tenant").challenges.issue(&mut self.rng);
            challenges.insert(PrincipalId::Sc(sc), challenge);
            let nodes = nodes.iter().map(|&(_, n)| n).collect();
            let body = Body::BindRequest { job, nodes, challenge, tenant_pub: dh.public(), manifest_id };
            let _ = self.send(Outgoing::new(me, PrincipalId::Sc(sc), body));
        }
        self.run_until_quiescent().map_err(|_| TenantError::Timeout)?;

        let mut evidence: BTreeMap<PrincipalId, Evidence> = BTreeMap::new();
        for m in self.take_inbox(tenant, |m| m.body.job() == Some(job)) {
            let (from, ev) = match m.body {
                Body::FduEvidence { fdu, report, .. } => (PrincipalId::Fdu(fdu), Evidence::Fdu(report)),
                Body::ScEvidence { sc, report, vouches, .. } => (PrincipalId::Sc(sc), Evidence::Sc(report, vouches)),
                Body::Refused { at, reason, .. } => (at, Evidence::Refused(reason)),
                _ => continue,
            };
            evidence.entry(from).or_insert(ev);
        }

        let mut failure: Option<TenantError> = None;
        let mut reports: BTreeMap<PrincipalId, AttestationReport> = BTreeMap::new();
        let mut fail = |e: TenantError| {
            failure.get_or_insert(e);
        };
        for &(i, fdu) in &fdu_reqs {
            let p = PrincipalId::Fdu(fdu);
            match evidence.remove(&p) {
                Some(Evidence::Fdu(report)) => {
                    let fresh = self.tenants.get_mut(&tenant).expect("tenant").challenges.consume(&challenges[&p]);
                    let verdict = if fresh {
                        let req = Requirement::from(&manifest.resources[i]);
                        verify_report(&report, &req, &self.vendor.whitelist, &self.vendor.revocation, &challenges[&p])
                    } else {
                        Verdict::Reject(RejectReason::Stale)
                    };
                    self.fabric.note_state(format!("verdict {p} {verdict:?}"), Some(job));
                    match verdict {
                        Verdict::Accept => {
                            reports.insert(p, *report);
                        }
                        Verdict::Reject(r) => fail(TenantError::AttestationFailed(r)),
                    }
                }
                Some(Evidence::Refused(reason)) => fail(TenantError::AllocationRefused(reason)),
                _ => fail(TenantError::Timeout),
            }
        }
        for (&sc, nodes) in &sc_reqs {
            let p = PrincipalId::Sc(sc);
            match evidence.remove(&p) {
                Some(Evidence::Sc(report, vouches)) => {
                    let challenge = challenges[&p];
                    let fresh = self.tenants.get_mut(&tenant).expect("tenant").challenges.consume(&challenge);
                    let (wl, rl) = (&self.vendor.whitelist, &self.vendor.revocation);
                    let mut verdict = if fresh {
                        verify_report(&report, &Requirement::security_controller(), wl, rl, &challenge)
                    } else {
                        Verdict::Reject(RejectReason::Stale)
                    };
                    if verdict.is_accept() {
                        for &(i, node) in nodes {
                            let v = vouches.iter().find(|v| v.vouch.node == node && v.vouch.sc == sc);
                            let req = Requirement::from(&manifest.resources[i]);
                            let vv = match v {
                                Some(v) => verify_vouch(v, &report, &req, wl, rl, &challenge),
                                None => Verdict::Reject(RejectReason::PolicyUnsatisfied),
                            };
                            self.fabric.note_state(format!("verdict {} {vv:?}", PrincipalId::Node(node)), Some(job));
                            if !vv.is_accept() {
                                verdict = vv;
                                break;
                            }
                        }
                    }
                    self.fabric.note_state(format!("verdict {p} {verdict:?}"), Some(job));
                    match verdict {
                        Verdict::Accept => {
                            reports.insert(p, *report);
                        }
                        Verdict::Reject(r) => fail(TenantError::AttestationFailed(r)),
                    }
                }
                Some(Evidence::Refused(reason)) => fail(TenantError::AllocationRefused(reason)),
                _ => fail(TenantError::Timeout),
            }
        }
        if let Some(e) = failure {
            return self.abort(job, e);
        }
        self.sessions.get_mut(&job).expect("session").state = SessionState::Attested;
        self.fabric.note_state("Attested", Some(job));

        // All evidence accepted: only now does the job key exist.
        let membership = JobMembership {
            job,
            tenant,
            manifest_id,
            primary,
            fdus: fdu_reqs.iter().map(|&(_, f)| f).collect(),
            nodes: sc_reqs.iter().flat_map(|(&sc, ns)| ns.iter().map(move |&(_, n)| (n, sc))).collect(),
        };
        let k = Key256::random(&mut self.rng);
        let bundle = encode_key_bundle(&k, &membership);
        let k = self.keys.mint(Some(job), k);
        let mut to_fdu = BTreeMap::new();
        for (&p, report) in &reports {
            let shared = dh.derive_shared(&report.public_key.0).map_err(|_| TenantError::AuthFailure)?;
            self.next_channel += 1;
            let mut ch = SendChannel::new(self.suite, self.keys.mint(Some(job), shared), self.next_channel, job, me);
            let env = ch.seal_next(&manifest_id.0, &bundle);
            let _ = self.send(Outgoing::new(me, p, Body::KeyInstall { job, env: Wire::new(env, MessageKind::Control) }));
            if let PrincipalId::Fdu(f) = p {
                to_fdu.insert(f, ch);
            }
        }
        drop(bundle);
        self.next_channel += 1;
        let to_job = SendChannel::new(self.suite, k.clone(), self.next_channel, job, me);
        self.run_until_quiescent().map_err(|_| TenantError::Timeout)?;
        let mut acked = BTreeSet::new();
        let mut refused = None;
        for m in self.take_inbox(tenant, |m| matches!(m.body, Body::KeyAck { job: j, .. } | Body::Refused { job: j, .. } if j == job)) {
            match m.body {
                Body::KeyAck { at, .. } => {
                    acked.insert(at);
                }
                Body::Refused { reason, .. } => {
                    refused.get_or_insert(reason);
                }
                _ => {}
            }
        }
        let s = self.sessions.get_mut(&job).expect("session");
        s.membership = Some(membership);
        s.keys = Some(SessionKeys { k, to_fdu, to_job });
        if let Some(reason) = refused {
            return Err(TenantError::AllocationRefused(reason));
        }
        if reports.keys().any(|p| !acked.contains(p)) {
            return Err(TenantError::Timeout);
        }
        s.state = SessionState::Provisioned;
        self.fabric.note_state("Provisioned", Some(job));
        Ok(())
    }

    fn abort(&mut self, job: JobId, e: TenantError) -> Result<(), TenantError> {
        let s = self.sessions.get_mut(&job).expect("session");
        s.state = SessionState::Aborted;
        let me = PrincipalId::Tenant(s.tenant);
        let targets: Vec<PrincipalId> = s
            .placement
            .iter()
            .map(|a| match *a {
                Assignment::Fdu { fdu, .. } => PrincipalId::Fdu(fdu),
                Assignment::NonTee { sc, .. } => PrincipalId::Sc(sc),
            })
            .chain([PrincipalId::Mp])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for t in targets {
            let _ = self.send(Outgoing::new(me, t, Body::Abort { job }));
        }
        let _ = self.run_until_quiescent();
        self.fabric.note_state(format!("Aborted: {e}"), Some(job));
        Err(e)
    }

    /// Loads `code` into the primary CPU unit and checks its digest against
    /// the manifest.
    pub fn start(&mut self, job: JobId, code: &[u8]) -> Result<(), TenantError> {
        let s = self.sessions.get(&job).ok_or(TenantError::UnknownJob(job))?;
        if s.state != SessionState::Provisioned {
            return Err(TenantError::SessionNotRunning);
        }
        let primary = s.primary().expect("provisioned");
        let digests = s.manifest.code_digests.clone();
        let got = self.request(job, PrincipalId::Fdu(primary), AppOp::Load(code.to_vec()))?;
        let got = Digest(got.try_into().map_err(|_| TenantError::AuthFailure)?);
        if !digests.is_empty() && !digests.contains(&got) {
            return Err(TenantError::CodeMismatch(got));
        }
        self.sessions.get_mut(&job).expect("session").state = SessionState::Running;
        self.fabric.note_state("Running", Some(job));
        Ok(())
    }

    /// Submit, verify, provision and start in one go.
    pub fn launch(&mut self, tenant: TenantId, manifest: &Manifest, code: &[u8]) -> Result<JobId, TenantError> {
        let job = self.submit_job(tenant, manifest)?;
        self.verify_and_provision(job)?;
        self.start(job, code)?;
        Ok(job)
    }

    /// Sends one request to a member and returns the response payload.
    pub fn exchange(&mut self, job: JobId, target: PrincipalId, op: AppOp) -> Result<Vec<u8>, TenantError> {
        let s = self.sessions.get(&job).ok_or(TenantError::UnknownJob(job))?;
        if s.state != SessionState::Running {
            return Err(TenantError::SessionNotRunning);
        }
        self.request(job, target, op)
    }

    /// Sends without waiting; returns the request number.
    pub fn post(&mut self, job: JobId, target: PrincipalId, op: AppOp) -> Result<u64, TenantError> {
        let s = self.sessions.get_mut(&job).ok_or(TenantError::UnknownJob(job))?;
        let me = PrincipalId::Tenant(s.tenant);
        let m = s.membership.as_ref().ok_or(TenantError::SessionNotRunning)?;
        if !m.contains(target) || matches!(target, PrincipalId::Sc(_) | PrincipalId::Tenant(_)) {
            return Err(TenantError::NotAMember(target));
        }
        let req = s.next_req;
        s.next_req += 1;
        let msg = AppMessage { req, reply_to: me, op }.encode();
        let keys = s.keys.as_mut().ok_or(TenantError::SessionNotRunning)?;
        let out = match target {
            PrincipalId::Fdu(f) => {
                let env = keys.to_fdu.get_mut(&f).ok_or(TenantError::NotAMember(target))?.seal_next(b"", &msg);
                Outgoing::new(me, target, Body::Data { job, env: Wire::dma(env) })
            }
            PrincipalId::Node(n) => {
                let sc = m.nodes[&n];
                let env = keys.to_job.seal_next(b"", &msg);
                Outgoing::new(me, PrincipalId::Sc(sc), Body::Proxy { job, node: n, env: Wire::dma(env) })
            }
            _ => unreachable!("filtered above"),
        };
        let _ = self.send(out);
        Ok(req)
    }

    fn request(&mut self, job: JobId, target: PrincipalId, op: AppOp) -> Result<Vec<u8>, TenantError> {
        let req = self.post(job, target, op)?;
        self.run_until_quiescent().map_err(|_| TenantError::Timeout)?;
        self.collect(job);
        let s = self.sessions.get_mut(&job).expect("session");
        match s.responses.remove(&req) {
            Some(AppOp::Response(bytes)) => Ok(bytes),
            Some(AppOp::Fail(e)) => Err(TenantError::Remote(e)),
            Some(_) => Err(TenantError::AuthFailure),
            None => Err(TenantError::Timeout),
        }
    }

    /// Opens every pending data message for `job`. Unauthentic ones are
    /// recorded as incidents and dropped.
    pub fn collect(&mut self, job: JobId) {
        let Some(s) = self.sessions.get(&job) else { return };
        let tenant = s.tenant;
        let msgs = self.take_inbox(tenant, |m| matches!(m.body, Body::Data { job: j, .. } if j == job));
        for m in msgs {
            let Body::Data { env, .. } = m.body else { continue };
            let s = self.sessions.get_mut(&job).expect("session");
            let Some(keys) = s.keys.as_ref() else { continue };
            let opened = env.env.header().and_then(|h| {
                let key = match h.sender {
                    PrincipalId::Fdu(f) => keys.to_fdu.get(&f).map(|c| c.key().key()).ok_or(CryptoError::AuthFailure)?,
                    _ => keys.k.key(),
                };
                if h.job != job {
                    return Err(CryptoError::AuthFailure);
                }
                s.rx.open(self.suite, key, &env.env)
            });
            match opened.map(|(h, p)| (h.sender, AppMessage::decode(&p))) {
                Ok((from, Some(AppMessage { op: AppOp::DmaData { data }, .. }))) => s.dma_in.push((from, data)),
                Ok((_, Some(msg))) => {
                    s.responses.insert(msg.req, msg.op);
                }
                Ok((_, None)) => self.tenant_incident(tenant, job, "MalformedMessage"),
                Err(CryptoError::ReplayDetected { .. }) => self.tenant_incident(tenant, job, "ReplayDetected"),
                Err(_) => self.tenant_incident(tenant, job, "AuthFailure"),
            }
        }
    }

    /// Authenticated teardown through the primary CPU unit. Idempotent.
    pub fn terminate(&mut self, job: JobId) -> Result<(), TenantError> {
        let s = self.sessions.get(&job).ok_or(TenantError::UnknownJob(job))?;
        match s.state {
            SessionState::Terminated | SessionState::Aborted => return Ok(()),
            SessionState::Provisioned | SessionState::Running => {}
            _ => return Err(TenantError::SessionNotRunning),
        }
        let primary = s.primary().expect("provisioned");
        let reply = self.request(job, PrincipalId::Fdu(primary), AppOp::Terminate)?;
        if reply != b"terminated" {
            return Err(TenantError::Remote(String::from_utf8_lossy(&reply).into_owned()));
        }
        let s = self.sessions.get_mut(&job).expect("session");
        s.keys = None;
        s.state = SessionState::Terminated;
        s.responses.clear();
        self.fabric.note_state("JobCompleted", Some(job));
        Ok(())
    }
}
