// SPDX-License-Identifier: Apache-2.0

//! The untrusted management plane: inventory, placement and bookkeeping.
//! Nothing it decides is trusted; its mistakes and lies must be caught by
//! tenants and devices.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{FduId, JobId, NodeId, PrincipalId, ScId, TenantId};
use crate::manifest::{parse_manifest, DeviceKind, Manifest, Policy, ResourceRequest};
use crate::protocol::{Assignment, Body, Effects, Outgoing};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FduInfo {
    pub fdu: FduId,
    pub kind: DeviceKind,
    pub cores: u32,
    pub memory: u64,
    pub properties: BTreeSet<Policy>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub node: NodeId,
    pub sc: ScId,
    pub kind: DeviceKind,
    pub cores: u32,
    pub memory: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Inventory {
    pub fdus: Vec<FduInfo>,
    pub nodes: Vec<NodeInfo>,
}

/// Placement behaviour.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Honest,
    /// Prefer units of the right kind that are smaller than requested.
    Undersize,
    /// Ignore its own busy bookkeeping and hand out units already in use.
    IgnoreBusy,
    /// Honest, except for the listed resource indices.
    Override(BTreeMap<usize, Assignment>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MpError {
    #[error("insufficient resources for resource {0}")]
    InsufficientResources(usize),
    #[error("malformed submission: {0}")]
    MalformedSubmission(String),
}

#[derive(Debug, Default)]
pub struct ManagementPlane {
    pub inventory: Inventory,
    pub strategy: Strategy,
    busy_fdus: BTreeMap<FduId, JobId>,
    busy_nodes: BTreeMap<NodeId, JobId>,
    next_job: u32,
    pub placements: BTreeMap<JobId, (TenantId, Vec<Assignment>)>,
}

impl ManagementPlane {
    pub fn new(inventory: Inventory) -> Self {
        Self { inventory, ..Self::default() }
    }

    pub fn busy_fdus(&self) -> &BTreeMap<FduId, JobId> {
        &self.busy_fdus
    }

    pub fn busy_nodes(&self) -> &BTreeMap<NodeId, JobId> {
        &self.busy_nodes
    }

    fn fdu_fits(f: &FduInfo, r: &ResourceRequest) -> bool {
        f.kind == r.resource_type && f.cores >= r.cores && f.memory >= r.memory && r.policies.is_subset(&f.properties)
    }

    fn node_fits(n: &NodeInfo, r: &ResourceRequest) -> bool {
        n.kind == r.resource_type && n.cores >= r.cores && n.memory >= r.memory && r.policies.is_empty()
    }

    /// Places every resource of `m` according to the strategy. Only the
    /// honest parts of a placement can fail.
    pub fn allocate(&self, m: &Manifest) -> Result<Vec<Assignment>, MpError> {
        let ignore_busy = self.strategy == Strategy::IgnoreBusy;
        let mut used_fdus = BTreeSet::new();
        let mut used_nodes = BTreeSet::new();
        let mut out = Vec::with_capacity(m.resources.len());
        for (i, r) in m.resources.iter().enumerate() {
            if let Strategy::Override(map) = &self.strategy {
                if let Some(a) = map.get(&i) {
                    out.push(a.clone());
                    continue;
                }
            }
            let fdu_free = |f: &FduInfo| (ignore_busy || !self.busy_fdus.contains_key(&f.fdu)) && !used_fdus.contains(&f.fdu);
            let node_free =
                |n: &NodeInfo| (ignore_busy || !self.busy_nodes.contains_key(&n.node)) && !used_nodes.contains(&n.node);
            let a = if r.non_tee {
                let undersized = (self.strategy == Strategy::Undersize)
                    .then(|| {
                        self.inventory.nodes.iter().find(|n| {
                            node_free(n) && n.kind == r.resource_type && (n.cores < r.cores || n.memory < r.memory)
                        })
                    })
                    .flatten();
                let n = undersized
                    .or_else(|| self.inventory.nodes.iter().find(|n| node_free(n) && Self::node_fits(n, r)))
                    .ok_or(MpError::InsufficientResources(i))?;
                used_nodes.insert(n.node);
                Assignment::NonTee { resource: i, node: n.node, sc: n.sc }
            } else {
                let undersized = (self.strategy == Strategy::Undersize)
                    .then(|| {
                        self.inventory.fdus.iter().find(|f| {
                            fdu_free(f) && f.kind == r.resource_type && (f.cores < r.cores || f.memory < r.memory)
                        })
                    })
                    .flatten();
                let f = undersized
                    .or_else(|| self.inventory.fdus.iter().find(|f| fdu_free(f) && Self::fdu_fits(f, r)))
                    .ok_or(MpError::InsufficientResources(i))?;
                used_fdus.insert(f.fdu);
                Assignment::Fdu { resource: i, fdu: f.fdu }
            };
            out.push(a);
        }
        Ok(out)
    }

    fn release(&mut self, job: JobId, fdus: &[FduId], nodes: &[NodeId]) {
        for f in fdus {
            if self.busy_fdus.get(f) == Some(&job) {
                self.busy_fdus.remove(f);
            }
        }
        for n in nodes {
            if self.busy_nodes.get(n) == Some(&job) {
                self.busy_nodes.remove(n);
            }
        }
    }

    pub fn handle(&mut self, src: PrincipalId, body: Body) -> Effects {
        let me = PrincipalId::Mp;
        let mut fx = Effects::default();
        match body {
            Body::Submit { tenant, manifest } => {
                let placed = parse_manifest(manifest.as_bytes())
                    .map_err(|e| MpError::MalformedSubmission(e.to_string()))
                    .and_then(|m| self.allocate(&m));
                match placed {
                    Ok(assignments) => {
                        let job = JobId(self.next_job);
                        self.next_job += 1;
                        for a in &assignments {
                            match *a {
                                Assignment::Fdu { fdu, .. } => {
                                    self.busy_fdus.insert(fdu, job);
                                }
                                Assignment::NonTee { node, .. } => {
                                    self.busy_nodes.insert(node, job);
                                }
                            }
                        }
                        self.placements.insert(job, (tenant, assignments.clone()));
                        fx.send(Outgoing::new(me, PrincipalId::Tenant(tenant), Body::Placement { job, assignments }));
                    }
                    Err(e) => {
                        fx.send(Outgoing::new(me, PrincipalId::Tenant(tenant), Body::PlacementRefused { reason: e.to_string() }))
                    }
                }
            }
            Body::ReleaseNotice { job, nodes, fdus } => self.release(job, &fdus, &nodes),
            Body::Abort { job } => {
                if let Some((_, assignments)) = self.placements.get(&job) {
                    let fdus: Vec<FduId> = assignments
                        .iter()
                        .filter_map(|a| match a {
                            Assignment::Fdu { fdu, .. } => Some(*fdu),
                            _ => None,
                        })
                        .collect();
                    let nodes: Vec<NodeId> = assignments
                        .iter()
                        .filter_map(|a| match a {
                            Assignment::NonTee { node, .. } => Some(*node),
                            _ => None,
                        })
                        .collect();
                    self.release(job, &fdus, &nodes);
                }
            }
            _ => fx.incident(me, None, format!("UnexpectedMessage from {src}")),
        }
        fx
    }
}
