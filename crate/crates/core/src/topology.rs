// SPDX-License-Identifier: Apache-2.0

//! Topology files: racks of controllers and nodes plus the vendor's trust
//! material. See `docs/topology.md` for the schema.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{hash_parts, Digest, Suite};
use crate::ids::{NodeId, PrincipalId, ScId};
use crate::manifest::{size_serde, DeviceKind, Policy};
use crate::sc::{DEFAULT_BUFFER_BYTES, DEFAULT_STAGING_CAPACITY};
use crate::tee_node::FduSpec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("topology parse error: {0}")]
    Parse(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("node {0}: {1}")]
    InvalidNode(u32, String),
    #[error("link {0}-{1}: {2}")]
    InvalidLink(PrincipalId, PrincipalId, String),
}

/// The digest a vendor publishes for firmware `version` unless overridden.
pub fn default_firmware_digest(version: &str) -> Digest {
    hash_parts(&[b"tee-fabric/firmware", version.as_bytes()])
}

fn default_tenants() -> u32 {
    1
}

fn default_vendor_name() -> String {
    "acme".into()
}

fn default_sc_firmware() -> String {
    "sc-1.0".into()
}

fn default_staging() -> u64 {
    DEFAULT_STAGING_CAPACITY
}

fn default_buffer() -> u64 {
    DEFAULT_BUFFER_BYTES
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub suite: Suite,
    #[serde(default)]
    pub vendor: VendorSpec,
    pub racks: Vec<RackSpec>,
    #[serde(default = "default_tenants")]
    pub tenants: u32,
    /// Declared cabling. Trust is derived from the endpoints; this list is
    /// validated against it.
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VendorSpec {
    #[serde(default = "default_vendor_name")]
    pub name: String,
    /// Published firmware digests by version; versions missing here get
    /// [`default_firmware_digest`].
    #[serde(default)]
    pub firmware: BTreeMap<String, Digest>,
    #[serde(default)]
    pub revoked_firmware: Vec<String>,
    /// Nodes and controllers whose device identity is revoked, by node id
    /// or controller id.
    #[serde(default)]
    pub revoked_nodes: Vec<u32>,
    #[serde(default)]
    pub revoked_scs: Vec<u32>,
}

impl Default for VendorSpec {
    fn default() -> Self {
        Self {
            name: default_vendor_name(),
            firmware: BTreeMap::new(),
            revoked_firmware: Vec::new(),
            revoked_nodes: Vec::new(),
            revoked_scs: Vec::new(),
        }
    }
}

impl VendorSpec {
    pub fn published_digest(&self, version: &str) -> Digest {
        self.firmware.get(version).copied().unwrap_or_else(|| default_firmware_digest(version))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RackSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub scs: Vec<ScSpec>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScSpec {
    pub id: u32,
    #[serde(default = "default_sc_firmware")]
    pub firmware: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub firmware_digest: Option<Digest>,
    #[serde(default = "default_staging", with = "size_serde")]
    pub staging: u64,
    #[serde(default = "default_buffer", with = "size_serde")]
    pub buffer: u64,
}

impl ScSpec {
    pub fn new(id: u32) -> Self {
        Self {
            id,
            firmware: default_sc_firmware(),
            firmware_digest: None,
            staging: DEFAULT_STAGING_CAPACITY,
            buffer: DEFAULT_BUFFER_BYTES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    pub kind: DeviceKind,
    pub tee: bool,
    pub cores: u32,
    #[serde(with = "size_serde")]
    pub memory: u64,
    pub firmware: String,
    /// The image actually installed; defaults to the vendor's published one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub firmware_digest: Option<Digest>,
    /// Controller guarding a non-TEE node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc: Option<u32>,
    /// Partitions of a TEE node; empty means one unit spanning the node.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fdus: Vec<FduSpec>,
    /// Security properties the node's hardware enforces.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub properties: Vec<Policy>,
}

impl NodeSpec {
    pub fn tee(id: u32, kind: DeviceKind, cores: u32, memory: u64, fdus: Vec<FduSpec>) -> Self {
        Self {
            id,
            kind,
            tee: true,
            cores,
            memory,
            firmware: format!("{}-1.0", kind.name().to_lowercase()),
            firmware_digest: None,
            sc: None,
            fdus,
            properties: Vec::new(),
        }
    }

    pub fn non_tee(id: u32, kind: DeviceKind, cores: u32, memory: u64, sc: u32) -> Self {
        Self { tee: false, sc: Some(sc), fdus: Vec::new(), ..Self::tee(id, kind, cores, memory, Vec::new()) }
    }

    pub fn with_properties(mut self, p: impl IntoIterator<Item = Policy>) -> Self {
        self.properties.extend(p);
        self
    }

    /// The partitions to create, with the whole-node default applied.
    pub fn partitions(&self) -> Vec<FduSpec> {
        if self.fdus.is_empty() {
            vec![FduSpec::new(self.cores, self.memory)]
        } else {
            self.fdus.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: PrincipalId,
    pub b: PrincipalId,
}

impl Topology {
    pub fn parse(json: &str) -> Result<Self, TopologyError> {
        let t: Topology = serde_json::from_str(json).map_err(|e| TopologyError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.racks.iter().flat_map(|r| r.nodes.iter())
    }

    pub fn scs(&self) -> impl Iterator<Item = &ScSpec> {
        self.racks.iter().flat_map(|r| r.scs.iter())
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut node_ids = BTreeSet::new();
        let mut sc_ids = BTreeSet::new();
        for s in self.scs() {
            if !sc_ids.insert(s.id) {
                return Err(TopologyError::DuplicateId(ScId(s.id).to_string()));
            }
        }
        for rack in &self.racks {
            let local: BTreeSet<u32> = rack.scs.iter().map(|s| s.id).collect();
            for n in &rack.nodes {
                let bad = |why: &str| Err(TopologyError::InvalidNode(n.id, why.into()));
                if !node_ids.insert(n.id) {
                    return Err(TopologyError::DuplicateId(NodeId(n.id).to_string()));
                }
                if n.kind == DeviceKind::SecurityController {
                    return bad("controllers are declared under \"scs\"");
                }
                match (n.tee, n.sc) {
                    (true, Some(_)) => return bad("TEE nodes are not attached to a controller"),
                    (false, None) => return bad("non-TEE nodes need a controller"),
                    (false, Some(s)) if !local.contains(&s) => return bad("controller must be in the same rack"),
                    _ => {}
                }
                if !n.tee && !n.fdus.is_empty() {
                    return bad("only TEE nodes are partitioned");
                }
                if n.cores == 0 || n.memory == 0 {
                    return bad("cores and memory must be positive");
                }
            }
        }
        let exists = |p: PrincipalId| match p {
            PrincipalId::Mp => true,
            PrincipalId::Tenant(t) => t.0 < self.tenants,
            PrincipalId::Sc(s) => sc_ids.contains(&s.0),
            PrincipalId::Node(n) => node_ids.contains(&n.0),
            PrincipalId::Fdu(f) => node_ids.contains(&f.node.0),
        };
        let attached: BTreeMap<u32, u32> = self.nodes().filter_map(|n| n.sc.map(|s| (n.id, s))).collect();
        for l in &self.links {
            for p in [l.a, l.b] {
                if !exists(p) {
                    return Err(TopologyError::InvalidLink(l.a, l.b, format!("unknown endpoint {p}")));
                }
            }
            for (x, y) in [(l.a, l.b), (l.b, l.a)] {
                if let PrincipalId::Node(n) = x.physical() {
                    if let Some(&s) = attached.get(&n.0) {
                        if y != PrincipalId::Sc(ScId(s)) {
                            return Err(TopologyError::InvalidLink(l.a, l.b, "non-TEE nodes only connect to their controller".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "racks": [{
            "name": "r0",
            "scs": [{"id": 0, "buffer": "1M"}],
            "nodes": [
                {"id": 1, "kind": "CPU", "tee": true, "cores": 8, "memory": "64M", "firmware": "cpu-1.0",
                 "fdus": [{"cores": 4, "memory": "32M"}, {"cores": 4, "memory": "32M"}],
                 "properties": ["memIsolation"]},
                {"id": 2, "kind": "GPU", "tee": false, "cores": 16, "memory": "16M", "firmware": "gpu-1.0", "sc": 0}
            ]
        }],
        "links": [{"a": "sc:0", "b": "node:2"}]
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let t = Topology::parse(SAMPLE).unwrap();
        assert_eq!(t.tenants, 1);
        assert_eq!(t.nodes().count(), 2);
        assert_eq!(t.scs().next().unwrap().staging, DEFAULT_STAGING_CAPACITY);
        assert_eq!(Topology::parse(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn rejects_inconsistent_topologies() {
        let swap = |from: &str, to: &str| Topology::parse(&SAMPLE.replace(from, to));
        assert!(matches!(swap(r#""sc": 0}"#, r#""sc": 7}"#), Err(TopologyError::InvalidNode(2, _))));
        assert!(matches!(swap(r#""id": 2"#, r#""id": 1"#), Err(TopologyError::DuplicateId(_))));
        assert!(matches!(swap(r#""a": "sc:0""#, r#""a": "tenant:0""#), Err(TopologyError::InvalidLink(..))));
        assert!(matches!(swap(r#""b": "node:2""#, r#""b": "node:9""#), Err(TopologyError::InvalidLink(..))));
        assert!(matches!(Topology::parse("{"), Err(TopologyError::Parse(_))));
    }
}
