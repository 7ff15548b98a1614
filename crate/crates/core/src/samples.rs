// SPDX-License-Identifier: Apache-2.0

//! Built-in topologies and manifests used by the attack suite, the fuzzer
//! and the command line.

use crate::crypto::{hash, Digest};
use crate::manifest::{DeviceKind, Manifest, Policy, ResourceRequest};
use crate::tee_node::FduSpec;
use crate::topology::{NodeSpec, RackSpec, ScSpec, Topology};

const MIB: u64 = 1 << 20;

/// Code loaded into the primary unit of sample jobs.
pub const SAMPLE_CODE: &[u8] = b"tee-fabric sample enclave v1";

pub fn sample_code_digest() -> Digest {
    hash(SAMPLE_CODE)
}

fn cpu(id: u32) -> NodeSpec {
    let parts = vec![FduSpec::new(4, 32 * MIB), FduSpec::new(2, 16 * MIB), FduSpec::new(2, 16 * MIB)];
    NodeSpec::tee(id, DeviceKind::Cpu, 8, 64 * MIB, parts)
        .with_properties([Policy::MemIsolation, Policy::NoHt])
}

fn rack(name: &str, sc: u32, nodes: Vec<NodeSpec>) -> RackSpec {
    let mut s = ScSpec::new(sc);
    s.staging = 64 * MIB;
    RackSpec { name: name.into(), scs: vec![s], nodes }
}

/// One rack: a partitioned CPU, an SSD, an AI accelerator and a non-TEE GPU
/// behind controller 0. Two tenants.
pub fn single_rack() -> Topology {
    Topology {
        suite: Default::default(),
        vendor: Default::default(),
        racks: vec![rack(
            "r0",
            0,
            vec![
                cpu(1),
                NodeSpec::tee(2, DeviceKind::Ssd, 2, 64 * MIB, vec![FduSpec::new(1, 32 * MIB), FduSpec::new(1, 32 * MIB)]),
                NodeSpec::tee(3, DeviceKind::AiAccelerator, 4, 32 * MIB, vec![]),
                NodeSpec::non_tee(4, DeviceKind::Gpu, 16, 16 * MIB, 0),
                NodeSpec::non_tee(5, DeviceKind::Gpu, 16, 16 * MIB, 0),
            ],
        )],
        tenants: 2,
        links: Vec::new(),
    }
}

/// Two racks with one controller each and three tenants. Only the second
/// rack has GPUs with 32 MiB.
pub fn two_rack() -> Topology {
    Topology {
        suite: Default::default(),
        vendor: Default::default(),
        racks: vec![
            rack(
                "r0",
                0,
                vec![
                    cpu(1),
                    NodeSpec::tee(2, DeviceKind::AiAccelerator, 4, 32 * MIB, vec![]),
                    NodeSpec::non_tee(3, DeviceKind::Gpu, 16, 16 * MIB, 0),
                    NodeSpec::non_tee(4, DeviceKind::Gpu, 16, 16 * MIB, 0),
                ],
            ),
            rack(
                "r1",
                1,
                vec![
                    cpu(11),
                    NodeSpec::tee(12, DeviceKind::Ssd, 2, 64 * MIB, vec![FduSpec::new(1, 32 * MIB), FduSpec::new(1, 32 * MIB)]),
                    NodeSpec::non_tee(13, DeviceKind::Gpu, 16, 32 * MIB, 1),
                    NodeSpec::non_tee(14, DeviceKind::Gpu, 16, 32 * MIB, 1),
                ],
            ),
        ],
        tenants: 3,
        links: Vec::new(),
    }
}

/// A CPU unit plus the given extra resources, unsigned.
pub fn manifest(name: &str, extra: Vec<ResourceRequest>) -> Manifest {
    let mut resources = vec![ResourceRequest::new(DeviceKind::Cpu, 2, 8 * MIB).with_policies([Policy::MemIsolation])];
    resources.extend(extra);
    Manifest::new(name, "acme", "1.0", resources, vec![sample_code_digest()])
}

pub fn cpu_only(name: &str) -> Manifest {
    manifest(name, Vec::new())
}

/// CPU unit and one non-TEE GPU.
pub fn cpu_gpu(name: &str) -> Manifest {
    manifest(name, vec![ResourceRequest::new(DeviceKind::Gpu, 4, 4 * MIB).non_tee()])
}

pub fn cpu_ssd(name: &str) -> Manifest {
    manifest(name, vec![ResourceRequest::new(DeviceKind::Ssd, 1, 16 * MIB)])
}

pub fn cpu_ai(name: &str) -> Manifest {
    manifest(name, vec![ResourceRequest::new(DeviceKind::AiAccelerator, 2, 8 * MIB)])
}
