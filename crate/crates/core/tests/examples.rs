// SPDX-License-Identifier: Apache-2.0

//! The files under docs/examples stay in step with the built-in samples.

use std::fs;
use std::path::{Path, PathBuf};

use tee_fabric::crypto::SigningKeyPair;
use tee_fabric::manifest::{parse_manifest, verify_manifest, Manifest};
use tee_fabric::samples;
use tee_fabric::scenario::Scenario;
use tee_fabric::topology::Topology;

fn examples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/examples")
}

fn topology(name: &str) -> Topology {
    Topology::parse(&fs::read_to_string(examples().join("topologies").join(name)).unwrap()).unwrap()
}

fn manifest(name: &str) -> Manifest {
    parse_manifest(&fs::read(examples().join("manifests").join(name)).unwrap()).unwrap()
}

#[test]
fn topologies_match_samples() {
    for (file, sample) in [("single-rack.json", samples::single_rack()), ("two-rack.json", samples::two_rack())] {
        let t = topology(file);
        assert_eq!(t.racks, sample.racks, "{file}");
        assert_eq!(t.tenants, sample.tenants, "{file}");
        assert_eq!(t.vendor, sample.vendor, "{file}");
    }
}

#[test]
fn manifests_match_samples() {
    assert_eq!(manifest("cpu-gpu.json").manifest_id, samples::cpu_gpu("inference-frontend").manifest_id);
    assert_eq!(manifest("cpu-ssd.json").manifest_id, samples::cpu_ssd("storage").manifest_id);
    assert_eq!(manifest("cpu-ai.json").manifest_id, samples::cpu_ai("training").manifest_id);
}

#[test]
fn signed_manifest_verifies_under_test_key() {
    let key = SigningKeyPair::from_seed([0x2a; 32]).public();
    let signed = manifest("enclave1.signed.json");
    assert!(verify_manifest(&signed, &key));
    let unsigned = manifest("enclave1.json");
    assert_eq!(unsigned.manifest_id, signed.manifest_id);
    assert!(!verify_manifest(&unsigned, &key));
}

#[test]
fn every_scenario_resolves() {
    let mut n = 0;
    for entry in fs::read_dir(examples().join("scenarios")).unwrap() {
        let p = entry.unwrap().path();
        Scenario::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert_eq!(n, 15);
}
