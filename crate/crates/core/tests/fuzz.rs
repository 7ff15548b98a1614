// SPDX-License-Identifier: Apache-2.0

use std::time::Instant;

use tee_fabric::adversary::{fuzz_world, Outcome};

#[test]
fn fuzzed_worlds_never_leak() {
    let start = Instant::now();
    let reports: Vec<_> = (0..1000u64).map(fuzz_world).collect();
    let leaks: Vec<_> = reports.iter().filter(|r| r.outcome == Outcome::Leak).collect();
    let jobs: usize = reports.iter().map(|r| r.jobs).sum();
    let started: usize = reports.iter().map(|r| r.started).sum();
    let actions: usize = reports.iter().map(|r| r.actions).sum();
    println!("{} worlds, {jobs} jobs ({started} started), {actions} actions, {:?}", reports.len(), start.elapsed());
    assert!(started * 2 > jobs, "most jobs should get past provisioning");
    for l in leaks.iter().take(5) {
        println!("seed {}: {:?}", l.seed, l.findings);
    }
    assert!(leaks.is_empty(), "{} leaking worlds", leaks.len());
}
