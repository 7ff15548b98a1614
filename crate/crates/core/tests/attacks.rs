// SPDX-License-Identifier: Apache-2.0

use tee_fabric::adversary::{run_attack, AttackKind};

#[test]
fn every_attack_meets_its_expected_outcome() {
    let mut bad = Vec::new();
    for k in AttackKind::ALL {
        let (r, _) = run_attack(k, &k.default_topology(), 1).unwrap_or_else(|e| panic!("{k}: {e}"));
        println!("{k}: {} (expected {}) in {:?}", r.outcome, r.expected, r.elapsed);
        for n in &r.notes {
            println!("    {n}");
        }
        for f in &r.findings {
            println!("    FINDING {f}");
        }
        if !r.matches() {
            bad.push(k);
        }
    }
    assert!(bad.is_empty(), "{bad:?}");
}
