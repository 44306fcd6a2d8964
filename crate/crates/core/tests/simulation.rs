//! End-to-end properties of the simulator on small runs.

use ktsim::metrics::trials_csv;
use ktsim::predict::ktca_bound;
use ktsim::scenario::{Overrides, Scenario};
use ktsim::simnet::engine;

fn scenario(name: &str, trials: u64) -> Scenario {
    let mut sc = Scenario::resolve(name).unwrap();
    sc.apply(Overrides {
        trials: Some(trials),
        ..Overrides::default()
    })
    .unwrap();
    sc
}

#[test]
fn same_seed_same_bytes() {
    for name in ["ktca_ring10", "akm_c1_m10", "ktaca_n50", "prevention_oob"] {
        let sc = scenario(name, 8);
        let (a, ra) = engine::run(&sc).unwrap();
        let (b, rb) = engine::run(&sc).unwrap();
        assert_eq!(a.to_json(), b.to_json(), "{name}");
        assert_eq!(trials_csv(&ra), trials_csv(&rb), "{name}");
    }
}

#[test]
fn different_seed_different_run() {
    let mut sc = scenario("ktca_ring10", 4);
    let (_, a) = engine::run(&sc).unwrap();
    sc.seed += 1;
    let (_, b) = engine::run(&sc).unwrap();
    assert_ne!(a, b);
}

#[test]
fn ring_latency_within_closed_form_bound() {
    let sc = scenario("ktca_ring10", 40);
    let (m, recs) = engine::run(&sc).unwrap();
    let bound = ktca_bound(5, sc.clock.delta);
    for r in &recs {
        assert_eq!(r.within_bound, Some(true), "trial {}", r.trial);
        assert_eq!(r.bound_ms, Some(bound));
        assert!(r.max_pom_latency_ms.unwrap() <= bound);
    }
    assert!(m.predictions_met());
}

#[test]
fn honest_short_runs_have_no_hard_detections() {
    for name in ["honest_1000e", "honest_1000e_akm", "honest_1000e_ktaca"] {
        let mut sc = Scenario::resolve(name).unwrap();
        sc.apply(Overrides {
            epochs: Some(60),
            ..Overrides::default()
        })
        .unwrap();
        let (m, recs) = engine::run(&sc).unwrap();
        assert_eq!(m.core_false_positives, 0, "{name}: {:?}", recs[0].false_positives);
        assert!(recs[0].online_client_epochs < 200 * 60, "churn took clients offline");
    }
}

#[test]
fn short_lived_and_partition_outcomes() {
    for name in ["short_lived_ktca", "short_lived_akm", "short_lived_ktaca"] {
        let (_, recs) = engine::run(&scenario(name, 20)).unwrap();
        assert!(recs.iter().all(|r| r.short_lived_ok == Some(true)), "{name}");
    }
    let (_, recs) = engine::run(&scenario("partition_ring10_cross", 20)).unwrap();
    for r in &recs {
        assert_eq!(r.pom_before_new_edge, Some(false));
        assert_eq!(r.pom_after_new_edge, Some(true));
    }
}

#[test]
fn simulated_exchange_matches_closed_form() {
    let sc = Scenario::resolve("accounting_reference").unwrap();
    let (m, _) = engine::run(&sc).unwrap();
    let per_contact = sc.accounting.str_wire_bytes as f64;
    assert_eq!(m.bytes_per_client_epoch["str_exchange"], 100.0 * per_contact);
}
