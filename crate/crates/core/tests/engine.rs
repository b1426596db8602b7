mod common;

use opengt::costs::CostFunction;
use opengt::engine::{run, Arrival, EngineOptions, Experiment, Trace};
use opengt::scenario::{default_scenario, validate};
use opengt::topology::MaximalDigraph;
use proptest::prelude::*;

use common::{random_experiment, v, ChurnProfile};

fn default_experiment(rounds: usize) -> Experiment {
    let mut s = default_scenario();
    s.rounds = rounds;
    s.events.retain(|e| e.round <= rounds);
    validate(s).unwrap().experiment(None)
}

fn default_trace(rounds: usize) -> Trace {
    run(&default_experiment(rounds), EngineOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_stay_positive_and_ratios_exact(seed in any::<u64>()) {
        let exp = random_experiment(seed, 120, ChurnProfile { rate: 0.1 });
        let trace = run(&exp, EngineOptions::default()).unwrap();
        for r in &trace.records {
            prop_assert_eq!(r.agents.len(), r.activation.active_count());
            for a in &r.agents {
                prop_assert!(a.y > 0.0);
                prop_assert_eq!(a.z.to_bits(), (a.x / a.y).to_bits());
            }
        }
    }

    /// In a round without churn each closed cluster keeps its total weight,
    /// and its total estimate moves by exactly `-gamma` times its total
    /// tracker.
    #[test]
    fn quiet_rounds_conserve_mass(seed in any::<u64>()) {
        let exp = random_experiment(seed, 120, ChurnProfile::default());
        let trace = run(&exp, EngineOptions::default()).unwrap();
        for pair in trace.records.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            if !exp.events_at(next.round).is_empty() {
                continue;
            }
            prop_assert_eq!(&prev.partition, &next.partition);
            for members in next.partition.clusters() {
                let sum = |r: &opengt::engine::RoundRecord, f: fn(&opengt::engine::AgentRecord) -> f64| {
                    members.iter().map(|&id| f(r.agent(id).unwrap())).sum::<f64>()
                };
                let dy = sum(next, |a| a.y) - sum(prev, |a| a.y);
                prop_assert!(dy.abs() <= 1e-12, "sum y moved by {}", dy);
                let dx = sum(next, |a| a.x) - (sum(prev, |a| a.x) - exp.gamma * sum(prev, |a| a.w));
                prop_assert!(dx.abs() <= 1e-12, "sum x off by {}", dx);
            }
        }
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>()) {
        let exp = random_experiment(seed, 60, ChurnProfile { rate: 0.1 });
        let a = run(&exp, EngineOptions::default()).unwrap();
        let b = run(&exp, EngineOptions::default()).unwrap();
        prop_assert_eq!(a, b);
    }
}

/// Two agents linked both ways, worked by hand.
#[test]
fn two_agents_first_round_by_hand() {
    let graph = MaximalDigraph::new(2, [(v(1), v(2)), (v(2), v(1))], None).unwrap();
    let exp = Experiment::new(
        graph,
        0.1,
        1,
        0,
        vec![
            Arrival {
                agent: v(1),
                x_hat: 1.0,
                cost: CostFunction::quadratic(1.0, 0.0).unwrap(),
            },
            Arrival {
                agent: v(2),
                x_hat: 3.0,
                cost: CostFunction::quadratic(2.0, 1.0).unwrap(),
            },
        ],
        vec![],
    );
    let trace = run(&exp, EngineOptions::default()).unwrap();
    let r0 = &trace.records[0];
    assert_eq!(r0.agent(v(1)).unwrap().w, 1.0);
    assert_eq!(r0.agent(v(2)).unwrap().w, 4.0);

    // x = (0.9 + 2.6) / 2 for both; w1 = 1.75 + 2.5 - 1, w2 = 1.5 + 2.5 - 4
    let r1 = &trace.records[1];
    for (id, w) in [(v(1), 3.25), (v(2), 0.0)] {
        let a = r1.agent(id).unwrap();
        assert!((a.x - 1.75).abs() < 1e-15);
        assert_eq!(a.y, 1.0);
        assert!((a.w - w).abs() < 1e-15, "{id}: w = {}", a.w);
    }
}

#[test]
fn default_run_pins_error_at_round_80() {
    let trace = default_trace(80);
    let c = &trace.records[80].clusters;
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].minimizer, 4.0);
    let golden = 5.9339029059665545e-2;
    assert!(
        (c[0].error - golden).abs() <= 1e-12 * golden,
        "error {:e}",
        c[0].error
    );
}

#[test]
fn default_run_splits_when_v4_leaves() {
    let trace = default_trace(100);
    let r = &trace.records[81];
    assert!(!r.activation.is_active(v(4)));
    let t = r.transition.as_ref().unwrap();
    assert_eq!(t.detectors, [v(2), v(7)].into());
    assert!(t.flags.values().all(|&f| f));
    let distinct: std::collections::BTreeSet<usize> = r.agents.iter().map(|a| a.cluster).collect();
    assert_eq!(distinct.len(), 2);
    // one round later nobody is flagged
    assert!(trace.records[82].agents.iter().all(|a| !a.h));
}

#[test]
fn joiner_starts_from_its_initial_value() {
    let trace = default_trace(320);
    let a = trace.records[310].agent(v(4)).unwrap();
    let x_hat = a.x;
    assert_eq!(a.y, 1.0);
    assert_eq!(a.z, x_hat);
    assert_eq!(a.w, x_hat - 4.0);
    assert!(!a.h);
    assert!((1.0..=5.0).contains(&x_hat));
}

/// The random generator must actually split and merge clusters, or the
/// randomized suites would only test static networks.
#[test]
fn random_scenarios_split_and_merge() {
    let (mut splits, mut merges, mut multi) = (0, 0, 0);
    for seed in 0..100 {
        let exp = random_experiment(seed, 200, ChurnProfile::default());
        let trace = run(&exp, EngineOptions::default()).unwrap();
        for pair in trace.records.windows(2) {
            let (before, after) = (pair[0].partition.len(), pair[1].partition.len());
            if after > before {
                splits += 1;
            }
            if after < before {
                merges += 1;
            }
        }
        if trace.records.iter().any(|r| r.partition.len() > 1) {
            multi += 1;
        }
    }
    assert!(
        splits >= 20 && merges >= 20,
        "splits {splits}, merges {merges}"
    );
    assert!(multi >= 20, "only {multi} scenarios ever had two clusters");
}

/// Without the tracker reset a departure leaves the lost agent's gradient
/// in the survivors' trackers for good.
#[test]
fn reset_gate_is_what_restores_tracking() {
    let exp = default_experiment(100);
    let gated = run(&exp, EngineOptions::default()).unwrap();
    let ungated = run(&exp, EngineOptions { reset_gate: false }).unwrap();
    for r in &ungated.records[..=80] {
        assert!(r.clusters.iter().all(|c| c.lemma1_residual <= 1e-9));
    }
    let late = |t: &Trace| {
        t.records[100]
            .clusters
            .iter()
            .map(|c| c.lemma1_residual)
            .fold(0.0, f64::max)
    };
    assert!(late(&gated) <= 1e-9);
    assert!(late(&ungated) > 1e-3);
}
