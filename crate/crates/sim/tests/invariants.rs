use std::collections::BTreeSet;

use dbrb_core::ProcessId;
use dbrb_sim::{check, run, EventKind, Property, Scenario, Trace};
use proptest::prelude::*;
use serde_json::json;

/// A random scenario inside the fault bound: `n` initial members, some silent
/// non-senders, and optionally one joiner and one correct leaver.
#[derive(Debug, Clone)]
struct Shape {
    n: u32,
    silent: u32,
    joiner_at: Option<u64>,
    leaver_at: Option<u64>,
    max_delay: u64,
    broadcast_at: u64,
}

fn shape() -> impl Strategy<Value = Shape> {
    (4u32..=7, 0u32..=2, prop::option::of(0u64..20), prop::option::of(0u64..20), 1u64..=10, 0u64..10).prop_map(
        |(n, silent, joiner_at, leaver_at, max_delay, broadcast_at)| {
            // A leaver shrinks the view by one, so it must still tolerate the silent members.
            let bound = if leaver_at.is_some() { (n - 2) / 3 } else { (n - 1) / 3 };
            Shape { n, silent: silent.min(bound), joiner_at, leaver_at, max_delay, broadcast_at }
        },
    )
}

fn scenario(s: &Shape) -> Scenario {
    let members: Vec<u32> = (1..=s.n).collect();
    let mut universe = members.clone();
    let mut script = vec![json!({"process": 1, "action": {"broadcast": "m"}, "trigger": {"at_time": s.broadcast_at}})];
    if let Some(t) = s.joiner_at {
        universe.push(s.n + 1);
        script.push(json!({"process": s.n + 1, "action": "join", "trigger": {"at_time": t}}));
    }
    if let Some(t) = s.leaver_at {
        script.push(json!({"process": 2, "action": "leave", "trigger": {"at_time": t}}));
    }
    let roles: serde_json::Map<String, serde_json::Value> =
        (0..s.silent).map(|i| ((s.n - i).to_string(), json!({"byzantine": "silent"}))).collect();
    let value = json!({
        "name": "generated",
        "universe": universe,
        "initial_members": members,
        "sender": 1,
        "roles": roles,
        "script": script,
        "network": {"max_delay_steps": s.max_delay},
    });
    Scenario::from_json(&value.to_string()).expect("generated scenario is valid")
}

/// Every message sent between correct processes is received.
fn reliable(t: &Trace, s: &Scenario) -> bool {
    let received: BTreeSet<u64> =
        t.events.iter().filter(|e| e.is(EventKind::Receive)).filter_map(|e| e.msg_id).collect();
    t.events
        .iter()
        .filter(|e| e.is(EventKind::Send) && s.is_correct(e.actor) && e.peer.is_some_and(|p| s.is_correct(p)))
        .all(|e| e.msg_id.is_some_and(|id| received.contains(&id)))
}

/// The trusted set only grows: a process never announces trust in a view twice.
fn trust_monotone(t: &Trace) -> bool {
    let mut seen = BTreeSet::new();
    t.events.iter().filter(|e| e.detail_is("trusted")).all(|e| seen.insert((e.actor, e.view.clone())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_runs_satisfy_every_property(s in shape(), seed in any::<u64>()) {
        let sc = scenario(&s);
        let trace = run(&sc, seed);
        prop_assert!(!trace.truncated());
        let report = check(&trace, &sc).unwrap();
        prop_assert!(report.regime.within_bound, "{}", report.regime);
        for p in Property::ALL {
            prop_assert!(report.status(p).is_pass(), "{p}: {:?}", report.status(p));
        }
        prop_assert!(reliable(&trace, &sc));
        prop_assert!(trust_monotone(&trace));
        let correct: BTreeSet<ProcessId> = sc.universe.iter().copied().filter(|&p| sc.is_correct(p)).collect();
        let delivered = dbrb_sim::delivered_processes(&trace);
        prop_assert!(delivered.is_subset(&correct));
    }

    #[test]
    fn runs_and_verdicts_are_deterministic(s in shape(), seed in any::<u64>()) {
        let sc = scenario(&s);
        let a = run(&sc, seed);
        let b = run(&sc, seed);
        prop_assert_eq!(a.to_jsonl(), b.to_jsonl());
        prop_assert_eq!(check(&a, &sc).unwrap(), check(&b, &sc).unwrap());
        let parsed = Trace::from_jsonl(&a.to_jsonl()).unwrap();
        prop_assert_eq!(parsed, a);
        prop_assert_eq!(Scenario::from_json(&sc.to_json()).unwrap(), sc);
    }
}
