use std::collections::BTreeSet;

use containment::fixtures;
use containment::flow_file::{FlowDefinition, SpecBundle};
use containment::harness::{drive, sweep, sweep_states, OracleStrategy};
use containment::impl_model::{
    event_is_compliant, impl_init, impl_inv, impl_safety, Edge, FlowGraph, ImplSystem, NodeKind,
};
use containment::lts::{enumerate_havoc_traces, reachable};
use containment::refinement::{check_soundness, default_bundle, replay_actions, Abstraction};
use containment::spec_model::{spec_safety, Guards, PrefixMode, SpecConstants, SpecSystem};
use containment::{Action, BoundaryEvent};
use proptest::prelude::*;

fn path() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("/ws/x".to_string()),
        Just("/ws".to_string()),
        Just("/wsx".to_string()),
        Just("/etc/pw".to_string()),
        "/ws/[a-z]{1,3}",
        "[a-z/]{0,6}",
    ]
}

fn tool() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("search".to_string()),
        Just("rm".to_string()),
        "[a-z]{1,6}"
    ]
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        Just(Action::NoAction),
        Just(Action::Step),
        path().prop_map(Action::ReadPath),
        tool().prop_map(Action::ToolCall),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn runs_stay_contained(script in prop::collection::vec(action(), 0..20)) {
        let c = fixtures::read_agent();
        let run = drive(&c, &OracleStrategy::Scripted(script.clone()), script.len()).unwrap();
        prop_assert!(run.trace.validate(&ImplSystem::new(c.clone())).is_ok());
        prop_assert!(run.violation(&c).is_none());
        for st in &run.trace.steps {
            prop_assert!(event_is_compliant(&c, &st.pre, st.event.event()));
            prop_assert!(impl_inv(&c, &st.post));
            prop_assert!(impl_safety(&c, &st.post));
            // a stutter leaves the state alone
            if st.event.is_stutter() {
                prop_assert_eq!(&st.pre, &st.post);
            }
        }
        let stutters = run.trace.steps.iter()
            .filter(|s| s.event.is_stutter() && s.action != Action::NoAction)
            .count();
        prop_assert_eq!(run.rejected_count, stutters);
        prop_assert_eq!(run.emitted_events.len() + stutters + script.iter().filter(|a| **a == Action::NoAction).count(), script.len());
    }

    #[test]
    fn every_run_lifts_to_a_sound_spec_run(script in prop::collection::vec(action(), 0..16)) {
        let c = fixtures::read_agent();
        let trace = replay_actions(&c, &script);
        let v = check_soundness(&c, &Guards::default(), &default_bundle(), &trace);
        prop_assert!(v.passed(), "{:?}", v);
        let b = default_bundle();
        for s in trace.states(&impl_init(&c)) {
            prop_assert!(spec_safety(&c.spec, &b.variables(&s)));
        }
    }

    #[test]
    fn spec_sequences_grow_by_at_most_one(script in prop::collection::vec(action(), 0..16)) {
        let c = SpecConstants::new("/ws", ["search"], 6).unwrap();
        let sys = SpecSystem::new(c);
        let mut s = containment::spec_model::spec_init(&sys.constants);
        for a in &script {
            let succ = sys.next(&s, a);
            prop_assert!(succ.iter().any(|(e, t)| *e == BoundaryEvent::NoEffect && t == &s));
            let (_, t) = succ[0].clone();
            prop_assert!(t.read_paths.starts_with(&s.read_paths));
            prop_assert!(t.tool_calls.starts_with(&s.tool_calls));
            prop_assert!(t.read_paths.len() + t.tool_calls.len() <= s.read_paths.len() + s.tool_calls.len() + 1);
            prop_assert!(spec_safety(&sys.constants, &t));
            s = t;
        }
    }

    #[test]
    fn random_runs_visit_only_swept_states(seed in any::<u64>(), adversarial in any::<bool>()) {
        let c = fixtures::read_agent();
        let alpha = fixtures::default_alphabet();
        let depth = 3;
        let swept = sweep_states(&c, &alpha, depth);
        let strategy = if adversarial {
            OracleStrategy::adversarial(seed, alpha.clone())
        } else {
            OracleStrategy::SeededRandom { seed, alphabet: alpha.clone() }
        };
        let run = drive(&c, &strategy, depth).unwrap();
        for s in run.trace.states(&impl_init(&c)) {
            prop_assert!(swept.contains(&s));
        }
    }

    #[test]
    fn seeded_runs_are_reproducible(seed in any::<u64>()) {
        let c = fixtures::read_agent();
        let s = OracleStrategy::SeededRandom { seed, alphabet: fixtures::default_alphabet() };
        prop_assert_eq!(drive(&c, &s, 10).unwrap(), drive(&c, &s, 10).unwrap());
    }

    #[test]
    fn flow_files_round_trip(
        max_steps in 0u32..10,
        tools in prop::collection::btree_set("[a-z:]{1,8}", 0..4),
        root in "/[a-z]{1,4}",
        bare in any::<bool>(),
        kinds in prop::collection::vec(prop_oneof![
            Just(NodeKind::Read), Just(NodeKind::Tool), Just(NodeKind::Step)
        ], 1..5),
        alphabet in prop::collection::vec(action(), 1..6),
        erase_reads in any::<bool>(),
    ) {
        let mut constants = SpecConstants::new(root, tools, max_steps).unwrap();
        if bare {
            constants = constants.with_prefix_mode(PrefixMode::Bare);
        }
        let n = kinds.len();
        let label = |k: NodeKind| match k {
            NodeKind::Read => "read",
            NodeKind::Tool => "tool",
            _ => "step",
        };
        let graph = FlowGraph::new(
            "n0",
            kinds.iter().enumerate().map(|(i, k)| (format!("n{i}").as_str().into(), *k)),
            kinds.iter().enumerate().map(|(i, k)| Edge {
                from: format!("n{i}").as_str().into(),
                label: label(*k).into(),
                to: format!("n{}", (i + 1) % n).as_str().into(),
            }),
        ).unwrap();
        let mut bundle = SpecBundle::default();
        if erase_reads {
            bundle.abstraction.erase.insert(containment::spec_model::SequenceField::ReadPaths);
        }
        let def = FlowDefinition {
            provenance: "generated".into(),
            alphabet,
            constants,
            graph,
            bundle,
        };
        let text = def.to_toml();
        prop_assert_eq!(FlowDefinition::from_toml(&text).unwrap(), def.clone());
        // serialization is a function of the value
        prop_assert_eq!(FlowDefinition::from_toml(&text).unwrap().to_toml(), text);
    }
}

#[test]
fn havoc_enumeration_is_exhaustive_for_the_deterministic_loop() {
    let c = fixtures::read_agent();
    let sys = ImplSystem::new(c.clone());
    let alpha = fixtures::default_alphabet();
    for depth in 0..=3 {
        let traces: Vec<_> = enumerate_havoc_traces(&sys, &alpha, depth)
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(traces.len(), alpha.len().pow(depth as u32));
        let distinct: BTreeSet<Vec<Action>> = traces
            .iter()
            .map(|t| t.actions().cloned().collect())
            .collect();
        assert_eq!(distinct.len(), traces.len());
        for t in &traces {
            assert_eq!(t.len(), depth);
            assert!(t.validate(&sys).is_ok());
        }
    }
}

#[test]
fn sweep_states_match_reachability() {
    let c = fixtures::read_agent();
    let alpha = fixtures::default_alphabet();
    let swept = sweep_states(&c, &alpha, 3);
    let reach = reachable(&ImplSystem::new(c.clone()), &alpha, 3).unwrap();
    assert_eq!(swept.len(), reach.len());
    assert!(reach.states().iter().all(|s| swept.contains(s)));
    assert_eq!(sweep(&c, &alpha, 3).states_visited, reach.len());
}
