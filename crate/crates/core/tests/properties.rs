//! Property tests over randomly generated task graphs and sessions.

use proptest::prelude::*;

use stepwatch::graph::{
    build_graph, enumerate_trajectories, validate_graph, Edge, GraphBuildConfig, InitialMass,
    SessionLog, StepDef, StepId, TransitionGraph,
};
use stepwatch::io::{load_graph, save_graph};
use stepwatch::policy::{step_policy, InterventionKind, InterventionSpec, PolicyConfig, PolicyState};
use stepwatch::simulator::{simulate_batch, Scenario};
use stepwatch::tracker::{init_belief, FrameObservation, Tracker, TrackerConfig};

/// Layered task graph: a chain with optional skip-ahead forks, always
/// ending in a single terminal. Small enough for exhaustive enumeration.
fn arb_task_graph() -> impl Strategy<Value = TransitionGraph> {
    (3usize..=7, proptest::collection::vec((5.0f64..40.0, 0.0f64..0.25, 0.2f64..0.8), 7))
        .prop_map(|(n, params)| {
            let steps: Vec<StepDef> = (0..n)
                .map(|i| {
                    let (mean, rel_std, _) = params[i];
                    StepDef {
                        id: StepId(i as u32 + 1),
                        name: format!("s{}", i + 1),
                        mean_duration_s: mean,
                        std_duration_s: mean * rel_std,
                        f1: None,
                    }
                })
                .collect();
            let mut edges = Vec::new();
            for (i, (_, _, fork_p)) in params.iter().take(n - 1).copied().enumerate() {
                let from = StepId(i as u32 + 1);
                if i + 2 < n {
                    edges.push(Edge { from, to: StepId(i as u32 + 2), prob: fork_p });
                    edges.push(Edge { from, to: StepId(i as u32 + 3), prob: 1.0 - fork_p });
                } else {
                    edges.push(Edge { from, to: StepId(i as u32 + 2), prob: 1.0 });
                }
            }
            TransitionGraph {
                steps,
                edges,
                initial: vec![InitialMass { step: StepId(1), prob: 1.0 }],
                terminals: vec![StepId(n as u32)],
            }
            .canonicalized()
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    /// Graphs built from simulated demonstration sets always validate, and
    /// their canonical serialization round-trips byte for byte.
    #[test]
    fn built_graphs_validate_and_round_trip(graph in arb_task_graph(), seed in 0u64..1000, count in 3u64..10) {
        let scenario = Scenario::noiseless(graph, seed);
        let sims = simulate_batch(&scenario, count).unwrap();
        let logs: Vec<SessionLog> = sims.into_iter().map(|s| s.log).collect();
        let built = build_graph(&logs, &GraphBuildConfig::default()).unwrap();
        let violations = validate_graph(&built);
        prop_assert!(violations.is_empty(), "{violations:?}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        save_graph(&path, &built).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_graph(&path).unwrap();
        save_graph(&path, &loaded).unwrap();
        let second = std::fs::read(&path).unwrap();
        prop_assert_eq!(first, second);
    }

    /// Trajectory probabilities only depend on graph structure, not on the
    /// numeric step labels.
    #[test]
    fn trajectories_are_invariant_under_relabeling(graph in arb_task_graph(), offset in 1u32..90) {
        let n = graph.steps.len() as u32;
        let target = StepId(n);
        let original = enumerate_trajectories(&graph, StepId(1), target, usize::MAX).unwrap();

        let relabel = |s: StepId| StepId(200 + offset * (n + 1 - s.0));
        let relabeled = TransitionGraph {
            steps: graph
                .steps
                .iter()
                .map(|s| StepDef { id: relabel(s.id), ..s.clone() })
                .collect(),
            edges: graph
                .edges
                .iter()
                .map(|e| Edge { from: relabel(e.from), to: relabel(e.to), prob: e.prob })
                .collect(),
            initial: graph
                .initial
                .iter()
                .map(|m| InitialMass { step: relabel(m.step), prob: m.prob })
                .collect(),
            terminals: graph.terminals.iter().map(|t| relabel(*t)).collect(),
        }
        .canonicalized();
        let mapped = enumerate_trajectories(&relabeled, relabel(StepId(1)), relabel(target), usize::MAX).unwrap();

        prop_assert_eq!(original.trajectories.len(), mapped.trajectories.len());
        let mut p1: Vec<f64> = original.trajectories.iter().map(|t| t.prob).collect();
        let mut p2: Vec<f64> = mapped.trajectories.iter().map(|t| t.prob).collect();
        p1.sort_by(f64::total_cmp);
        p2.sort_by(f64::total_cmp);
        for (a, b) in p1.iter().zip(&p2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// The posterior stays a probability distribution for arbitrary valid
    /// observation streams.
    #[test]
    fn posterior_remains_normalized(
        graph in arb_task_graph(),
        raw in proptest::collection::vec(proptest::collection::vec(1e-6f64..1.0, 7), 1..120),
    ) {
        let n = graph.n_steps();
        let tracker = Tracker::new(&graph, TrackerConfig::default()).unwrap();
        let mut belief = init_belief(&graph);
        for (k, row) in raw.iter().enumerate() {
            let mut probs: Vec<f64> = row.iter().take(n).copied().collect();
            while probs.len() < n {
                probs.push(1e-6);
            }
            let sum: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= sum;
            }
            let obs = FrameObservation { t: (k as f64 + 1.0) * 0.2, probs, has_background: false };
            belief = tracker.update(&belief, &obs).unwrap();
            let total: f64 = belief.posterior.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(belief.posterior.iter().all(|p| *p >= 0.0));
            for e in &belief.elapsed_in_step {
                prop_assert!(*e >= 0.0 && *e <= belief.t + 1e-9);
            }
        }
    }

    /// Policy invariants over arbitrary tick series: the deadline never
    /// precedes its arming, at most one event fires, and the whole run is a
    /// deterministic function of the inputs.
    #[test]
    fn policy_fsm_invariants(
        series in proptest::collection::vec((0.0f64..200.0, 0.0f64..5.0, proptest::bool::weighted(0.15)), 5..150),
        kind_notify in proptest::bool::ANY,
        h in 0.5f64..4.5,
        k in 0.0f64..30.0,
    ) {
        let spec = InterventionSpec {
            target: StepId(3),
            kind: if kind_notify { InterventionKind::NotifyIfForgotten } else { InterventionKind::RemindInAdvance },
            k_minus: k,
            k_plus: k,
            h,
        };
        let cfg = PolicyConfig { tick_s: 1.0, ..Default::default() };
        let drive = || {
            let mut state = PolicyState::new();
            let mut events = Vec::new();
            let mut detected = false;
            for (i, (e, hh, det)) in series.iter().enumerate() {
                detected |= *det;
                let (next, ev) = step_policy(
                    state,
                    (i + 1) as f64,
                    *e,
                    *hh,
                    detected,
                    &spec,
                    "step",
                    &cfg,
                )
                .unwrap();
                state = next;
                events.extend(ev);
            }
            (state, events)
        };
        let (state_a, events_a) = drive();
        let (state_b, events_b) = drive();
        prop_assert_eq!(&events_a, &events_b);
        prop_assert_eq!(&state_a.armings, &state_b.armings);
        prop_assert!(events_a.len() <= 1);
        for arming in &state_a.armings {
            prop_assert!(arming.fires_at >= arming.armed_at);
        }
        // A fired notification implies detection was never true up to then.
        if spec.kind == InterventionKind::NotifyIfForgotten {
            if let Some(ev) = events_a.first() {
                let fired_tick = ev.t as usize - 1;
                prop_assert!(series[..=fired_tick.min(series.len() - 1)]
                    .iter()
                    .all(|(_, _, det)| !det));
            }
        }
    }
}
