//! Small fixture builders shared by unit, integration, and acceptance tests.

use crate::graph::{
    Annotation, Edge, InitialMass, SessionLog, StepDef, StepId, TransitionGraph,
};

fn step(id: u32, name: &str, mean: f64, std: f64) -> StepDef {
    StepDef {
        id: StepId(id),
        name: name.to_string(),
        mean_duration_s: mean,
        std_duration_s: std,
        f1: None,
    }
}

/// Linear chain s1 -> s2 -> ... with the given mean durations and zero std.
pub fn linear_graph(durations: &[f64]) -> TransitionGraph {
    linear_graph_std(durations, &vec![0.0; durations.len()])
}

/// Linear chain with explicit per-step duration standard deviations.
pub fn linear_graph_std(means: &[f64], stds: &[f64]) -> TransitionGraph {
    assert_eq!(means.len(), stds.len());
    let n = means.len() as u32;
    let steps = means
        .iter()
        .zip(stds)
        .enumerate()
        .map(|(i, (m, s))| step(i as u32 + 1, &format!("s{}", i + 1), *m, *s))
        .collect();
    let edges = (1..n)
        .map(|i| Edge { from: StepId(i), to: StepId(i + 1), prob: 1.0 })
        .collect();
    TransitionGraph {
        steps,
        edges,
        initial: vec![InitialMass { step: StepId(1), prob: 1.0 }],
        terminals: vec![StepId(n)],
    }
    .canonicalized()
}

/// Even fork: s1 -> {s2 | s3} -> s4, where the two branch steps take
/// `a_total` and `b_total` seconds.
pub fn fork_graph(a_total: f64, b_total: f64) -> TransitionGraph {
    TransitionGraph {
        steps: vec![
            step(1, "start", 5.0, 0.0),
            step(2, "branch a", a_total, 0.0),
            step(3, "branch b", b_total, 0.0),
            step(4, "finish", 5.0, 0.0),
        ],
        edges: vec![
            Edge { from: StepId(1), to: StepId(2), prob: 0.5 },
            Edge { from: StepId(1), to: StepId(3), prob: 0.5 },
            Edge { from: StepId(2), to: StepId(4), prob: 1.0 },
            Edge { from: StepId(3), to: StepId(4), prob: 1.0 },
        ],
        initial: vec![InitialMass { step: StepId(1), prob: 1.0 }],
        terminals: vec![StepId(4)],
    }
    .canonicalized()
}

/// Acyclic seven-step graph with three forks; raw path mass from s1 to s7
/// sums to one. Used wherever a moderately branchy task is needed.
pub fn cooking_like_graph() -> TransitionGraph {
    TransitionGraph {
        steps: vec![
            step(1, "prepare", 10.0, 1.0),
            step(2, "heat pan", 30.0, 3.0),
            step(3, "cook main", 60.0, 5.0),
            step(4, "add water", 12.0, 1.5),
            step(5, "plate", 15.0, 2.0),
            step(6, "season", 8.0, 1.0),
            step(7, "clean up", 20.0, 2.0),
        ],
        edges: vec![
            Edge { from: StepId(1), to: StepId(2), prob: 0.55 },
            Edge { from: StepId(1), to: StepId(3), prob: 0.45 },
            Edge { from: StepId(2), to: StepId(4), prob: 1.0 },
            Edge { from: StepId(3), to: StepId(4), prob: 0.35 },
            Edge { from: StepId(3), to: StepId(5), prob: 0.65 },
            Edge { from: StepId(4), to: StepId(5), prob: 0.8 },
            Edge { from: StepId(4), to: StepId(6), prob: 0.2 },
            Edge { from: StepId(5), to: StepId(6), prob: 1.0 },
            Edge { from: StepId(6), to: StepId(7), prob: 1.0 },
        ],
        initial: vec![InitialMass { step: StepId(1), prob: 1.0 }],
        terminals: vec![StepId(7)],
    }
    .canonicalized()
}

/// Graph with a two-step cycle (s2 <-> s3): revisits are possible, so
/// trajectory enumeration must fall back to simple paths.
pub fn loopy_graph() -> TransitionGraph {
    TransitionGraph {
        steps: vec![
            step(1, "start", 10.0, 1.0),
            step(2, "stir", 20.0, 2.0),
            step(3, "taste", 15.0, 2.0),
            step(4, "serve", 10.0, 1.0),
        ],
        edges: vec![
            Edge { from: StepId(1), to: StepId(2), prob: 1.0 },
            Edge { from: StepId(2), to: StepId(3), prob: 0.7 },
            Edge { from: StepId(2), to: StepId(4), prob: 0.3 },
            Edge { from: StepId(3), to: StepId(2), prob: 0.6 },
            Edge { from: StepId(3), to: StepId(4), prob: 0.4 },
        ],
        initial: vec![InitialMass { step: StepId(1), prob: 1.0 }],
        terminals: vec![StepId(4)],
    }
    .canonicalized()
}

/// Session running the listed (step, duration) spans back to back from t=0.
pub fn linear_session(id: &str, spans: &[(u32, f64)]) -> SessionLog {
    let mut t = 0.0;
    let mut annotations = Vec::new();
    for (step, dur) in spans {
        annotations.push(Annotation { step: StepId(*step), start_s: t, end_s: t + dur });
        t += dur;
    }
    SessionLog { session: id.to_string(), annotations, skipped: vec![] }
}
