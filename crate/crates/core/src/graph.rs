//! Step-transition graph: construction from annotated demonstration sessions,
//! validation, and simple-path trajectory enumeration.
//!
//! The graph couples per-step duration statistics (sample mean / sample std)
//! with empirical transition probabilities, an initial distribution, and a
//! terminal set. All downstream modules (tracker, forecaster, policy,
//! simulator) consume it read-only.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability-sum tolerance used by validation.
pub const PROB_TOL: f64 = 1e-9;

/// Identifier of one atomic step of a procedure.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct StepId(pub u32);

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl From<u32> for StepId {
    fn from(v: u32) -> Self {
        StepId(v)
    }
}

/// One step of the procedure with its duration statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDef {
    pub id: StepId,
    pub name: String,
    pub mean_duration_s: f64,
    pub std_duration_s: f64,
    /// Frame-level detectability of the step (F1 of the raw classifier),
    /// used to suggest intervention types. Not required for tracking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

/// Directed transition with its empirical probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: StepId,
    pub to: StepId,
    pub prob: f64,
}

/// One entry of the initial step distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialMass {
    pub step: StepId,
    pub prob: f64,
}

/// The step-transition graph built from demonstration sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionGraph {
    pub steps: Vec<StepDef>,
    pub edges: Vec<Edge>,
    pub initial: Vec<InitialMass>,
    pub terminals: Vec<StepId>,
}

/// One annotated step span inside a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub step: StepId,
    pub start_s: f64,
    pub end_s: f64,
}

/// A demonstration (or simulated) session: ordered step annotations plus the
/// ground-truth list of intentionally skipped steps, when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session: String,
    pub annotations: Vec<Annotation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<StepId>,
}

impl SessionLog {
    /// End of the last annotation, or 0 for an empty log.
    pub fn end_s(&self) -> f64 {
        self.annotations.last().map(|a| a.end_s).unwrap_or(0.0)
    }

    /// Start time of the given step, if it was performed.
    pub fn start_of(&self, step: StepId) -> Option<f64> {
        self.annotations.iter().find(|a| a.step == step).map(|a| a.start_s)
    }

    /// Basic well-formedness: ordered, non-overlapping, positive spans, and
    /// skipped steps absent from the annotations.
    pub fn check(&self) -> Result<()> {
        let mut cursor = f64::NEG_INFINITY;
        for a in &self.annotations {
            if a.end_s <= a.start_s {
                return Err(Error::MalformedSession {
                    session: self.session.clone(),
                    reason: format!("annotation for {} has end {} <= start {}", a.step, a.end_s, a.start_s),
                });
            }
            if a.start_s < cursor - 1e-9 {
                return Err(Error::MalformedSession {
                    session: self.session.clone(),
                    reason: format!("annotation for {} overlaps the previous span", a.step),
                });
            }
            cursor = a.end_s;
        }
        for s in &self.skipped {
            if self.annotations.iter().any(|a| a.step == *s) {
                return Err(Error::MalformedSession {
                    session: self.session.clone(),
                    reason: format!("step {s} is both annotated and listed as skipped"),
                });
            }
        }
        Ok(())
    }
}

/// Options for [`build_graph`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphBuildConfig {
    /// Laplace smoothing added to every (from, to) transition count.
    pub laplace_alpha: f64,
    /// Edges observed fewer than this many times are pruned before
    /// normalization.
    pub min_edge_count: u32,
    /// Optional human-readable names per step id; defaults to `s<id>`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub names: BTreeMap<u32, String>,
    /// Optional frame-level detectability per step id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub f1: BTreeMap<u32, f64>,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        Self { laplace_alpha: 0.0, min_edge_count: 1, names: BTreeMap::new(), f1: BTreeMap::new() }
    }
}

/// Build the transition graph from annotated sessions.
///
/// Durations are per-step sample statistics over all annotation spans, edge
/// probabilities are empirical successor frequencies, the initial
/// distribution is the first-step frequency, and terminals are the steps
/// observed last in at least one session. Terminals keep no outgoing edges.
pub fn build_graph(sessions: &[SessionLog], cfg: &GraphBuildConfig) -> Result<TransitionGraph> {
    if sessions.is_empty() {
        return Err(Error::EmptySessionSet);
    }
    for s in sessions {
        if s.annotations.is_empty() {
            return Err(Error::SessionWithoutAnnotations(s.session.clone()));
        }
        s.check()?;
    }

    let mut ids: BTreeSet<StepId> = BTreeSet::new();
    for s in sessions {
        ids.extend(s.annotations.iter().map(|a| a.step));
        ids.extend(s.skipped.iter().copied());
    }
    // A declared name map fixes the step universe; annotations outside it
    // mean the sessions disagree about what the steps are.
    if !cfg.names.is_empty() {
        for id in &ids {
            if !cfg.names.contains_key(&id.0) {
                return Err(Error::InvalidGraph(format!(
                    "step {id} appears in sessions but not in the declared step names"
                )));
            }
        }
        ids.extend(cfg.names.keys().map(|k| StepId(*k)));
    }

    let mut spans: BTreeMap<StepId, Vec<f64>> = BTreeMap::new();
    let mut transitions: BTreeMap<(StepId, StepId), u32> = BTreeMap::new();
    let mut firsts: BTreeMap<StepId, u32> = BTreeMap::new();
    let mut lasts: BTreeSet<StepId> = BTreeSet::new();

    for s in sessions {
        let ann = &s.annotations;
        *firsts.entry(ann[0].step).or_insert(0) += 1;
        lasts.insert(ann[ann.len() - 1].step);
        for a in ann {
            spans.entry(a.step).or_default().push(a.end_s - a.start_s);
        }
        for pair in ann.windows(2) {
            *transitions.entry((pair[0].step, pair[1].step)).or_insert(0) += 1;
        }
    }

    let steps: Vec<StepDef> = ids
        .iter()
        .map(|id| {
            let default_name = format!("{id}");
            let name = cfg.names.get(&id.0).cloned().unwrap_or(default_name);
            let (mean, std) = match spans.get(id) {
                Some(v) if !v.is_empty() => (sample_mean(v), sample_std(v)),
                // Steps known only from skip lists or the name map carry no
                // duration evidence; give them a one-frame placeholder.
                _ => (0.2, 0.0),
            };
            StepDef {
                id: *id,
                name,
                mean_duration_s: mean,
                std_duration_s: std,
                f1: cfg.f1.get(&id.0).copied(),
            }
        })
        .collect();

    // Terminal = ends at least one session and is never followed by anything.
    // A step that ends one session but continues in another keeps its
    // outgoing evidence (the short session just stopped early).
    let followed: BTreeSet<StepId> = transitions.keys().map(|(from, _)| *from).collect();
    let terminals: BTreeSet<StepId> =
        lasts.iter().copied().filter(|s| !followed.contains(s)).collect();

    let mut edges = Vec::new();
    let sources: BTreeSet<StepId> = transitions.keys().map(|(from, _)| *from).collect();
    for from in sources {
        let outs: Vec<(StepId, u32)> = transitions
            .iter()
            .filter(|((f, _), c)| *f == from && **c >= cfg.min_edge_count)
            .map(|((_, t), c)| (*t, *c))
            .collect();
        if outs.is_empty() {
            continue;
        }
        let alpha = cfg.laplace_alpha.max(0.0);
        let total: f64 = outs.iter().map(|(_, c)| f64::from(*c)).sum::<f64>() + alpha * outs.len() as f64;
        for (to, c) in outs {
            edges.push(Edge { from, to, prob: (f64::from(c) + alpha) / total });
        }
    }

    let n_sessions: f64 = sessions.len() as f64;
    let initial: Vec<InitialMass> = firsts
        .iter()
        .map(|(step, c)| InitialMass { step: *step, prob: f64::from(*c) / n_sessions })
        .collect();

    let graph = TransitionGraph {
        steps,
        edges,
        initial,
        terminals: terminals.into_iter().collect(),
    };
    Ok(graph.canonicalized())
}

fn sample_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = sample_mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl TransitionGraph {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Position of a step in the canonical (id-sorted) step list.
    pub fn index_of(&self, id: StepId) -> Option<usize> {
        self.steps.binary_search_by_key(&id, |s| s.id).ok()
    }

    pub fn step(&self, id: StepId) -> Option<&StepDef> {
        self.index_of(id).map(|i| &self.steps[i])
    }

    pub fn is_terminal(&self, id: StepId) -> bool {
        self.terminals.binary_search(&id).is_ok()
    }

    pub fn out_edges(&self, from: StepId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == from)
    }

    /// Adjacency list in canonical order, indexed like `steps`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.steps.len()];
        for e in &self.edges {
            if let (Some(f), Some(t)) = (self.index_of(e.from), self.index_of(e.to)) {
                adj[f].push((t, e.prob));
            }
        }
        for row in &mut adj {
            row.sort_by_key(|(t, _)| *t);
        }
        adj
    }

    /// Steps from which `target` can be reached (including `target` itself).
    pub fn can_reach(&self, target: StepId) -> Vec<bool> {
        let n = self.steps.len();
        let mut reach = vec![false; n];
        let Some(t) = self.index_of(target) else { return reach };
        // Reverse BFS from the target.
        let mut radj = vec![Vec::new(); n];
        for e in &self.edges {
            if let (Some(f), Some(to)) = (self.index_of(e.from), self.index_of(e.to)) {
                radj[to].push(f);
            }
        }
        let mut queue = VecDeque::from([t]);
        reach[t] = true;
        while let Some(i) = queue.pop_front() {
            for &p in &radj[i] {
                if !reach[p] {
                    reach[p] = true;
                    queue.push_back(p);
                }
            }
        }
        reach
    }

    /// Sort all collections into the canonical order used by the file format.
    pub fn canonicalized(mut self) -> Self {
        self.steps.sort_by_key(|s| s.id);
        self.edges.sort_by_key(|e| (e.from, e.to));
        self.initial.sort_by_key(|m| m.step);
        self.terminals.sort();
        self
    }
}

/// A broken graph invariant. Violations are data: validation never fails.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    DuplicateStep(StepId),
    NonPositiveMeanDuration(StepId),
    NegativeStdDuration(StepId),
    DetectabilityOutOfRange(StepId),
    EdgeEndpointMissing { from: StepId, to: StepId },
    EdgeProbOutOfRange { from: StepId, to: StepId, prob: f64 },
    DuplicateEdge { from: StepId, to: StepId },
    OutgoingSumMismatch { step: StepId, sum: f64 },
    TerminalWithOutgoingEdges(StepId),
    InitialStepMissing(StepId),
    InitialSumMismatch { sum: f64 },
    TerminalMissing(StepId),
    NoTerminals,
    UnreachableStep(StepId),
    NoTerminalReachable(StepId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DuplicateStep(s) => write!(f, "step {s} is declared more than once"),
            NonPositiveMeanDuration(s) => write!(f, "step {s} has non-positive mean duration"),
            NegativeStdDuration(s) => write!(f, "step {s} has negative duration std"),
            DetectabilityOutOfRange(s) => write!(f, "step {s} has detectability f1 outside [0, 1]"),
            EdgeEndpointMissing { from, to } => write!(f, "edge {from}->{to} references a missing step"),
            EdgeProbOutOfRange { from, to, prob } => {
                write!(f, "edge {from}->{to} has probability {prob} outside (0, 1]")
            }
            DuplicateEdge { from, to } => write!(f, "edge {from}->{to} is declared more than once"),
            OutgoingSumMismatch { step, sum } => {
                write!(f, "outgoing probabilities of {step} sum to {sum}, expected 1")
            }
            TerminalWithOutgoingEdges(s) => write!(f, "terminal step {s} has outgoing edges"),
            InitialStepMissing(s) => write!(f, "initial distribution references missing step {s}"),
            InitialSumMismatch { sum } => write!(f, "initial distribution sums to {sum}, expected 1"),
            TerminalMissing(s) => write!(f, "terminal list references missing step {s}"),
            NoTerminals => write!(f, "graph has no terminal step"),
            UnreachableStep(s) => write!(f, "step {s} is unreachable from the initial distribution"),
            NoTerminalReachable(s) => write!(f, "no terminal step is reachable from {s}"),
        }
    }
}

/// Check every graph invariant; an empty vector means the graph is well formed.
pub fn validate_graph(graph: &TransitionGraph) -> Vec<Violation> {
    let mut v = Vec::new();

    let mut seen = BTreeSet::new();
    for s in &graph.steps {
        if !seen.insert(s.id) {
            v.push(Violation::DuplicateStep(s.id));
        }
        if !(s.mean_duration_s > 0.0) {
            v.push(Violation::NonPositiveMeanDuration(s.id));
        }
        if s.std_duration_s < 0.0 {
            v.push(Violation::NegativeStdDuration(s.id));
        }
        if let Some(f1) = s.f1 {
            if !(0.0..=1.0).contains(&f1) {
                v.push(Violation::DetectabilityOutOfRange(s.id));
            }
        }
    }

    let mut edge_seen = BTreeSet::new();
    for e in &graph.edges {
        if graph.index_of(e.from).is_none() || graph.index_of(e.to).is_none() {
            v.push(Violation::EdgeEndpointMissing { from: e.from, to: e.to });
            continue;
        }
        if !(e.prob > 0.0 && e.prob <= 1.0) {
            v.push(Violation::EdgeProbOutOfRange { from: e.from, to: e.to, prob: e.prob });
        }
        if !edge_seen.insert((e.from, e.to)) {
            v.push(Violation::DuplicateEdge { from: e.from, to: e.to });
        }
    }

    for t in &graph.terminals {
        if graph.index_of(*t).is_none() {
            v.push(Violation::TerminalMissing(*t));
        }
    }
    if graph.terminals.is_empty() {
        v.push(Violation::NoTerminals);
    }

    for s in &graph.steps {
        let sum: f64 = graph.out_edges(s.id).map(|e| e.prob).sum();
        let has_out = graph.out_edges(s.id).next().is_some();
        if graph.is_terminal(s.id) {
            if has_out {
                v.push(Violation::TerminalWithOutgoingEdges(s.id));
            }
        } else if (sum - 1.0).abs() > PROB_TOL {
            v.push(Violation::OutgoingSumMismatch { step: s.id, sum });
        }
    }

    let mut init_sum = 0.0;
    for m in &graph.initial {
        if graph.index_of(m.step).is_none() {
            v.push(Violation::InitialStepMissing(m.step));
        }
        init_sum += m.prob;
    }
    if (init_sum - 1.0).abs() > PROB_TOL {
        v.push(Violation::InitialSumMismatch { sum: init_sum });
    }

    // Forward reachability from the initial support.
    let n = graph.steps.len();
    let mut reach = vec![false; n];
    let mut queue: VecDeque<usize> = graph
        .initial
        .iter()
        .filter(|m| m.prob > 0.0)
        .filter_map(|m| graph.index_of(m.step))
        .collect();
    for &i in &queue {
        reach[i] = true;
    }
    let adj = graph.adjacency();
    while let Some(i) = queue.pop_front() {
        for &(t, _) in &adj[i] {
            if !reach[t] {
                reach[t] = true;
                queue.push_back(t);
            }
        }
    }
    for (i, s) in graph.steps.iter().enumerate() {
        if !reach[i] {
            v.push(Violation::UnreachableStep(s.id));
        }
    }

    // Every step the user can actually be in must be able to finish the task:
    // some terminal reachable from every reachable step.
    if !graph.terminals.is_empty() {
        let mut to_terminal = vec![false; n];
        for t in &graph.terminals {
            for (i, ok) in graph.can_reach(*t).into_iter().enumerate() {
                if ok {
                    to_terminal[i] = true;
                }
            }
        }
        for (i, s) in graph.steps.iter().enumerate() {
            if reach[i] && !to_terminal[i] {
                v.push(Violation::NoTerminalReachable(s.id));
            }
        }
    }

    v
}

/// One simple path from an origin step to a target step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub path: Vec<StepId>,
    pub prob: f64,
    pub mean_transit_time_s: f64,
}

/// All simple paths between two steps with renormalized probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub origin: StepId,
    pub target: StepId,
    pub trajectories: Vec<Trajectory>,
    pub renormalized: bool,
    /// True when more simple paths exist than `max_paths` allowed.
    pub truncated: bool,
    /// Number of simple paths discovered before truncation.
    pub discovered: usize,
    /// Sum of the retained paths' raw (pre-normalization) probabilities.
    pub raw_prob_mass: f64,
}

impl TrajectorySet {
    /// Expected transit time over the retained trajectories.
    pub fn expected_transit_s(&self) -> f64 {
        self.trajectories.iter().map(|t| t.prob * t.mean_transit_time_s).sum()
    }
}

#[derive(Clone)]
struct PathCandidate {
    raw_prob: f64,
    path: Vec<usize>,
}

impl PartialEq for PathCandidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for PathCandidate {}
impl PartialOrd for PathCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PathCandidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Orders by probability, then lexicographically (reversed) so the
        // weakest candidate sits at the top of a min-heap.
        self.raw_prob
            .total_cmp(&other.raw_prob)
            .then_with(|| other.path.cmp(&self.path))
    }
}

/// Enumerate simple paths `from -> to` by depth-first search, keeping the
/// `max_paths` highest-probability ones, then renormalize.
pub fn enumerate_trajectories(
    graph: &TransitionGraph,
    from: StepId,
    to: StepId,
    max_paths: usize,
) -> Result<TrajectorySet> {
    let origin = graph.index_of(from).ok_or(Error::UnknownStep(from))?;
    let target = graph.index_of(to).ok_or(Error::UnknownStep(to))?;
    if max_paths == 0 {
        return Err(Error::config("graph", "max_paths must be at least 1".to_string()));
    }

    if origin == target {
        return Ok(TrajectorySet {
            origin: from,
            target: to,
            trajectories: vec![Trajectory { path: vec![from], prob: 1.0, mean_transit_time_s: 0.0 }],
            renormalized: false,
            truncated: false,
            discovered: 1,
            raw_prob_mass: 1.0,
        });
    }

    let adj = graph.adjacency();
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<PathCandidate>> =
        std::collections::BinaryHeap::new();
    let mut discovered = 0usize;

    let mut visited = vec![false; graph.steps.len()];
    let mut path = vec![origin];
    visited[origin] = true;
    dfs(&adj, target, &mut visited, &mut path, 1.0, &mut |p, raw| {
        discovered += 1;
        heap.push(std::cmp::Reverse(PathCandidate { raw_prob: raw, path: p.to_vec() }));
        if heap.len() > max_paths {
            heap.pop();
        }
    });

    if discovered == 0 {
        return Err(Error::NoPath { from, to });
    }

    let mut kept: Vec<PathCandidate> = heap.into_iter().map(|r| r.0).collect();
    kept.sort_by(|a, b| b.cmp(a));
    let raw_mass: f64 = kept.iter().map(|c| c.raw_prob).sum();
    let renormalized = (raw_mass - 1.0).abs() > PROB_TOL;

    let trajectories = kept
        .into_iter()
        .map(|c| {
            let transit: f64 = c.path[1..c.path.len() - 1]
                .iter()
                .map(|&i| graph.steps[i].mean_duration_s)
                .sum();
            Trajectory {
                path: c.path.into_iter().map(|i| graph.steps[i].id).collect(),
                prob: c.raw_prob / raw_mass,
                mean_transit_time_s: transit,
            }
        })
        .collect();

    Ok(TrajectorySet {
        origin: from,
        target: to,
        trajectories,
        renormalized,
        truncated: discovered > max_paths,
        discovered,
        raw_prob_mass: raw_mass,
    })
}

fn dfs(
    adj: &[Vec<(usize, f64)>],
    target: usize,
    visited: &mut [bool],
    path: &mut Vec<usize>,
    raw: f64,
    sink: &mut impl FnMut(&[usize], f64),
) {
    let here = *path.last().expect("path never empty");
    if here == target {
        sink(path, raw);
        return;
    }
    for &(next, p) in &adj[here] {
        if visited[next] || p <= 0.0 {
            continue;
        }
        visited[next] = true;
        path.push(next);
        dfs(adj, target, visited, path, raw * p, sink);
        path.pop();
        visited[next] = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fork_graph, linear_graph, linear_session};

    /// Independent oracle: recursively collect every simple path with its raw
    /// probability, without heaps or truncation.
    fn brute_force_paths(
        graph: &TransitionGraph,
        from: StepId,
        to: StepId,
    ) -> Vec<(Vec<StepId>, f64)> {
        fn go(
            graph: &TransitionGraph,
            here: StepId,
            to: StepId,
            seen: &mut Vec<StepId>,
            prob: f64,
            out: &mut Vec<(Vec<StepId>, f64)>,
        ) {
            if here == to {
                out.push((seen.clone(), prob));
                return;
            }
            let nexts: Vec<Edge> = graph.out_edges(here).copied().collect();
            for e in nexts {
                if seen.contains(&e.to) {
                    continue;
                }
                seen.push(e.to);
                go(graph, e.to, to, seen, prob * e.prob, out);
                seen.pop();
            }
        }
        let mut out = Vec::new();
        go(graph, from, to, &mut vec![from], 1.0, &mut out);
        out
    }

    #[test]
    fn two_identical_sessions_build_a_linear_graph() {
        let sessions = vec![
            SessionLog {
                session: "a".into(),
                annotations: vec![
                    Annotation { step: StepId(1), start_s: 0.0, end_s: 10.0 },
                    Annotation { step: StepId(2), start_s: 10.0, end_s: 30.0 },
                ],
                skipped: vec![],
            },
            SessionLog {
                session: "b".into(),
                annotations: vec![
                    Annotation { step: StepId(1), start_s: 0.0, end_s: 10.0 },
                    Annotation { step: StepId(2), start_s: 10.0, end_s: 30.0 },
                ],
                skipped: vec![],
            },
        ];
        let g = build_graph(&sessions, &GraphBuildConfig::default()).unwrap();
        assert_eq!(g.edges, vec![Edge { from: StepId(1), to: StepId(2), prob: 1.0 }]);
        assert_eq!(g.step(StepId(1)).unwrap().mean_duration_s, 10.0);
        assert_eq!(g.step(StepId(2)).unwrap().mean_duration_s, 20.0);
        assert_eq!(g.terminals, vec![StepId(2)]);
        assert_eq!(g.initial, vec![InitialMass { step: StepId(1), prob: 1.0 }]);
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn fork_counts_match_a_hand_count_over_17_sessions() {
        // 9 of 17 sessions do s9 before s12, the other 8 do s12 before s9.
        let mut sessions = Vec::new();
        for i in 0..17 {
            let (a, b) = if i < 9 { (9, 12) } else { (12, 9) };
            sessions.push(SessionLog {
                session: format!("c{i}"),
                annotations: vec![
                    Annotation { step: StepId(1), start_s: 0.0, end_s: 5.0 },
                    Annotation { step: StepId(a), start_s: 5.0, end_s: 15.0 },
                    Annotation { step: StepId(b), start_s: 15.0, end_s: 25.0 },
                    Annotation { step: StepId(13), start_s: 25.0, end_s: 30.0 },
                ],
                skipped: vec![],
            });
        }
        let g = build_graph(&sessions, &GraphBuildConfig::default()).unwrap();
        let p_9 = g.out_edges(StepId(1)).find(|e| e.to == StepId(9)).unwrap().prob;
        let p_12 = g.out_edges(StepId(1)).find(|e| e.to == StepId(12)).unwrap().prob;
        assert!((p_9 - 9.0 / 17.0).abs() < 1e-12);
        assert!((p_12 - 8.0 / 17.0).abs() < 1e-12);
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn step_mean_duration_is_the_span_average() {
        let sessions = vec![
            SessionLog {
                session: "l1".into(),
                annotations: vec![
                    Annotation { step: StepId(10), start_s: 0.0, end_s: 8.0 },
                    Annotation { step: StepId(11), start_s: 8.0, end_s: 26.0 },
                ],
                skipped: vec![],
            },
            SessionLog {
                session: "l2".into(),
                annotations: vec![
                    Annotation { step: StepId(10), start_s: 0.0, end_s: 8.0 },
                    Annotation { step: StepId(11), start_s: 8.0, end_s: 30.0 },
                ],
                skipped: vec![],
            },
        ];
        let mut cfg = GraphBuildConfig::default();
        cfg.names.insert(10, "Grind beans".into());
        cfg.names.insert(11, "Pour milk (cup)".into());
        let g = build_graph(&sessions, &cfg).unwrap();
        let milk = g.step(StepId(11)).unwrap();
        assert_eq!(milk.name, "Pour milk (cup)");
        assert!((milk.mean_duration_s - 20.0).abs() < 1e-12);
    }

    #[test]
    fn laplace_smoothing_softens_observed_edges() {
        // 3 of 4 sessions go s1->s2, one goes s1->s3; alpha=1 pulls the
        // probabilities toward each other: (3+1)/(4+2) and (1+1)/(4+2).
        let mut sessions: Vec<SessionLog> = (0..3)
            .map(|i| linear_session(&format!("a{i}"), &[(1, 10.0), (2, 10.0), (4, 5.0)]))
            .collect();
        sessions.push(linear_session("b", &[(1, 10.0), (3, 10.0), (4, 5.0)]));
        let cfg = GraphBuildConfig { laplace_alpha: 1.0, ..Default::default() };
        let g = build_graph(&sessions, &cfg).unwrap();
        let p2 = g.out_edges(StepId(1)).find(|e| e.to == StepId(2)).unwrap().prob;
        let p3 = g.out_edges(StepId(1)).find(|e| e.to == StepId(3)).unwrap().prob;
        assert!((p2 - 4.0 / 6.0).abs() < 1e-12);
        assert!((p3 - 2.0 / 6.0).abs() < 1e-12);
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn rare_edges_are_pruned_and_the_rest_renormalized() {
        let mut sessions: Vec<SessionLog> = (0..5)
            .map(|i| linear_session(&format!("a{i}"), &[(1, 10.0), (2, 10.0), (4, 5.0)]))
            .collect();
        sessions.push(linear_session("b", &[(1, 10.0), (3, 10.0), (4, 5.0)]));
        let cfg = GraphBuildConfig { min_edge_count: 2, ..Default::default() };
        let g = build_graph(&sessions, &cfg).unwrap();
        assert!(g.out_edges(StepId(1)).all(|e| e.to == StepId(2)));
        assert!((g.out_edges(StepId(1)).next().unwrap().prob - 1.0).abs() < 1e-12);
        // s3 survives in the universe but becomes unreachable: the pruning
        // trade-off is visible to validation.
        assert!(validate_graph(&g)
            .iter()
            .any(|v| matches!(v, Violation::UnreachableStep(s) if *s == StepId(3))));
    }

    #[test]
    fn detectability_map_lands_on_steps() {
        let sessions = vec![linear_session("a", &[(1, 10.0), (2, 10.0)])];
        let mut cfg = GraphBuildConfig::default();
        cfg.f1.insert(1, 0.83);
        let g = build_graph(&sessions, &cfg).unwrap();
        assert_eq!(g.step(StepId(1)).unwrap().f1, Some(0.83));
        assert_eq!(g.step(StepId(2)).unwrap().f1, None);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            build_graph(&[], &GraphBuildConfig::default()),
            Err(Error::EmptySessionSet)
        ));
        let empty = SessionLog { session: "e".into(), annotations: vec![], skipped: vec![] };
        assert!(matches!(
            build_graph(&[empty], &GraphBuildConfig::default()),
            Err(Error::SessionWithoutAnnotations(_))
        ));
        let mut cfg = GraphBuildConfig::default();
        cfg.names.insert(1, "only step".into());
        let rogue = linear_session("r", &[(1, 10.0), (2, 10.0)]);
        assert!(matches!(build_graph(&[rogue], &cfg), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn early_ended_sessions_do_not_poison_terminals() {
        // One session skips the final step and ends at s3; the other two run
        // to s4. s3 must keep its outgoing edge and s4 stays the terminal.
        let mut short = linear_session("short", &[(1, 10.0), (2, 10.0), (3, 10.0)]);
        short.skipped = vec![StepId(4)];
        let full_a = linear_session("a", &[(1, 10.0), (2, 10.0), (3, 10.0), (4, 10.0)]);
        let full_b = linear_session("b", &[(1, 10.0), (2, 10.0), (3, 10.0), (4, 10.0)]);
        let g = build_graph(&[short, full_a, full_b], &GraphBuildConfig::default()).unwrap();
        assert_eq!(g.terminals, vec![StepId(4)]);
        assert!(g.out_edges(StepId(3)).any(|e| e.to == StepId(4)));
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn validate_flags_bad_outgoing_sum() {
        let mut g = linear_graph(&[10.0, 20.0, 30.0]);
        g.edges[0].prob = 0.9;
        let vs = validate_graph(&g);
        assert!(vs
            .iter()
            .any(|v| matches!(v, Violation::OutgoingSumMismatch { step, .. } if *step == StepId(1))));
    }

    #[test]
    fn validate_flags_unreachable_step() {
        let mut g = linear_graph(&[10.0, 20.0, 30.0]);
        g.steps.push(StepDef {
            id: StepId(5),
            name: "s5".into(),
            mean_duration_s: 1.0,
            std_duration_s: 0.0,
            f1: None,
        });
        g.edges.push(Edge { from: StepId(5), to: StepId(3), prob: 1.0 });
        let g = g.canonicalized();
        let vs = validate_graph(&g);
        assert!(vs.iter().any(|v| matches!(v, Violation::UnreachableStep(s) if *s == StepId(5))));
    }

    #[test]
    fn validate_accepts_well_formed_graph() {
        assert!(validate_graph(&linear_graph(&[10.0, 20.0, 30.0])).is_empty());
        assert!(validate_graph(&fork_graph(10.0, 20.0)).is_empty());
    }

    #[test]
    fn linear_graph_has_single_trajectory() {
        let g = linear_graph(&[10.0, 20.0, 30.0]);
        let t = enumerate_trajectories(&g, StepId(1), StepId(3), 10_000).unwrap();
        assert_eq!(t.trajectories.len(), 1);
        assert_eq!(t.trajectories[0].path, vec![StepId(1), StepId(2), StepId(3)]);
        assert!((t.trajectories[0].prob - 1.0).abs() < 1e-12);
        assert_eq!(t.trajectories[0].mean_transit_time_s, 20.0);
        assert!(!t.truncated);
    }

    #[test]
    fn symmetric_fork_splits_evenly() {
        let g = fork_graph(10.0, 20.0);
        let t = enumerate_trajectories(&g, StepId(1), StepId(4), 10_000).unwrap();
        assert_eq!(t.trajectories.len(), 2);
        for tr in &t.trajectories {
            assert!((tr.prob - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_target_is_an_error() {
        let g = linear_graph(&[10.0, 20.0, 30.0]);
        assert!(matches!(
            enumerate_trajectories(&g, StepId(3), StepId(1), 100),
            Err(Error::NoPath { .. })
        ));
    }

    #[test]
    fn enumeration_matches_brute_force_on_a_branching_graph() {
        let g = crate::testutil::cooking_like_graph();
        let t = enumerate_trajectories(&g, StepId(1), StepId(7), usize::MAX).unwrap();
        let mut oracle = brute_force_paths(&g, StepId(1), StepId(7));
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        assert_eq!(t.trajectories.len(), oracle.len());
        let raw_sum: f64 = oracle.iter().map(|(_, p)| p).sum();
        for (tr, (opath, opr)) in t.trajectories.iter().zip(&oracle) {
            assert_eq!(&tr.path, opath);
            assert!((tr.prob - opr / raw_sum).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_keeps_highest_probability_paths() {
        let g = crate::testutil::cooking_like_graph();
        let full = enumerate_trajectories(&g, StepId(1), StepId(7), usize::MAX).unwrap();
        assert!(full.discovered > 2);
        let cut = enumerate_trajectories(&g, StepId(1), StepId(7), 2).unwrap();
        assert!(cut.truncated);
        assert_eq!(cut.discovered, full.discovered);
        assert_eq!(cut.trajectories.len(), 2);
        // The retained paths are the two strongest of the full set.
        assert_eq!(cut.trajectories[0].path, full.trajectories[0].path);
        assert_eq!(cut.trajectories[1].path, full.trajectories[1].path);
        let sum: f64 = cut.trajectories.iter().map(|t| t.prob).sum();
        assert!((sum - 1.0).abs() < PROB_TOL);
    }

    #[test]
    fn origin_equals_target_yields_the_empty_transit() {
        let g = linear_graph(&[10.0, 20.0, 30.0]);
        let t = enumerate_trajectories(&g, StepId(2), StepId(2), 100).unwrap();
        assert_eq!(t.trajectories.len(), 1);
        assert_eq!(t.trajectories[0].mean_transit_time_s, 0.0);
        assert_eq!(t.trajectories[0].path, vec![StepId(2)]);
    }

    #[test]
    fn cyclic_graph_enumerates_simple_paths_only() {
        // s2 <-> s3 can repeat forever; the enumeration keeps each path
        // simple, so revisit mass is excluded and the set renormalizes.
        let g = crate::testutil::loopy_graph();
        let t = enumerate_trajectories(&g, StepId(1), StepId(4), usize::MAX).unwrap();
        for tr in &t.trajectories {
            let mut seen = std::collections::BTreeSet::new();
            assert!(tr.path.iter().all(|s| seen.insert(*s)), "no repeated step in {:?}", tr.path);
        }
        assert!(t.raw_prob_mass < 1.0 - PROB_TOL);
        assert!(t.renormalized);
        let sum: f64 = t.trajectories.iter().map(|tr| tr.prob).sum();
        assert!((sum - 1.0).abs() < PROB_TOL);
        // Paths: 1-2-4 (0.3) and 1-2-3-4 (0.7 * 0.4).
        assert_eq!(t.discovered, 2);
        assert!((t.raw_prob_mass - (0.3 + 0.7 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn acyclic_raw_mass_reaches_one() {
        let g = crate::testutil::cooking_like_graph();
        let t = enumerate_trajectories(&g, StepId(1), StepId(7), usize::MAX).unwrap();
        assert!((t.raw_prob_mass - 1.0).abs() < PROB_TOL, "raw mass {}", t.raw_prob_mass);
    }

    #[test]
    fn trajectory_probs_are_invariant_under_relabeling() {
        let g = crate::testutil::cooking_like_graph();
        // Relabel step ids through an order-reversing map.
        let relabel = |s: StepId| StepId(100 - s.0);
        let mut g2 = TransitionGraph {
            steps: g
                .steps
                .iter()
                .map(|s| StepDef { id: relabel(s.id), ..s.clone() })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|e| Edge { from: relabel(e.from), to: relabel(e.to), prob: e.prob })
                .collect(),
            initial: g
                .initial
                .iter()
                .map(|m| InitialMass { step: relabel(m.step), prob: m.prob })
                .collect(),
            terminals: g.terminals.iter().map(|t| relabel(*t)).collect(),
        };
        g2 = g2.canonicalized();
        let t1 = enumerate_trajectories(&g, StepId(1), StepId(7), usize::MAX).unwrap();
        let t2 = enumerate_trajectories(&g2, relabel(StepId(1)), relabel(StepId(7)), usize::MAX).unwrap();
        let mut p1: Vec<f64> = t1.trajectories.iter().map(|t| t.prob).collect();
        let mut p2: Vec<f64> = t2.trajectories.iter().map(|t| t.prob).collect();
        p1.sort_by(f64::total_cmp);
        p2.sort_by(f64::total_cmp);
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
