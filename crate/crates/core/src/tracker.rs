//! Per-frame belief over the user's current step.
//!
//! A forward filtering recursion over a duration-aware frame transition
//! matrix: each step's self-transition probability is chosen so its expected
//! dwell matches the graph's mean duration, and the remaining mass leaves
//! along the graph's out-edges. Observations enter as smoothed emissions, so
//! a single overconfident misclassification cannot lock the posterior out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{StepId, TransitionGraph};

/// How to treat an optional background class in the observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundMode {
    /// Fold background mass into the step masses proportionally.
    #[default]
    Fold,
    /// Ignore the background column.
    Drop,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Seconds per observation frame.
    pub frame_length_s: f64,
    /// Lower bound on any step's per-frame self-transition probability.
    pub self_transition_floor: f64,
    /// Emission smoothing epsilon: observation mixed with uniform.
    pub emission_smoothing: f64,
    /// A step counts as performed once it stays the smoothed argmax this long.
    pub detection_window_s: f64,
    /// Moving-average width applied to the posterior before detection.
    pub detection_smooth_s: f64,
    pub background: BackgroundMode,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            frame_length_s: 0.2,
            self_transition_floor: 0.01,
            emission_smoothing: 0.01,
            detection_window_s: 5.0,
            detection_smooth_s: 1.0,
            background: BackgroundMode::Fold,
        }
    }
}

impl TrackerConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.frame_length_s > 0.0) {
            return Err(Error::config("tracker", "frame_length_s must be positive"));
        }
        if !(0.0..0.5).contains(&self.emission_smoothing) {
            return Err(Error::config("tracker", "emission_smoothing must be in [0, 0.5)"));
        }
        if !(self.detection_window_s > 0.0) || !(self.detection_smooth_s > 0.0) {
            return Err(Error::config("tracker", "detection windows must be positive"));
        }
        if !(0.0..1.0).contains(&self.self_transition_floor) {
            return Err(Error::config("tracker", "self_transition_floor must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn smooth_frames(&self) -> usize {
        ((self.detection_smooth_s / self.frame_length_s).round() as usize).max(1)
    }
}

/// One 0.2 s frame of class probabilities, optionally with a trailing
/// background class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub t: f64,
    pub probs: Vec<f64>,
    #[serde(default)]
    pub has_background: bool,
}

impl FrameObservation {
    /// The per-step slice of `probs`, excluding any background column.
    pub fn step_probs(&self) -> &[f64] {
        if self.has_background {
            &self.probs[..self.probs.len() - 1]
        } else {
            &self.probs
        }
    }

    pub fn background_prob(&self) -> f64 {
        if self.has_background {
            *self.probs.last().unwrap_or(&0.0)
        } else {
            0.0
        }
    }
}

/// Posterior over steps at one instant, with per-step expected elapsed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub t: f64,
    /// P(current step), aligned with the graph's canonical step order.
    pub posterior: Vec<f64>,
    /// Expected seconds already spent in each step, conditioned on being in it.
    pub elapsed_in_step: Vec<f64>,
    pub decoded_step: StepId,
}

/// Index of the maximum entry, ties broken toward the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Belief over the initial distribution at t = 0.
pub fn init_belief(graph: &TransitionGraph) -> BeliefState {
    let n = graph.n_steps();
    let mut posterior = vec![0.0; n];
    for m in &graph.initial {
        if let Some(i) = graph.index_of(m.step) {
            posterior[i] += m.prob;
        }
    }
    let decoded = graph.steps[argmax(&posterior)].id;
    BeliefState { t: 0.0, posterior, elapsed_in_step: vec![0.0; n], decoded_step: decoded }
}

/// Precomputed filtering engine for one graph + config.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    /// Row-stochastic frame transition matrix, row = from-step index.
    matrix: Vec<Vec<f64>>,
    n: usize,
    step_ids: Vec<StepId>,
}

impl Tracker {
    pub fn new(graph: &TransitionGraph, cfg: TrackerConfig) -> Result<Self> {
        cfg.check()?;
        let n = graph.n_steps();
        let adj = graph.adjacency();
        let mut matrix = vec![vec![0.0; n]; n];
        for (i, step) in graph.steps.iter().enumerate() {
            if graph.is_terminal(step.id) || adj[i].is_empty() {
                matrix[i][i] = 1.0;
                continue;
            }
            let stay = (1.0 - cfg.frame_length_s / step.mean_duration_s)
                .max(cfg.self_transition_floor);
            matrix[i][i] = stay;
            let out_total: f64 = adj[i].iter().map(|(_, p)| p).sum();
            for &(j, p) in &adj[i] {
                matrix[i][j] += (1.0 - stay) * p / out_total;
            }
        }
        Ok(Self { cfg, matrix, n, step_ids: graph.steps.iter().map(|s| s.id).collect() })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Observation -> emission over steps: background handled per config,
    /// then mixed with the uniform distribution.
    fn emission(&self, obs: &FrameObservation) -> Result<Vec<f64>> {
        let steps = obs.step_probs();
        if steps.len() != self.n {
            return Err(Error::DimensionMismatch { want: self.n, got: steps.len() });
        }
        let step_mass: f64 = steps.iter().sum();
        let mut p: Vec<f64> = if step_mass > 0.0 {
            match self.cfg.background {
                // Proportional fold equals renormalizing over step classes.
                BackgroundMode::Fold => steps.iter().map(|x| x / step_mass).collect(),
                BackgroundMode::Drop => steps.to_vec(),
            }
        } else {
            vec![1.0 / self.n as f64; self.n]
        };
        let eps = self.cfg.emission_smoothing;
        let total: f64 = p.iter().sum();
        for x in &mut p {
            *x = (1.0 - eps) * (*x / total) + eps / self.n as f64;
        }
        Ok(p)
    }

    /// One filtering step: transition push, emission reweighting,
    /// per-step elapsed-time bookkeeping.
    pub fn update(&self, belief: &BeliefState, obs: &FrameObservation) -> Result<BeliefState> {
        let expected_t = belief.t + self.cfg.frame_length_s;
        if (obs.t - expected_t).abs() > 1e-6 {
            return Err(Error::NonMonotonicTimestamp { want: expected_t, got: obs.t });
        }
        let emission = self.emission(obs)?;

        let mut pushed = vec![0.0; self.n];
        let mut stayed = vec![0.0; self.n];
        for i in 0..self.n {
            let mass = belief.posterior[i];
            if mass <= 0.0 {
                continue;
            }
            for j in 0..self.n {
                let a = self.matrix[i][j];
                if a > 0.0 {
                    pushed[j] += mass * a;
                    if i == j {
                        stayed[j] = mass * a;
                    }
                }
            }
        }

        let mut posterior: Vec<f64> = pushed.iter().zip(&emission).map(|(p, e)| p * e).collect();
        let sum: f64 = posterior.iter().sum();
        if sum > 0.0 {
            for x in &mut posterior {
                *x /= sum;
            }
        } else {
            // Zero-probability lockout (only possible with eps = 0): fall back
            // to the transition-only prediction.
            let psum: f64 = pushed.iter().sum();
            posterior = pushed.iter().map(|p| p / psum).collect();
        }

        // Mass that stayed carries its elapsed time forward; mass that just
        // entered restarts at zero. Emission cancels in the ratio.
        let dt = self.cfg.frame_length_s;
        let elapsed: Vec<f64> = (0..self.n)
            .map(|j| {
                if pushed[j] > 0.0 {
                    (belief.elapsed_in_step[j] + dt) * stayed[j] / pushed[j]
                } else {
                    0.0
                }
            })
            .collect();

        let decoded = self.step_ids[argmax(&posterior)];
        Ok(BeliefState { t: obs.t, posterior, elapsed_in_step: elapsed, decoded_step: decoded })
    }
}

/// Single-shot form of [`Tracker::update`].
pub fn update_belief(
    belief: &BeliefState,
    obs: &FrameObservation,
    graph: &TransitionGraph,
    cfg: &TrackerConfig,
) -> Result<BeliefState> {
    Tracker::new(graph, cfg.clone())?.update(belief, obs)
}

/// Moving-average smoothing of a posterior history, then the longest
/// continuous run where `step` is the smoothed argmax.
///
/// Returns `Err(InsufficientHistory)` when the history covers less than the
/// detection window; "cannot judge yet" is distinct from "not performed".
pub fn detect_step_completion(
    history: &[BeliefState],
    step: StepId,
    graph: &TransitionGraph,
    cfg: &TrackerConfig,
) -> Result<bool> {
    let covered = history.len() as f64 * cfg.frame_length_s;
    if covered + 1e-9 < cfg.detection_window_s {
        return Err(Error::InsufficientHistory { want: cfg.detection_window_s, got: covered });
    }
    let target = graph.index_of(step).ok_or(Error::UnknownStep(step))?;
    let w = cfg.smooth_frames();
    let n = history.first().map(|b| b.posterior.len()).unwrap_or(0);

    let mut best_run = 0usize;
    let mut run = 0usize;
    let mut sums = vec![0.0; n];
    for (k, b) in history.iter().enumerate() {
        for (s, p) in sums.iter_mut().zip(&b.posterior) {
            *s += p;
        }
        if k >= w {
            for (s, p) in sums.iter_mut().zip(&history[k - w].posterior) {
                *s -= p;
            }
        }
        if argmax(&sums) == target {
            run += 1;
            best_run = best_run.max(run);
        } else {
            run = 0;
        }
    }
    Ok(best_run as f64 * cfg.frame_length_s + 1e-9 >= cfg.detection_window_s)
}

/// Incremental detector used by the session loop: tracks the smoothed argmax
/// run per step and latches the first time each step completes the window.
#[derive(Debug, Clone)]
pub struct DetectionTracker {
    smooth_frames: usize,
    needed_frames: usize,
    frame_length: f64,
    window: std::collections::VecDeque<Vec<f64>>,
    sums: Vec<f64>,
    current: Option<usize>,
    run: usize,
    first_detected_at: Vec<Option<f64>>,
}

impl DetectionTracker {
    pub fn new(n_steps: usize, cfg: &TrackerConfig) -> Self {
        Self {
            smooth_frames: cfg.smooth_frames(),
            needed_frames: ((cfg.detection_window_s / cfg.frame_length_s).round() as usize).max(1),
            frame_length: cfg.frame_length_s,
            window: std::collections::VecDeque::new(),
            sums: vec![0.0; n_steps],
            current: None,
            run: 0,
            first_detected_at: vec![None; n_steps],
        }
    }

    pub fn push(&mut self, belief: &BeliefState) {
        for (s, p) in self.sums.iter_mut().zip(&belief.posterior) {
            *s += p;
        }
        self.window.push_back(belief.posterior.clone());
        if self.window.len() > self.smooth_frames {
            let old = self.window.pop_front().expect("non-empty window");
            for (s, p) in self.sums.iter_mut().zip(&old) {
                *s -= p;
            }
        }
        let a = argmax(&self.sums);
        if self.current == Some(a) {
            self.run += 1;
        } else {
            self.current = Some(a);
            self.run = 1;
        }
        if self.run >= self.needed_frames && self.first_detected_at[a].is_none() {
            self.first_detected_at[a] = Some(belief.t);
        }
        let _ = self.frame_length;
    }

    /// First time the step index completed a full detection window, if ever.
    pub fn detected_at(&self, step_index: usize) -> Option<f64> {
        self.first_detected_at[step_index]
    }

    pub fn is_detected(&self, step_index: usize) -> bool {
        self.first_detected_at[step_index].is_some()
    }
}
