//! Policy-comparison methodology: timing-error metric, leave-one-session-out
//! cross-validation with per-step entropy-threshold grid search, baseline
//! comparison, and the TP/FP/FN/TN tallies for forgotten-step notifications.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{derive_seed, Forecaster};
use crate::graph::{build_graph, GraphBuildConfig, SessionLog, StepId, TransitionGraph};
use crate::policy::{
    run_session, step_policy, Disposition, EngineConfig, InterventionEvent, InterventionKind,
    InterventionSpec, Phase, PolicyState, TickRecord, TickTarget,
};
use crate::tracker::{init_belief, DetectionTracker, FrameObservation, Tracker};

/// |expectation at arming - actual remaining time|: how far off the
/// forecast was at the moment the timer started.
pub fn timing_error(armed_estimate: f64, armed_at: f64, actual_step_start: f64) -> f64 {
    (armed_estimate - (actual_step_start - armed_at)).abs()
}

/// Frame-level macro F1 over the classes that occur in the ground truth.
pub fn macro_f1(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    assert_eq!(truth.len(), pred.len());
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (t, p) in truth.iter().zip(pred) {
        if t == p {
            tp[*t] += 1;
        } else {
            fn_[*t] += 1;
            fp[*p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0usize;
    for c in 0..n_classes {
        if tp[c] + fn_[c] == 0 {
            continue;
        }
        classes += 1;
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}

/// Default grid for the per-step entropy threshold, in nats.
pub fn default_grid() -> Vec<f64> {
    (0..=8).map(|i| 2.0 + 0.5 * i as f64).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub build: GraphBuildConfig,
    pub engine: EngineConfig,
    pub grid: Vec<f64>,
    /// Offsets used for the policy replays; the timing metric itself only
    /// depends on the arming moment.
    pub k_minus: f64,
    pub k_plus: f64,
    /// Optional notification specs replayed on held-out sessions to produce
    /// disposition tallies (their `h` is replaced by the tuned threshold).
    #[serde(default)]
    pub notify_specs: Vec<InterventionSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            build: GraphBuildConfig::default(),
            engine: EngineConfig::default(),
            grid: default_grid(),
            k_minus: 15.0,
            k_plus: 15.0,
            notify_specs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    Proposed,
    Baseline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorCell {
    pub step: StepId,
    pub policy: PolicyName,
    pub mean_abs_error_s: f64,
    pub stderr_s: f64,
    pub n: usize,
    /// Sessions scored with the session-start fallback because the timer
    /// never armed.
    pub fallback_sessions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedT {
    /// None = overall row.
    pub step: Option<StepId>,
    pub t_stat: f64,
    pub p_value: f64,
    pub n: usize,
    pub significant_at_05: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispositionCount {
    pub target: StepId,
    pub tp: usize,
    pub fp: usize,
    pub r#fn: usize,
    pub tn: usize,
    /// Sessions where the step neither occurred nor was skipped.
    pub no_chance: usize,
}

impl DispositionCount {
    pub fn total_chances(&self) -> usize {
        self.tp + self.fp + self.r#fn + self.tn
    }

    pub fn correct(&self) -> usize {
        self.tp + self.tn
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.r#fn == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.r#fn) as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldInfo {
    pub held_out: String,
    pub thresholds: BTreeMap<u32, f64>,
    /// Steps whose threshold fell back to the grid median because no grid
    /// value ever armed on the training sessions.
    pub threshold_fallbacks: Vec<StepId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub n_sessions: usize,
    pub grid: Vec<f64>,
    pub seed: u64,
    pub engine: EngineConfig,
    pub build: GraphBuildConfig,
    pub folds: Vec<FoldInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<ErrorCell>,
    pub overall: Vec<ErrorCell>,
    pub paired_t: Vec<PairedT>,
    pub dispositions: Vec<DispositionCount>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn overall_mean(&self, policy: PolicyName) -> Option<f64> {
        self.overall.iter().find(|c| c.policy == policy).map(|c| c.mean_abs_error_s)
    }
}

/// LOSO evaluation plus per-session tick traces for plotting.
pub struct LosoResult {
    pub report: EvalReport,
    pub traces: Vec<(String, Vec<TickRecord>)>,
}

/// Threshold-independent per-tick series for one session: expectation,
/// smoothed entropy, and cumulative detection per target. Computing this once
/// lets the grid search replay the cheap policy FSM many times.
struct SessionSeries {
    targets: Vec<StepId>,
    ticks: Vec<SeriesTick>,
    end_t: f64,
}

struct SeriesTick {
    t: f64,
    e: Vec<Option<f64>>,
    h_smoothed: Vec<Option<f64>>,
    detected: Vec<bool>,
}

fn compute_session_series(
    graph: &TransitionGraph,
    frames: &[FrameObservation],
    cfg: &EngineConfig,
    series_seed: u64,
) -> Result<SessionSeries> {
    let targets: Vec<StepId> = graph.steps.iter().map(|s| s.id).collect();
    let tracker = Tracker::new(graph, cfg.tracker.clone())?;
    let forecaster = Forecaster::new(graph, cfg.forecast.clone())?;
    let mut detection = DetectionTracker::new(graph.n_steps(), &cfg.tracker);
    let ticks_every = ((cfg.policy.tick_s / cfg.tracker.frame_length_s).round() as u64).max(1);
    let smooth_len = ((cfg.policy.entropy_smooth_s / cfg.policy.tick_s).round() as usize).max(1);

    let mut belief = init_belief(graph);
    let mut ticks = Vec::new();
    let mut windows: Vec<std::collections::VecDeque<f64>> =
        vec![std::collections::VecDeque::new(); targets.len()];
    for (k, obs) in frames.iter().enumerate() {
        belief = tracker.update(&belief, obs)?;
        detection.push(&belief);
        let frame_index = k as u64 + 1;
        if !frame_index.is_multiple_of(ticks_every) {
            continue;
        }
        let tick_index = frame_index / ticks_every;
        let mut e_row = Vec::with_capacity(targets.len());
        let mut h_row = Vec::with_capacity(targets.len());
        let mut d_row = Vec::with_capacity(targets.len());
        for (ti, target) in targets.iter().enumerate() {
            let seed = derive_seed(&[series_seed, tick_index, u64::from(target.0)]);
            match forecaster.sample_with_seed(&belief, *target, seed) {
                Ok(dist) => {
                    windows[ti].push_back(dist.entropy_nats);
                    if windows[ti].len() > smooth_len {
                        windows[ti].pop_front();
                    }
                    let h = windows[ti].iter().sum::<f64>() / windows[ti].len() as f64;
                    e_row.push(Some(dist.expectation_s));
                    h_row.push(Some(h));
                }
                Err(_) => {
                    e_row.push(None);
                    h_row.push(None);
                }
            }
            d_row.push(detection.is_detected(graph.index_of(*target).expect("known target")));
        }
        ticks.push(SeriesTick { t: belief.t, e: e_row, h_smoothed: h_row, detected: d_row });
    }
    let end_t = belief.t;
    Ok(SessionSeries { targets, ticks, end_t })
}

/// Replay the policy FSM for one target over a cached series, mirroring the
/// live engine's semantics including the post-stream run-down.
fn replay_policy(
    series: &SessionSeries,
    target_index: usize,
    spec: &InterventionSpec,
    graph: &TransitionGraph,
    cfg: &EngineConfig,
) -> Result<PolicyState> {
    let mut state = PolicyState::new();
    let name = graph
        .step(spec.target)
        .map(|s| s.name.clone())
        .unwrap_or_else(|| format!("{}", spec.target));
    let mut last_h = 0.0;
    for tick in &series.ticks {
        if state.phase.is_terminal() {
            break;
        }
        let detected = tick.detected[target_index];
        match (tick.e[target_index], tick.h_smoothed[target_index]) {
            (Some(e), Some(h)) => {
                last_h = h;
                let (next, _) = step_policy(state, tick.t, e, h, detected, spec, &name, &cfg.policy)?;
                state = next;
            }
            _ => {
                // Undefined expectation: an armed timer keeps counting down
                // on its decayed prediction, a watching lane cannot arm.
                if matches!(state.phase, Phase::TimerPendingStability | Phase::TimerRunning) {
                    let armed = state.armed_estimate_s.unwrap_or(0.0);
                    let started = state.timer_started_at.unwrap_or(tick.t);
                    let predicted = (armed - (tick.t - started)).max(0.0);
                    let (next, _) =
                        step_policy(state, tick.t, predicted, last_h, detected, spec, &name, &cfg.policy)?;
                    state = next;
                } else if detected && matches!(state.phase, Phase::Watching | Phase::Cancelled) {
                    state.phase = Phase::Suppressed;
                }
            }
        }
    }
    // Post-stream run-down of a still-armed timer.
    if matches!(state.phase, Phase::TimerPendingStability | Phase::TimerRunning) {
        let offset = match spec.kind {
            InterventionKind::RemindInAdvance => spec.k_minus,
            InterventionKind::NotifyIfForgotten => spec.k_plus,
        };
        let mean = graph.step(spec.target).map(|s| s.mean_duration_s).unwrap_or(0.0);
        let allowed = series.end_t + offset + mean;
        let detected = series.ticks.last().map(|t| t.detected[target_index]).unwrap_or(false);
        let mut t = series.end_t;
        while matches!(state.phase, Phase::TimerPendingStability | Phase::TimerRunning) {
            t = crate::io::round_us(t + cfg.policy.tick_s);
            if t > allowed + 1e-9 || state.fires_at.map(|f| t > f + cfg.policy.tick_s).unwrap_or(true) {
                break;
            }
            let armed = state.armed_estimate_s.unwrap_or(0.0);
            let started = state.timer_started_at.unwrap_or(series.end_t);
            let predicted = (armed - (t - started)).max(0.0);
            let h = series
                .ticks
                .last()
                .and_then(|tk| tk.h_smoothed[target_index])
                .unwrap_or(0.0);
            let (next, _) = step_policy(state, t, predicted, h, detected, spec, &name, &cfg.policy)?;
            state = next;
        }
    }
    Ok(state)
}

/// Per-session timing error of the proposed policy for one target: the first
/// arming that survives its stability window, or the session-start fallback.
fn proposed_error(
    state: &PolicyState,
    e0: Option<f64>,
    actual_start: f64,
) -> Option<(f64, bool)> {
    if let Some(armed) = state.scored_arming() {
        return Some((timing_error(armed.armed_estimate_s, armed.armed_at, actual_start), false));
    }
    e0.map(|e0| (timing_error(e0, 0.0, actual_start), true))
}

struct FoldOutcome {
    held_out: String,
    info: FoldInfo,
    /// (step, proposed error, was fallback, baseline error)
    errors: Vec<(StepId, f64, bool, f64)>,
    trace: Vec<TickRecord>,
    events: Vec<InterventionEvent>,
    log: SessionLog,
}

/// Per-step grid search on cached training series: the grid value minimizing
/// the mean training timing error, ties toward the smaller threshold.
fn grid_search_on_series(
    series: &[(usize, &SessionSeries, &SessionLog)],
    graph: &TransitionGraph,
    cfg: &EvalConfig,
    e0: &BTreeMap<StepId, f64>,
) -> Result<(BTreeMap<u32, f64>, Vec<StepId>)> {
    let mut thresholds = BTreeMap::new();
    let mut fallbacks = Vec::new();
    for (ti, step) in graph.steps.iter().enumerate() {
        let mut best: Option<(f64, f64)> = None; // (mean error, h)
        let mut any_armed = false;
        for h in &cfg.grid {
            let spec = InterventionSpec {
                target: step.id,
                kind: InterventionKind::RemindInAdvance,
                k_minus: cfg.k_minus,
                k_plus: cfg.k_plus,
                h: *h,
            };
            let mut errors = Vec::new();
            let mut armed_here = false;
            for (_, s, log) in series {
                let Some(actual) = log.start_of(step.id) else { continue };
                let state = replay_policy(s, ti, &spec, graph, &cfg.engine)?;
                if state.scored_arming().is_some() {
                    armed_here = true;
                }
                if let Some((err, _)) = proposed_error(&state, e0.get(&step.id).copied(), actual) {
                    errors.push(err);
                }
            }
            if errors.is_empty() {
                continue;
            }
            any_armed |= armed_here;
            if armed_here {
                let mean = errors.iter().sum::<f64>() / errors.len() as f64;
                let better = match best {
                    None => true,
                    Some((b, bh)) => mean < b - 1e-12 || (mean <= b + 1e-12 && *h < bh),
                };
                if better {
                    best = Some((mean, *h));
                }
            }
        }
        match best {
            Some((_, h)) if any_armed => {
                thresholds.insert(step.id.0, h);
            }
            _ => {
                // Never armed at any grid value: fall back to the grid median.
                let mut sorted = cfg.grid.clone();
                sorted.sort_by(f64::total_cmp);
                thresholds.insert(step.id.0, sorted[(sorted.len() - 1) / 2]);
                fallbacks.push(step.id);
            }
        }
    }
    Ok((thresholds, fallbacks))
}

/// Stand-alone form of the per-step threshold search over training sessions.
pub fn grid_search_thresholds(
    training: &[(SessionLog, Vec<FrameObservation>)],
    cfg: &EvalConfig,
) -> Result<BTreeMap<u32, f64>> {
    if cfg.grid.is_empty() {
        return Err(Error::Evaluation("empty threshold grid".into()));
    }
    let logs: Vec<SessionLog> = training.iter().map(|(l, _)| l.clone()).collect();
    let graph = build_graph(&logs, &cfg.build)?;
    let forecaster = Forecaster::new(&graph, cfg.engine.forecast.clone())?;
    let belief0 = init_belief(&graph);
    let mut e0 = BTreeMap::new();
    for s in &graph.steps {
        if let Ok(e) = forecaster.exact_expected_remaining_time(&belief0, s.id) {
            e0.insert(s.id, e);
        }
    }
    let series: Vec<SessionSeries> = training
        .iter()
        .enumerate()
        .map(|(i, (_, frames))| {
            compute_session_series(
                &graph,
                frames,
                &cfg.engine,
                derive_seed(&[cfg.engine.forecast.seed, 0xA11, i as u64]),
            )
        })
        .collect::<Result<_>>()?;
    let view: Vec<(usize, &SessionSeries, &SessionLog)> = series
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s, &training[i].0))
        .collect();
    grid_search_on_series(&view, &graph, cfg, &e0).map(|(t, _)| t)
}

/// Leave-one-session-out evaluation of proposed vs baseline timing.
pub fn loso_evaluate(
    data: &[(SessionLog, Vec<FrameObservation>)],
    cfg: &EvalConfig,
) -> Result<LosoResult> {
    if data.len() < 3 {
        return Err(Error::Evaluation(format!(
            "leave-one-session-out needs at least 3 sessions, got {}",
            data.len()
        )));
    }
    if cfg.grid.is_empty() {
        return Err(Error::Evaluation("empty threshold grid".into()));
    }
    // Fix the step universe across folds so frame columns stay aligned even
    // when a step is absent from a training split.
    let all_logs: Vec<SessionLog> = data.iter().map(|(l, _)| l.clone()).collect();
    let universe = build_graph(&all_logs, &cfg.build)?;
    let mut build = cfg.build.clone();
    for s in &universe.steps {
        build.names.entry(s.id.0).or_insert_with(|| s.name.clone());
    }

    let folds: Vec<FoldOutcome> = (0..data.len())
        .into_par_iter()
        .map(|fold| -> Result<FoldOutcome> {
            let train: Vec<SessionLog> = all_logs
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != fold)
                .map(|(_, l)| l.clone())
                .collect();
            let graph = build_graph(&train, &build)?;

            // Session-start expectations per target on this fold's graph.
            let forecaster = Forecaster::new(&graph, cfg.engine.forecast.clone())?;
            let belief0 = init_belief(&graph);
            let mut e0 = BTreeMap::new();
            for s in &graph.steps {
                if let Ok(e) = forecaster.exact_expected_remaining_time(&belief0, s.id) {
                    e0.insert(s.id, e);
                }
            }

            let series: Vec<(usize, SessionSeries)> = data
                .par_iter()
                .enumerate()
                .map(|(i, (_, frames))| -> Result<(usize, SessionSeries)> {
                    let seed = derive_seed(&[cfg.engine.forecast.seed, fold as u64, i as u64]);
                    Ok((i, compute_session_series(&graph, frames, &cfg.engine, seed)?))
                })
                .collect::<Result<_>>()?;

            let train_view: Vec<(usize, &SessionSeries, &SessionLog)> = series
                .iter()
                .filter(|(i, _)| *i != fold)
                .map(|(i, s)| (*i, s, &data[*i].0))
                .collect();
            let (thresholds, fallback_steps) =
                grid_search_on_series(&train_view, &graph, cfg, &e0)?;

            // Replay the held-out session with the tuned thresholds.
            let (held_log, held_frames) = &data[fold];
            let held_series = &series.iter().find(|(i, _)| *i == fold).expect("fold present").1;
            let mut errors = Vec::new();
            for (ti, step) in graph.steps.iter().enumerate() {
                let Some(actual) = held_log.start_of(step.id) else { continue };
                let Some(baseline_e0) = e0.get(&step.id).copied() else {
                    // Unreachable on this fold's graph: cell marked absent.
                    continue;
                };
                let spec = InterventionSpec {
                    target: step.id,
                    kind: InterventionKind::RemindInAdvance,
                    k_minus: cfg.k_minus,
                    k_plus: cfg.k_plus,
                    h: thresholds[&step.id.0],
                };
                let state = replay_policy(held_series, ti, &spec, &graph, &cfg.engine)?;
                let (err, fallback) = proposed_error(&state, Some(baseline_e0), actual)
                    .expect("baseline expectation present");
                let baseline_err = timing_error(baseline_e0, 0.0, actual);
                errors.push((step.id, err, fallback, baseline_err));
            }

            // Optional notification replay for dispositions.
            let events = if cfg.notify_specs.is_empty() {
                Vec::new()
            } else {
                let specs: Vec<InterventionSpec> = cfg
                    .notify_specs
                    .iter()
                    .map(|s| InterventionSpec {
                        h: thresholds.get(&s.target.0).copied().unwrap_or(s.h),
                        ..*s
                    })
                    .collect();
                let mut engine_cfg = cfg.engine.clone();
                engine_cfg.forecast.seed =
                    derive_seed(&[cfg.engine.forecast.seed, 0xD15, fold as u64]);
                run_session(&graph, &specs, held_frames, &engine_cfg)?.events
            };

            let trace = held_series
                .ticks
                .iter()
                .map(|tk| TickRecord {
                    t: tk.t,
                    targets: held_series
                        .targets
                        .iter()
                        .enumerate()
                        .map(|(i, target)| TickTarget {
                            target: *target,
                            e: tk.e[i],
                            h: tk.h_smoothed[i],
                            phase: Phase::Watching,
                        })
                        .collect(),
                })
                .collect();

            Ok(FoldOutcome {
                held_out: held_log.session.clone(),
                info: FoldInfo {
                    held_out: held_log.session.clone(),
                    thresholds,
                    threshold_fallbacks: fallback_steps,
                },
                errors,
                trace,
                events,
                log: held_log.clone(),
            })
        })
        .collect::<Result<_>>()?;

    // Aggregate.
    let mut per_step: BTreeMap<StepId, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    let mut all_proposed = Vec::new();
    let mut all_baseline = Vec::new();
    for f in &folds {
        for (step, err, fallback, baseline) in &f.errors {
            let entry = per_step.entry(*step).or_default();
            entry.0.push(*err);
            entry.1.push(*baseline);
            if *fallback {
                entry.2 += 1;
            }
            all_proposed.push(*err);
            all_baseline.push(*baseline);
        }
    }

    let mut cells = Vec::new();
    let mut paired = Vec::new();
    for (step, (prop, base, fallbacks)) in &per_step {
        cells.push(cell(*step, PolicyName::Proposed, prop, *fallbacks));
        cells.push(cell(*step, PolicyName::Baseline, base, 0));
        paired.push(paired_t_row(Some(*step), prop, base));
    }
    let overall = vec![
        cell(StepId(0), PolicyName::Proposed, &all_proposed, 0),
        cell(StepId(0), PolicyName::Baseline, &all_baseline, 0),
    ];
    paired.push(paired_t_row(None, &all_proposed, &all_baseline));

    let session_results: Vec<(Vec<InterventionEvent>, SessionLog)> =
        folds.iter().map(|f| (f.events.clone(), f.log.clone())).collect();
    let dispositions = if cfg.notify_specs.is_empty() {
        Vec::new()
    } else {
        tally_dispositions(&session_results, &cfg.notify_specs).0
    };

    let report = EvalReport {
        cells,
        overall,
        paired_t: paired,
        dispositions,
        metadata: ReportMetadata {
            n_sessions: data.len(),
            grid: cfg.grid.clone(),
            seed: cfg.engine.forecast.seed,
            engine: cfg.engine.clone(),
            build: cfg.build.clone(),
            folds: folds.iter().map(|f| f.info.clone()).collect(),
        },
    };
    let traces = folds.into_iter().map(|f| (f.held_out, f.trace)).collect();
    Ok(LosoResult { report, traces })
}

fn cell(step: StepId, policy: PolicyName, errors: &[f64], fallbacks: usize) -> ErrorCell {
    let n = errors.len();
    let mean = if n == 0 { 0.0 } else { errors.iter().sum::<f64>() / n as f64 };
    let stderr = if n < 2 {
        0.0
    } else {
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    ErrorCell { step, policy, mean_abs_error_s: mean, stderr_s: stderr, n, fallback_sessions: fallbacks }
}

fn paired_t_row(step: Option<StepId>, a: &[f64], b: &[f64]) -> PairedT {
    let (t, p, n) = paired_t_test(a, b);
    PairedT { step, t_stat: t, p_value: p, n, significant_at_05: p < 0.05 }
}

/// Two-sided paired t-test. Returns (t statistic, p-value, n).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> (f64, f64, usize) {
    let n = a.len().min(b.len());
    if n < 2 {
        return (0.0, 1.0, n);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        // Zero-variance differences: off-scale t, degenerate p.
        return if mean == 0.0 { (0.0, 1.0, n) } else { (mean.signum() * 1e12, 0.0, n) };
    }
    let t = mean / (var / n as f64).sqrt();
    let p = 2.0 * (1.0 - student_t_cdf(t.abs(), (n - 1) as f64));
    (t, p.clamp(0.0, 1.0), n)
}

/// CDF of Student's t via the regularized incomplete beta function.
fn student_t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let p = 0.5 * incomplete_beta(0.5 * df, 0.5, x);
    if t >= 0.0 {
        1.0 - p
    } else {
        p
    }
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..200 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Gamma.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for g in G {
        y += 1.0;
        ser += g / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Score fired notifications against ground-truth skips.
///
/// Returns the per-target counts plus the events annotated with their
/// disposition.
pub fn tally_dispositions(
    sessions: &[(Vec<InterventionEvent>, SessionLog)],
    specs: &[InterventionSpec],
) -> (Vec<DispositionCount>, Vec<InterventionEvent>) {
    let mut counts: BTreeMap<StepId, DispositionCount> = BTreeMap::new();
    let mut annotated = Vec::new();
    for spec in specs {
        if spec.kind != InterventionKind::NotifyIfForgotten {
            continue;
        }
        counts.entry(spec.target).or_insert(DispositionCount {
            target: spec.target,
            tp: 0,
            fp: 0,
            r#fn: 0,
            tn: 0,
            no_chance: 0,
        });
    }
    for (events, log) in sessions {
        for spec in specs {
            if spec.kind != InterventionKind::NotifyIfForgotten {
                continue;
            }
            let count = counts.get_mut(&spec.target).expect("inserted above");
            let triggered_event = events.iter().find(|e| {
                e.target == spec.target && e.kind == InterventionKind::NotifyIfForgotten
            });
            let skipped = log.skipped.contains(&spec.target);
            let performed = log.annotations.iter().any(|a| a.step == spec.target);
            let disposition = match (triggered_event.is_some(), skipped, performed) {
                (_, false, false) => {
                    count.no_chance += 1;
                    None
                }
                (true, true, _) => {
                    count.tp += 1;
                    Some(Disposition::TP)
                }
                (true, false, true) => {
                    count.fp += 1;
                    Some(Disposition::FP)
                }
                (false, true, _) => {
                    count.r#fn += 1;
                    Some(Disposition::FN)
                }
                (false, false, true) => {
                    count.tn += 1;
                    Some(Disposition::TN)
                }
            };
            if let (Some(ev), Some(d)) = (triggered_event, disposition) {
                let mut ev = ev.clone();
                ev.disposition = Some(d);
                annotated.push(ev);
            }
        }
    }
    (counts.into_values().collect(), annotated)
}

/// Human-readable rendering of a report, aligned for terminals.
pub fn render_report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("timing error by target step (seconds)\n");
    out.push_str(&format!(
        "{:>6} {:>10} {:>10} {:>10} {:>4} {:>9}\n",
        "step", "policy", "mean", "stderr", "n", "fallback"
    ));
    for c in &report.cells {
        out.push_str(&format!(
            "{:>6} {:>10} {:>10.2} {:>10.2} {:>4} {:>9}\n",
            format!("{}", c.step),
            match c.policy {
                PolicyName::Proposed => "proposed",
                PolicyName::Baseline => "baseline",
            },
            c.mean_abs_error_s,
            c.stderr_s,
            c.n,
            c.fallback_sessions
        ));
    }
    out.push_str("\noverall\n");
    for c in &report.overall {
        out.push_str(&format!(
            "{:>6} {:>10} {:>10.2} {:>10.2} {:>4}\n",
            "all",
            match c.policy {
                PolicyName::Proposed => "proposed",
                PolicyName::Baseline => "baseline",
            },
            c.mean_abs_error_s,
            c.stderr_s,
            c.n
        ));
    }
    out.push_str("\npaired t-test (proposed - baseline)\n");
    for p in &report.paired_t {
        out.push_str(&format!(
            "{:>6} t={:>8.3} p={:>8.4} n={:>4}{}\n",
            p.step.map(|s| format!("{s}")).unwrap_or_else(|| "all".into()),
            p.t_stat,
            p.p_value,
            p.n,
            if p.significant_at_05 { " *" } else { "" }
        ));
    }
    if !report.dispositions.is_empty() {
        out.push_str("\nnotify-if-forgotten dispositions\n");
        out.push_str(&format!(
            "{:>6} {:>4} {:>4} {:>4} {:>4} {:>9}\n",
            "step", "TP", "FP", "FN", "TN", "no-chance"
        ));
        for d in &report.dispositions {
            out.push_str(&format!(
                "{:>6} {:>4} {:>4} {:>4} {:>4} {:>9}\n",
                format!("{}", d.target),
                d.tp,
                d.fp,
                d.r#fn,
                d.tn,
                d.no_chance
            ));
        }
    }
    out
}

/// Plot-data rendering: per-step error bars as columnar text.
pub fn render_error_bars_csv(report: &EvalReport) -> String {
    let mut out = String::from("step,policy,mean_abs_error_s,stderr_s,n\n");
    for c in report.cells.iter().chain(&report.overall) {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            if c.step.0 == 0 { "all".to_string() } else { format!("{}", c.step) },
            match c.policy {
                PolicyName::Proposed => "proposed",
                PolicyName::Baseline => "baseline",
            },
            c.mean_abs_error_s,
            c.stderr_s,
            c.n
        ));
    }
    out
}

/// Plot-data rendering: one session's tick trace as columnar text.
pub fn render_trace_csv(ticks: &[TickRecord]) -> String {
    let mut out = String::from("t,target,e_s,h_nats,phase\n");
    for tick in ticks {
        for tt in &tick.targets {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                crate::io::format_seconds(tick.t),
                tt.target,
                tt.e.map(|v| v.to_string()).unwrap_or_default(),
                tt.h.map(|v| v.to_string()).unwrap_or_default(),
                serde_json::to_value(tt.phase)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
            ));
        }
    }
    out
}
