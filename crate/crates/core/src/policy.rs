//! Intervention timing policy.
//!
//! Per target step, a small state machine watches the smoothed forecast
//! entropy; once it drops below the step's threshold while the expected
//! remaining time is stable, a timer is armed K- seconds before (advance
//! reminder) or K+ seconds after (forgotten-step notification) the
//! anticipated moment. A timer whose expectation drifts from its predicted
//! decay during the first stability horizon is discarded; detection of the
//! target step suppresses the intervention.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{derive_seed, ForecastConfig, Forecaster};
use crate::graph::{StepId, TransitionGraph};
use crate::tracker::{init_belief, BeliefState, DetectionTracker, FrameObservation, Tracker, TrackerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    RemindInAdvance,
    NotifyIfForgotten,
}

impl InterventionKind {
    pub fn message_for(&self, step_name: &str) -> String {
        match self {
            InterventionKind::RemindInAdvance => format!("Don't forget to do {step_name}"),
            InterventionKind::NotifyIfForgotten => format!("Have you done {step_name}?"),
        }
    }

    /// Suggest a kind from the step's frame-level detectability: a
    /// notification is only reliable when the sensors can actually tell the
    /// step happened, otherwise an advance reminder is the safer default.
    pub fn suggest(detectability_f1: Option<f64>, min_f1_for_notification: f64) -> Self {
        match detectability_f1 {
            Some(f1) if f1 >= min_f1_for_notification => InterventionKind::NotifyIfForgotten,
            _ => InterventionKind::RemindInAdvance,
        }
    }
}

/// Configuration of one intervention target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub target: StepId,
    pub kind: InterventionKind,
    /// Seconds before the anticipated moment for a reminder.
    pub k_minus: f64,
    /// Seconds after the anticipated moment for a notification.
    pub k_plus: f64,
    /// Entropy threshold (nats) below which the timer may arm.
    pub h: f64,
}

impl InterventionSpec {
    pub fn check(&self) -> Result<()> {
        if self.k_minus < 0.0 || self.k_plus < 0.0 {
            return Err(Error::config("policy", "offsets must be non-negative"));
        }
        if !(self.h > 0.0) {
            return Err(Error::config("policy", "entropy threshold must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Stability horizon p: lookback for arming, and the cancellable prefix
    /// of a running timer.
    pub stability_horizon_s: f64,
    /// Stability tolerance e on expected-remaining-time drift.
    pub stability_tolerance_s: f64,
    /// Moving-average width w applied to the entropy series.
    pub entropy_smooth_s: f64,
    /// Policy evaluation period.
    pub tick_s: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            stability_horizon_s: 10.0,
            stability_tolerance_s: 30.0,
            entropy_smooth_s: 2.0,
            tick_s: 0.2,
        }
    }
}

impl PolicyConfig {
    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("stability_horizon_s", self.stability_horizon_s),
            ("stability_tolerance_s", self.stability_tolerance_s),
            ("entropy_smooth_s", self.entropy_smooth_s),
            ("tick_s", self.tick_s),
        ] {
            if !(v > 0.0) {
                return Err(Error::config("policy", format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Watching,
    TimerPendingStability,
    TimerRunning,
    Fired,
    Suppressed,
    Cancelled,
}

impl Phase {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Phase::Fired | Phase::Suppressed)
    }

    fn timer_active(&self) -> bool {
        matches!(self, Phase::TimerPendingStability | Phase::TimerRunning)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmingOutcome {
    Pending,
    Cancelled,
    Fired,
    Suppressed,
}

/// One arming of the timer, kept for evaluation: the timing metric scores
/// the first arming that survives its stability window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arming {
    pub armed_at: f64,
    pub armed_estimate_s: f64,
    pub fires_at: f64,
    pub outcome: ArmingOutcome,
    pub survived_stability: bool,
}

/// Timer state machine for one (session, spec) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyState {
    pub phase: Phase,
    pub timer_started_at: Option<f64>,
    pub fires_at: Option<f64>,
    pub armed_estimate_s: Option<f64>,
    pub armings: Vec<Arming>,
    pub cancellations: u32,
    expectation_window: VecDeque<(f64, f64)>,
    last_t: Option<f64>,
}

impl Default for PolicyState {
    fn default() -> Self {
        Self::new()
    }
}

impl PolicyState {
    pub fn new() -> Self {
        Self {
            phase: Phase::Watching,
            timer_started_at: None,
            fires_at: None,
            armed_estimate_s: None,
            armings: Vec::new(),
            cancellations: 0,
            expectation_window: VecDeque::new(),
            last_t: None,
        }
    }

    /// First arming not discarded by the stability check, if any.
    pub fn scored_arming(&self) -> Option<&Arming> {
        self.armings.iter().find(|a| a.survived_stability)
    }

    fn clear_timer(&mut self) {
        self.timer_started_at = None;
        self.fires_at = None;
        self.armed_estimate_s = None;
    }

    fn current_arming_mut(&mut self) -> &mut Arming {
        self.armings.last_mut().expect("timer phases always have an arming")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Disposition {
    TP,
    FP,
    FN,
    TN,
}

/// One fired intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionEvent {
    pub t: f64,
    pub target: StepId,
    pub kind: InterventionKind,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disposition: Option<Disposition>,
}

/// Advance one policy tick.
///
/// `expectation` and `entropy_smoothed` come from the forecaster (entropy
/// already w-smoothed); `detection` is whether the target has completed a
/// detection window at any point so far in the session.
#[allow(clippy::too_many_arguments)]
pub fn step_policy(
    mut state: PolicyState,
    t: f64,
    expectation: f64,
    entropy_smoothed: f64,
    detection: bool,
    spec: &InterventionSpec,
    target_name: &str,
    cfg: &PolicyConfig,
) -> Result<(PolicyState, Option<InterventionEvent>)> {
    spec.check()?;
    cfg.check()?;
    if let Some(last) = state.last_t {
        if t <= last {
            return Err(Error::Policy(format!("non-monotonic policy tick {t} after {last}")));
        }
    }
    state.last_t = Some(t);

    // Lookback window of expectations for the arming stability test.
    state.expectation_window.push_back((t, expectation));
    while state
        .expectation_window
        .front()
        .is_some_and(|(t0, _)| *t0 < t - cfg.stability_horizon_s - 1e-9)
    {
        state.expectation_window.pop_front();
    }

    let fire = |state: &mut PolicyState, t: f64| -> InterventionEvent {
        state.phase = Phase::Fired;
        let a = state.current_arming_mut();
        a.outcome = ArmingOutcome::Fired;
        a.survived_stability = true;
        InterventionEvent {
            t,
            target: spec.target,
            kind: spec.kind,
            message: spec.kind.message_for(target_name),
            disposition: None,
        }
    };

    match state.phase {
        Phase::Fired | Phase::Suppressed => Ok((state, None)),

        Phase::Watching | Phase::Cancelled => {
            if detection {
                // Target performed before any timer armed: nothing to remind
                // or notify about for this session.
                state.phase = Phase::Suppressed;
                return Ok((state, None));
            }
            let stable = {
                let lo = state
                    .expectation_window
                    .iter()
                    .map(|(_, e)| *e)
                    .fold(f64::INFINITY, f64::min);
                let hi = state
                    .expectation_window
                    .iter()
                    .map(|(_, e)| *e)
                    .fold(f64::NEG_INFINITY, f64::max);
                hi - lo <= cfg.stability_tolerance_s
            };
            if entropy_smoothed < spec.h && stable {
                let fires_at = match spec.kind {
                    InterventionKind::RemindInAdvance => t + (expectation - spec.k_minus).max(0.0),
                    InterventionKind::NotifyIfForgotten => t + expectation + spec.k_plus,
                };
                state.timer_started_at = Some(t);
                state.armed_estimate_s = Some(expectation);
                state.fires_at = Some(fires_at);
                state.armings.push(Arming {
                    armed_at: t,
                    armed_estimate_s: expectation,
                    fires_at,
                    outcome: ArmingOutcome::Pending,
                    survived_stability: false,
                });
                state.phase = Phase::TimerPendingStability;
                if fires_at <= t {
                    // Target imminent: a late reminder beats none.
                    let ev = fire(&mut state, t);
                    state.clear_timer();
                    return Ok((state, Some(ev)));
                }
            } else {
                state.phase = Phase::Watching;
            }
            Ok((state, None))
        }

        Phase::TimerPendingStability | Phase::TimerRunning => {
            let started = state.timer_started_at.expect("timer phase has a start");
            let armed = state.armed_estimate_s.expect("timer phase has an estimate");
            let fires_at = state.fires_at.expect("timer phase has a deadline");

            if detection {
                state.phase = Phase::Suppressed;
                let a = state.current_arming_mut();
                a.outcome = ArmingOutcome::Suppressed;
                a.survived_stability = true;
                return Ok((state, None));
            }

            let in_stability_window = t - started <= cfg.stability_horizon_s + 1e-9;
            if state.phase == Phase::TimerPendingStability && in_stability_window {
                // The expectation should decay linearly while the timer runs;
                // a larger deviation means the forecast was premature.
                let predicted = (armed - (t - started)).max(0.0);
                if (expectation - predicted).abs() > cfg.stability_tolerance_s {
                    state.phase = Phase::Cancelled;
                    state.cancellations += 1;
                    state.current_arming_mut().outcome = ArmingOutcome::Cancelled;
                    state.clear_timer();
                    return Ok((state, None));
                }
            }

            if t + 1e-9 >= fires_at {
                let ev = fire(&mut state, t);
                state.clear_timer();
                return Ok((state, Some(ev)));
            }

            if state.phase == Phase::TimerPendingStability && !in_stability_window {
                state.phase = Phase::TimerRunning;
                state.current_arming_mut().survived_stability = true;
            }
            Ok((state, None))
        }
    }
}

/// Timer start for the sensor-free baseline: the expectation at session
/// start, shifted by the intervention offset.
pub fn baseline_trigger(
    graph: &TransitionGraph,
    target: StepId,
    spec: &InterventionSpec,
) -> Result<f64> {
    let belief = init_belief(graph);
    let e0 = Forecaster::new(graph, ForecastConfig::default())?
        .exact_expected_remaining_time(&belief, target)?;
    Ok(match spec.kind {
        InterventionKind::RemindInAdvance => (e0 - spec.k_minus).max(0.0),
        InterventionKind::NotifyIfForgotten => e0 + spec.k_plus,
    })
}

/// Engine-wide configuration bundle.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EngineConfig {
    pub tracker: TrackerConfig,
    pub forecast: ForecastConfig,
    pub policy: PolicyConfig,
    /// Keep per-tick remaining-time histograms for plotting.
    #[serde(default)]
    pub dump_distributions: bool,
}

/// One retained remaining-time distribution snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionRecord {
    pub t: f64,
    pub target: StepId,
    pub expectation_s: f64,
    pub entropy_nats: f64,
    pub reachable_mass: f64,
    /// (bin index, sample count) pairs over bin_width_s-wide bins.
    pub histogram: Vec<(i64, usize)>,
}

/// Per-target snapshot at one policy tick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TickTarget {
    pub target: StepId,
    /// Expected remaining seconds; absent when the target is unreachable.
    pub e: Option<f64>,
    /// Smoothed entropy in nats; absent when the target is unreachable.
    pub h: Option<f64>,
    pub phase: Phase,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub targets: Vec<TickTarget>,
}

/// Everything a session run produces.
#[derive(Debug, Clone)]
pub struct SessionRun {
    pub events: Vec<InterventionEvent>,
    pub ticks: Vec<TickRecord>,
    pub policies: Vec<(InterventionSpec, PolicyState)>,
    pub final_belief: Option<BeliefState>,
    pub distributions: Vec<DistributionRecord>,
}

struct TargetLane {
    spec: InterventionSpec,
    name: String,
    index: usize,
    state: PolicyState,
    entropy_window: VecDeque<f64>,
    last_expectation: Option<f64>,
    last_entropy_smoothed: Option<f64>,
}

/// Drives tracker, forecaster, and one policy lane per spec over a frame
/// stream. The same engine backs offline runs and the streaming service.
pub struct SessionEngine<'g> {
    graph: &'g TransitionGraph,
    tracker: Tracker,
    forecaster: Forecaster<'g>,
    detection: DetectionTracker,
    cfg: EngineConfig,
    lanes: Vec<TargetLane>,
    belief: BeliefState,
    frame_index: u64,
    ticks_every: u64,
    entropy_window_len: usize,
    events: Vec<InterventionEvent>,
    ticks: Vec<TickRecord>,
    distributions: Vec<DistributionRecord>,
    finished: bool,
}

impl<'g> SessionEngine<'g> {
    pub fn new(
        graph: &'g TransitionGraph,
        specs: &[InterventionSpec],
        cfg: EngineConfig,
    ) -> Result<Self> {
        cfg.policy.check()?;
        let mut seen = std::collections::BTreeSet::new();
        let mut lanes = Vec::new();
        for spec in specs {
            spec.check()?;
            if !seen.insert(spec.target) {
                return Err(Error::Policy(format!("duplicate intervention target {}", spec.target)));
            }
            let index = graph
                .index_of(spec.target)
                .ok_or(Error::UnknownStep(spec.target))?;
            lanes.push(TargetLane {
                spec: *spec,
                name: graph.steps[index].name.clone(),
                index,
                state: PolicyState::new(),
                entropy_window: VecDeque::new(),
                last_expectation: None,
                last_entropy_smoothed: None,
            });
        }
        let tracker = Tracker::new(graph, cfg.tracker.clone())?;
        let forecaster = Forecaster::new(graph, cfg.forecast.clone())?;
        let ticks_every = ((cfg.policy.tick_s / cfg.tracker.frame_length_s).round() as u64).max(1);
        let entropy_window_len =
            ((cfg.policy.entropy_smooth_s / cfg.policy.tick_s).round() as usize).max(1);
        Ok(Self {
            graph,
            detection: DetectionTracker::new(graph.n_steps(), &cfg.tracker),
            tracker,
            forecaster,
            cfg,
            lanes,
            belief: init_belief(graph),
            frame_index: 0,
            ticks_every,
            entropy_window_len,
            events: Vec::new(),
            ticks: Vec::new(),
            distributions: Vec::new(),
            finished: false,
        })
    }

    pub fn belief(&self) -> &BeliefState {
        &self.belief
    }

    pub fn ticks(&self) -> &[TickRecord] {
        &self.ticks
    }

    pub fn events(&self) -> &[InterventionEvent] {
        &self.events
    }

    /// Feed one frame; returns any interventions fired at this tick.
    ///
    /// A forward timestamp gap (sensors muted while an intervention plays) is
    /// bridged with observation-free frames: uniform emissions reduce to pure
    /// transition dynamics, and timers keep counting down.
    pub fn push_frame(&mut self, obs: &FrameObservation) -> Result<Vec<InterventionEvent>> {
        if self.finished {
            return Err(Error::Policy("session already finished".into()));
        }
        let fl = self.cfg.tracker.frame_length_s;
        let mut fired = Vec::new();
        let mut guard = 0u64;
        while obs.t > self.belief.t + 1.5 * fl {
            guard += 1;
            if guard > (3600.0 / fl) as u64 {
                return Err(Error::Policy(format!(
                    "timestamp gap before t={} exceeds an hour",
                    obs.t
                )));
            }
            let filler = FrameObservation {
                t: self.belief.t + fl,
                probs: vec![1.0 / self.graph.n_steps() as f64; self.graph.n_steps()],
                has_background: false,
            };
            fired.extend(self.push_one(&filler)?);
        }
        fired.extend(self.push_one(obs)?);
        Ok(fired)
    }

    fn push_one(&mut self, obs: &FrameObservation) -> Result<Vec<InterventionEvent>> {
        self.belief = self.tracker.update(&self.belief, obs)?;
        self.detection.push(&self.belief);
        self.frame_index += 1;
        if self.frame_index.is_multiple_of(self.ticks_every) {
            self.run_tick(self.belief.t)
        } else {
            Ok(Vec::new())
        }
    }

    fn run_tick(&mut self, t: f64) -> Result<Vec<InterventionEvent>> {
        let tick_index = self.frame_index / self.ticks_every;
        let mut fired = Vec::new();
        let mut records = Vec::new();
        for lane in &mut self.lanes {
            let detection = self.detection.is_detected(lane.index);
            let forecast = if lane.state.phase.is_terminal() {
                // No further decisions for this lane; skip the sampling cost.
                None
            } else {
                let seed = derive_seed(&[
                    self.cfg.forecast.seed,
                    tick_index,
                    u64::from(lane.spec.target.0),
                ]);
                self.forecaster.sample_with_seed(&self.belief, lane.spec.target, seed).ok()
            };

            match forecast {
                Some(dist) => {
                    if self.cfg.dump_distributions {
                        self.distributions.push(DistributionRecord {
                            t,
                            target: lane.spec.target,
                            expectation_s: dist.expectation_s,
                            entropy_nats: dist.entropy_nats,
                            reachable_mass: dist.reachable_mass,
                            histogram: dist.histogram().into_iter().collect(),
                        });
                    }
                    lane.entropy_window.push_back(dist.entropy_nats);
                    if lane.entropy_window.len() > self.entropy_window_len {
                        lane.entropy_window.pop_front();
                    }
                    let h_smoothed = lane.entropy_window.iter().sum::<f64>()
                        / lane.entropy_window.len() as f64;
                    lane.last_expectation = Some(dist.expectation_s);
                    lane.last_entropy_smoothed = Some(h_smoothed);

                    let state = std::mem::take(&mut lane.state);
                    let (state, event) = step_policy(
                        state,
                        t,
                        dist.expectation_s,
                        h_smoothed,
                        detection,
                        &lane.spec,
                        &lane.name,
                        &self.cfg.policy,
                    )?;
                    lane.state = state;
                    if let Some(ev) = event {
                        fired.push(ev.clone());
                        self.events.push(ev);
                    }
                    records.push(TickTarget {
                        target: lane.spec.target,
                        e: lane.last_expectation,
                        h: lane.last_entropy_smoothed,
                        phase: lane.state.phase,
                    });
                }
                None => {
                    // Terminal lane, or target currently unreachable (the
                    // expectation is undefined, typically because the belief
                    // moved past the target). An armed timer keeps counting
                    // down on its decayed prediction; a watching lane cannot
                    // arm, but detection may still suppress it.
                    if lane.state.phase.timer_active() {
                        let armed = lane.state.armed_estimate_s.unwrap_or(0.0);
                        let started = lane.state.timer_started_at.unwrap_or(t);
                        let predicted = (armed - (t - started)).max(0.0);
                        let h = lane.last_entropy_smoothed.unwrap_or(0.0);
                        let state = std::mem::take(&mut lane.state);
                        let (state, event) = step_policy(
                            state,
                            t,
                            predicted,
                            h,
                            detection,
                            &lane.spec,
                            &lane.name,
                            &self.cfg.policy,
                        )?;
                        lane.state = state;
                        if let Some(ev) = event {
                            fired.push(ev.clone());
                            self.events.push(ev);
                        }
                    } else if detection && !lane.state.phase.is_terminal() {
                        lane.state.phase = Phase::Suppressed;
                    }
                    records.push(TickTarget {
                        target: lane.spec.target,
                        e: None,
                        h: None,
                        phase: lane.state.phase,
                    });
                }
            }
        }
        self.ticks.push(TickRecord { t, targets: records });
        Ok(fired)
    }

    /// Run down still-armed timers after the stream ends. Each pending lane
    /// gets up to `offset + mean(target)` extra seconds, mirroring how a
    /// session is kept open long enough to judge a final-step notification.
    pub fn finish(&mut self) -> Result<Vec<InterventionEvent>> {
        if self.finished {
            return Ok(Vec::new());
        }
        self.finished = true;
        let t_end = self.belief.t;
        let tick = self.cfg.policy.tick_s;
        // Each armed lane may run down for offset + mean(target) extra
        // seconds; a deadline beyond that lapses silently.
        let mut allowed = vec![f64::NEG_INFINITY; self.lanes.len()];
        let mut horizon = t_end;
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.state.phase.timer_active() {
                let offset = match lane.spec.kind {
                    InterventionKind::RemindInAdvance => lane.spec.k_minus,
                    InterventionKind::NotifyIfForgotten => lane.spec.k_plus,
                };
                let mean = self.graph.steps[lane.index].mean_duration_s;
                allowed[i] = t_end + offset + mean;
                if let Some(f) = lane.state.fires_at {
                    // Round the deadline up to the tick that reaches it.
                    let deadline = t_end + ((f - t_end) / tick).ceil().max(0.0) * tick;
                    horizon = horizon.max(allowed[i].min(deadline));
                }
            }
        }

        let mut fired = Vec::new();
        let mut t = t_end;
        while t + 1e-9 < horizon {
            t = crate::io::round_us(t + tick);
            let mut any_active = false;
            for (i, lane) in self.lanes.iter_mut().enumerate() {
                if !lane.state.phase.timer_active() || t > allowed[i] + 1e-9 {
                    continue;
                }
                any_active = true;
                let detection = self.detection.is_detected(lane.index);
                // No fresh observations: feed the decayed prediction so the
                // stability check cannot spuriously cancel.
                let armed = lane.state.armed_estimate_s.unwrap_or(0.0);
                let started = lane.state.timer_started_at.unwrap_or(t_end);
                let predicted = (armed - (t - started)).max(0.0);
                let h = lane.last_entropy_smoothed.unwrap_or(0.0);
                let state = std::mem::take(&mut lane.state);
                let (state, event) =
                    step_policy(state, t, predicted, h, detection, &lane.spec, &lane.name, &self.cfg.policy)?;
                lane.state = state;
                if let Some(ev) = event {
                    fired.push(ev.clone());
                    self.events.push(ev);
                }
            }
            if !any_active {
                break;
            }
        }
        Ok(fired)
    }

    pub fn into_run(self) -> SessionRun {
        SessionRun {
            events: self.events,
            ticks: self.ticks,
            policies: self.lanes.into_iter().map(|l| (l.spec, l.state)).collect(),
            final_belief: Some(self.belief),
            distributions: self.distributions,
        }
    }
}

/// Offline end-to-end run over a recorded frame stream.
pub fn run_session(
    graph: &TransitionGraph,
    specs: &[InterventionSpec],
    frames: &[FrameObservation],
    cfg: &EngineConfig,
) -> Result<SessionRun> {
    let mut engine = SessionEngine::new(graph, specs, cfg.clone())?;
    for obs in frames {
        engine.push_frame(obs)?;
    }
    engine.finish()?;
    Ok(engine.into_run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fork_graph, linear_graph};

    fn remind(target: u32, k_minus: f64) -> InterventionSpec {
        InterventionSpec {
            target: StepId(target),
            kind: InterventionKind::RemindInAdvance,
            k_minus,
            k_plus: 15.0,
            h: 3.0,
        }
    }

    fn notify(target: u32, k_plus: f64) -> InterventionSpec {
        InterventionSpec {
            target: StepId(target),
            kind: InterventionKind::NotifyIfForgotten,
            k_minus: 15.0,
            k_plus,
            h: 3.0,
        }
    }

    /// Drive a lone FSM over a synthetic (t, E, H, detection) series.
    fn drive(
        spec: &InterventionSpec,
        cfg: &PolicyConfig,
        series: impl Iterator<Item = (f64, f64, f64, bool)>,
    ) -> (PolicyState, Vec<InterventionEvent>) {
        let mut state = PolicyState::new();
        let mut events = Vec::new();
        for (t, e, h, det) in series {
            let (next, ev) = step_policy(state, t, e, h, det, spec, "the step", cfg).unwrap();
            state = next;
            if let Some(ev) = ev {
                events.push(ev);
            }
        }
        (state, events)
    }

    #[test]
    fn reminder_fires_k_minus_before_the_estimate() {
        let spec = remind(3, 15.0);
        let cfg = PolicyConfig { tick_s: 1.0, ..Default::default() };
        // Constant E = 40 with low entropy: arms at the first tick (t = 1),
        // fires 25 s later.
        let series = (1..=60).map(|k| {
            let t = k as f64;
            (t, (41.0 - t).max(0.0), 1.0, false)
        });
        let (state, events) = drive(&spec, &cfg, series);
        assert_eq!(events.len(), 1);
        let armed = state.armings.first().unwrap();
        assert!((armed.armed_at - 1.0).abs() < 1e-9);
        assert!((armed.armed_estimate_s - 40.0).abs() < 1e-9);
        assert!((events[0].t - (armed.armed_at + 40.0 - 15.0)).abs() < 1e-9);
        assert_eq!(state.phase, Phase::Fired);
        assert_eq!(events[0].message, "Don't forget to do the step");
    }

    #[test]
    fn notification_is_suppressed_by_detection() {
        let spec = notify(3, 15.0);
        let cfg = PolicyConfig { tick_s: 1.0, ..Default::default() };
        // Armed at t=1 with E=25; the step is detected 10 s later.
        let series = (1..=60).map(|k| {
            let t = k as f64;
            (t, (26.0 - t).max(0.0), 1.0, t >= 11.0)
        });
        let (state, events) = drive(&spec, &cfg, series);
        assert!(events.is_empty());
        assert_eq!(state.phase, Phase::Suppressed);
        assert_eq!(state.armings[0].outcome, ArmingOutcome::Suppressed);
    }

    #[test]
    fn notification_fires_when_never_detected() {
        let spec = notify(3, 15.0);
        let cfg = PolicyConfig { tick_s: 1.0, ..Default::default() };
        let series = (1..=60).map(|k| {
            let t = k as f64;
            (t, (26.0 - t).max(0.0), 1.0, false)
        });
        let (state, events) = drive(&spec, &cfg, series);
        assert_eq!(events.len(), 1);
        // Armed at t=1, E=25, K+ = 15: fires at 41.
        assert!((events[0].t - 41.0).abs() < 1e-9);
        assert_eq!(events[0].message, "Have you done the step?");
        assert_eq!(state.phase, Phase::Fired);
    }

    #[test]
    fn imminent_target_fires_immediately() {
        let spec = remind(3, 15.0);
        let cfg = PolicyConfig { tick_s: 1.0, ..Default::default() };
        let series = (1..=5).map(|k| (k as f64, 10.0, 1.0, false));
        let (state, events) = drive(&spec, &cfg, series);
        assert_eq!(events.len(), 1);
        assert!((events[0].t - 1.0).abs() < 1e-9, "E < K- floors the timer to now");
        assert!(state.armings[0].fires_at >= state.armings[0].armed_at);
    }

    #[test]
    fn drifting_expectation_cancels_then_rearms() {
        let spec = remind(3, 5.0);
        let cfg = PolicyConfig { tick_s: 1.0, ..Default::default() };
        // Arms at t=1 with E=60. At t=4 the expectation jumps by +40 (beyond
        // e=30), cancelling the timer; it re-arms once E is stable again.
        let series = (1..=115).map(|k| {
            let t = k as f64;
            let e = if t < 4.0 {
                61.0 - t
            } else if t < 20.0 {
                100.0
            } else {
                (120.0 - t).max(0.0)
            };
            (t, e, 1.0, false)
        });
        let (state, events) = drive(&spec, &cfg, series);
        assert_eq!(state.cancellations, 1);
        assert!(state.armings.len() >= 2);
        assert_eq!(state.armings[0].outcome, ArmingOutcome::Cancelled);
        assert!(!state.armings[0].survived_stability);
        assert_eq!(events.len(), 1, "the second arming fires");
    }

    #[test]
    fn detection_before_arming_suppresses_the_spec() {
        let spec = notify(3, 15.0);
        let cfg = PolicyConfig { tick_s: 1.0, ..Default::default() };
        let series = (1..=30).map(|k| (k as f64, 100.0, 10.0, true));
        let (state, events) = drive(&spec, &cfg, series);
        assert!(events.is_empty());
        assert_eq!(state.phase, Phase::Suppressed);
        assert!(state.armings.is_empty());
    }

    #[test]
    fn unstable_expectation_never_survives_arming() {
        let spec = remind(3, 5.0);
        let cfg = PolicyConfig { tick_s: 1.0, ..Default::default() };
        // Entropy is low but E oscillates by +/-40 within the lookback. The
        // very first tick may arm on its one-sample window, but the swing
        // cancels it immediately and nothing re-arms or fires.
        let series = (1..=40).map(|k| {
            let t = k as f64;
            (t, if k % 2 == 0 { 100.0 } else { 20.0 }, 1.0, false)
        });
        let (state, events) = drive(&spec, &cfg, series);
        assert!(events.is_empty());
        assert!(state.scored_arming().is_none());
        assert_eq!(state.phase, Phase::Watching);
    }

    #[test]
    fn policy_is_deterministic_over_a_series() {
        let spec = notify(3, 15.0);
        let cfg = PolicyConfig { tick_s: 1.0, ..Default::default() };
        let make = || {
            (1..=50).map(|k| {
                let t = k as f64;
                let e = (60.0 - t).max(0.0) + if k % 7 == 0 { 3.0 } else { 0.0 };
                (t, e, if t < 10.0 { 4.0 } else { 2.0 }, t >= 45.0)
            })
        };
        let (s1, e1) = drive(&spec, &cfg, make());
        let (s2, e2) = drive(&spec, &cfg, make());
        assert_eq!(e1, e2);
        assert_eq!(s1.armings, s2.armings);
    }

    #[test]
    fn non_monotonic_ticks_error() {
        let spec = remind(3, 5.0);
        let cfg = PolicyConfig::default();
        let state = PolicyState::new();
        let (state, _) = step_policy(state, 1.0, 50.0, 1.0, false, &spec, "x", &cfg).unwrap();
        assert!(step_policy(state, 1.0, 50.0, 1.0, false, &spec, "x", &cfg).is_err());
    }

    #[test]
    fn suggestion_follows_detectability() {
        assert_eq!(
            InterventionKind::suggest(Some(0.83), 0.6),
            InterventionKind::NotifyIfForgotten
        );
        assert_eq!(InterventionKind::suggest(Some(0.28), 0.6), InterventionKind::RemindInAdvance);
        assert_eq!(InterventionKind::suggest(None, 0.6), InterventionKind::RemindInAdvance);
    }

    #[test]
    fn baseline_trigger_values() {
        let chain = linear_graph(&[10.0, 20.0, 5.0]);
        let spec = remind(3, 0.0);
        assert!((baseline_trigger(&chain, StepId(3), &spec).unwrap() - 30.0).abs() < 1e-9);

        // Fork with 10 s / 20 s branches: the baseline lands on the mean of
        // the two and is wrong by 5 s whichever branch the user takes.
        let fork = fork_graph(10.0, 20.0);
        let spec4 = remind(4, 0.0);
        let fires = baseline_trigger(&fork, StepId(4), &spec4).unwrap();
        assert!((fires - 20.0).abs() < 1e-9, "5 s start + 15 s expected branch, got {fires}");
        let notify4 = notify(4, 15.0);
        let fires_n = baseline_trigger(&fork, StepId(4), &notify4).unwrap();
        assert!((fires_n - 35.0).abs() < 1e-9);
    }

    #[test]
    fn empty_spec_set_still_produces_tick_log() {
        let g = linear_graph(&[10.0, 10.0]);
        let n = g.n_steps();
        let frames: Vec<FrameObservation> = (1..=100)
            .map(|k| {
                let idx = if k <= 50 { 0 } else { 1 };
                let mut probs = vec![0.0; n];
                probs[idx] = 1.0;
                FrameObservation { t: k as f64 * 0.2, probs, has_background: false }
            })
            .collect();
        let run = run_session(&g, &[], &frames, &EngineConfig::default()).unwrap();
        assert!(run.events.is_empty());
        assert_eq!(run.ticks.len(), 100);
        assert!(run.ticks.iter().all(|t| t.targets.is_empty()));
    }

    #[test]
    fn noiseless_linear_session_fires_one_reminder_before_the_step() {
        let g = linear_graph(&[20.0, 20.0, 20.0, 20.0]);
        let n = g.n_steps();
        let mut frames = Vec::new();
        for k in 1..=400u32 {
            let idx = ((k - 1) / 100) as usize;
            let mut probs = vec![0.0; n];
            probs[idx] = 1.0;
            frames.push(FrameObservation { t: f64::from(k) * 0.2, probs, has_background: false });
        }
        let spec = remind(4, 15.0);
        let cfg = EngineConfig {
            forecast: ForecastConfig { seed: 11, ..Default::default() },
            ..Default::default()
        };
        let run = run_session(&g, &[spec], &frames, &cfg).unwrap();
        assert_eq!(run.events.len(), 1, "exactly one reminder");
        let ev = &run.events[0];
        let actual_start = 60.0;
        assert!(ev.t < actual_start, "fires before the step starts");
        assert!(
            (actual_start - ev.t - 15.0).abs() <= 1.0,
            "fires 15 +/- 1 s early, got {:.1}",
            actual_start - ev.t
        );
    }
}
