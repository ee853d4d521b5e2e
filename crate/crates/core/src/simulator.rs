//! Synthetic session generation.
//!
//! A first-order Markov walk over the transition graph produces ground-truth
//! step sequences and durations; a per-step confusion row plus Dirichlet
//! jitter produces the noisy frame-level class probabilities. Skipped steps
//! consume no time and emit no frames, but the walk transitions onward as if
//! the step had been performed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::derive_seed;
use crate::io::round_us;
use crate::graph::{Annotation, SessionLog, StepId, TransitionGraph};
use crate::tracker::FrameObservation;

const STREAM_WALK: u64 = 1;
const STREAM_OBS: u64 = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub graph: TransitionGraph,
    /// Per-step probability of intentionally skipping the step.
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub skip: std::collections::BTreeMap<u32, f64>,
    /// Row-stochastic confusion matrix: row = true step, column = observed
    /// class. Rows may carry one extra trailing column for a background class.
    pub confusion: Vec<Vec<f64>>,
    /// Multiplier on each step's duration std.
    #[serde(default = "default_jitter")]
    pub duration_jitter: f64,
    /// Dirichlet concentration for frame-to-frame observation variation.
    #[serde(default = "default_kappa")]
    pub dirichlet_kappa: f64,
    pub seed: u64,
    #[serde(default = "default_max_session")]
    pub max_session_s: f64,
    #[serde(default = "default_frame_length")]
    pub frame_length_s: f64,
}

fn default_jitter() -> f64 {
    1.0
}
fn default_kappa() -> f64 {
    50.0
}
fn default_max_session() -> f64 {
    3600.0
}
fn default_frame_length() -> f64 {
    0.2
}

impl Scenario {
    /// Identity-observation scenario: frames exactly reveal the true step.
    pub fn noiseless(graph: TransitionGraph, seed: u64) -> Self {
        let n = graph.n_steps();
        let mut confusion = vec![vec![0.0; n]; n];
        for (i, row) in confusion.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            graph,
            skip: Default::default(),
            confusion,
            duration_jitter: 1.0,
            dirichlet_kappa: 50.0,
            seed,
            max_session_s: 3600.0,
            frame_length_s: 0.2,
        }
    }

    /// Confusion with diagonal `diag` and the remaining mass concentrated on
    /// the next step (wrapping), the way adjacent steps confuse a classifier.
    pub fn with_adjacent_confusion(graph: TransitionGraph, diag: f64, seed: u64) -> Self {
        let n = graph.n_steps();
        let mut confusion = vec![vec![0.0; n]; n];
        for (i, row) in confusion.iter_mut().enumerate() {
            row[i] = diag;
            row[(i + 1) % n] += 1.0 - diag;
        }
        Self { confusion, ..Self::noiseless(graph, seed) }
    }

    pub fn check(&self) -> Result<()> {
        let n = self.graph.n_steps();
        if self.confusion.len() != n {
            return Err(Error::config(
                "simulator",
                format!("confusion has {} rows, graph has {n} steps", self.confusion.len()),
            ));
        }
        let width = self.confusion.first().map(Vec::len).unwrap_or(0);
        if width != n && width != n + 1 {
            return Err(Error::config(
                "simulator",
                format!("confusion rows must have {n} or {} columns, got {width}", n + 1),
            ));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            if row.len() != width {
                return Err(Error::config("simulator", format!("ragged confusion row {i}")));
            }
            if row.iter().any(|p| *p < 0.0) {
                return Err(Error::config("simulator", format!("negative entry in confusion row {i}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    "simulator",
                    format!("confusion row {i} sums to {sum}, expected 1"),
                ));
            }
        }
        for (id, p) in &self.skip {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::config("simulator", format!("skip probability for s{id} outside [0, 1]")));
            }
        }
        if self.duration_jitter < 0.0 || !(self.dirichlet_kappa > 0.0) {
            return Err(Error::config("simulator", "jitter must be >= 0 and kappa > 0"));
        }
        if !(self.frame_length_s > 0.0) || !(self.max_session_s > 0.0) {
            return Err(Error::config("simulator", "frame length and max session must be positive"));
        }
        Ok(())
    }

    pub fn has_background(&self) -> bool {
        self.confusion
            .first()
            .map(|r| r.len() == self.graph.n_steps() + 1)
            .unwrap_or(false)
    }
}

/// Ground truth plus the noisy frame stream generated from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSession {
    pub log: SessionLog,
    pub frames: Vec<FrameObservation>,
}

impl SimulatedSession {
    /// True step per frame, aligned with `frames`.
    pub fn frame_truth(&self) -> Vec<StepId> {
        let mut truth = Vec::with_capacity(self.frames.len());
        let mut ann = self.log.annotations.iter();
        let mut cur = ann.next();
        for f in &self.frames {
            while let Some(a) = cur {
                if f.t <= a.end_s + 1e-9 {
                    truth.push(a.step);
                    break;
                }
                cur = ann.next();
            }
        }
        truth
    }
}

fn sample_truncated_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64, floor: f64) -> f64 {
    if std <= 0.0 {
        return mean.max(floor);
    }
    let normal = Normal::new(mean, std).expect("finite duration stats");
    for _ in 0..64 {
        let d = normal.sample(rng);
        if d >= floor {
            return d;
        }
    }
    floor
}

fn draw_categorical(rng: &mut ChaCha8Rng, weights: impl Iterator<Item = f64>, len: usize) -> usize {
    let mut u: f64 = rng.random();
    let mut last = len.saturating_sub(1);
    for (i, w) in weights.enumerate() {
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}

/// One noisy observation for a frame of the given true step: a Dirichlet
/// draw centered on the step's confusion row.
pub fn emit_observation(
    scenario: &Scenario,
    session_index: u64,
    frame_index: u64,
    true_step_index: usize,
) -> FrameObservation {
    let row = &scenario.confusion[true_step_index];
    let t = round_us(frame_index as f64 * scenario.frame_length_s);
    let has_background = scenario.has_background();
    if !scenario.dirichlet_kappa.is_finite() {
        return FrameObservation { t, probs: row.clone(), has_background };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        scenario.seed,
        STREAM_OBS,
        session_index,
        frame_index,
    ]));
    let mut probs: Vec<f64> = row
        .iter()
        .map(|p| {
            let shape = scenario.dirichlet_kappa * p;
            if shape > 0.0 {
                Gamma::new(shape, 1.0).expect("positive shape").sample(&mut rng)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        for p in &mut probs {
            *p /= total;
        }
    } else {
        probs = row.clone();
    }
    FrameObservation { t, probs, has_background }
}

/// Generate one session: Markov walk, skip injection, duration draws
/// quantized to whole frames, and the per-frame observation stream.
pub fn simulate_session(scenario: &Scenario, session_index: u64) -> Result<SimulatedSession> {
    scenario.check()?;
    let graph = &scenario.graph;
    let fl = scenario.frame_length_s;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        scenario.seed,
        STREAM_WALK,
        session_index,
    ]));

    let mut cur = {
        let weights: Vec<f64> = graph.initial.iter().map(|m| m.prob).collect();
        let k = draw_categorical(&mut rng, weights.iter().copied(), weights.len());
        graph
            .index_of(graph.initial[k].step)
            .ok_or_else(|| Error::InvalidGraph("initial step missing".into()))?
    };

    let adj = graph.adjacency();
    let mut annotations = Vec::new();
    let mut skipped = Vec::new();
    let mut cursor = 0.0f64;
    let mut frame_count = 0u64;
    let mut frames = Vec::new();

    loop {
        let step = &graph.steps[cur];
        let skip_p = scenario.skip.get(&step.id.0).copied().unwrap_or(0.0);
        let skip_roll: f64 = rng.random();
        if skip_roll < skip_p {
            skipped.push(step.id);
        } else {
            let dur = sample_truncated_normal(
                &mut rng,
                step.mean_duration_s,
                step.std_duration_s * scenario.duration_jitter,
                fl,
            );
            let n_frames = ((dur / fl).round() as u64).max(1);
            let quantized = n_frames as f64 * fl;
            annotations.push(Annotation {
                step: step.id,
                start_s: round_us(cursor),
                end_s: round_us(cursor + quantized),
            });
            for _ in 0..n_frames {
                frame_count += 1;
                frames.push(emit_observation(scenario, session_index, frame_count, cur));
            }
            cursor += quantized;
            if cursor > scenario.max_session_s {
                return Err(Error::SessionOverrun(scenario.max_session_s));
            }
        }

        if graph.is_terminal(step.id) || adj[cur].is_empty() {
            break;
        }
        let k = draw_categorical(&mut rng, adj[cur].iter().map(|(_, p)| *p), adj[cur].len());
        cur = adj[cur][k].0;
    }

    skipped.sort();
    skipped.dedup();
    Ok(SimulatedSession {
        log: SessionLog {
            session: format!("sim-{session_index:04}"),
            annotations,
            skipped,
        },
        frames,
    })
}

/// Generate `count` sessions with indices `0..count`.
pub fn simulate_batch(scenario: &Scenario, count: u64) -> Result<Vec<SimulatedSession>> {
    (0..count).map(|i| simulate_session(scenario, i)).collect()
}
