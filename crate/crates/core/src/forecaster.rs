//! Remaining-time forecasting.
//!
//! Draws Monte Carlo samples of the time until a target step begins: current
//! step from the tracker posterior, future trajectory from the enumerated
//! simple paths, step durations from the graph's duration statistics. The
//! summary pair (expectation, histogram entropy) is what the intervention
//! policy consumes. An exact enumeration of the same double sum serves as the
//! closed-form oracle for the sampled expectation.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{enumerate_trajectories, StepId, TrajectorySet, TransitionGraph};
use crate::tracker::BeliefState;

/// SplitMix64 step, used to derive independent sub-seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic seed derivation from an ordered list of parts.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x243f6a8885a308d3u64;
    for p in parts {
        acc = splitmix64(acc ^ *p);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DurationModel {
    /// Normal(mean, std) truncated below at the minimum duration.
    #[default]
    TruncatedNormal,
    /// Every duration is exactly the step's mean.
    FixedMean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastConfig {
    pub n_samples: usize,
    pub bin_width_s: f64,
    pub duration_model: DurationModel,
    /// Lower truncation for sampled durations; one frame by default.
    pub min_duration_s: f64,
    /// Cap on enumerated simple paths per (origin, target) pair.
    pub max_paths: usize,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            bin_width_s: 1.0,
            duration_model: DurationModel::TruncatedNormal,
            min_duration_s: 0.2,
            max_paths: 10_000,
            seed: 0,
        }
    }
}

impl ForecastConfig {
    pub fn check(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("forecaster", "n_samples must be at least 1"));
        }
        if !(self.bin_width_s > 0.0) {
            return Err(Error::config("forecaster", "bin_width_s must be positive"));
        }
        if !(self.min_duration_s > 0.0) {
            return Err(Error::config("forecaster", "min_duration_s must be positive"));
        }
        if self.max_paths == 0 {
            return Err(Error::config("forecaster", "max_paths must be at least 1"));
        }
        Ok(())
    }
}

/// Sampled distribution of the remaining time until the target step begins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemainingTimeDistribution {
    pub target: StepId,
    pub t: f64,
    pub samples: Vec<f64>,
    pub bin_width_s: f64,
    pub expectation_s: f64,
    pub entropy_nats: f64,
    /// Posterior mass sitting on steps from which the target is reachable.
    pub reachable_mass: f64,
}

impl RemainingTimeDistribution {
    /// Histogram over `bin_width_s`-wide bins, keyed by bin index.
    pub fn histogram(&self) -> BTreeMap<i64, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry((s / self.bin_width_s).floor() as i64).or_insert(0) += 1;
        }
        h
    }
}

/// Mean and histogram entropy of a sampled distribution.
pub fn summarize(dist: &RemainingTimeDistribution) -> Result<(f64, f64)> {
    if dist.samples.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let mean = dist.samples.iter().sum::<f64>() / dist.samples.len() as f64;
    Ok((mean, histogram_entropy(&dist.samples, dist.bin_width_s)))
}

fn histogram_entropy(samples: &[f64], bin_width: f64) -> f64 {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry((s / bin_width).floor() as i64).or_insert(0) += 1;
    }
    let n = samples.len() as f64;
    -counts
        .values()
        .map(|c| {
            let p = *c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

type TrajectoryCache = HashMap<(StepId, StepId), Arc<Option<TrajectorySet>>>;

/// Forecasting engine with per-(origin, target) trajectory caching.
pub struct Forecaster<'g> {
    graph: &'g TransitionGraph,
    cfg: ForecastConfig,
    trajectories: Mutex<TrajectoryCache>,
    reachability: Mutex<HashMap<StepId, Arc<Vec<bool>>>>,
}

impl<'g> Forecaster<'g> {
    pub fn new(graph: &'g TransitionGraph, cfg: ForecastConfig) -> Result<Self> {
        cfg.check()?;
        Ok(Self {
            graph,
            cfg,
            trajectories: Mutex::new(HashMap::new()),
            reachability: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ForecastConfig {
        &self.cfg
    }

    fn trajectory_set(&self, from: StepId, to: StepId) -> Arc<Option<TrajectorySet>> {
        let mut cache = self.trajectories.lock().expect("trajectory cache");
        cache
            .entry((from, to))
            .or_insert_with(|| {
                Arc::new(enumerate_trajectories(self.graph, from, to, self.cfg.max_paths).ok())
            })
            .clone()
    }

    fn reachable(&self, target: StepId) -> Arc<Vec<bool>> {
        let mut cache = self.reachability.lock().expect("reachability cache");
        cache
            .entry(target)
            .or_insert_with(|| Arc::new(self.graph.can_reach(target)))
            .clone()
    }

    fn draw_duration(&self, rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
        match self.cfg.duration_model {
            DurationModel::FixedMean => mean.max(self.cfg.min_duration_s),
            DurationModel::TruncatedNormal => {
                if std <= 0.0 {
                    return mean.max(self.cfg.min_duration_s);
                }
                let normal = Normal::new(mean, std).expect("finite duration stats");
                for _ in 0..64 {
                    let d = normal.sample(rng);
                    if d >= self.cfg.min_duration_s {
                        return d;
                    }
                }
                self.cfg.min_duration_s
            }
        }
    }

    /// Sample the remaining-time distribution with the config's seed.
    pub fn sample(&self, belief: &BeliefState, target: StepId) -> Result<RemainingTimeDistribution> {
        self.sample_with_seed(belief, target, self.cfg.seed)
    }

    /// Sample with an explicit seed. Per-sample randomness derives from
    /// (seed, sample index), so the result is independent of scheduling.
    pub fn sample_with_seed(
        &self,
        belief: &BeliefState,
        target: StepId,
        seed: u64,
    ) -> Result<RemainingTimeDistribution> {
        let target_idx = self.graph.index_of(target).ok_or(Error::UnknownStep(target))?;
        let reachable = self.reachable(target);

        let reachable_mass: f64 = belief
            .posterior
            .iter()
            .enumerate()
            .filter(|(i, _)| reachable[*i])
            .map(|(_, p)| p)
            .sum();
        if reachable_mass <= 0.0 {
            return Err(Error::UnreachableTarget(target));
        }

        let n = self.graph.n_steps();
        let mut samples = Vec::with_capacity(self.cfg.n_samples);
        for k in 0..self.cfg.n_samples {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, k as u64]));

            // Current step from the posterior.
            let mut u: f64 = rng.random::<f64>();
            let mut cur = n - 1;
            for (i, p) in belief.posterior.iter().enumerate() {
                if u < *p {
                    cur = i;
                    break;
                }
                u -= p;
            }
            if !reachable[cur] {
                continue;
            }
            if cur == target_idx {
                samples.push(0.0);
                continue;
            }

            let cur_id = self.graph.steps[cur].id;
            let set = self.trajectory_set(cur_id, target);
            let Some(set) = set.as_ref() else { continue };

            // Trajectory from the renormalized path distribution.
            let mut v: f64 = rng.random::<f64>();
            let mut chosen = set.trajectories.len() - 1;
            for (i, tr) in set.trajectories.iter().enumerate() {
                if v < tr.prob {
                    chosen = i;
                    break;
                }
                v -= tr.prob;
            }
            let path = &set.trajectories[chosen].path;

            // Residual of the current step, then full draws for intermediates.
            let cur_step = &self.graph.steps[cur];
            let draw = self.draw_duration(&mut rng, cur_step.mean_duration_s, cur_step.std_duration_s);
            let mut remaining = (draw - belief.elapsed_in_step[cur]).max(0.0);
            for id in &path[1..path.len() - 1] {
                let s = self.graph.step(*id).expect("path steps exist");
                remaining += self.draw_duration(&mut rng, s.mean_duration_s, s.std_duration_s);
            }
            samples.push(remaining);
        }

        if samples.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        let expectation = samples.iter().sum::<f64>() / samples.len() as f64;
        let entropy = histogram_entropy(&samples, self.cfg.bin_width_s);
        Ok(RemainingTimeDistribution {
            target,
            t: belief.t,
            samples,
            bin_width_s: self.cfg.bin_width_s,
            expectation_s: expectation,
            entropy_nats: entropy,
            reachable_mass,
        })
    }

    /// Closed-form expectation by deterministic enumeration with mean
    /// durations, conditioned on the reachable posterior mass.
    pub fn exact_expected_remaining_time(
        &self,
        belief: &BeliefState,
        target: StepId,
    ) -> Result<f64> {
        let target_idx = self.graph.index_of(target).ok_or(Error::UnknownStep(target))?;
        let reachable = self.reachable(target);
        let mut mass = 0.0;
        let mut acc = 0.0;
        for (i, p) in belief.posterior.iter().enumerate() {
            if *p <= 0.0 || !reachable[i] {
                continue;
            }
            mass += p;
            if i == target_idx {
                continue;
            }
            let step = &self.graph.steps[i];
            let residual = (step.mean_duration_s - belief.elapsed_in_step[i]).max(0.0);
            let set = self.trajectory_set(step.id, target);
            let Some(set) = set.as_ref() else {
                return Err(Error::NoPath { from: step.id, to: target });
            };
            acc += p * (residual + set.expected_transit_s());
        }
        if mass <= 0.0 {
            return Err(Error::UnreachableTarget(target));
        }
        Ok(acc / mass)
    }
}

/// Single-shot form of [`Forecaster::sample`].
pub fn sample_remaining_time(
    graph: &TransitionGraph,
    belief: &BeliefState,
    target: StepId,
    cfg: &ForecastConfig,
) -> Result<RemainingTimeDistribution> {
    Forecaster::new(graph, cfg.clone())?.sample(belief, target)
}

/// Single-shot form of [`Forecaster::exact_expected_remaining_time`].
pub fn exact_expected_remaining_time(
    graph: &TransitionGraph,
    belief: &BeliefState,
    target: StepId,
) -> Result<f64> {
    Forecaster::new(graph, ForecastConfig::default())?.exact_expected_remaining_time(belief, target)
}
