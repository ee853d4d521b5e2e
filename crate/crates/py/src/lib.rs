//! Python bindings: the graph, tracker, and forecaster types plus the
//! file-level pipeline operations, mirroring what the CLI exposes.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use stepwatch::evaluation;
use stepwatch::forecaster::{ForecastConfig, Forecaster};
use stepwatch::graph::{
    build_graph, enumerate_trajectories, validate_graph, Annotation, GraphBuildConfig,
    SessionLog, StepId, TransitionGraph,
};
use stepwatch::io as swio;
use stepwatch::policy::{run_session, EngineConfig, InterventionSpec};
use stepwatch::simulator::{simulate_session, Scenario};
use stepwatch::tracker::{init_belief, BeliefState, DetectionTracker, FrameObservation, TrackerConfig};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_sessions(sessions: &Bound<'_, PyList>) -> PyResult<Vec<SessionLog>> {
    let mut logs = Vec::new();
    for item in sessions.iter() {
        let d: Bound<'_, PyDict> = item.extract()?;
        let session: String = d
            .get_item("session")?
            .ok_or_else(|| PyValueError::new_err("session entry missing `session`"))?
            .extract()?;
        let ann_list: Bound<'_, PyList> = d
            .get_item("annotations")?
            .ok_or_else(|| PyValueError::new_err("session entry missing `annotations`"))?
            .extract()?;
        let mut annotations = Vec::new();
        for a in ann_list.iter() {
            let a: Bound<'_, PyDict> = a.extract()?;
            let step: u32 = a
                .get_item("step")?
                .ok_or_else(|| PyValueError::new_err("annotation missing `step`"))?
                .extract()?;
            let start_s: f64 = a
                .get_item("start_s")?
                .ok_or_else(|| PyValueError::new_err("annotation missing `start_s`"))?
                .extract()?;
            let end_s: f64 = a
                .get_item("end_s")?
                .ok_or_else(|| PyValueError::new_err("annotation missing `end_s`"))?
                .extract()?;
            annotations.push(Annotation { step: StepId(step), start_s, end_s });
        }
        let skipped: Vec<u32> = match d.get_item("skipped")? {
            Some(v) => v.extract()?,
            None => Vec::new(),
        };
        logs.push(SessionLog {
            session,
            annotations,
            skipped: skipped.into_iter().map(StepId).collect(),
        });
    }
    Ok(logs)
}

/// Step-transition graph handle.
#[pyclass(name = "Graph", skip_from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: TransitionGraph,
}

#[pymethods]
impl PyGraph {
    /// Load a canonical graph file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: swio::load_graph(&path).map_err(err)? })
    }

    /// Build a graph from session dicts:
    /// `{"session": str, "annotations": [{"step", "start_s", "end_s"}], "skipped": [int]}`.
    #[staticmethod]
    #[pyo3(signature = (sessions, alpha=0.0, min_edge_count=1))]
    fn from_sessions(
        sessions: &Bound<'_, PyList>,
        alpha: f64,
        min_edge_count: u32,
    ) -> PyResult<Self> {
        let logs = parse_sessions(sessions)?;
        let cfg = GraphBuildConfig {
            laplace_alpha: alpha,
            min_edge_count,
            ..Default::default()
        };
        Ok(Self { inner: build_graph(&logs, &cfg).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        swio::save_graph(&path, &self.inner).map_err(err)
    }

    /// Broken invariants as human-readable strings; empty means valid.
    fn validate(&self) -> Vec<String> {
        validate_graph(&self.inner).iter().map(|v| v.to_string()).collect()
    }

    fn hash(&self) -> String {
        swio::graph_hash(&self.inner)
    }

    fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }

    fn steps<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .steps
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("id", s.id.0)?;
                d.set_item("name", &s.name)?;
                d.set_item("mean_duration_s", s.mean_duration_s)?;
                d.set_item("std_duration_s", s.std_duration_s)?;
                d.set_item("f1", s.f1)?;
                Ok(d)
            })
            .collect()
    }

    fn edges(&self) -> Vec<(u32, u32, f64)> {
        self.inner.edges.iter().map(|e| (e.from.0, e.to.0, e.prob)).collect()
    }

    /// Simple paths origin -> target: list of (path, prob, mean_transit_s).
    #[pyo3(signature = (origin, target, max_paths=10_000))]
    fn enumerate_trajectories(
        &self,
        origin: u32,
        target: u32,
        max_paths: usize,
    ) -> PyResult<Vec<(Vec<u32>, f64, f64)>> {
        let set = enumerate_trajectories(&self.inner, StepId(origin), StepId(target), max_paths)
            .map_err(err)?;
        Ok(set
            .trajectories
            .iter()
            .map(|t| {
                (
                    t.path.iter().map(|s| s.0).collect(),
                    t.prob,
                    t.mean_transit_time_s,
                )
            })
            .collect())
    }

    /// Expected remaining seconds to `target` from the session-start belief.
    fn expected_remaining_from_start(&self, target: u32) -> PyResult<f64> {
        let f = Forecaster::new(&self.inner, ForecastConfig::default()).map_err(err)?;
        f.exact_expected_remaining_time(&init_belief(&self.inner), StepId(target))
            .map_err(err)
    }
}

/// Frame-by-frame belief tracker for one session.
#[pyclass(name = "Tracker")]
struct PyTracker {
    graph: TransitionGraph,
    tracker: stepwatch::tracker::Tracker,
    detection: DetectionTracker,
    belief: BeliefState,
}

#[pymethods]
impl PyTracker {
    #[new]
    #[pyo3(signature = (graph, frame_length_s=0.2, emission_smoothing=0.01))]
    fn new(graph: &PyGraph, frame_length_s: f64, emission_smoothing: f64) -> PyResult<Self> {
        let cfg = TrackerConfig { frame_length_s, emission_smoothing, ..Default::default() };
        let tracker = stepwatch::tracker::Tracker::new(&graph.inner, cfg.clone()).map_err(err)?;
        Ok(Self {
            belief: init_belief(&graph.inner),
            detection: DetectionTracker::new(graph.inner.n_steps(), &cfg),
            tracker,
            graph: graph.inner.clone(),
        })
    }

    /// Feed one frame of class probabilities; returns the decoded step id.
    fn update(&mut self, t: f64, probs: Vec<f64>) -> PyResult<u32> {
        let obs = FrameObservation { t, probs, has_background: false };
        self.belief = self.tracker.update(&self.belief, &obs).map_err(err)?;
        self.detection.push(&self.belief);
        Ok(self.belief.decoded_step.0)
    }

    fn t(&self) -> f64 {
        self.belief.t
    }

    fn posterior(&self) -> Vec<f64> {
        self.belief.posterior.clone()
    }

    fn elapsed_in_step(&self) -> Vec<f64> {
        self.belief.elapsed_in_step.clone()
    }

    fn decoded_step(&self) -> u32 {
        self.belief.decoded_step.0
    }

    /// Whether `step` has held the smoothed argmax for a full detection window.
    fn detected(&self, step: u32) -> PyResult<bool> {
        let idx = self
            .graph
            .index_of(StepId(step))
            .ok_or_else(|| PyValueError::new_err(format!("unknown step s{step}")))?;
        Ok(self.detection.is_detected(idx))
    }
}

/// Monte Carlo remaining-time forecaster.
#[pyclass(name = "Forecaster")]
struct PyForecaster {
    graph: TransitionGraph,
    cfg: ForecastConfig,
}

#[pymethods]
impl PyForecaster {
    #[new]
    #[pyo3(signature = (graph, n_samples=10_000, seed=0, bin_width_s=1.0))]
    fn new(graph: &PyGraph, n_samples: usize, seed: u64, bin_width_s: f64) -> Self {
        Self {
            graph: graph.inner.clone(),
            cfg: ForecastConfig { n_samples, seed, bin_width_s, ..Default::default() },
        }
    }

    /// Sample the remaining time to `target` from the tracker's belief.
    fn sample<'py>(
        &self,
        py: Python<'py>,
        tracker: &PyTracker,
        target: u32,
    ) -> PyResult<Bound<'py, PyDict>> {
        let f = Forecaster::new(&self.graph, self.cfg.clone()).map_err(err)?;
        let dist = f.sample(&tracker.belief, StepId(target)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("target", dist.target.0)?;
        d.set_item("t", dist.t)?;
        d.set_item("expectation_s", dist.expectation_s)?;
        d.set_item("entropy_nats", dist.entropy_nats)?;
        d.set_item("reachable_mass", dist.reachable_mass)?;
        d.set_item("n_samples", dist.samples.len())?;
        Ok(d)
    }

    /// Closed-form expectation with mean durations.
    fn exact(&self, tracker: &PyTracker, target: u32) -> PyResult<f64> {
        let f = Forecaster::new(&self.graph, self.cfg.clone()).map_err(err)?;
        f.exact_expected_remaining_time(&tracker.belief, StepId(target)).map_err(err)
    }
}

/// Run the offline pipeline over files; returns the fired interventions.
#[pyfunction]
#[pyo3(signature = (graph_path, specs_path, frames_path, tick_s=0.2, n_samples=10_000, seed=0))]
fn run_session_files<'py>(
    py: Python<'py>,
    graph_path: PathBuf,
    specs_path: PathBuf,
    frames_path: PathBuf,
    tick_s: f64,
    n_samples: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let graph = swio::load_graph(&graph_path).map_err(err)?;
    let specs: Vec<InterventionSpec> = swio::load_json(&specs_path).map_err(err)?;
    let frames = swio::load_frames_csv(&frames_path).map_err(err)?;
    let mut cfg = EngineConfig::default();
    cfg.policy.tick_s = tick_s;
    cfg.forecast.n_samples = n_samples;
    cfg.forecast.seed = seed;
    let run = run_session(&graph, &specs, &frames, &cfg).map_err(err)?;
    run.events
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("t", e.t)?;
            d.set_item("target", e.target.0)?;
            d.set_item(
                "kind",
                serde_json::to_value(e.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
            )?;
            d.set_item("message", &e.message)?;
            Ok(d)
        })
        .collect()
}

/// Generate sessions from a scenario file into a directory; returns the
/// written file names.
#[pyfunction]
#[pyo3(signature = (scenario_path, out_dir, count, seed=None))]
fn simulate(
    scenario_path: PathBuf,
    out_dir: PathBuf,
    count: u64,
    seed: Option<u64>,
) -> PyResult<Vec<String>> {
    let mut scenario: Scenario = swio::load_json(&scenario_path).map_err(err)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| err(format!("{}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    for i in 0..count {
        let sim = simulate_session(&scenario, i).map_err(err)?;
        let session_name = format!("{}.session.json", sim.log.session);
        let frames_name = format!("{}.frames.csv", sim.log.session);
        swio::save_json(&out_dir.join(&session_name), &sim.log).map_err(err)?;
        swio::save_frames_csv(&out_dir.join(&frames_name), &sim.frames).map_err(err)?;
        written.push(session_name);
        written.push(frames_name);
    }
    Ok(written)
}

/// |estimate - actual remaining|: the intervention timing metric.
#[pyfunction]
fn timing_error(armed_estimate: f64, armed_at: f64, actual_step_start: f64) -> f64 {
    evaluation::timing_error(armed_estimate, armed_at, actual_step_start)
}

/// Frame-level macro F1 over classes present in the ground truth.
#[pyfunction]
fn macro_f1(truth: Vec<usize>, pred: Vec<usize>, n_classes: usize) -> PyResult<f64> {
    if truth.len() != pred.len() {
        return Err(PyValueError::new_err("truth and pred must have equal length"));
    }
    Ok(evaluation::macro_f1(&truth, &pred, n_classes))
}

#[pymodule]
fn stepwatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyTracker>()?;
    m.add_class::<PyForecaster>()?;
    m.add_function(wrap_pyfunction!(run_session_files, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(timing_error, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    Ok(())
}
