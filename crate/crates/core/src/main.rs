//! Command-line entry point: graph building, simulation, offline runs,
//! evaluation, serving, replay, and an interactive terminal demo.
//!
//! Every run writes a `manifest.json` beside its outputs recording the
//! subcommand, flags, seeds, and input hashes, so any output tree can be
//! reproduced byte for byte from its manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use stepwatch::evaluation::{
    default_grid, loso_evaluate, render_error_bars_csv, render_report_text, render_trace_csv,
    EvalConfig,
};
use stepwatch::graph::{build_graph, validate_graph, GraphBuildConfig, SessionLog, StepId};
use stepwatch::io as swio;
use stepwatch::policy::{run_session, EngineConfig, InterventionEvent, InterventionSpec};
use stepwatch::service::{replay, Preset, Server, ServiceConfig};
use stepwatch::simulator::{simulate_session, Scenario};
use stepwatch::tracker::FrameObservation;

const EXIT_MISSING_INPUT: i32 = 66;

#[derive(Parser)]
#[command(name = "stepwatch", version, about = "Procedure tracking and timed interventions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct EngineFlags {
    /// Forecast seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Policy tick period in seconds.
    #[arg(long, default_value_t = 0.2)]
    tick: f64,
    /// Monte Carlo sample count per forecast.
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
}

impl EngineFlags {
    fn engine(&self) -> EngineConfig {
        let mut cfg = EngineConfig::default();
        cfg.forecast.seed = self.seed;
        cfg.forecast.n_samples = self.n_samples;
        cfg.policy.tick_s = self.tick;
        cfg
    }

    fn record(&self, args: &mut BTreeMap<String, String>) {
        args.insert("seed".into(), self.seed.to_string());
        args.insert("tick".into(), self.tick.to_string());
        args.insert("n_samples".into(), self.n_samples.to_string());
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a transition graph from annotated session files.
    BuildGraph {
        /// Session files or a directory of `*.session.json`.
        #[arg(long, required = true, num_args = 1..)]
        sessions: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Laplace smoothing added to each transition count.
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Prune edges observed fewer times than this.
        #[arg(long, default_value_t = 1)]
        min_edge_count: u32,
        /// JSON map of step id to display name.
        #[arg(long)]
        names: Option<PathBuf>,
    },
    /// Generate synthetic sessions from a scenario file.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: u64,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline offline over a recorded frame stream.
    Run {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the per-tick remaining-time histograms.
        #[arg(long)]
        dump_distributions: bool,
        #[command(flatten)]
        engine: EngineFlags,
    },
    /// Leave-one-session-out evaluation of proposed vs baseline timing.
    Evaluate {
        /// Directory of paired `*.session.json` / `*.frames.csv` files.
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated entropy thresholds to grid-search, in nats.
        #[arg(long)]
        grid: Option<String>,
        /// Optional spec file; notify-if-forgotten entries are tallied.
        #[arg(long)]
        specs: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineFlags,
    },
    /// Serve the engine over the newline-delimited socket protocol.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long, value_enum, default_value_t = CliPreset::Laptop)]
        preset: CliPreset,
        /// Push per-tick E/H snapshots to clients.
        #[arg(long)]
        ticks: bool,
        #[command(flatten)]
        engine: EngineFlags,
    },
    /// Stream a recorded session to a server and record what comes back.
    Replay {
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        /// Spec set to request; server default when absent.
        #[arg(long)]
        specs: Option<PathBuf>,
        /// Pacing multiplier; 0 streams as fast as possible.
        #[arg(long, default_value_t = 0.0)]
        speed: f64,
        #[arg(long, default_value = "replay")]
        session: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive demo: type step events, watch interventions fire.
    Live {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineFlags,
    },
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliPreset {
    Laptop,
    Watch,
}

impl From<CliPreset> for Preset {
    fn from(p: CliPreset) -> Self {
        match p {
            CliPreset::Laptop => Preset::Laptop,
            CliPreset::Watch => Preset::Watch,
        }
    }
}

#[derive(Serialize)]
struct ManifestInput {
    path: String,
    sha256: String,
}

/// Reproducibility record written beside every subcommand's outputs.
#[derive(Serialize)]
struct Manifest {
    subcommand: String,
    args: BTreeMap<String, String>,
    inputs: Vec<ManifestInput>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            args: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<&mut Self> {
        self.inputs.push(ManifestInput {
            path: path.display().to_string(),
            sha256: swio::file_sha256(path)?,
        });
        Ok(self)
    }

    fn write(&mut self, dir: &Path) -> anyhow::Result<()> {
        self.inputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs.sort();
        swio::save_json(&dir.join("manifest.json"), self)?;
        Ok(())
    }
}

fn out_dir(flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = flag
        .or_else(|| std::env::var_os("STEPWATCH_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!(MissingInput(path.display().to_string()));
    }
    Ok(())
}

#[derive(Debug)]
struct MissingInput(String);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "input not found: {}", self.0)
    }
}

impl std::error::Error for MissingInput {}

fn collect_session_files(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            for entry in fs::read_dir(p).with_context(|| format!("reading {}", p.display()))? {
                let path = entry?.path();
                if path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with(".session.json"))
                {
                    files.push(path);
                }
            }
        } else {
            require_file(p)?;
            files.push(p.clone());
        }
    }
    files.sort();
    if files.is_empty() {
        bail!(MissingInput("no session files found".into()));
    }
    Ok(files)
}

type DatasetEntry = (SessionLog, Vec<FrameObservation>, PathBuf, PathBuf);

fn load_dataset(dir: &Path) -> anyhow::Result<Vec<DatasetEntry>> {
    let session_files = collect_session_files(&[dir.to_path_buf()])?;
    let mut data = Vec::new();
    for sf in session_files {
        let stem = sf
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".session.json"))
            .unwrap_or_default()
            .to_string();
        let ff = sf.with_file_name(format!("{stem}.frames.csv"));
        require_file(&ff)?;
        let log: SessionLog = swio::load_json(&sf)?;
        let frames = swio::load_frames_csv(&ff)?;
        data.push((log, frames, sf, ff));
    }
    Ok(data)
}

fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_grid(s: &str) -> anyhow::Result<Vec<f64>> {
    let grid: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad grid value `{x}`")))
        .collect::<anyhow::Result<_>>()?;
    if grid.is_empty() {
        bail!("empty grid");
    }
    Ok(grid)
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("stepwatch: {err:#}");
            let code = if err.is::<MissingInput>()
                || err.downcast_ref::<stepwatch::Error>().is_some_and(|e| {
                    matches!(e, stepwatch::Error::Io { source, .. }
                        if source.kind() == std::io::ErrorKind::NotFound)
                }) {
                EXIT_MISSING_INPUT
            } else {
                1
            };
            std::process::exit(code);
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::BuildGraph { sessions, out, alpha, min_edge_count, names } => {
            let dir = out_dir(out)?;
            let files = collect_session_files(&sessions)?;
            let mut cfg =
                GraphBuildConfig { laplace_alpha: alpha, min_edge_count, ..Default::default() };
            let mut manifest = Manifest::new("build-graph");
            manifest.arg("alpha", alpha).arg("min_edge_count", min_edge_count);
            if let Some(names_path) = &names {
                require_file(names_path)?;
                cfg.names = swio::load_json(names_path)?;
                manifest.input(names_path)?;
            }
            let logs: Vec<SessionLog> = files
                .iter()
                .map(|f| swio::load_json::<SessionLog>(f))
                .collect::<stepwatch::Result<_>>()?;
            for f in &files {
                manifest.input(f)?;
            }
            let graph = build_graph(&logs, &cfg)?;
            let violations = validate_graph(&graph);
            swio::save_graph(&dir.join("graph.json"), &graph)?;
            manifest.outputs.push("graph.json".into());
            manifest.write(&dir)?;
            if !violations.is_empty() {
                for v in &violations {
                    eprintln!("stepwatch: graph violation: {v}");
                }
                bail!("built graph failed validation with {} violation(s)", violations.len());
            }
            println!(
                "built graph: {} steps, {} edges, hash {}",
                graph.steps.len(),
                graph.edges.len(),
                swio::graph_hash(&graph)
            );
            Ok(())
        }

        Command::Simulate { scenario, count, seed, out } => {
            let dir = out_dir(out)?;
            require_file(&scenario)?;
            let mut sc: Scenario = swio::load_json(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            sc.check()?;
            let mut manifest = Manifest::new("simulate");
            manifest.arg("count", count).arg("seed", sc.seed);
            manifest.input(&scenario)?;
            for i in 0..count {
                let sim = simulate_session(&sc, i)?;
                let session_name = format!("{}.session.json", sim.log.session);
                let frames_name = format!("{}.frames.csv", sim.log.session);
                swio::save_json(&dir.join(&session_name), &sim.log)?;
                swio::save_frames_csv(&dir.join(&frames_name), &sim.frames)?;
                manifest.outputs.push(session_name);
                manifest.outputs.push(frames_name);
            }
            manifest.write(&dir)?;
            println!("simulated {count} session(s) into {}", dir.display());
            Ok(())
        }

        Command::Run { graph, specs, frames, out, dump_distributions, engine } => {
            let dir = out_dir(out)?;
            for p in [&graph, &specs, &frames] {
                require_file(p)?;
            }
            let g = swio::load_graph(&graph)?;
            ensure_valid(&g)?;
            let spec_set: Vec<InterventionSpec> = swio::load_json(&specs)?;
            let frame_stream = swio::load_frames_csv(&frames)?;
            let mut cfg = engine.engine();
            cfg.dump_distributions = dump_distributions;
            let run = run_session(&g, &spec_set, &frame_stream, &cfg)?;
            write_ndjson(&dir.join("events.ndjson"), &run.events)?;
            write_ndjson(&dir.join("ticks.ndjson"), &run.ticks)?;
            let mut manifest = Manifest::new("run");
            engine.record(&mut manifest.args);
            manifest.arg("dump_distributions", dump_distributions);
            manifest.input(&graph)?.input(&specs)?.input(&frames)?;
            manifest.outputs.push("events.ndjson".into());
            manifest.outputs.push("ticks.ndjson".into());
            if dump_distributions {
                write_ndjson(&dir.join("distributions.ndjson"), &run.distributions)?;
                manifest.outputs.push("distributions.ndjson".into());
            }
            manifest.write(&dir)?;
            for ev in &run.events {
                println!("{}", serde_json::to_string(ev)?);
            }
            Ok(())
        }

        Command::Evaluate { sessions, out, grid, specs, engine } => {
            let dir = out_dir(out)?;
            let data = load_dataset(&sessions)?;
            let mut cfg = EvalConfig { engine: engine.engine(), ..Default::default() };
            cfg.grid = match &grid {
                Some(g) => parse_grid(g)?,
                None => default_grid(),
            };
            let mut manifest = Manifest::new("evaluate");
            engine.record(&mut manifest.args);
            manifest
                .arg("grid", cfg.grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
            if let Some(spec_path) = &specs {
                require_file(spec_path)?;
                cfg.notify_specs = swio::load_json(spec_path)?;
                manifest.input(spec_path)?;
            }
            for (_, _, sf, ff) in &data {
                manifest.input(sf)?;
                manifest.input(ff)?;
            }
            let dataset: Vec<(SessionLog, Vec<FrameObservation>)> =
                data.into_iter().map(|(l, f, _, _)| (l, f)).collect();
            let result = loso_evaluate(&dataset, &cfg)?;

            swio::save_json(&dir.join("report.json"), &result.report)?;
            fs::write(dir.join("report.txt"), render_report_text(&result.report))?;
            let plots = dir.join("plots");
            fs::create_dir_all(plots.join("ticks"))?;
            fs::write(plots.join("step_errors.csv"), render_error_bars_csv(&result.report))?;
            manifest.outputs.push("report.json".into());
            manifest.outputs.push("report.txt".into());
            manifest.outputs.push("plots/step_errors.csv".into());
            for (session, trace) in &result.traces {
                let name = format!("plots/ticks/{session}.csv");
                fs::write(dir.join(&name), render_trace_csv(trace))?;
                manifest.outputs.push(name);
            }
            manifest.write(&dir)?;
            print!("{}", render_report_text(&result.report));
            Ok(())
        }

        Command::Serve { bind, graph, specs, preset, ticks, engine } => {
            for p in [&graph, &specs] {
                require_file(p)?;
            }
            let g = swio::load_graph(&graph)?;
            ensure_valid(&g)?;
            let spec_set: Vec<InterventionSpec> = swio::load_json(&specs)?;
            let cfg = ServiceConfig {
                graph: g,
                default_specs: spec_set,
                engine: engine.engine(),
                preset: preset.into(),
                emit_ticks: ticks,
            };
            let server = Server::bind(&bind, cfg)?;
            println!("listening on {}", server.handle().addr());
            std::io::stdout().flush().ok();
            server.run()?;
            Ok(())
        }

        Command::Replay { endpoint, graph, frames, specs, speed, session, out } => {
            let dir = out_dir(out)?;
            for p in [&graph, &frames] {
                require_file(p)?;
            }
            let g = swio::load_graph(&graph)?;
            let frame_stream = swio::load_frames_csv(&frames)?;
            let spec_set: Option<Vec<InterventionSpec>> = match &specs {
                Some(p) => {
                    require_file(p)?;
                    Some(swio::load_json(p)?)
                }
                None => None,
            };
            let transcript = replay(&endpoint, &session, &g, spec_set, &frame_stream, speed, 0.2)?;

            let mut manifest = Manifest::new("replay");
            manifest.arg("speed", speed).arg("session", &session);
            manifest.input(&graph)?.input(&frames)?;
            if let Some(p) = &specs {
                manifest.input(p)?;
            }
            write_ndjson(&dir.join("events.ndjson"), &transcript.events)?;
            write_ndjson(&dir.join("ticks.ndjson"), &transcript.ticks)?;
            manifest.outputs.push("events.ndjson".into());
            manifest.outputs.push("ticks.ndjson".into());
            manifest.write(&dir)?;
            if let Some(stats) = &transcript.server_stats {
                eprintln!(
                    "stepwatch: {} frames processed, p99 {:.4} s, mean {:.4} s",
                    stats.frames, stats.p99_s, stats.mean_s
                );
            }
            for ev in &transcript.events {
                println!("{}", serde_json::to_string(ev)?);
            }
            if let Some(err) = &transcript.server_error {
                bail!("server error: {err}");
            }
            Ok(())
        }

        Command::Live { graph, specs, out, engine } => {
            for p in [&graph, &specs] {
                require_file(p)?;
            }
            let g = swio::load_graph(&graph)?;
            ensure_valid(&g)?;
            let spec_set: Vec<InterventionSpec> = swio::load_json(&specs)?;
            let cfg = engine.engine();
            let events = run_live(&g, &spec_set, &cfg)?;
            if let Some(dir) = out {
                let dir = out_dir(Some(dir))?;
                let mut manifest = Manifest::new("live");
                engine.record(&mut manifest.args);
                manifest.input(&graph)?.input(&specs)?;
                write_ndjson(&dir.join("events.ndjson"), &events)?;
                manifest.outputs.push("events.ndjson".into());
                manifest.write(&dir)?;
            }
            Ok(())
        }
    }
}

fn ensure_valid(graph: &stepwatch::graph::TransitionGraph) -> anyhow::Result<()> {
    let violations = validate_graph(graph);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("stepwatch: graph violation: {v}");
        }
        bail!("graph failed validation with {} violation(s)", violations.len());
    }
    Ok(())
}

/// Virtual-time demo loop. Commands on stdin:
///   step <id>    begin performing step <id>
///   wait <secs>  advance time, emitting one observation per frame
///   end          finish the session and run down pending timers
fn run_live(
    graph: &stepwatch::graph::TransitionGraph,
    specs: &[InterventionSpec],
    cfg: &EngineConfig,
) -> anyhow::Result<Vec<InterventionEvent>> {
    let mut engine = stepwatch::policy::SessionEngine::new(graph, specs, cfg.clone())?;
    let stdin = std::io::stdin();
    let mut current: Option<usize> = None;
    let fl = cfg.tracker.frame_length_s;
    let n = graph.n_steps();
    eprintln!("stepwatch live: `step <id>`, `wait <seconds>`, `end`");
    fn print_events(events: &[InterventionEvent]) -> anyhow::Result<()> {
        for ev in events {
            println!("{}", serde_json::to_string(ev)?);
            std::io::stdout().flush().ok();
        }
        Ok(())
    }
    let mut all = Vec::new();
    for line in stdin.lock().lines() {
        let line = line?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("step") => {
                let id: u32 = parts
                    .next()
                    .context("usage: step <id>")?
                    .parse()
                    .context("step id must be an integer")?;
                current = Some(
                    graph
                        .index_of(StepId(id))
                        .with_context(|| format!("unknown step s{id}"))?,
                );
                eprintln!("now performing s{id}");
            }
            Some("wait") => {
                let secs: f64 = parts
                    .next()
                    .context("usage: wait <seconds>")?
                    .parse()
                    .context("seconds must be a number")?;
                let frames = (secs / fl).round() as u64;
                for _ in 0..frames {
                    let mut probs = vec![0.0; n];
                    match current {
                        Some(idx) => probs[idx] = 1.0,
                        None => probs.iter_mut().for_each(|p| *p = 1.0 / n as f64),
                    }
                    let obs = FrameObservation {
                        t: swio::round_us(engine.belief().t + fl),
                        probs,
                        has_background: false,
                    };
                    let events = engine.push_frame(&obs)?;
                    print_events(&events)?;
                    all.extend(events);
                }
            }
            Some("end") => break,
            Some(other) => eprintln!("unknown command `{other}`"),
            None => {}
        }
    }
    let events = engine.finish()?;
    print_events(&events)?;
    all.extend(events);
    Ok(all)
}
