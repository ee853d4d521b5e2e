//! Streaming deployment: clients stream frame observations over a TCP
//! connection carrying newline-delimited JSON messages; the server runs the
//! tracker -> forecaster -> policy pipeline per session and pushes
//! intervention events back. One connection carries one session; a reconnect
//! is a new session.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TransitionGraph;
use crate::io::graph_hash;
use crate::policy::{EngineConfig, InterventionEvent, InterventionSpec, SessionEngine, TickRecord};
use crate::tracker::FrameObservation;

/// Hard cap on one wire line.
pub const MAX_MESSAGE_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Policy ticks every frame.
    #[default]
    Laptop,
    /// Policy ticks every 3 seconds, the resource-constrained cadence.
    Watch,
}

impl Preset {
    pub fn apply(&self, cfg: &mut EngineConfig) {
        cfg.policy.tick_s = match self {
            Preset::Laptop => cfg.tracker.frame_length_s,
            Preset::Watch => 3.0,
        };
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HelloPayload {
    pub graph_hash: String,
    /// Spec set for this session; the server default applies when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specs: Option<Vec<InterventionSpec>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByeStats {
    pub frames: u64,
    pub p99_s: f64,
    pub mean_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}

/// One wire message; the `kind` tag discriminates the payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WireMessage {
    Hello { session: String, payload: HelloPayload },
    Frame { session: String, payload: FrameObservation },
    Event { session: String, payload: InterventionEvent },
    Tick { session: String, payload: TickRecord },
    Bye { session: String, #[serde(default, skip_serializing_if = "Option::is_none")] payload: Option<ByeStats> },
    Error { session: String, payload: ErrorPayload },
}

impl WireMessage {
    pub fn session(&self) -> &str {
        match self {
            WireMessage::Hello { session, .. }
            | WireMessage::Frame { session, .. }
            | WireMessage::Event { session, .. }
            | WireMessage::Tick { session, .. }
            | WireMessage::Bye { session, .. }
            | WireMessage::Error { session, .. } => session,
        }
    }
}

fn write_message(stream: &mut impl Write, msg: &WireMessage) -> Result<()> {
    let mut line = serde_json::to_string(msg).expect("serializable message");
    if line.len() + 1 > MAX_MESSAGE_BYTES {
        return Err(Error::Protocol(format!("outgoing message of {} bytes", line.len())));
    }
    line.push('\n');
    stream
        .write_all(line.as_bytes())
        .map_err(|e| Error::Protocol(format!("write failed: {e}")))
}

fn read_message(reader: &mut impl BufRead) -> Result<Option<WireMessage>> {
    let mut line = String::new();
    let n = reader
        .read_line(&mut line)
        .map_err(|e| Error::Protocol(format!("read failed: {e}")))?;
    if n == 0 {
        return Ok(None);
    }
    if n > MAX_MESSAGE_BYTES {
        return Err(Error::Protocol(format!("incoming message of {n} bytes")));
    }
    if line.trim().is_empty() {
        return read_message(reader);
    }
    serde_json::from_str(line.trim_end())
        .map(Some)
        .map_err(|e| Error::Protocol(format!("malformed message: {e}")))
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub graph: TransitionGraph,
    pub default_specs: Vec<InterventionSpec>,
    pub engine: EngineConfig,
    pub preset: Preset,
    /// Push per-tick E/H snapshots to the client.
    pub emit_ticks: bool,
}

struct ServerState {
    graph: TransitionGraph,
    graph_hash: String,
    default_specs: Vec<InterventionSpec>,
    engine: EngineConfig,
    emit_ticks: bool,
}

/// Handle for stopping a running server.
#[derive(Clone)]
pub struct ServerHandle {
    stop: Arc<AtomicBool>,
    addr: SocketAddr,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

pub struct Server {
    listener: TcpListener,
    state: Arc<ServerState>,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(addr: &str, mut cfg: ServiceConfig) -> Result<Self> {
        cfg.preset.apply(&mut cfg.engine);
        let listener = TcpListener::bind(addr)
            .map_err(|e| Error::Protocol(format!("bind {addr}: {e}")))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Protocol(format!("set_nonblocking: {e}")))?;
        let hash = graph_hash(&cfg.graph);
        Ok(Self {
            listener,
            state: Arc::new(ServerState {
                graph: cfg.graph,
                graph_hash: hash,
                default_specs: cfg.default_specs,
                engine: cfg.engine,
                emit_ticks: cfg.emit_ticks,
            }),
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn handle(&self) -> ServerHandle {
        ServerHandle {
            stop: self.stop.clone(),
            addr: self.listener.local_addr().expect("bound listener"),
        }
    }

    /// Accept loop; returns once the handle's shutdown is requested and all
    /// in-flight sessions have drained.
    pub fn run(self) -> Result<()> {
        let mut workers = Vec::new();
        while !self.stop.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let state = self.state.clone();
                    workers.push(std::thread::spawn(move || {
                        if let Err(e) = handle_connection(stream, &state) {
                            eprintln!("service: session from {peer} aborted: {e}");
                        }
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(Error::Protocol(format!("accept: {e}"))),
            }
            workers.retain(|w| !w.is_finished());
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }
}

fn handle_connection(stream: TcpStream, state: &ServerState) -> Result<()> {
    stream
        .set_nodelay(true)
        .map_err(|e| Error::Protocol(format!("nodelay: {e}")))?;
    let mut reader = BufReader::new(
        stream
            .try_clone()
            .map_err(|e| Error::Protocol(format!("clone stream: {e}")))?,
    );
    let mut writer = stream;

    let (session, specs) = match read_message(&mut reader)? {
        Some(WireMessage::Hello { session, payload }) => {
            if payload.graph_hash != state.graph_hash {
                write_message(
                    &mut writer,
                    &WireMessage::Error {
                        session: session.clone(),
                        payload: ErrorPayload { message: "graph-mismatch".into() },
                    },
                )?;
                return Err(Error::Protocol(format!("session {session}: graph-mismatch")));
            }
            (session, payload.specs.unwrap_or_else(|| state.default_specs.clone()))
        }
        Some(other) => {
            let session = other.session().to_string();
            write_message(
                &mut writer,
                &WireMessage::Error {
                    session: session.clone(),
                    payload: ErrorPayload { message: "expected hello".into() },
                },
            )?;
            return Err(Error::Protocol(format!("session {session}: first message not hello")));
        }
        None => return Ok(()),
    };

    let mut engine = match SessionEngine::new(&state.graph, &specs, state.engine.clone()) {
        Ok(e) => e,
        Err(e) => {
            write_message(
                &mut writer,
                &WireMessage::Error {
                    session: session.clone(),
                    payload: ErrorPayload { message: e.to_string() },
                },
            )?;
            return Err(e);
        }
    };

    let mut durations: Vec<f64> = Vec::new();
    let mut ticks_sent = 0usize;
    loop {
        match read_message(&mut reader)? {
            Some(WireMessage::Frame { session: s, payload }) if s == session => {
                let start = Instant::now();
                match engine.push_frame(&payload) {
                    Ok(events) => {
                        for ev in events {
                            write_message(
                                &mut writer,
                                &WireMessage::Event { session: session.clone(), payload: ev },
                            )?;
                        }
                        if state.emit_ticks {
                            for tick in &engine.ticks()[ticks_sent..] {
                                write_message(
                                    &mut writer,
                                    &WireMessage::Tick {
                                        session: session.clone(),
                                        payload: tick.clone(),
                                    },
                                )?;
                            }
                            ticks_sent = engine.ticks().len();
                        }
                    }
                    Err(e) => {
                        write_message(
                            &mut writer,
                            &WireMessage::Error {
                                session: session.clone(),
                                payload: ErrorPayload { message: e.to_string() },
                            },
                        )?;
                        return Err(Error::Protocol(format!("session {session}: {e}")));
                    }
                }
                durations.push(start.elapsed().as_secs_f64());
            }
            Some(WireMessage::Bye { session: s, .. }) if s == session => {
                let start = Instant::now();
                let late = engine.finish()?;
                durations.push(start.elapsed().as_secs_f64());
                for ev in late {
                    write_message(
                        &mut writer,
                        &WireMessage::Event { session: session.clone(), payload: ev },
                    )?;
                }
                let stats = ByeStats {
                    frames: durations.len() as u64,
                    p99_s: percentile(&mut durations, 0.99),
                    mean_s: mean(&durations),
                };
                write_message(
                    &mut writer,
                    &WireMessage::Bye { session: session.clone(), payload: Some(stats) },
                )?;
                return Ok(());
            }
            Some(other) => {
                let msg = if other.session() != session {
                    format!("message for foreign session `{}`", other.session())
                } else {
                    "unexpected message kind".to_string()
                };
                write_message(
                    &mut writer,
                    &WireMessage::Error {
                        session: session.clone(),
                        payload: ErrorPayload { message: msg.clone() },
                    },
                )?;
                return Err(Error::Protocol(format!("session {session}: {msg}")));
            }
            // Disconnect without bye: abort, never emit further events.
            None => return Err(Error::Protocol(format!("session {session}: client disconnected"))),
        }
    }
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let idx = ((values.len() as f64 * q).ceil() as usize).clamp(1, values.len()) - 1;
    values[idx]
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// What a replay client observed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayTranscript {
    pub session: String,
    pub events: Vec<InterventionEvent>,
    pub ticks: Vec<TickRecord>,
    pub server_stats: Option<ByeStats>,
    pub server_error: Option<String>,
}

/// Stream a recorded frame file to a server, paced at `frame_length / speed`
/// (speed 0 = as fast as possible), and collect everything pushed back.
pub fn replay(
    endpoint: &str,
    session: &str,
    graph: &TransitionGraph,
    specs: Option<Vec<InterventionSpec>>,
    frames: &[FrameObservation],
    speed: f64,
    frame_length_s: f64,
) -> Result<ReplayTranscript> {
    let stream = TcpStream::connect(endpoint)
        .map_err(|e| Error::Protocol(format!("connect {endpoint}: {e}")))?;
    stream
        .set_nodelay(true)
        .map_err(|e| Error::Protocol(format!("nodelay: {e}")))?;
    let mut reader = BufReader::new(
        stream
            .try_clone()
            .map_err(|e| Error::Protocol(format!("clone stream: {e}")))?,
    );
    let mut writer = stream;

    write_message(
        &mut writer,
        &WireMessage::Hello {
            session: session.to_string(),
            payload: HelloPayload { graph_hash: graph_hash(graph), specs },
        },
    )?;

    // Reader thread: collect pushed messages until the server says bye.
    let collector = std::thread::spawn(move || {
        let mut events = Vec::new();
        let mut ticks = Vec::new();
        let mut stats = None;
        let mut error = None;
        loop {
            match read_message(&mut reader) {
                Ok(Some(WireMessage::Event { payload, .. })) => events.push(payload),
                Ok(Some(WireMessage::Tick { payload, .. })) => ticks.push(payload),
                Ok(Some(WireMessage::Bye { payload, .. })) => {
                    stats = payload;
                    break;
                }
                Ok(Some(WireMessage::Error { payload, .. })) => {
                    error = Some(payload.message);
                    break;
                }
                Ok(Some(_)) => {}
                Ok(None) | Err(_) => break,
            }
        }
        (events, ticks, stats, error)
    });

    let pace = if speed > 0.0 {
        Some(Duration::from_secs_f64(frame_length_s / speed))
    } else {
        None
    };
    let mut send_error = None;
    for frame in frames {
        if let Err(e) = write_message(
            &mut writer,
            &WireMessage::Frame { session: session.to_string(), payload: frame.clone() },
        ) {
            send_error = Some(e);
            break;
        }
        if let Some(p) = pace {
            std::thread::sleep(p);
        }
    }
    if send_error.is_none() {
        let _ = write_message(
            &mut writer,
            &WireMessage::Bye { session: session.to_string(), payload: None },
        );
    }

    let (events, ticks, server_stats, server_error) = collector
        .join()
        .map_err(|_| Error::Protocol("replay collector panicked".into()))?;

    let transcript = ReplayTranscript {
        session: session.to_string(),
        events,
        ticks,
        server_stats,
        server_error,
    };
    if let Some(e) = send_error {
        if transcript.server_error.is_none() {
            return Err(e);
        }
    }
    Ok(transcript)
}
