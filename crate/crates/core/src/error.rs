//! Crate-wide error type. Variants carry the module prefix in their message
//! so CLI diagnostics stay traceable to the failing subsystem.

use crate::graph::StepId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("graph: no sessions provided")]
    EmptySessionSet,

    #[error("graph: session `{0}` has no annotations")]
    SessionWithoutAnnotations(String),

    #[error("graph: session `{session}` is malformed: {reason}")]
    MalformedSession { session: String, reason: String },

    #[error("graph: unknown step {0}")]
    UnknownStep(StepId),

    #[error("graph: no path from {from} to {to}")]
    NoPath { from: StepId, to: StepId },

    #[error("graph: invalid: {0}")]
    InvalidGraph(String),

    #[error("tracker: observation has {got} class probabilities, graph expects {want}")]
    DimensionMismatch { want: usize, got: usize },

    #[error("tracker: non-monotonic timestamp {got}, expected {want}")]
    NonMonotonicTimestamp { want: f64, got: f64 },

    #[error("tracker: history covers {got:.1} s, detection needs {want:.1} s")]
    InsufficientHistory { want: f64, got: f64 },

    #[error("forecaster: target {0} unreachable from every step with posterior mass")]
    UnreachableTarget(StepId),

    #[error("forecaster: empty distribution")]
    EmptyDistribution,

    #[error("policy: {0}")]
    Policy(String),

    #[error("simulator: session exceeded {0:.0} s without reaching a terminal step")]
    SessionOverrun(f64),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("service: {0}")]
    Protocol(String),

    #[error("{context}: invalid configuration: {reason}")]
    InvalidConfig { context: &'static str, reason: String },

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("io: {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn config(context: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { context, reason: reason.into() }
    }
}
