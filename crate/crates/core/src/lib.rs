//! Procedural-task tracking and intervention engine.
//!
//! The pipeline: a [`graph::TransitionGraph`] built from demonstration
//! sessions feeds a per-frame belief [`tracker`], whose posterior drives a
//! Monte Carlo remaining-time [`forecaster`]; the [`policy`] state machine
//! arms timers on those forecasts and fires advance reminders or
//! forgotten-step notifications. A [`simulator`] generates synthetic sessions
//! for end-to-end testing, [`evaluation`] reproduces the policy-comparison
//! methodology, and [`service`] exposes the whole engine over a streaming
//! socket protocol.

// `!(x > 0.0)` style checks are deliberate: they reject NaN configs too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod forecaster;
pub mod graph;
pub mod io;
pub mod policy;
pub mod service;
pub mod simulator;
pub mod testutil;
pub mod tracker;

pub use error::{Error, Result};
