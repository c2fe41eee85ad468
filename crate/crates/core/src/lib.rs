//! Delay-optimal erasure-code selection for cloud storage access.
//!
//! A request for a file of size `J` is split into `k` chunks, encoded into
//! `n >= k` coded chunks, and completes once any `k` of the `n` tasks finish.
//! Larger `k` and `n/k` shorten service delay but burn more thread time, so
//! the best code depends on load. This crate provides:
//!
//! * [`model`]: closed-form service delay, usage, capacity and queueing terms.
//! * [`solver`]: the continuous delay-optimal code as a function of load or
//!   backlog, and the backlog threshold tables derived from it.
//! * [`strategies`]: per-request code selection (backlog thresholds, greedy,
//!   static, rate-scheduled).
//! * [`engine`]: a discrete-event simulator of the request queue, task queue
//!   and `L` threads, with speculative completion and cancellation.
//! * [`traces`]: delay-trace ingestion, parameter fitting and resampling pools.
//! * [`codec`]: a systematic MDS code over GF(256) with strip batching.
//! * [`metrics`]: delay summaries, code composition and time series.
//! * [`config`]: the run configuration schema shared by the CLI and tests.

pub mod codec;
pub mod config;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod solver;
pub mod strategies;
pub mod traces;

pub use engine::{ArrivalProcess, DelaySampler, LeftoverPolicy, RequestRecord, SimOptions, SimResult};
pub use error::{Error, Result};
pub use metrics::{Composition, Summary};
pub use model::{ClassSpec, CodeChoice, DelayMode, DelayParams, OpType, SystemSpec};
pub use solver::{ContinuousCode, ContinuousOptimum, ThresholdTable};
pub use strategies::Strategy;
