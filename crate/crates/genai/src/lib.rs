//! Model-client boundary for the driving stack.
//!
//! Builds prompts from vehicle context, calls a [`ModelClient`], hands the
//! reply to the MetaAction gate and records request-to-response latency and
//! token counts.

pub mod client;
pub mod gateway;
pub mod prompt;
pub mod stats;

pub use client::{request, MockClient, ModelClient, ModelError, RemoteClient, ScriptEntry};
pub use gateway::{Gateway, Outcome, Turn};
pub use prompt::{build_prompt, PromptContext};
pub use stats::{aggregate_stats, LatencyReport, Sample, StatsAccumulator, StatsError};

pub type LatencyReportF64 = LatencyReport<f64>;
pub type LatencyReportF32 = LatencyReport<f32>;
