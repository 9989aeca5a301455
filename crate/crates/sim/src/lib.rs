//! Deterministic discrete-event runner for cooperative driving scenarios:
//! vehicles, broker and advisory service in one simulated process, every
//! radio hop impaired by a seeded link profile.

pub mod metrics;
pub mod run;
pub mod scenario;

pub use metrics::{Delivery, MetricsRow, RunMetrics, METRICS_HEADER};
pub use run::{run_scenario, RunError};
pub use scenario::{Action, Scenario, ScenarioError, TimedEvent};
