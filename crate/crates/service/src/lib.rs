//! Operator-facing advisory service.
//!
//! Accepts advisories over HTTP, logs them before publishing them as
//! retained frames on `cda/{region}/adv/{segment_id}`, keeps a fleet view
//! from vehicle BSMs, ingests a traffic feed and streams all of it as
//! line-delimited JSON events.

pub mod book;
pub mod events;
pub mod feed;
pub mod fleet;
pub mod http;
pub mod service;
pub mod wal;

pub use book::{AdvisoryBook, AdvisoryRecord, AdvisoryRequest, AdvisoryStatus, BookError};
pub use events::{EventKind, StreamEvent};
pub use feed::{parse_feed, FeedEvent, FeedSnapshot};
pub use fleet::{FleetTracker, FleetView, RouteMap, VehicleView};
pub use service::{serve, Service, ServiceConfig, ServiceError, ServiceHandle};
