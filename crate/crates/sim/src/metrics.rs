//! What a run measured, and its on-disk form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cda_core::link::LinkProfile;

pub const METRICS_HEADER: [&str; 4] = ["advisory_id", "vehicle_id", "delivery_ms", "compliance_s"];
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACES_FILE: &str = "traces.csv";

/// One line of the metrics table. Empty cells are `None`: not delivered,
/// or never within tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub advisory_id: u16,
    pub vehicle_id: u32,
    pub delivery_ms: Option<f64>,
    pub compliance_s: Option<f64>,
}

/// First receipt of an advisory by a vehicle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Delivery {
    pub advisory_id: u16,
    pub vehicle_id: u32,
    /// When the service published it.
    pub published_at_s: f64,
    /// When the broker sent the copy that arrived.
    pub dispatched_at_s: f64,
    pub received_at_s: f64,
    /// Broker dispatch to receipt of that copy.
    pub delivery_ms: f64,
    /// Transmissions it took, including the one that arrived.
    pub attempt: u32,
}

impl Delivery {
    /// Publication to receipt, retransmissions included.
    pub fn end_to_end_ms(&self) -> f64 {
        (self.received_at_s - self.published_at_s) * 1_000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut n = 0usize;
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for v in values {
            n += 1;
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        (n > 0).then(|| Spread {
            min,
            mean: sum / n as f64,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvisoryMetrics {
    pub advisory_id: u16,
    pub segment_id: u16,
    /// Speed as carried on the wire.
    pub speed_mps: f64,
    pub published_at_s: f64,
    pub cancelled_at_s: Option<f64>,
    /// Vehicles the broker routed it to.
    pub targets: u32,
    pub delivered: u32,
    pub delivery_ms: Option<Spread>,
    pub end_to_end_ms: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TollMetrics {
    pub toll_point_id: u16,
    pub amount_cents: u16,
    pub published_at_s: f64,
    pub targets: u32,
    pub delivered: u32,
    pub delivery_ms: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetaActionOutcome {
    pub at_s: f64,
    pub vehicle_id: u32,
    pub applied: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedUpdateMetrics {
    pub at_s: f64,
    pub events: usize,
    pub diagnostics: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkCounters {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DropCounters {
    /// Broker-to-vehicle frames lost on the link, first sends and retries.
    pub downlink_lost: u64,
    /// Vehicle-to-broker frames lost: BSMs and acknowledgements.
    pub uplink_lost: u64,
    pub retransmissions: u64,
    /// Messages abandoned after the retry budget ran out.
    pub gave_up: u64,
    /// Redundant copies the vehicles discarded.
    pub duplicates: u64,
    /// Advisories vehicles ignored (wrong segment, stale, out of window).
    pub ignored_advisories: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleSummary {
    pub vehicle_id: u32,
    pub final_speed_mps: f64,
    pub final_odometer_m: f64,
    pub segment_id: u16,
    pub notices: usize,
    pub bsm_sent: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSample {
    pub vehicle_id: u32,
    pub t_s: f64,
    pub speed_mps: f64,
    pub odometer_m: f64,
    pub segment_id: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub seed: u64,
    pub profile: LinkProfile,
    pub duration_s: f64,
    pub advisories: Vec<AdvisoryMetrics>,
    pub deliveries: Vec<Delivery>,
    pub tolls: Vec<TollMetrics>,
    pub meta_actions: Vec<MetaActionOutcome>,
    pub feed_updates: Vec<FeedUpdateMetrics>,
    pub downlink: LinkCounters,
    pub uplink: LinkCounters,
    pub drops: DropCounters,
    /// Vehicles the service heard at least one BSM from.
    pub fleet_seen: usize,
    pub vehicles: Vec<VehicleSummary>,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
    #[serde(skip)]
    pub traces: Vec<TraceSample>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

impl RunMetrics {
    pub fn metrics_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER).expect("write to memory");
        for r in &self.rows {
            w.write_record([
                r.advisory_id.to_string(),
                r.vehicle_id.to_string(),
                cell(r.delivery_ms),
                cell(r.compliance_s),
            ])
            .expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("ascii")
    }

    pub fn traces_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["vehicle_id", "t_s", "speed_mps", "odometer_m", "segment_id"])
            .expect("write to memory");
        for s in &self.traces {
            w.write_record([
                s.vehicle_id.to_string(),
                format!("{:.1}", s.t_s),
                format!("{:.4}", s.speed_mps),
                format!("{:.3}", s.odometer_m),
                s.segment_id.to_string(),
            ])
            .expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("ascii")
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// Writes the metrics table to `out_dir/metrics_path` plus the summary and
    /// traces beside it. Returns the metrics table path.
    pub fn write(&self, out_dir: &Path, metrics_path: &str) -> std::io::Result<PathBuf> {
        let metrics = out_dir.join(metrics_path);
        if let Some(dir) = metrics.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::create_dir_all(out_dir)?;
        fs::write(&metrics, self.metrics_csv())?;
        fs::write(out_dir.join(SUMMARY_FILE), self.summary_json())?;
        fs::write(out_dir.join(TRACES_FILE), self.traces_csv())?;
        Ok(metrics)
    }
}
