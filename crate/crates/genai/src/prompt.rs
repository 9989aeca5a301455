//! Deterministic prompt template.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use cda_core::agent::VehicleState;
use cda_core::meta_action::{SafetyEnvelope, BLOCK_CLOSE, BLOCK_OPEN};
use cda_core::wire::mps_from_speed_units;
use cda_core::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSnapshot {
    pub vehicle_id: u32,
    pub segment_id: u16,
    pub speed_mps: f64,
    pub driver_set_speed_mps: f64,
    pub follow_gap_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorySummary {
    pub advisory_id: u16,
    pub segment_id: u16,
    pub speed_mps: f64,
    pub remaining_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub vehicle: Option<VehicleSnapshot>,
    pub advisory: Option<AdvisorySummary>,
    /// One line per traffic-feed event near the vehicle.
    pub feed: Vec<String>,
}

impl PromptContext {
    pub fn from_state<T: Real>(state: &VehicleState<T>, now: f64) -> Self {
        let vehicle = Some(VehicleSnapshot {
            vehicle_id: state.vehicle_id,
            segment_id: state.current_segment().segment_id,
            speed_mps: state.speed.as_f64(),
            driver_set_speed_mps: state.driver_set_speed.as_f64(),
            follow_gap_s: state.follow_gap_s.map(|g| g.as_f64()),
        });
        let advisory = state.active_advisory().and_then(|a| {
            Some(AdvisorySummary {
                advisory_id: a.payload.advisory_id,
                segment_id: a.payload.segment_id,
                speed_mps: mps_from_speed_units(a.payload.advisory_speed)?,
                remaining_s: (a.expires_at - now).max(0.0),
            })
        });
        Self {
            vehicle,
            advisory,
            feed: Vec::new(),
        }
    }

    pub fn with_feed(mut self, feed: Vec<String>) -> Self {
        self.feed = feed;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.vehicle.is_none() && self.advisory.is_none() && self.feed.is_empty()
    }
}

/// The fixed instructions every prompt starts with.
pub fn template_skeleton() -> String {
    let env = SafetyEnvelope::default();
    let mut s = String::new();
    s.push_str("You assist the longitudinal control of one vehicle.\n");
    s.push_str("Reply with exactly one command block and nothing that looks like another block:\n");
    let _ = writeln!(s, "{BLOCK_OPEN}");
    s.push_str("{\"action\": \"<Action>\", \"params\": {<name>: <value>, ...}}\n");
    let _ = writeln!(s, "{BLOCK_CLOSE}");
    s.push_str("Actions:\n");
    let _ = writeln!(
        s,
        "- SetCruiseSpeed speed_mps ({:.1}..{:.1})",
        env.speed_min, env.speed_max
    );
    let _ = writeln!(
        s,
        "- SetFollowGap gap_s ({:.1}..{:.1})",
        env.gap_min, env.gap_max
    );
    s.push_str("- ApplyAdvisorySpeed segment_id speed_mps duration_s\n");
    s.push_str("- CancelAdvisory segment_id\n");
    let _ = writeln!(
        s,
        "- DriverNotice text (max {} chars) severity (info|warn)",
        env.notice_max_len
    );
    s
}

pub fn build_prompt(context: &PromptContext) -> String {
    let mut s = template_skeleton();
    if context.is_empty() {
        return s;
    }
    s.push_str("Context:\n");
    if let Some(v) = &context.vehicle {
        let _ = writeln!(
            s,
            "vehicle {} on segment {} speed {:.2} m/s set speed {:.2} m/s",
            v.vehicle_id, v.segment_id, v.speed_mps, v.driver_set_speed_mps
        );
        if let Some(g) = v.follow_gap_s {
            let _ = writeln!(s, "follow gap {g:.1} s");
        }
    }
    if let Some(a) = &context.advisory {
        let _ = writeln!(
            s,
            "advisory {} on segment {} speed {:.2} m/s remaining {:.0} s",
            a.advisory_id, a.segment_id, a.speed_mps, a.remaining_s
        );
    }
    for line in &context.feed {
        let _ = writeln!(s, "feed: {}", line.replace('\n', " "));
    }
    s
}
