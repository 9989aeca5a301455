//! Scenario documents.
//!
//! A scenario is a TOML file:
//!
//! ```toml
//! name = "advisory_lte_20veh"
//! seed = 42
//! duration_s = 40.0
//! region = "fl"                 # optional, default "fl"
//! metrics_path = "metrics.csv"  # optional, relative to the output directory
//!
//! [link]                        # built-in profile plus optional overrides
//! profile = "lte"
//! loss_rate = 0.02
//!
//! [vehicles]
//! count = 20
//! driver_set_speed_mps = 30.0   # optional, default 30
//! initial_speed_mps = 30.0      # optional, defaults to the set speed
//! spacing_m = 50.0              # optional, gap between starting positions
//! first_odometer_m = 0.0        # optional
//! first_id = 1                  # optional, vehicle ids count up from here
//!
//! [[route]]
//! segment_id = 12
//! start = { lat = 28.50, lon = -81.40 }
//! end = { lat = 28.545, lon = -81.40 }
//! length_m = 5000.0
//!
//! [[timeline]]
//! at_s = 5.0
//! event = "create_advisory"
//! segment_id = 12
//! speed_mps = 20.0
//! duration_s = 30.0
//! ```
//!
//! Timeline events are `create_advisory`, `cancel_advisory {advisory_id}`,
//! `metaaction_text {text, vehicle?}` (vehicle is an index, all vehicles when
//! absent), `feed_update {path}` (relative to the scenario file) and
//! `toll {toll_point_id, amount_cents, lane_mask?}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use cda_core::agent::{Route, RouteError, Segment};
use cda_core::link::{LinkError, LinkOverrides, LinkProfile};
use cda_core::wire::AdvisoryCause;
use cda_service::book::{validate_request, AdvisoryRequest};

/// Upper bound on simulated time, one day.
pub const MAX_DURATION_S: f64 = 86_400.0;

const BUNDLED: [(&str, &str); 3] = [
    ("advisory_lte_20veh", include_str!("../scenarios/advisory_lte_20veh.toml")),
    ("no_advisory", include_str!("../scenarios/no_advisory.toml")),
    ("toll_wifi6_5veh", include_str!("../scenarios/toll_wifi6_5veh.toml")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("link: {0}")]
    Link(#[from] LinkError),
    #[error("route: {0}")]
    Route(#[from] RouteError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub count: u32,
    #[serde(default = "default_set_speed")]
    pub driver_set_speed_mps: f64,
    #[serde(default)]
    pub initial_speed_mps: Option<f64>,
    #[serde(default = "default_spacing")]
    pub spacing_m: f64,
    #[serde(default)]
    pub first_odometer_m: f64,
    #[serde(default = "default_first_id")]
    pub first_id: u32,
}

fn default_set_speed() -> f64 {
    30.0
}

fn default_spacing() -> f64 {
    50.0
}

fn default_first_id() -> u32 {
    1
}

fn default_region() -> String {
    "fl".into()
}

fn default_metrics_path() -> String {
    "metrics.csv".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Action {
    CreateAdvisory {
        segment_id: u16,
        speed_mps: f64,
        duration_s: f64,
        #[serde(default)]
        cause: AdvisoryCause,
    },
    CancelAdvisory {
        advisory_id: u16,
    },
    MetaactionText {
        text: String,
        #[serde(default)]
        vehicle: Option<usize>,
    },
    FeedUpdate {
        path: PathBuf,
    },
    Toll {
        toll_point_id: u16,
        amount_cents: u16,
        #[serde(default)]
        lane_mask: u8,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub at_s: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_region")]
    pub region: String,
    #[serde(default = "default_metrics_path")]
    pub metrics_path: String,
    pub link: LinkOverrides,
    pub vehicles: VehicleSpec,
    pub route: Vec<Segment>,
    #[serde(default)]
    pub timeline: Vec<TimedEvent>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut s = Self::parse(&text)?;
        s.base_dir = path.parent().map(Path::to_owned).unwrap_or_default();
        Ok(s)
    }

    pub fn bundled(name: &str) -> Option<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text).expect("bundled scenario is valid"))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn profile(&self) -> Result<LinkProfile, ScenarioError> {
        Ok(self.link.resolve()?)
    }

    pub fn build_route(&self) -> Result<Route, ScenarioError> {
        Ok(Route::new(self.route.clone())?)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0 && self.duration_s <= MAX_DURATION_S) {
            return invalid(format!("duration_s {} outside (0, {MAX_DURATION_S}]", self.duration_s));
        }
        self.profile()?;
        let route = self.build_route()?;
        let v = &self.vehicles;
        if v.count == 0 {
            return invalid("vehicles.count must be at least 1".into());
        }
        if v.first_id.checked_add(v.count - 1).is_none() {
            return invalid("vehicle ids overflow".into());
        }
        let speeds = [Some(v.driver_set_speed_mps), v.initial_speed_mps];
        if speeds.iter().flatten().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return invalid("vehicle speeds must be finite and non-negative".into());
        }
        let last = v.first_odometer_m + v.spacing_m * f64::from(v.count - 1);
        if !(v.first_odometer_m >= 0.0 && v.spacing_m >= 0.0 && last <= route.length_m()) {
            return invalid(format!(
                "vehicle positions {}..{last} m outside the {} m route",
                v.first_odometer_m,
                route.length_m()
            ));
        }
        for (i, e) in self.timeline.iter().enumerate() {
            if !(e.at_s.is_finite() && (0.0..=self.duration_s).contains(&e.at_s)) {
                return invalid(format!("timeline[{i}] at_s {} outside [0, {}]", e.at_s, self.duration_s));
            }
            match &e.action {
                Action::CreateAdvisory {
                    segment_id,
                    speed_mps,
                    duration_s,
                    cause,
                } => {
                    validate_request(&AdvisoryRequest {
                        segment_id: *segment_id,
                        speed_mps: *speed_mps,
                        duration_s: *duration_s,
                        cause: *cause,
                    })
                    .or_else(|err| invalid(format!("timeline[{i}]: {err}")))?;
                }
                Action::MetaactionText {
                    vehicle: Some(idx), ..
                } if *idx >= v.count as usize => {
                    return invalid(format!("timeline[{i}] vehicle {idx} out of range"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
seed = 1
duration_s = 10.0
[link]
profile = "wifi6"
[vehicles]
count = 2
[[route]]
segment_id = 1
start = { lat = 28.0, lon = -81.0 }
end = { lat = 28.01, lon = -81.0 }
length_m = 1100.0
"#;

    #[test]
    fn bundled_scenarios_parse() {
        for name in Scenario::bundled_names() {
            let s = Scenario::bundled(name).unwrap();
            assert_eq!(s.name, name);
        }
        let s = Scenario::bundled("advisory_lte_20veh").unwrap();
        assert_eq!((s.seed, s.vehicles.count), (42, 20));
        assert_eq!(s.profile().unwrap().loss_rate, 0.02);
        assert!(Scenario::bundled("nope").is_none());
    }

    #[test]
    fn defaults_apply() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.region, "fl");
        assert_eq!(s.metrics_path, "metrics.csv");
        assert_eq!(s.vehicles.driver_set_speed_mps, 30.0);
        assert!(s.timeline.is_empty());
    }

    #[test]
    fn timeline_events_parse() {
        let text = format!(
            "{MINIMAL}\n{}",
            r#"
[[timeline]]
at_s = 1
event = "create_advisory"
segment_id = 1
speed_mps = 20
duration_s = 60
cause = "incident"

[[timeline]]
at_s = 2.5
event = "metaaction_text"
vehicle = 1
text = "hello"

[[timeline]]
at_s = 3
event = "toll"
toll_point_id = 7
amount_cents = 125
"#
        );
        let s = Scenario::parse(&text).unwrap();
        assert_eq!(
            s.timeline[0].action,
            Action::CreateAdvisory {
                segment_id: 1,
                speed_mps: 20.0,
                duration_s: 60.0,
                cause: AdvisoryCause::Incident
            }
        );
        assert!(matches!(s.timeline[1].action, Action::MetaactionText { vehicle: Some(1), .. }));
        assert!(matches!(s.timeline[2].action, Action::Toll { lane_mask: 0, .. }));
    }

    #[test]
    fn rejects_bad_documents() {
        let cases = [
            MINIMAL.replace("count = 2", "count = 0"),
            MINIMAL.replace("duration_s = 10.0", "duration_s = -1.0"),
            MINIMAL.replace("profile = \"wifi6\"", "profile = \"5g\""),
            MINIMAL.replace("profile = \"wifi6\"", "profile = \"lte\"\nloss_rate = 1.0"),
            MINIMAL.replace("count = 2", "count = 30"),
            MINIMAL.replace("length_m = 1100.0", "length_m = 0.0"),
            MINIMAL.replace("seed = 1", "seed = 1\nbogus = 2"),
            format!("{MINIMAL}\n[[timeline]]\nat_s = 11\nevent = \"toll\"\ntoll_point_id = 1\namount_cents = 1\n"),
            format!(
                "{MINIMAL}\n[[timeline]]\nat_s = 1\nevent = \"create_advisory\"\nsegment_id = 1\nspeed_mps = -2\nduration_s = 60\n"
            ),
            format!("{MINIMAL}\n[[timeline]]\nat_s = 1\nevent = \"metaaction_text\"\nvehicle = 2\ntext = \"x\"\n"),
            format!("{MINIMAL}\n[[timeline]]\nat_s = 1\nevent = \"launch\"\n"),
        ];
        for (i, c) in cases.iter().enumerate() {
            assert!(Scenario::parse(c).is_err(), "case {i} accepted");
        }
    }
}
