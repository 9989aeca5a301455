//! Simulated edge vehicle: longitudinal kinematics, BSM snapshots and the
//! advisory-speed state machine.
//!
//! Time arguments (`now`) are seconds since the start of the year, which
//! keeps advisory windows (expressed in minute-of-year) directly comparable.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;
use crate::wire::{
    mps_from_speed_units, speed_units_from_mps, AdvisoryPayload, BsmPayload, HEADING_UNIT_DEG,
};

/// |speed - advisory| below this counts as compliant.
pub const COMPLIANCE_TOLERANCE_MPS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouteError {
    #[error("route has no segments")]
    Empty,
    #[error("segment {0} has non-positive length")]
    Length(u16),
    #[error("segment {0} has coordinates out of range")]
    Coordinates(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Straight road segment between two coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: u16,
    pub start: GeoPoint,
    pub end: GeoPoint,
    pub length_m: f64,
}

impl Segment {
    /// Initial great-circle bearing from start to end, degrees in [0, 360).
    pub fn bearing_deg(&self) -> f64 {
        let (p1, p2) = (self.start.lat.to_radians(), self.end.lat.to_radians());
        let dl = (self.end.lon - self.start.lon).to_radians();
        let y = dl.sin() * p2.cos();
        let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
        y.atan2(x).to_degrees().rem_euclid(360.0)
    }

    pub fn interpolate(&self, fraction: f64) -> GeoPoint {
        let f = fraction.clamp(0.0, 1.0);
        GeoPoint {
            lat: self.start.lat + f * (self.end.lat - self.start.lat),
            lon: self.start.lon + f * (self.end.lon - self.start.lon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    segments: Vec<Segment>,
}

impl Route {
    pub fn new(segments: Vec<Segment>) -> Result<Self, RouteError> {
        if segments.is_empty() {
            return Err(RouteError::Empty);
        }
        for s in &segments {
            if !(s.length_m.is_finite() && s.length_m > 0.0) {
                return Err(RouteError::Length(s.segment_id));
            }
            if !s.start.is_valid() || !s.end.is_valid() {
                return Err(RouteError::Coordinates(s.segment_id));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn length_m(&self) -> f64 {
        self.segments.iter().map(|s| s.length_m).sum()
    }

    /// Segment index and offset into it for an odometer reading. The end of
    /// the route belongs to the last segment.
    pub fn locate(&self, odometer_m: f64) -> (usize, f64) {
        let mut remaining = odometer_m.max(0.0);
        for (i, s) in self.segments.iter().enumerate() {
            if remaining < s.length_m {
                return (i, remaining);
            }
            remaining -= s.length_m;
        }
        let last = self.segments.len() - 1;
        (last, self.segments[last].length_m)
    }

    pub fn segment_at(&self, odometer_m: f64) -> &Segment {
        &self.segments[self.locate(odometer_m).0]
    }
}

/// First-order longitudinal speed controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLaw<T> {
    /// 1/s
    pub gain: T,
    /// m/s², positive
    pub accel_max: T,
    /// m/s², negative
    pub decel_max: T,
    /// seconds
    pub tick: T,
}

impl<T: Real> Default for ControlLaw<T> {
    fn default() -> Self {
        Self {
            gain: T::lit(0.5),
            accel_max: T::lit(2.0),
            decel_max: T::lit(-3.0),
            tick: T::lit(0.1),
        }
    }
}

impl<T: Real> ControlLaw<T> {
    /// `gain * tick <= 1` keeps the discrete update from overshooting.
    pub fn is_valid(&self) -> bool {
        self.gain > T::zero()
            && self.decel_max < T::zero()
            && T::zero() < self.accel_max
            && self.tick > T::zero()
            && self.gain * self.tick <= T::one()
    }

    pub fn acceleration(&self, speed: T, target: T) -> T {
        (self.gain * (target - speed))
            .max(self.decel_max)
            .min(self.accel_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoticeSeverity {
    Info,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverNotice {
    pub text: String,
    pub severity: NoticeSeverity,
    pub at: f64,
}

/// An advisory the vehicle is currently honouring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveAdvisory {
    pub payload: AdvisoryPayload,
    pub received_at: f64,
    pub expires_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvisoryDecision {
    Activated,
    Replaced,
    Cancelled,
    IgnoredSegment,
    IgnoredWindow,
    IgnoredStale,
}

impl AdvisoryDecision {
    pub fn is_ignored(self) -> bool {
        matches!(
            self,
            Self::IgnoredSegment | Self::IgnoredWindow | Self::IgnoredStale
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentChange {
    pub from: u16,
    pub to: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState<T> {
    pub vehicle_id: u32,
    route: Arc<Route>,
    odometer: T,
    pub speed: T,
    pub driver_set_speed: T,
    /// Time-gap setpoint held for the car-following controller.
    pub follow_gap_s: Option<T>,
    active_advisory: Option<ActiveAdvisory>,
    msg_cnt: u8,
    pub notices: Vec<DriverNotice>,
    pub ignored_advisories: u64,
}

impl<T: Real> VehicleState<T> {
    pub fn new(vehicle_id: u32, route: Arc<Route>, odometer_m: T, driver_set_speed: T) -> Self {
        let extent = T::lit(route.length_m());
        Self {
            vehicle_id,
            route,
            odometer: odometer_m.max(T::zero()).min(extent),
            speed: driver_set_speed.max(T::zero()),
            driver_set_speed,
            follow_gap_s: None,
            active_advisory: None,
            msg_cnt: 0,
            notices: Vec::new(),
            ignored_advisories: 0,
        }
    }

    pub fn with_speed(mut self, speed: T) -> Self {
        self.speed = speed.max(T::zero());
        self
    }

    pub fn route(&self) -> &Arc<Route> {
        &self.route
    }

    pub fn odometer(&self) -> T {
        self.odometer
    }

    pub fn msg_cnt(&self) -> u8 {
        self.msg_cnt
    }

    pub fn current_segment(&self) -> &Segment {
        self.route.segment_at(self.odometer.as_f64())
    }

    pub fn active_advisory(&self) -> Option<&ActiveAdvisory> {
        self.active_advisory.as_ref()
    }

    fn advisory_applies(&self, now: f64) -> Option<&ActiveAdvisory> {
        self.active_advisory.as_ref().filter(|a| {
            a.payload.segment_id == self.current_segment().segment_id
                && now <= a.expires_at
                && !a.payload.is_cancel()
        })
    }

    /// Speed the controller is steering toward. Advisories only ever lower it.
    pub fn effective_target(&self, now: f64) -> T {
        match self
            .advisory_applies(now)
            .and_then(|a| mps_from_speed_units(a.payload.advisory_speed))
        {
            Some(adv) => self.driver_set_speed.min(T::lit(adv)),
            None => self.driver_set_speed,
        }
    }

    /// Advances one control period.
    pub fn tick(&mut self, law: &ControlLaw<T>, now: f64) -> Option<SegmentChange> {
        let before = self.current_segment().segment_id;
        let target = self.effective_target(now);
        let accel = law.acceleration(self.speed, target);
        self.speed = (self.speed + accel * law.tick).max(T::zero());
        let extent = T::lit(self.route.length_m());
        self.odometer = (self.odometer + self.speed * law.tick).min(extent);

        if self.active_advisory.is_some_and(|a| now > a.expires_at) {
            self.active_advisory = None;
        }
        let after = self.current_segment().segment_id;
        if after == before {
            return None;
        }
        if self
            .active_advisory
            .is_some_and(|a| a.payload.segment_id != after)
        {
            self.active_advisory = None;
        }
        Some(SegmentChange {
            from: before,
            to: after,
        })
    }

    /// Builds the next BSM and advances the rolling message counter.
    pub fn bsm_snapshot(&mut self, now: f64) -> BsmPayload {
        let (index, offset) = self.route.locate(self.odometer.as_f64());
        let segment = &self.route.segments()[index];
        let pos = segment.interpolate(offset / segment.length_m);
        let heading = ((segment.bearing_deg() / HEADING_UNIT_DEG).round() as u32 % 28_800) as u16;
        let sec_mark = ((now * 1_000.0).floor().max(0.0) as u64 % 60_000) as u16;
        let bsm = BsmPayload {
            msg_cnt: self.msg_cnt,
            temp_id: self.vehicle_id,
            sec_mark,
            lat: (pos.lat * 1e7).round() as i32,
            lon: (pos.lon * 1e7).round() as i32,
            elev: BsmPayload::ELEV_UNAVAILABLE,
            speed: speed_units_from_mps(self.speed.as_f64()),
            heading,
        };
        self.msg_cnt = (self.msg_cnt + 1) % 128;
        bsm
    }

    /// Applies an incoming advisory for this vehicle.
    pub fn on_advisory(&mut self, advisory: AdvisoryPayload, now: f64) -> AdvisoryDecision {
        let decision = self.decide(&advisory, now);
        match decision {
            AdvisoryDecision::Activated | AdvisoryDecision::Replaced => {
                let start = if advisory.start_minute_of_year == AdvisoryPayload::START_IMMEDIATE {
                    now
                } else {
                    f64::from(advisory.start_minute_of_year) * 60.0
                };
                self.active_advisory = Some(ActiveAdvisory {
                    payload: advisory,
                    received_at: now,
                    expires_at: start + f64::from(advisory.duration_minutes) * 60.0,
                });
            }
            AdvisoryDecision::Cancelled => self.active_advisory = None,
            _ => self.ignored_advisories += 1,
        }
        decision
    }

    fn decide(&self, advisory: &AdvisoryPayload, now: f64) -> AdvisoryDecision {
        if advisory.segment_id != self.current_segment().segment_id {
            return AdvisoryDecision::IgnoredSegment;
        }
        let current = self
            .active_advisory
            .filter(|a| a.payload.segment_id == advisory.segment_id);
        if advisory.is_cancel() {
            // A cancel carries the id of the advisory it withdraws.
            return match current {
                Some(a) if advisory.advisory_id >= a.payload.advisory_id => {
                    AdvisoryDecision::Cancelled
                }
                _ => AdvisoryDecision::IgnoredStale,
            };
        }
        if advisory.start_minute_of_year != AdvisoryPayload::START_IMMEDIATE {
            let start = f64::from(advisory.start_minute_of_year) * 60.0;
            let end = start + f64::from(advisory.duration_minutes) * 60.0;
            if now < start || now > end {
                return AdvisoryDecision::IgnoredWindow;
            }
        }
        match current {
            None => AdvisoryDecision::Activated,
            Some(a) if advisory.advisory_id > a.payload.advisory_id => AdvisoryDecision::Replaced,
            Some(_) => AdvisoryDecision::IgnoredStale,
        }
    }
}

/// Seconds from `received_at` until the first trace sample within
/// [`COMPLIANCE_TOLERANCE_MPS`] of `advisory_mps`; `None` when never reached.
pub fn compliance_time<T: Real>(trace: &[(f64, T)], advisory_mps: T, received_at: f64) -> Option<f64> {
    let tol = T::lit(COMPLIANCE_TOLERANCE_MPS);
    trace
        .iter()
        .find(|(t, v)| *t >= received_at && (*v - advisory_mps).abs() < tol)
        .map(|(t, _)| t - received_at)
}
