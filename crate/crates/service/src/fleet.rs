//! Per-vehicle view assembled from received BSMs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use cda_core::agent::Segment;
use cda_core::wire::{mps_from_speed_units, BsmPayload};

use crate::book::AdvisoryBook;

pub const STALE_AFTER_S: f64 = 5.0;
/// Minimum spacing of fleet deltas per vehicle (2 Hz).
pub const DELTA_INTERVAL_S: f64 = 0.5;
/// A position farther than this from every segment has no segment.
pub const MATCH_RADIUS_M: f64 = 100.0;

const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Segment geometry used to place vehicles on the road.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RouteMap {
    pub segments: Vec<Segment>,
}

impl RouteMap {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// Nearest segment within [`MATCH_RADIUS_M`].
    pub fn locate(&self, lat: f64, lon: f64) -> Option<u16> {
        self.segments
            .iter()
            .map(|s| (s.segment_id, distance_to_segment_m(s, lat, lon)))
            .filter(|(_, d)| *d <= MATCH_RADIUS_M)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(id, _)| id)
    }
}

/// Flat-earth approximation around the segment start; fine at road scale.
fn distance_to_segment_m(s: &Segment, lat: f64, lon: f64) -> f64 {
    let k = s.start.lat.to_radians().cos();
    let to_xy = |la: f64, lo: f64| {
        (
            (lo - s.start.lon).to_radians() * k * EARTH_RADIUS_M,
            (la - s.start.lat).to_radians() * EARTH_RADIUS_M,
        )
    };
    let (bx, by) = to_xy(s.end.lat, s.end.lon);
    let (px, py) = to_xy(lat, lon);
    let len2 = bx * bx + by * by;
    let t = if len2 > 0.0 {
        ((px * bx + py * by) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((px - t * bx).powi(2) + (py - t * by).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleView {
    pub vehicle_id: u32,
    pub segment: Option<u16>,
    pub speed_mps: Option<f64>,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub last_bsm_at: f64,
    pub active_advisory_id: Option<u16>,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FleetView {
    pub vehicles: Vec<VehicleView>,
}

#[derive(Debug, Clone)]
struct Track {
    bsm: BsmPayload,
    last_bsm_at: f64,
    last_emit_at: Option<f64>,
    emitted: Option<VehicleView>,
}

#[derive(Debug, Clone, Default)]
pub struct FleetTracker {
    routes: RouteMap,
    tracks: BTreeMap<u32, Track>,
}

impl FleetTracker {
    pub fn new(routes: RouteMap) -> Self {
        Self {
            routes,
            tracks: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, bsm: BsmPayload, now: f64) {
        let t = self.tracks.entry(bsm.temp_id).or_insert(Track {
            bsm,
            last_bsm_at: now,
            last_emit_at: None,
            emitted: None,
        });
        t.bsm = bsm;
        t.last_bsm_at = now;
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    fn vehicle(&self, t: &Track, now: f64, book: &AdvisoryBook) -> VehicleView {
        let b = &t.bsm;
        let lat = (b.lat != BsmPayload::LAT_UNAVAILABLE).then(|| f64::from(b.lat) * 1e-7);
        let lon = (b.lon != BsmPayload::LON_UNAVAILABLE).then(|| f64::from(b.lon) * 1e-7);
        let segment = match (lat, lon) {
            (Some(la), Some(lo)) => self.routes.locate(la, lo),
            _ => None,
        };
        VehicleView {
            vehicle_id: b.temp_id,
            segment,
            speed_mps: mps_from_speed_units(b.speed),
            lat,
            lon,
            last_bsm_at: t.last_bsm_at,
            active_advisory_id: segment
                .and_then(|s| book.active_on(s))
                .map(|r| r.advisory_id),
            stale: now - t.last_bsm_at > STALE_AFTER_S,
        }
    }

    pub fn view(&self, now: f64, book: &AdvisoryBook) -> FleetView {
        FleetView {
            vehicles: self
                .tracks
                .values()
                .map(|t| self.vehicle(t, now, book))
                .collect(),
        }
    }

    /// Vehicles whose view changed since last emitted, at most one per
    /// vehicle per [`DELTA_INTERVAL_S`]. Changes held back are returned by a
    /// later call.
    pub fn due_deltas(&mut self, now: f64, book: &AdvisoryBook) -> Vec<VehicleView> {
        let ids: Vec<u32> = self.tracks.keys().copied().collect();
        let mut out = Vec::new();
        for id in ids {
            let view = self.vehicle(&self.tracks[&id], now, book);
            let t = self.tracks.get_mut(&id).expect("listed above");
            if t.emitted.as_ref() == Some(&view) {
                continue;
            }
            if t.last_emit_at.is_some_and(|at| now - at < DELTA_INTERVAL_S) {
                continue;
            }
            t.last_emit_at = Some(now);
            t.emitted = Some(view.clone());
            out.push(view);
        }
        out
    }
}
