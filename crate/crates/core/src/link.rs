//! Seeded network impairment.
//!
//! Each hop samples a uniform delay inside its technology profile's latency
//! envelope and drops frames with the profile's loss rate. A link is a pure
//! function of its seed: two links built from the same profile and seed make
//! identical decisions for identical traffic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error("unknown link profile `{0}` (expected wifi6, wifi4, lte or loopback)")]
    UnknownProfile(String),
    #[error("invalid latency bounds [{min}, {max}] ms")]
    Latency { min: f64, max: f64 },
    #[error("loss rate {0} outside [0, 1)")]
    LossRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    /// WiFi 6 (5 GHz) roadside unit.
    Wifi6,
    /// WiFi 4/5 (2.4 GHz) consumer router.
    Wifi4,
    /// Cellular LTE.
    Lte,
    Loopback,
}

impl ProfileName {
    pub const ALL: [ProfileName; 4] = [
        ProfileName::Wifi6,
        ProfileName::Wifi4,
        ProfileName::Lte,
        ProfileName::Loopback,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProfileName::Wifi6 => "wifi6",
            ProfileName::Wifi4 => "wifi4",
            ProfileName::Lte => "lte",
            ProfileName::Loopback => "loopback",
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProfileName {
    type Err = LinkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "wifi6" => Ok(ProfileName::Wifi6),
            "wifi4" | "wifi5" | "wifi45" => Ok(ProfileName::Wifi4),
            "lte" | "cellular" => Ok(ProfileName::Lte),
            "loopback" | "lo" => Ok(ProfileName::Loopback),
            _ => Err(LinkError::UnknownProfile(s.to_owned())),
        }
    }
}

/// Latency/loss envelope of one access technology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub name: ProfileName,
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    pub loss_rate: f64,
    /// Informational; not enforced.
    pub bandwidth_bps: u64,
}

impl LinkProfile {
    /// Built-in envelopes. Upper bounds are the measured "< 10 / < 50 / < 100 ms"
    /// figures; lower bounds are nominal floors.
    pub fn builtin(name: ProfileName) -> Self {
        let (min, max, bw) = match name {
            ProfileName::Wifi6 => (1.0, 10.0, 4_300_000_000),
            ProfileName::Wifi4 => (5.0, 50.0, 100_000_000),
            ProfileName::Lte => (20.0, 100.0, 50_000_000),
            ProfileName::Loopback => (0.0, 0.0, u64::MAX),
        };
        LinkProfile {
            name,
            latency_min_ms: min,
            latency_max_ms: max,
            loss_rate: 0.0,
            bandwidth_bps: bw,
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        let (min, max) = (self.latency_min_ms, self.latency_max_ms);
        if !(min.is_finite() && max.is_finite() && 0.0 <= min && min <= max) {
            return Err(LinkError::Latency { min, max });
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return Err(LinkError::LossRate(self.loss_rate));
        }
        Ok(())
    }

    pub fn with_loss(mut self, loss_rate: f64) -> Self {
        self.loss_rate = loss_rate;
        self
    }
}

/// Looks up a built-in profile by name.
pub fn builtin_profile(name: &str) -> Result<LinkProfile, LinkError> {
    Ok(LinkProfile::builtin(name.parse()?))
}

/// A profile reference with optional field overrides, as written in
/// scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverrides {
    pub profile: String,
    #[serde(default)]
    pub latency_min_ms: Option<f64>,
    #[serde(default)]
    pub latency_max_ms: Option<f64>,
    #[serde(default)]
    pub loss_rate: Option<f64>,
}

impl LinkOverrides {
    pub fn resolve(&self) -> Result<LinkProfile, LinkError> {
        let mut p = builtin_profile(&self.profile)?;
        if let Some(v) = self.latency_min_ms {
            p.latency_min_ms = v;
        }
        if let Some(v) = self.latency_max_ms {
            p.latency_max_ms = v;
        }
        if let Some(v) = self.loss_rate {
            p.loss_rate = v;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transmission {
    Scheduled { deliver_at: SimTime },
    Dropped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

struct Pending<F> {
    deliver_at: SimTime,
    order: u64,
    frame: F,
}

impl<F> PartialEq for Pending<F> {
    fn eq(&self, other: &Self) -> bool {
        self.deliver_at == other.deliver_at && self.order == other.order
    }
}
impl<F> Eq for Pending<F> {}
impl<F> PartialOrd for Pending<F> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<F> Ord for Pending<F> {
    // BinaryHeap is a max-heap; invert for earliest-first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.deliver_at, other.order).cmp(&(self.deliver_at, self.order))
    }
}

/// One direction of an impaired hop with its own delivery queue.
pub struct ImpairedLink<F> {
    profile: LinkProfile,
    seed: u64,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Pending<F>>,
    order: u64,
    stats: LinkStats,
}

impl<F> fmt::Debug for ImpairedLink<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImpairedLink")
            .field("profile", &self.profile)
            .field("seed", &self.seed)
            .field("queued", &self.queue.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl<F> ImpairedLink<F> {
    pub fn new(profile: LinkProfile, seed: u64) -> Result<Self, LinkError> {
        profile.validate()?;
        Ok(Self {
            profile,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            order: 0,
            stats: LinkStats::default(),
        })
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.profile
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    /// Uniform delay in `[latency_min_ms, latency_max_ms]`.
    pub fn sample_delay(&mut self) -> f64 {
        let (min, max) = (self.profile.latency_min_ms, self.profile.latency_max_ms);
        if min == max {
            min
        } else {
            self.rng.random_range(min..=max)
        }
    }

    /// Loss decision only, for callers that schedule delivery themselves.
    pub fn roll_loss(&mut self) -> bool {
        self.profile.loss_rate > 0.0 && self.rng.random::<f64>() < self.profile.loss_rate
    }

    /// Drops or schedules `frame`. Delays are independent per frame, so two
    /// frames sent close together may be delivered out of order.
    pub fn transmit(&mut self, frame: F, now: SimTime) -> Transmission {
        self.stats.sent += 1;
        if self.roll_loss() {
            self.stats.dropped += 1;
            return Transmission::Dropped;
        }
        let deliver_at = now + SimTime::from_millis_f64(self.sample_delay());
        self.queue.push(Pending {
            deliver_at,
            order: self.order,
            frame,
        });
        self.order += 1;
        Transmission::Scheduled { deliver_at }
    }

    pub fn next_delivery_at(&self) -> Option<SimTime> {
        self.queue.peek().map(|p| p.deliver_at)
    }

    /// Pops the earliest frame due at or before `now`.
    pub fn pop_due(&mut self, now: SimTime) -> Option<(SimTime, F)> {
        if self.next_delivery_at()? > now {
            return None;
        }
        let p = self.queue.pop()?;
        self.stats.delivered += 1;
        Some((p.deliver_at, p.frame))
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}
