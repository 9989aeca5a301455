//! Advisory lifecycle without I/O: validation, id assignment, wire frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use cda_core::wire::{encode_frame, speed_units_from_mps, AdvisoryCause, AdvisoryPayload, Message, SPEED_UNIT_MPS};

/// Highest speed the 13-bit field can carry (8190 units).
pub const MAX_SPEED_MPS: f64 = 163.8;
/// 16-bit minute count.
pub const MAX_DURATION_S: f64 = 65_535.0 * 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvisoryStatus {
    Active,
    Expired,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryRequest {
    pub segment_id: u16,
    pub speed_mps: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub cause: AdvisoryCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryRecord {
    pub advisory_id: u16,
    pub segment_id: u16,
    pub speed_mps: f64,
    pub duration_s: f64,
    pub cause: AdvisoryCause,
    /// Unix seconds.
    pub created_at: f64,
    pub status: AdvisoryStatus,
}

impl AdvisoryRecord {
    pub fn expires_at(&self) -> f64 {
        self.created_at + self.duration_s
    }

    pub fn payload(&self) -> AdvisoryPayload {
        AdvisoryPayload {
            advisory_id: self.advisory_id,
            segment_id: self.segment_id,
            advisory_speed: speed_units_from_mps(self.speed_mps),
            start_minute_of_year: AdvisoryPayload::START_IMMEDIATE,
            duration_minutes: (self.duration_s / 60.0).ceil() as u16,
            cause: self.cause,
        }
    }

    /// Frame announcing the advisory.
    pub fn frame(&self) -> Vec<u8> {
        encode_frame(&Message::Advisory(self.payload())).expect("validated record encodes")
    }

    /// Frame withdrawing it: same id, cancel speed.
    pub fn cancel_frame(&self) -> Vec<u8> {
        let payload = AdvisoryPayload {
            advisory_speed: AdvisoryPayload::CANCEL,
            ..self.payload()
        };
        encode_frame(&Message::Advisory(payload)).expect("validated record encodes")
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum BookError {
    #[error("{field} = {value} outside [{min}, {max}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("advisory ids exhausted")]
    IdsExhausted,
    #[error("no advisory {id}")]
    NotFound { id: u16 },
    #[error("advisory {id} is already {status:?}")]
    NotActive { id: u16, status: AdvisoryStatus },
}

pub fn validate_request(req: &AdvisoryRequest) -> Result<(), BookError> {
    let check = |field, value: f64, min, max| {
        if value.is_finite() && (min..=max).contains(&value) {
            Ok(())
        } else {
            Err(BookError::OutOfRange {
                field,
                value,
                min,
                max,
            })
        }
    };
    check("speed_mps", req.speed_mps, 0.0, MAX_SPEED_MPS)?;
    check("duration_s", req.duration_s, 1.0, MAX_DURATION_S)?;
    Ok(())
}

/// Round trip of a speed through the wire field.
pub fn wire_speed_mps(speed_mps: f64) -> f64 {
    f64::from(speed_units_from_mps(speed_mps)) * SPEED_UNIT_MPS
}

/// Every advisory the service has issued, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct AdvisoryBook {
    records: Vec<AdvisoryRecord>,
    next_id: u32,
}

impl AdvisoryBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[AdvisoryRecord] {
        &self.records
    }

    pub fn get(&self, id: u16) -> Option<&AdvisoryRecord> {
        self.records.iter().find(|r| r.advisory_id == id)
    }

    pub fn active(&self) -> impl Iterator<Item = &AdvisoryRecord> {
        self.records.iter().filter(|r| r.status == AdvisoryStatus::Active)
    }

    /// Latest active advisory on a segment.
    pub fn active_on(&self, segment_id: u16) -> Option<&AdvisoryRecord> {
        self.active()
            .filter(|r| r.segment_id == segment_id)
            .max_by_key(|r| r.advisory_id)
    }

    pub fn next_id(&self) -> Option<u16> {
        u16::try_from(self.next_id).ok()
    }

    /// Builds the record for a request without storing it.
    pub fn prepare(&self, req: &AdvisoryRequest, now: f64) -> Result<AdvisoryRecord, BookError> {
        validate_request(req)?;
        let id = self.next_id().ok_or(BookError::IdsExhausted)?;
        Ok(AdvisoryRecord {
            advisory_id: id,
            segment_id: req.segment_id,
            speed_mps: req.speed_mps,
            duration_s: req.duration_s,
            cause: req.cause,
            created_at: now,
            status: AdvisoryStatus::Active,
        })
    }

    /// Stores a record, e.g. one from [`Self::prepare`] or a replayed log.
    pub fn insert(&mut self, record: AdvisoryRecord) {
        self.next_id = self.next_id.max(u32::from(record.advisory_id) + 1);
        match self.records.iter_mut().find(|r| r.advisory_id == record.advisory_id) {
            Some(r) => *r = record,
            None => self.records.push(record),
        }
    }

    pub fn check_cancel(&self, id: u16) -> Result<&AdvisoryRecord, BookError> {
        let r = self.get(id).ok_or(BookError::NotFound { id })?;
        if r.status != AdvisoryStatus::Active {
            return Err(BookError::NotActive { id, status: r.status });
        }
        Ok(r)
    }

    pub fn set_status(&mut self, id: u16, status: AdvisoryStatus) -> Option<&AdvisoryRecord> {
        let r = self.records.iter_mut().find(|r| r.advisory_id == id)?;
        if r.status == AdvisoryStatus::Active {
            r.status = status;
        }
        Some(r)
    }

    /// Active advisories whose duration has run out.
    pub fn due_to_expire(&self, now: f64) -> Vec<u16> {
        self.active()
            .filter(|r| r.expires_at() <= now)
            .map(|r| r.advisory_id)
            .collect()
    }
}
