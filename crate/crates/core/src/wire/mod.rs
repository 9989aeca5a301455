//! Bit-packed V2X messages (a J2735-flavoured subset) and the CRC-protected
//! frame that carries them.
//!
//! Frame layout, all multi-byte integers big-endian:
//!
//! ```text
//! [msg_type:1][payload_len:2][payload][crc:2]
//! ```
//!
//! The CRC covers everything before it. Payloads are fixed-width fields
//! packed MSB-first and zero-padded to a byte boundary; see [`codec`] for
//! the per-message layouts.

pub mod bits;
pub mod codec;
mod crc16;

pub use bits::{decode_offset_field, encode_offset_field, BitReader, BitWriter};
pub use codec::{
    decode_frame, decode_payload, encode_frame, encode_payload, AdvisoryCause, AdvisoryPayload,
    BsmPayload, Currency, Message, MessageFrame, MessageType, TollPayload, FRAME_OVERHEAD,
};
pub use crc16::crc16;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("bit width {0} outside 1..=64")]
    Width(u32),
    #[error("value {value} does not fit in {width} bits")]
    Range { value: u64, width: u32 },
    #[error("value {value} with offset {offset} is negative")]
    NegativeOffset { value: i64, offset: i64 },
    #[error("short buffer: need {needed} bytes, have {available}")]
    ShortBuffer { needed: usize, available: usize },
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("crc mismatch: frame carries {carried:#06x}, computed {computed:#06x}")]
    CrcMismatch { carried: u16, computed: u16 },
    #[error("nonzero padding bits")]
    NonZeroPadding,
    #[error("field `{field}` out of range: {value}")]
    FieldRange { field: &'static str, value: i64 },
}

/// Speed and advisory-speed unit: 0.02 m/s.
pub const SPEED_UNIT_MPS: f64 = 0.02;
/// Largest representable speed value; 8191 is the unavailable sentinel.
pub const SPEED_MAX_UNITS: u16 = 8190;
pub const SPEED_UNAVAILABLE: u16 = 8191;
/// Heading unit: 0.0125 degrees.
pub const HEADING_UNIT_DEG: f64 = 0.0125;

/// Converts m/s into 0.02 m/s units, saturating at 8190.
pub fn speed_units_from_mps(mps: f64) -> u16 {
    if !mps.is_finite() || mps <= 0.0 {
        return if mps == f64::INFINITY { SPEED_MAX_UNITS } else { 0 };
    }
    let units = (mps / SPEED_UNIT_MPS).round();
    if units >= f64::from(SPEED_MAX_UNITS) {
        SPEED_MAX_UNITS
    } else {
        units as u16
    }
}

/// Inverse of [`speed_units_from_mps`]; `None` for the unavailable sentinel.
pub fn mps_from_speed_units(units: u16) -> Option<f64> {
    (units <= SPEED_MAX_UNITS).then(|| f64::from(units) * SPEED_UNIT_MPS)
}
