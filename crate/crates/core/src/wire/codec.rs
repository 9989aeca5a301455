//! Message layouts and frame encode/decode.
//!
//! | message  | fields (bits)                                                                                   | total |
//! |----------|-------------------------------------------------------------------------------------------------|-------|
//! | BSM      | msg_cnt 7, temp_id 32, sec_mark 16, lat 31 (+900000000), lon 32 (+1799999999), elev 16 (+4096), speed 13, heading 15 | 162 |
//! | Advisory | advisory_id 16, segment_id 16, advisory_speed 13, start_minute_of_year 17, duration_minutes 16, cause 8 | 86 |
//! | Toll     | toll_point_id 16, amount_cents 16, currency 8, lane_mask 8                                       | 48    |

use serde::{Deserialize, Serialize};

use super::bits::{decode_offset_field, encode_offset_field, BitReader, BitWriter};
use super::{crc16, WireError};

/// Header (type + length) plus trailing CRC.
pub const FRAME_OVERHEAD: usize = 5;

const LAT_OFFSET: i64 = 900_000_000;
const LON_OFFSET: i64 = 1_799_999_999;
const ELEV_OFFSET: i64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageType {
    Bsm,
    Advisory,
    Toll,
}

impl MessageType {
    pub const fn code(self) -> u8 {
        match self {
            MessageType::Bsm => 20,
            MessageType::Advisory => 31,
            MessageType::Toll => 240,
        }
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            20 => Some(MessageType::Bsm),
            31 => Some(MessageType::Advisory),
            240 => Some(MessageType::Toll),
            _ => None,
        }
    }

    /// Fixed payload size in bytes.
    pub const fn payload_len(self) -> usize {
        match self {
            MessageType::Bsm => 21,
            MessageType::Advisory => 11,
            MessageType::Toll => 6,
        }
    }

    pub const fn payload_bits(self) -> usize {
        match self {
            MessageType::Bsm => 162,
            MessageType::Advisory => 86,
            MessageType::Toll => 48,
        }
    }
}

/// Basic safety message core data subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BsmPayload {
    /// 0..=127, rolling.
    pub msg_cnt: u8,
    pub temp_id: u32,
    /// Milliseconds within the minute, 0..=60999, 65535 unavailable.
    pub sec_mark: u16,
    /// 1e-7 degrees, 900000001 unavailable.
    pub lat: i32,
    /// 1e-7 degrees, 1800000001 unavailable.
    pub lon: i32,
    /// 0.1 m, -4096 unavailable.
    pub elev: i32,
    /// 0.02 m/s, 8191 unavailable.
    pub speed: u16,
    /// 0.0125 degrees, 28800 unavailable.
    pub heading: u16,
}

impl BsmPayload {
    pub const SEC_MARK_UNAVAILABLE: u16 = 65535;
    pub const LAT_UNAVAILABLE: i32 = 900_000_001;
    pub const LON_UNAVAILABLE: i32 = 1_800_000_001;
    pub const ELEV_UNAVAILABLE: i32 = -4096;
    pub const SPEED_UNAVAILABLE: u16 = 8191;
    pub const HEADING_UNAVAILABLE: u16 = 28800;

    /// Every optional field at its unavailable sentinel.
    pub fn unavailable(msg_cnt: u8, temp_id: u32) -> Self {
        Self {
            msg_cnt,
            temp_id,
            sec_mark: Self::SEC_MARK_UNAVAILABLE,
            lat: Self::LAT_UNAVAILABLE,
            lon: Self::LON_UNAVAILABLE,
            elev: Self::ELEV_UNAVAILABLE,
            speed: Self::SPEED_UNAVAILABLE,
            heading: Self::HEADING_UNAVAILABLE,
        }
    }

    pub fn validate(&self) -> Result<(), WireError> {
        check("msg_cnt", i64::from(self.msg_cnt), 0, 127, None)?;
        check("sec_mark", i64::from(self.sec_mark), 0, 60_999, Some(65_535))?;
        check(
            "lat",
            i64::from(self.lat),
            -900_000_000,
            900_000_000,
            Some(i64::from(Self::LAT_UNAVAILABLE)),
        )?;
        check(
            "lon",
            i64::from(self.lon),
            -1_799_999_999,
            1_800_000_000,
            Some(i64::from(Self::LON_UNAVAILABLE)),
        )?;
        check("elev", i64::from(self.elev), -4095, 61_439, Some(-4096))?;
        check("speed", i64::from(self.speed), 0, 8190, Some(8191))?;
        check("heading", i64::from(self.heading), 0, 28_799, Some(28_800))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvisoryCause {
    #[default]
    None,
    Congestion,
    Incident,
    Weather,
    Workzone,
}

impl AdvisoryCause {
    pub const fn code(self) -> u8 {
        self as u8
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::None),
            1 => Some(Self::Congestion),
            2 => Some(Self::Incident),
            3 => Some(Self::Weather),
            4 => Some(Self::Workzone),
            _ => None,
        }
    }
}

/// Advisory speed for one road segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdvisoryPayload {
    pub advisory_id: u16,
    pub segment_id: u16,
    /// 0.02 m/s units; 8191 cancels.
    pub advisory_speed: u16,
    /// Minute of year, 0..=131070; 131071 (all ones) means "immediate".
    /// The 17-bit field cannot carry the full 0..=527040 J2735 range.
    pub start_minute_of_year: u32,
    pub duration_minutes: u16,
    pub cause: AdvisoryCause,
}

impl AdvisoryPayload {
    pub const CANCEL: u16 = 8191;
    pub const START_MAX: u32 = 131_070;
    pub const START_IMMEDIATE: u32 = 131_071;

    pub fn is_cancel(&self) -> bool {
        self.advisory_speed == Self::CANCEL
    }

    pub fn validate(&self) -> Result<(), WireError> {
        check("advisory_speed", i64::from(self.advisory_speed), 0, 8191, None)?;
        check(
            "start_minute_of_year",
            i64::from(self.start_minute_of_year),
            0,
            i64::from(Self::START_MAX),
            Some(i64::from(Self::START_IMMEDIATE)),
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Currency {
    #[default]
    #[serde(rename = "USD")]
    Usd,
}

impl Currency {
    pub const fn code(self) -> u8 {
        0
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Usd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TollPayload {
    pub toll_point_id: u16,
    pub amount_cents: u16,
    pub currency: Currency,
    /// Bit i set means lane i is tolled.
    pub lane_mask: u8,
}

/// A decoded payload of any registered type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Bsm(BsmPayload),
    Advisory(AdvisoryPayload),
    Toll(TollPayload),
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Bsm(_) => MessageType::Bsm,
            Message::Advisory(_) => MessageType::Advisory,
            Message::Toll(_) => MessageType::Toll,
        }
    }
}

impl From<BsmPayload> for Message {
    fn from(p: BsmPayload) -> Self {
        Message::Bsm(p)
    }
}

impl From<AdvisoryPayload> for Message {
    fn from(p: AdvisoryPayload) -> Self {
        Message::Advisory(p)
    }
}

impl From<TollPayload> for Message {
    fn from(p: TollPayload) -> Self {
        Message::Toll(p)
    }
}

/// The framing around a payload, as it was found on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageFrame {
    pub msg_type: MessageType,
    pub payload: Vec<u8>,
    pub crc: u16,
}

fn check(
    field: &'static str,
    value: i64,
    min: i64,
    max: i64,
    sentinel: Option<i64>,
) -> Result<(), WireError> {
    if (min..=max).contains(&value) || sentinel == Some(value) {
        Ok(())
    } else {
        Err(WireError::FieldRange { field, value })
    }
}

fn field_err(field: &'static str, e: WireError) -> WireError {
    match e {
        WireError::Range { value, .. } => WireError::FieldRange {
            field,
            value: value as i64,
        },
        WireError::NegativeOffset { value, .. } => WireError::FieldRange { field, value },
        other => other,
    }
}

/// Packs a message into its fixed-size payload bytes.
pub fn encode_payload(message: &Message) -> Result<Vec<u8>, WireError> {
    let ty = message.message_type();
    let mut w = BitWriter::with_capacity(ty.payload_len());
    match message {
        Message::Bsm(m) => {
            m.validate()?;
            let lat = encode_offset_field(i64::from(m.lat), LAT_OFFSET, 31)
                .map_err(|e| field_err("lat", e))?;
            let lon = encode_offset_field(i64::from(m.lon), LON_OFFSET, 32)
                .map_err(|e| field_err("lon", e))?;
            let elev = encode_offset_field(i64::from(m.elev), ELEV_OFFSET, 16)
                .map_err(|e| field_err("elev", e))?;
            w.pack_uint(u64::from(m.msg_cnt), 7)?
                .pack_uint(u64::from(m.temp_id), 32)?
                .pack_uint(u64::from(m.sec_mark), 16)?
                .pack_uint(lat, 31)?
                .pack_uint(lon, 32)?
                .pack_uint(elev, 16)?
                .pack_uint(u64::from(m.speed), 13)?
                .pack_uint(u64::from(m.heading), 15)?;
        }
        Message::Advisory(m) => {
            m.validate()?;
            w.pack_uint(u64::from(m.advisory_id), 16)?
                .pack_uint(u64::from(m.segment_id), 16)?
                .pack_uint(u64::from(m.advisory_speed), 13)?
                .pack_uint(u64::from(m.start_minute_of_year), 17)?
                .pack_uint(u64::from(m.duration_minutes), 16)?
                .pack_uint(u64::from(m.cause.code()), 8)?;
        }
        Message::Toll(m) => {
            w.pack_uint(u64::from(m.toll_point_id), 16)?
                .pack_uint(u64::from(m.amount_cents), 16)?
                .pack_uint(u64::from(m.currency.code()), 8)?
                .pack_uint(u64::from(m.lane_mask), 8)?;
        }
    }
    debug_assert_eq!(w.bit_len(), ty.payload_bits());
    Ok(w.into_bytes())
}

/// Unpacks a payload of the given type, checking padding and field ranges.
pub fn decode_payload(ty: MessageType, payload: &[u8]) -> Result<Message, WireError> {
    if payload.len() != ty.payload_len() {
        return Err(WireError::LengthMismatch {
            expected: ty.payload_len(),
            found: payload.len(),
        });
    }
    let mut r = BitReader::new(payload);
    let message = match ty {
        MessageType::Bsm => {
            let msg_cnt = r.read_uint(7)? as u8;
            let temp_id = r.read_uint(32)? as u32;
            let sec_mark = r.read_uint(16)? as u16;
            let lat = decode_offset_field(r.read_uint(31)?, LAT_OFFSET);
            let lon = decode_offset_field(r.read_uint(32)?, LON_OFFSET);
            let elev = decode_offset_field(r.read_uint(16)?, ELEV_OFFSET);
            let speed = r.read_uint(13)? as u16;
            let heading = r.read_uint(15)? as u16;
            // A raw lon above i32::MAX is necessarily out of range.
            let bsm = BsmPayload {
                msg_cnt,
                temp_id,
                sec_mark,
                lat: narrow("lat", lat)?,
                lon: narrow("lon", lon)?,
                elev: elev as i32,
                speed,
                heading,
            };
            Message::Bsm(bsm)
        }
        MessageType::Advisory => {
            let advisory_id = r.read_uint(16)? as u16;
            let segment_id = r.read_uint(16)? as u16;
            let advisory_speed = r.read_uint(13)? as u16;
            let start_minute_of_year = r.read_uint(17)? as u32;
            let duration_minutes = r.read_uint(16)? as u16;
            let cause_code = r.read_uint(8)? as u8;
            let cause = AdvisoryCause::from_code(cause_code).ok_or(WireError::FieldRange {
                field: "cause",
                value: i64::from(cause_code),
            })?;
            Message::Advisory(AdvisoryPayload {
                advisory_id,
                segment_id,
                advisory_speed,
                start_minute_of_year,
                duration_minutes,
                cause,
            })
        }
        MessageType::Toll => {
            let toll_point_id = r.read_uint(16)? as u16;
            let amount_cents = r.read_uint(16)? as u16;
            let currency_code = r.read_uint(8)? as u8;
            let lane_mask = r.read_uint(8)? as u8;
            let currency = Currency::from_code(currency_code).ok_or(WireError::FieldRange {
                field: "currency",
                value: i64::from(currency_code),
            })?;
            Message::Toll(TollPayload {
                toll_point_id,
                amount_cents,
                currency,
                lane_mask,
            })
        }
    };
    if !r.padding_is_zero() {
        return Err(WireError::NonZeroPadding);
    }
    match &message {
        Message::Bsm(m) => m.validate()?,
        Message::Advisory(m) => m.validate()?,
        Message::Toll(_) => {}
    }
    Ok(message)
}

fn narrow(field: &'static str, value: i64) -> Result<i32, WireError> {
    i32::try_from(value).map_err(|_| WireError::FieldRange { field, value })
}

/// Encodes `[msg_type][len][payload][crc]`.
pub fn encode_frame(message: &Message) -> Result<Vec<u8>, WireError> {
    let payload = encode_payload(message)?;
    let mut out = Vec::with_capacity(payload.len() + FRAME_OVERHEAD);
    out.push(message.message_type().code());
    out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&payload);
    let crc = crc16(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Decodes a frame. Checks run in order: buffer size, declared length,
/// CRC, type code, per-type payload size, padding, field ranges.
pub fn decode_frame(bytes: &[u8]) -> Result<(MessageFrame, Message), WireError> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(WireError::ShortBuffer {
            needed: FRAME_OVERHEAD,
            available: bytes.len(),
        });
    }
    let declared = usize::from(u16::from_be_bytes([bytes[1], bytes[2]]));
    let total = declared + FRAME_OVERHEAD;
    if bytes.len() < total {
        return Err(WireError::ShortBuffer {
            needed: total,
            available: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(WireError::LengthMismatch {
            expected: total,
            found: bytes.len(),
        });
    }
    let body_end = total - 2;
    let carried = u16::from_be_bytes([bytes[body_end], bytes[body_end + 1]]);
    let computed = crc16(&bytes[..body_end]);
    if carried != computed {
        return Err(WireError::CrcMismatch { carried, computed });
    }
    let ty = MessageType::from_code(bytes[0]).ok_or(WireError::UnknownMessageType(bytes[0]))?;
    let payload = &bytes[3..body_end];
    let message = decode_payload(ty, payload)?;
    Ok((
        MessageFrame {
            msg_type: ty,
            payload: payload.to_vec(),
            crc: carried,
        },
        message,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Goldens were hand bit-packed with an independent script before the
    // codec existed.
    const ADVISORY_PAYLOAD: [u8; 11] = [
        0x00, 0x01, 0x00, 0x02, 0x1F, 0x40, 0x00, 0x00, 0x00, 0x78, 0x04,
    ];
    const ADVISORY_FRAME: &str = "1f000b000100021f4000000078041cd2";
    const BSM_UNAVAILABLE_PAYLOAD: [u8; 21] = [
        0x00, 0x00, 0x00, 0x00, 0x01, 0xff, 0xff, 0xad, 0x27, 0x48, 0x07, 0x5a, 0x4e, 0x90, 0x00,
        0x00, 0x03, 0xff, 0xfc, 0x20, 0x00,
    ];
    const BSM_UNAVAILABLE_FRAME: &str =
        "1400150000000001ffffad2748075a4e90000003fffc20007abb";
    const TOLL_ZERO_FRAME: &str = "f00006000000000000ad3e";

    fn golden_advisory() -> AdvisoryPayload {
        AdvisoryPayload {
            advisory_id: 1,
            segment_id: 2,
            advisory_speed: 1000,
            start_minute_of_year: 0,
            duration_minutes: 30,
            cause: AdvisoryCause::Congestion,
        }
    }

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    #[test]
    fn advisory_golden() {
        let msg = Message::from(golden_advisory());
        assert_eq!(encode_payload(&msg).unwrap(), ADVISORY_PAYLOAD);
        let frame = encode_frame(&msg).unwrap();
        assert_eq!(hex(&frame), ADVISORY_FRAME);
        let (f, decoded) = decode_frame(&frame).unwrap();
        assert_eq!(decoded, msg);
        assert_eq!(f.msg_type, MessageType::Advisory);
        assert_eq!(f.crc, 0x1cd2);
    }

    #[test]
    fn bsm_unavailable_golden() {
        let msg = Message::from(BsmPayload::unavailable(0, 0));
        assert_eq!(encode_payload(&msg).unwrap(), BSM_UNAVAILABLE_PAYLOAD);
        assert_eq!(hex(&encode_frame(&msg).unwrap()), BSM_UNAVAILABLE_FRAME);
    }

    #[test]
    fn toll_zero_golden() {
        let msg = Message::from(TollPayload {
            toll_point_id: 0,
            amount_cents: 0,
            currency: Currency::Usd,
            lane_mask: 0,
        });
        assert_eq!(encode_payload(&msg).unwrap(), [0u8; 6]);
        assert_eq!(hex(&encode_frame(&msg).unwrap()), TOLL_ZERO_FRAME);
    }

    #[test]
    fn encode_names_offending_field() {
        let mut bsm = BsmPayload::unavailable(0, 0);
        bsm.heading = 28_801;
        assert_eq!(
            encode_frame(&bsm.into()).unwrap_err(),
            WireError::FieldRange {
                field: "heading",
                value: 28_801
            }
        );
        let mut adv = golden_advisory();
        adv.start_minute_of_year = 131_072;
        assert!(matches!(
            encode_frame(&adv.into()),
            Err(WireError::FieldRange {
                field: "start_minute_of_year",
                ..
            })
        ));
        let mut bsm = BsmPayload::unavailable(128, 0);
        assert!(matches!(
            encode_frame(&bsm.into()),
            Err(WireError::FieldRange { field: "msg_cnt", .. })
        ));
        bsm.msg_cnt = 0;
        bsm.elev = -4097;
        assert!(matches!(
            encode_frame(&bsm.into()),
            Err(WireError::FieldRange { field: "elev", .. })
        ));
    }

    #[test]
    fn distinct_decode_errors() {
        let frame = encode_frame(&golden_advisory().into()).unwrap();

        assert!(matches!(
            decode_frame(&frame[..3]),
            Err(WireError::ShortBuffer { .. })
        ));
        assert!(matches!(
            decode_frame(&frame[..frame.len() - 1]),
            Err(WireError::ShortBuffer { .. })
        ));

        let mut trailing = frame.clone();
        trailing.push(0);
        assert!(matches!(
            decode_frame(&trailing),
            Err(WireError::LengthMismatch { .. })
        ));

        let mut bad_crc = frame.clone();
        *bad_crc.last_mut().unwrap() ^= 0x01;
        assert!(matches!(
            decode_frame(&bad_crc),
            Err(WireError::CrcMismatch { .. })
        ));

        assert_eq!(
            decode_frame(&reframe(99, &ADVISORY_PAYLOAD)),
            Err(WireError::UnknownMessageType(99))
        );
        assert_eq!(
            decode_frame(&reframe(31, &ADVISORY_PAYLOAD[..10])),
            Err(WireError::LengthMismatch {
                expected: 11,
                found: 10
            })
        );

        let mut padded = ADVISORY_PAYLOAD;
        padded[10] |= 0x01;
        assert_eq!(
            decode_frame(&reframe(31, &padded)),
            Err(WireError::NonZeroPadding)
        );

        // cause = 9
        let mut cause = ADVISORY_PAYLOAD;
        cause[10] = 0x24;
        assert_eq!(
            decode_frame(&reframe(31, &cause)),
            Err(WireError::FieldRange {
                field: "cause",
                value: 9
            })
        );
    }

    #[test]
    fn decoded_out_of_range_bsm_field_is_rejected() {
        // sec_mark 61000 is neither in range nor the sentinel.
        let mut w = BitWriter::new();
        w.pack_uint(0, 7)
            .unwrap()
            .pack_uint(0, 32)
            .unwrap()
            .pack_uint(61_000, 16)
            .unwrap()
            .pack_uint(0, 31)
            .unwrap()
            .pack_uint(0, 32)
            .unwrap()
            .pack_uint(0, 16)
            .unwrap()
            .pack_uint(0, 13)
            .unwrap()
            .pack_uint(0, 15)
            .unwrap();
        let payload = w.into_bytes();
        assert_eq!(
            decode_frame(&reframe(20, &payload)),
            Err(WireError::FieldRange {
                field: "sec_mark",
                value: 61_000
            })
        );
    }

    #[test]
    fn single_byte_corruption_never_decodes_silently() {
        let goldens = [
            encode_frame(&golden_advisory().into()).unwrap(),
            encode_frame(&BsmPayload::unavailable(0, 0).into()).unwrap(),
        ];
        for frame in goldens {
            for i in 0..frame.len() {
                for x in 1..=255u8 {
                    let mut c = frame.clone();
                    c[i] ^= x;
                    assert!(decode_frame(&c).is_err(), "byte {i} ^ {x:#x} accepted");
                }
            }
        }
    }

    fn reframe(code: u8, payload: &[u8]) -> Vec<u8> {
        let mut out = vec![code];
        out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
        out.extend_from_slice(payload);
        let crc = crc16(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }
}
