//! `codec encode|decode`: JSON message documents to framed hex and back.
//!
//! A document is the message fields plus a `type` tag, e.g.
//! `{"type": "toll", "toll_point_id": 1, "amount_cents": 250, "currency": "USD", "lane_mask": 3}`.

use anyhow::{Context, Result};

use cda_core::wire::{decode_frame, encode_frame, Message, MessageFrame};

pub fn encode(document: &str) -> Result<String> {
    let msg: Message = serde_json::from_str(document).context("message document")?;
    Ok(hex::encode_upper(encode_frame(&msg)?))
}

/// Accepts hex with any whitespace between bytes.
pub fn parse_hex(text: &str) -> Result<Vec<u8>> {
    let compact: String = text.split_whitespace().collect();
    hex::decode(&compact).context("hex input")
}

pub fn decode(text: &str) -> Result<(MessageFrame, Message)> {
    Ok(decode_frame(&parse_hex(text)?)?)
}

pub fn describe(frame: &MessageFrame) -> String {
    format!(
        "type {} ({}), {} payload bytes, crc {:#06x}",
        serde_json::to_value(frame.msg_type).expect("serializes").as_str().unwrap_or("?"),
        frame.msg_type.code(),
        frame.payload.len(),
        frame.crc
    )
}

pub fn document(msg: &Message) -> String {
    serde_json::to_string_pretty(msg).expect("message serializes")
}
