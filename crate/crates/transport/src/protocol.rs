//! Broker control protocol.
//!
//! Every frame on the TCP control channel is
//!
//! ```text
//! [len:4 BE][op:1][body]
//! ```
//!
//! where `len` counts `op` plus `body`. Strings are `[len:2 BE][utf-8]`.
//!
//! | op | name    | body                                                           |
//! |----|---------|----------------------------------------------------------------|
//! | 1  | CONNECT | client_id: str                                                 |
//! | 2  | SUB     | pattern: str                                                   |
//! | 3  | UNSUB   | pattern: str                                                   |
//! | 4  | PUB     | flags:1 (bit0 at-least-once, bit1 retain), seq:8, topic: str, payload: rest |
//! | 5  | ACK     | seq:8                                                          |
//! | 6  | PING    | empty                                                          |
//! | 7  | PONG    | empty                                                          |
//! | 8  | NOTICE  | reason: str (sent by the broker before it disconnects a client) |

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;
use tokio_util::codec::{Decoder, Encoder, LengthDelimitedCodec};

use crate::envelope::{Envelope, Qos};
use crate::topic::{Topic, TopicError, TopicPattern};

/// Largest accepted `len` value.
pub const MAX_FRAME_LEN: usize = 64 * 1024;

const OP_CONNECT: u8 = 1;
const OP_SUB: u8 = 2;
const OP_UNSUB: u8 = 3;
const OP_PUB: u8 = 4;
const OP_ACK: u8 = 5;
const OP_PING: u8 = 6;
const OP_PONG: u8 = 7;
const OP_NOTICE: u8 = 8;

const FLAG_AT_LEAST_ONCE: u8 = 0b01;
const FLAG_RETAIN: u8 = 0b10;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("empty frame")]
    Empty,
    #[error("unknown op {0}")]
    UnknownOp(u8),
    #[error("truncated {0} frame")]
    Truncated(&'static str),
    #[error("trailing bytes in {0} frame")]
    Trailing(&'static str),
    #[error("invalid utf-8 string")]
    Utf8,
    #[error("unknown flag bits {0:#04x}")]
    Flags(u8),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error("frame exceeds {MAX_FRAME_LEN} bytes")]
    TooLarge,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlFrame {
    Connect { client_id: String },
    Sub { pattern: TopicPattern },
    Unsub { pattern: TopicPattern },
    Pub(Envelope),
    Ack { seq: u64 },
    Ping,
    Pong,
    Notice { reason: String },
}

impl ControlFrame {
    pub fn name(&self) -> &'static str {
        match self {
            ControlFrame::Connect { .. } => "CONNECT",
            ControlFrame::Sub { .. } => "SUB",
            ControlFrame::Unsub { .. } => "UNSUB",
            ControlFrame::Pub(_) => "PUB",
            ControlFrame::Ack { .. } => "ACK",
            ControlFrame::Ping => "PING",
            ControlFrame::Pong => "PONG",
            ControlFrame::Notice { .. } => "NOTICE",
        }
    }

    /// Op byte plus body, without the length prefix.
    pub fn encode_body(&self, out: &mut BytesMut) {
        match self {
            ControlFrame::Connect { client_id } => {
                out.put_u8(OP_CONNECT);
                put_str(out, client_id);
            }
            ControlFrame::Sub { pattern } => {
                out.put_u8(OP_SUB);
                put_str(out, pattern.as_str());
            }
            ControlFrame::Unsub { pattern } => {
                out.put_u8(OP_UNSUB);
                put_str(out, pattern.as_str());
            }
            ControlFrame::Pub(env) => {
                out.put_u8(OP_PUB);
                let mut flags = 0;
                if env.qos == Qos::AtLeastOnce {
                    flags |= FLAG_AT_LEAST_ONCE;
                }
                if env.retain {
                    flags |= FLAG_RETAIN;
                }
                out.put_u8(flags);
                out.put_u64(env.seq);
                put_str(out, env.topic.as_str());
                out.put_slice(&env.body);
            }
            ControlFrame::Ack { seq } => {
                out.put_u8(OP_ACK);
                out.put_u64(*seq);
            }
            ControlFrame::Ping => out.put_u8(OP_PING),
            ControlFrame::Pong => out.put_u8(OP_PONG),
            ControlFrame::Notice { reason } => {
                out.put_u8(OP_NOTICE);
                put_str(out, reason);
            }
        }
    }

    /// Full wire bytes including the length prefix.
    pub fn to_bytes(&self) -> Bytes {
        let mut body = BytesMut::new();
        self.encode_body(&mut body);
        let mut out = BytesMut::with_capacity(body.len() + 4);
        out.put_u32(body.len() as u32);
        out.extend_from_slice(&body);
        out.freeze()
    }

    pub fn decode_body(mut buf: Bytes) -> Result<Self, ProtocolError> {
        if buf.is_empty() {
            return Err(ProtocolError::Empty);
        }
        let op = buf.get_u8();
        let frame = match op {
            OP_CONNECT => ControlFrame::Connect {
                client_id: get_str(&mut buf, "CONNECT")?,
            },
            OP_SUB => ControlFrame::Sub {
                pattern: TopicPattern::new(get_str(&mut buf, "SUB")?)?,
            },
            OP_UNSUB => ControlFrame::Unsub {
                pattern: TopicPattern::new(get_str(&mut buf, "UNSUB")?)?,
            },
            OP_PUB => {
                if buf.remaining() < 9 {
                    return Err(ProtocolError::Truncated("PUB"));
                }
                let flags = buf.get_u8();
                if flags & !(FLAG_AT_LEAST_ONCE | FLAG_RETAIN) != 0 {
                    return Err(ProtocolError::Flags(flags));
                }
                let seq = buf.get_u64();
                let topic = Topic::new(get_str(&mut buf, "PUB")?)?;
                let qos = if flags & FLAG_AT_LEAST_ONCE != 0 {
                    Qos::AtLeastOnce
                } else {
                    Qos::BestEffort
                };
                let body = buf.split_to(buf.remaining());
                ControlFrame::Pub(Envelope {
                    topic,
                    qos,
                    retain: flags & FLAG_RETAIN != 0,
                    seq,
                    body,
                })
            }
            OP_ACK => {
                if buf.remaining() < 8 {
                    return Err(ProtocolError::Truncated("ACK"));
                }
                ControlFrame::Ack { seq: buf.get_u64() }
            }
            OP_PING => ControlFrame::Ping,
            OP_PONG => ControlFrame::Pong,
            OP_NOTICE => ControlFrame::Notice {
                reason: get_str(&mut buf, "NOTICE")?,
            },
            other => return Err(ProtocolError::UnknownOp(other)),
        };
        if buf.has_remaining() {
            return Err(ProtocolError::Trailing(frame.name()));
        }
        Ok(frame)
    }
}

fn put_str(out: &mut BytesMut, s: &str) {
    let bytes = s.as_bytes();
    let len = bytes.len().min(u16::MAX as usize);
    out.put_u16(len as u16);
    out.put_slice(&bytes[..len]);
}

fn get_str(buf: &mut Bytes, frame: &'static str) -> Result<String, ProtocolError> {
    if buf.remaining() < 2 {
        return Err(ProtocolError::Truncated(frame));
    }
    let len = usize::from(buf.get_u16());
    if buf.remaining() < len {
        return Err(ProtocolError::Truncated(frame));
    }
    let raw = buf.split_to(len);
    String::from_utf8(raw.to_vec()).map_err(|_| ProtocolError::Utf8)
}

/// Stream codec for [`ControlFrame`]s.
#[derive(Debug)]
pub struct ControlCodec {
    inner: LengthDelimitedCodec,
}

impl Default for ControlCodec {
    fn default() -> Self {
        Self {
            inner: LengthDelimitedCodec::builder()
                .length_field_length(4)
                .max_frame_length(MAX_FRAME_LEN)
                .new_codec(),
        }
    }
}

impl Decoder for ControlCodec {
    type Item = ControlFrame;
    type Error = ProtocolError;

    fn decode(&mut self, src: &mut BytesMut) -> Result<Option<ControlFrame>, ProtocolError> {
        match self.inner.decode(src) {
            Ok(Some(frame)) => ControlFrame::decode_body(frame.freeze()).map(Some),
            Ok(None) => Ok(None),
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => Err(ProtocolError::TooLarge),
            Err(e) => Err(e.into()),
        }
    }
}

impl Encoder<ControlFrame> for ControlCodec {
    type Error = ProtocolError;

    fn encode(&mut self, item: ControlFrame, dst: &mut BytesMut) -> Result<(), ProtocolError> {
        let mut body = BytesMut::new();
        item.encode_body(&mut body);
        if body.len() > MAX_FRAME_LEN {
            return Err(ProtocolError::TooLarge);
        }
        self.inner.encode(body.freeze(), dst)?;
        Ok(())
    }
}
