//! MSB-first fixed-width bit packing.

use super::WireError;

/// Append-only bit buffer. Bits are written most-significant first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitWriter {
    buffer: Vec<u8>,
    bit_offset: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bytes: usize) -> Self {
        Self {
            buffer: Vec::with_capacity(bytes),
            bit_offset: 0,
        }
    }

    /// Number of bits written so far.
    pub fn bit_len(&self) -> usize {
        self.bit_offset
    }

    /// Appends the low `width` bits of `value`, most-significant first.
    pub fn pack_uint(&mut self, value: u64, width: u32) -> Result<&mut Self, WireError> {
        if !(1..=64).contains(&width) {
            return Err(WireError::Width(width));
        }
        if width < 64 && value >> width != 0 {
            return Err(WireError::Range { value, width });
        }
        for i in (0..width).rev() {
            let bit = (value >> i) & 1 == 1;
            let byte = self.bit_offset / 8;
            if byte == self.buffer.len() {
                self.buffer.push(0);
            }
            if bit {
                self.buffer[byte] |= 0x80 >> (self.bit_offset % 8);
            }
            self.bit_offset += 1;
        }
        Ok(self)
    }

    /// Renders the bits as a '0'/'1' string, ignoring padding.
    pub fn to_bit_string(&self) -> String {
        (0..self.bit_offset)
            .map(|i| {
                if self.buffer[i / 8] & (0x80 >> (i % 8)) != 0 {
                    '1'
                } else {
                    '0'
                }
            })
            .collect()
    }

    /// Zero-padded bytes.
    pub fn into_bytes(self) -> Vec<u8> {
        self.buffer
    }
}

/// Reads fixed-width fields back out of a packed buffer.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    buffer: &'a [u8],
    bit_offset: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(buffer: &'a [u8]) -> Self {
        Self {
            buffer,
            bit_offset: 0,
        }
    }

    pub fn bit_offset(&self) -> usize {
        self.bit_offset
    }

    pub fn remaining(&self) -> usize {
        self.buffer.len() * 8 - self.bit_offset
    }

    pub fn read_uint(&mut self, width: u32) -> Result<u64, WireError> {
        if !(1..=64).contains(&width) {
            return Err(WireError::Width(width));
        }
        if self.remaining() < width as usize {
            return Err(WireError::ShortBuffer {
                needed: (self.bit_offset + width as usize).div_ceil(8),
                available: self.buffer.len(),
            });
        }
        let mut value = 0u64;
        for _ in 0..width {
            let bit = self.buffer[self.bit_offset / 8] & (0x80 >> (self.bit_offset % 8)) != 0;
            value = (value << 1) | u64::from(bit);
            self.bit_offset += 1;
        }
        Ok(value)
    }

    /// True when every unread bit is zero.
    pub fn padding_is_zero(&self) -> bool {
        let mut at = self.bit_offset;
        while at < self.buffer.len() * 8 {
            if self.buffer[at / 8] & (0x80 >> (at % 8)) != 0 {
                return false;
            }
            at += 1;
        }
        true
    }
}

/// Shifts a signed value into the unsigned range of a `width`-bit field.
pub fn encode_offset_field(value: i64, offset: i64, width: u32) -> Result<u64, WireError> {
    let shifted = value
        .checked_add(offset)
        .ok_or(WireError::Range { value: u64::MAX, width })?;
    if shifted < 0 {
        return Err(WireError::NegativeOffset { value, offset });
    }
    let shifted = shifted as u64;
    if width < 64 && shifted >> width != 0 {
        return Err(WireError::Range {
            value: shifted,
            width,
        });
    }
    Ok(shifted)
}

pub fn decode_offset_field(raw: u64, offset: i64) -> i64 {
    raw as i64 - offset
}
