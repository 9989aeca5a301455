use crc::{Crc, CRC_16_IBM_3740};

// IBM-3740 is the catalogue name for CCITT-FALSE: poly 0x1021, init 0xFFFF,
// no reflection, no final xor.
const CCITT_FALSE: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

/// CRC-16/CCITT-FALSE.
pub fn crc16(bytes: &[u8]) -> u16 {
    CCITT_FALSE.checksum(bytes)
}
