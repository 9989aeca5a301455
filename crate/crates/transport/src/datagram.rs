//! UDP channel carrying one wire-codec frame per datagram.
//!
//! Best effort only. Frames failing decode (CRC, length, type) are dropped
//! and counted instead of surfacing as errors.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;
use tokio::net::UdpSocket;

use cda_core::wire::{decode_frame, encode_frame, Message, WireError};

/// Keeps datagrams under a typical path MTU.
pub const MAX_DATAGRAM: usize = 1200;

#[derive(Debug, Error)]
pub enum DatagramError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame of {0} bytes exceeds {MAX_DATAGRAM}")]
    Oversized(usize),
    #[error("encode: {0}")]
    Encode(#[from] WireError),
}

#[derive(Debug, Default)]
pub struct DatagramStats {
    pub sent: AtomicU64,
    pub received: AtomicU64,
    pub dropped_corrupt: AtomicU64,
}

pub struct DatagramChannel {
    socket: UdpSocket,
    stats: DatagramStats,
}

impl DatagramChannel {
    pub async fn bind(addr: SocketAddr) -> Result<Self, DatagramError> {
        Ok(Self {
            socket: UdpSocket::bind(addr).await?,
            stats: DatagramStats::default(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, DatagramError> {
        Ok(self.socket.local_addr()?)
    }

    pub fn stats(&self) -> &DatagramStats {
        &self.stats
    }

    pub async fn send_frame(&self, frame: &[u8], to: SocketAddr) -> Result<(), DatagramError> {
        if frame.len() > MAX_DATAGRAM {
            return Err(DatagramError::Oversized(frame.len()));
        }
        self.socket.send_to(frame, to).await?;
        self.stats.sent.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub async fn send_message(&self, msg: &Message, to: SocketAddr) -> Result<(), DatagramError> {
        let frame = encode_frame(msg)?;
        self.send_frame(&frame, to).await
    }

    /// Waits for the next datagram that decodes cleanly.
    pub async fn recv_message(&self) -> Result<(Message, SocketAddr), DatagramError> {
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        loop {
            let (n, from) = self.socket.recv_from(&mut buf).await?;
            self.stats.received.fetch_add(1, Ordering::Relaxed);
            if n > MAX_DATAGRAM {
                self.stats.dropped_corrupt.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            match decode_frame(&buf[..n]) {
                Ok((_, msg)) => return Ok((msg, from)),
                Err(_) => {
                    self.stats.dropped_corrupt.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }
}
