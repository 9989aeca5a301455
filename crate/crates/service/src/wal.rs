//! Append-only JSON-lines log of advisory state changes.
//!
//! Every frame the service intends to publish is logged before it is sent;
//! a later `published` entry marks it delivered to the broker. Replaying the
//! log rebuilds the book and lists frames still owed to the broker.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{AdvisoryBook, AdvisoryRecord, AdvisoryStatus};

#[derive(Debug, Error)]
pub enum WalError {
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum WalEntry {
    Create {
        record: AdvisoryRecord,
        #[serde(with = "hex::serde")]
        frame: Vec<u8>,
    },
    Cancel {
        advisory_id: u16,
        at: f64,
        #[serde(with = "hex::serde")]
        frame: Vec<u8>,
    },
    Expire {
        advisory_id: u16,
        at: f64,
        #[serde(with = "hex::serde")]
        frame: Vec<u8>,
    },
    Published {
        advisory_id: u16,
        #[serde(with = "hex::serde")]
        frame: Vec<u8>,
    },
}

/// A logged frame not yet acknowledged by the broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingFrame {
    pub advisory_id: u16,
    pub segment_id: u16,
    pub frame: Vec<u8>,
}

#[derive(Debug, Default)]
pub struct Replay {
    pub book: AdvisoryBook,
    pub pending: Vec<PendingFrame>,
    pub entries: usize,
    /// Bytes of a torn final line that were discarded.
    pub truncated: usize,
}

impl Replay {
    pub fn apply(&mut self, entry: WalEntry) {
        self.entries += 1;
        match entry {
            WalEntry::Create { record, frame } => {
                self.pending.push(PendingFrame {
                    advisory_id: record.advisory_id,
                    segment_id: record.segment_id,
                    frame,
                });
                self.book.insert(record);
            }
            WalEntry::Cancel {
                advisory_id, frame, ..
            } => self.withdraw(advisory_id, AdvisoryStatus::Cancelled, frame),
            WalEntry::Expire {
                advisory_id, frame, ..
            } => self.withdraw(advisory_id, AdvisoryStatus::Expired, frame),
            WalEntry::Published { advisory_id, frame } => {
                self.pending
                    .retain(|p| !(p.advisory_id == advisory_id && p.frame == frame));
            }
        }
    }

    fn withdraw(&mut self, advisory_id: u16, status: AdvisoryStatus, frame: Vec<u8>) {
        let segment_id = self
            .book
            .set_status(advisory_id, status)
            .map(|r| r.segment_id)
            .unwrap_or_default();
        self.pending.push(PendingFrame {
            advisory_id,
            segment_id,
            frame,
        });
    }
}

pub struct Wal {
    path: PathBuf,
    file: File,
}

impl Wal {
    /// Opens (creating if needed) and replays the log.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Replay), WalError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut replay = Replay::default();
        let mut good_len: u64 = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let total = std::fs::metadata(&path)?.len();
            for (i, line) in reader.split(b'\n').enumerate() {
                let line = line?;
                let consumed = line.len() as u64 + 1;
                if good_len + consumed > total {
                    // final line without newline: a torn write
                    replay.truncated = line.len();
                    break;
                }
                good_len += consumed;
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                let entry: WalEntry = serde_json::from_slice(&line).map_err(|e| WalError::Corrupt {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                replay.apply(entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if replay.truncated > 0 {
            file.set_len(good_len)?;
        }
        Ok((Self { path, file }, replay))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one entry and syncs it to disk.
    pub fn append(&mut self, entry: &WalEntry) -> Result<(), WalError> {
        let mut line = serde_json::to_vec(entry).expect("entry serializes");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}
