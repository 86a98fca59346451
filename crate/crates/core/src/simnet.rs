//! Star-topology message layer: counter-keyed RNG streams, the uplink and
//! broadcast bit ledger, and the message log with its binary dump format.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compressors::{CompressedMessage, WireError};

/// Round index reserved for algorithm initialization draws.
pub const INIT_ROUND: u32 = u32::MAX;

/// Message slots within one (round, worker) pair.
pub mod slot {
    pub const ORACLE: u16 = 0;
    pub const UPPER: u16 = 1;
    pub const LOWER_Y: u16 = 2;
    pub const LOWER_Z: u16 = 3;
}

/// Address of a random stream: root seed plus `(round, worker, slot)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamPath {
    pub round: u32,
    pub worker: u16,
    pub slot: u16,
}

impl StreamPath {
    fn packed(self) -> u64 {
        (u64::from(self.round) << 32) | (u64::from(self.worker) << 16) | u64::from(self.slot)
    }
}

/// A deterministic random stream.
///
/// The root seed selects the ChaCha key and the path is packed injectively
/// into the 64-bit ChaCha stream id, so distinct paths never share a
/// keystream and the same path always replays the same draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    root: u64,
    path: StreamPath,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn path(&self) -> StreamPath {
        self.path
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Derives the stream for `(round, worker, slot)` under `root`. Pure.
pub fn substream(root: u64, round: u32, worker: u16, slot: u16) -> RngStream {
    let path = StreamPath { round, worker, slot };
    let mut inner = ChaCha8Rng::seed_from_u64(root);
    inner.set_stream(path.packed());
    RngStream { root, path, inner }
}

/// Convenience for tests and one-off draws that are not tied to a round.
pub fn stream_from_seed(seed: u64) -> RngStream {
    substream(seed, 0, 0, 0)
}

/// Direction of a logged message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Uplink,
    Broadcast,
}

/// Per-round ledger row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LedgerRow {
    pub round: u64,
    pub uplink_bits: u64,
    pub broadcast_bits: u64,
}

/// Cumulative bit counters with per-round rows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitLedger {
    uplink_bits: u64,
    broadcast_bits: u64,
    rows: Vec<LedgerRow>,
    current: LedgerRow,
}

impl BitLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn uplink_bits(&self) -> u64 {
        self.uplink_bits
    }

    pub fn broadcast_bits(&self) -> u64 {
        self.broadcast_bits
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    /// Adds the bit cost of an uplink message.
    pub fn record(&mut self, message: &CompressedMessage) {
        self.record_uplink_bits(message.bit_cost());
    }

    pub fn record_uplink_bits(&mut self, bits: u64) {
        self.uplink_bits += bits;
        self.current.uplink_bits += bits;
    }

    pub fn record_broadcast(&mut self, bits: u64) {
        self.broadcast_bits += bits;
        self.current.broadcast_bits += bits;
    }

    /// Closes the current round and starts a fresh row.
    pub fn close_round(&mut self, round: u64) {
        let mut row = std::mem::take(&mut self.current);
        row.round = round;
        self.rows.push(row);
    }
}

/// One logged uplink message.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub round: u32,
    pub worker: u16,
    pub slot: u16,
    pub message: CompressedMessage,
}

/// Append-only log of every uplink message.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    entries: Vec<LogEntry>,
}

const LOG_MAGIC: &[u8; 4] = b"SBML";
const LOG_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("message log i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad message log header")]
    BadHeader,
    #[error("truncated message log at entry {0}")]
    Truncated(usize),
    #[error("entry {index}: {source}")]
    Entry {
        index: usize,
        #[source]
        source: WireError,
    },
}

impl MessageLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: LogEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total uplink bits recomputed from the logged messages.
    pub fn replay_uplink_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.message.bit_cost()).sum()
    }

    /// Binary layout: magic `SBML`, version byte, u64 entry count, then per
    /// entry `round u32 | worker u16 | slot u16 | len u32 | message bytes`,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LOG_MAGIC);
        out.push(LOG_VERSION);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            let bytes = e.message.to_bytes();
            out.extend_from_slice(&e.round.to_le_bytes());
            out.extend_from_slice(&e.worker.to_le_bytes());
            out.extend_from_slice(&e.slot.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, LogError> {
        if data.len() < 13 || &data[..4] != LOG_MAGIC || data[4] != LOG_VERSION {
            return Err(LogError::BadHeader);
        }
        let count = u64::from_le_bytes(data[5..13].try_into().unwrap());
        let mut pos = 13usize;
        let mut entries = Vec::new();
        let mut index = 0usize;
        while pos < data.len() || (index as u64) < count {
            if index as u64 >= count {
                return Err(LogError::BadHeader);
            }
            let head = data.get(pos..pos + 12).ok_or(LogError::Truncated(index))?;
            let round = u32::from_le_bytes(head[0..4].try_into().unwrap());
            let worker = u16::from_le_bytes(head[4..6].try_into().unwrap());
            let slot = u16::from_le_bytes(head[6..8].try_into().unwrap());
            let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
            pos += 12;
            let end = pos.checked_add(len).ok_or(LogError::Truncated(index))?;
            let body = data.get(pos..end).ok_or(LogError::Truncated(index))?;
            let message = CompressedMessage::from_bytes(body)
                .map_err(|source| LogError::Entry { index, source })?;
            entries.push(LogEntry {
                round,
                worker,
                slot,
                message,
            });
            pos = end;
            index += 1;
        }
        Ok(Self { entries })
    }

    pub fn dump(&self, path: &Path) -> Result<(), LogError> {
        let io_err = |source| LogError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io_err)?;
        f.write_all(&self.to_bytes()).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, LogError> {
        let io_err = |source| LogError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(io_err)?;
        Self::from_bytes(&buf)
    }
}
