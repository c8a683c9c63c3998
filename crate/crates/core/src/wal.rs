//! Append-only recovery log.
//!
//! Every record carries two backward links: `prev_txn_lsn` (the previous
//! record of the same transaction, for rollback) and `prev_page_lsn` (the
//! previous record touching the same page, for single-page recovery and
//! redo-order verification). An LSN is the byte offset of the record.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! header (16): "PPHL" | version u32 | reserved u64
//! record:      len u32 | kind u8 | flags u8 | rsvd u16 | crc u32
//!              | txn u64 | page u64 | prev_txn u64 | prev_page u64
//!              | payload ... | len u32
//! ```
//!
//! The trailing length allows scanning backward from the end. The log is
//! the stability root: it never passes through fault injection.

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::device::Device;
use crate::error::{Error, Result};
use crate::page::{PageId, PageKind};
use crate::pri::PriOp;

pub const LOG_MAGIC: &[u8; 4] = b"PPHL";
pub const LOG_VERSION: u32 = 1;
pub const LOG_HEADER_SIZE: u64 = 16;
const FRAME_HEADER: usize = 44;
const FRAME_OVERHEAD: usize = FRAME_HEADER + 4;
const NIL_PAGE: u64 = u64::MAX;
const SCAN_CHUNK: usize = 64 * 1024;
const FLAG_SYSTEM: u8 = 1;

/// Log sequence number: byte offset of a record. Zero means nil.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Lsn(pub u64);

impl Lsn {
    pub const NIL: Lsn = Lsn(0);

    pub fn is_nil(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Lsn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum RecordKind {
    Update = 1,
    Compensation = 2,
    TxnCommit = 3,
    TxnAbort = 4,
    SysCommit = 5,
    PageFormat = 6,
    PageImage = 7,
    PriUpdate = 8,
    CheckpointBegin = 9,
    CheckpointEnd = 10,
}

impl RecordKind {
    fn from_u8(v: u8) -> Option<Self> {
        use RecordKind::*;
        Some(match v {
            1 => Update,
            2 => Compensation,
            3 => TxnCommit,
            4 => TxnAbort,
            5 => SysCommit,
            6 => PageFormat,
            7 => PageImage,
            8 => PriUpdate,
            9 => CheckpointBegin,
            10 => CheckpointEnd,
            _ => return None,
        })
    }

    /// Whether records of this kind carry a redo action for their page.
    pub fn changes_page(self) -> bool {
        use RecordKind::*;
        matches!(self, Update | Compensation | PageFormat | PageImage | PriUpdate)
    }
}

/// Logical inverse of a B-tree record change. Undo goes through the tree
/// because system transactions may have moved the record to another page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogicalUndo {
    /// Make `key` present with `value`.
    Put { key: Vec<u8>, value: Vec<u8> },
    /// Make `key` absent.
    Remove { key: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Undo {
    /// Structural change by a system transaction; never undone.
    None,
    /// Restore the `before` bytes in place (records that never move).
    Physical,
    Logical(LogicalUndo),
}

/// How a formatted page image is derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormatSpec {
    /// Every page in the range is formatted from the store layout.
    Initial,
    /// Empty page of this kind.
    Empty(PageKind),
    /// Page of this kind with the given body prefix.
    Body(PageKind, Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPayload {
    /// User transactions active at checkpoint begin, with their last LSN.
    pub active: Vec<(u64, Lsn)>,
    /// Dirty frames at checkpoint begin, with their recovery LSN.
    pub dirty: Vec<(PageId, Lsn)>,
    pub next_txn: u64,
    pub alloc_next: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    None,
    /// Byte-range delta on the page body.
    Update {
        offset: u32,
        before: Vec<u8>,
        after: Vec<u8>,
        undo: Undo,
    },
    /// Redo-only record written while undoing `undone`.
    Compensation {
        offset: u32,
        after: Vec<u8>,
        undo_next: Lsn,
    },
    Format {
        lo: u64,
        hi: u64,
        spec: FormatSpec,
    },
    /// Full page image; a backup source for single-page recovery.
    Image(Vec<u8>),
    Pri(PriOp),
    Checkpoint(CheckpointPayload),
    CheckpointEnd {
        begin: Lsn,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub lsn: Lsn,
    pub kind: RecordKind,
    /// Written by a system transaction.
    pub system: bool,
    pub txn: Option<u64>,
    pub page: Option<PageId>,
    pub prev_txn_lsn: Lsn,
    pub prev_page_lsn: Lsn,
    pub payload: Payload,
}

impl LogRecord {
    pub fn new(kind: RecordKind, payload: Payload) -> Self {
        LogRecord {
            lsn: Lsn::NIL,
            kind,
            system: false,
            txn: None,
            page: None,
            prev_txn_lsn: Lsn::NIL,
            prev_page_lsn: Lsn::NIL,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = bincode::serialize(&self.payload).expect("payload serializes");
        let len = FRAME_OVERHEAD + payload.len();
        let mut out = Vec::with_capacity(len);
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.push(self.kind as u8);
        out.push(if self.system { FLAG_SYSTEM } else { 0 });
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&[0; 4]); // crc, filled below
        out.extend_from_slice(&self.txn.unwrap_or(0).to_le_bytes());
        out.extend_from_slice(&self.page.map_or(NIL_PAGE, |p| p.0).to_le_bytes());
        out.extend_from_slice(&self.prev_txn_lsn.0.to_le_bytes());
        out.extend_from_slice(&self.prev_page_lsn.0.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&(len as u32).to_le_bytes());
        let crc = crc32c::crc32c(&out[12..len - 4]) ^ crc32c::crc32c(&out[4..8]);
        out[8..12].copy_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decodes one framed record; `bytes` must hold exactly the frame.
    pub fn decode(lsn: Lsn, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::CorruptLog {
            lsn,
            reason: reason.to_string(),
        };
        if bytes.len() < FRAME_OVERHEAD {
            return Err(bad("short frame"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let len = u32_at(0) as usize;
        if len != bytes.len() || u32_at(len - 4) as usize != len {
            return Err(bad("length mismatch"));
        }
        let crc = crc32c::crc32c(&bytes[12..len - 4]) ^ crc32c::crc32c(&bytes[4..8]);
        if crc != u32_at(8) {
            return Err(bad("crc mismatch"));
        }
        let kind = RecordKind::from_u8(bytes[4]).ok_or_else(|| bad("unknown kind"))?;
        let txn = u64_at(12);
        let page = u64_at(20);
        let payload = bincode::deserialize(&bytes[FRAME_HEADER..len - 4])
            .map_err(|e| bad(&format!("payload: {e}")))?;
        Ok(LogRecord {
            lsn,
            kind,
            system: bytes[5] & FLAG_SYSTEM != 0,
            txn: (txn != 0).then_some(txn),
            page: (page != NIL_PAGE).then_some(PageId(page)),
            prev_txn_lsn: Lsn(u64_at(28)),
            prev_page_lsn: Lsn(u64_at(36)),
            payload,
        })
    }
}

/// Why the log was forced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushReason {
    UserCommit,
    Checkpoint,
    /// Write-ahead rule before a page write.
    WalRule,
    Shutdown,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LogStats {
    pub appended: u64,
    pub records_read: u64,
    pub flush_user_commit: u64,
    pub flush_checkpoint: u64,
    pub flush_wal_rule: u64,
    pub flush_shutdown: u64,
}

impl LogStats {
    /// Flushes forced by commit processing: user commits and checkpoints.
    pub fn forced_flushes(&self) -> u64 {
        self.flush_user_commit + self.flush_checkpoint
    }
}

pub struct Log {
    dev: Device,
    durable_end: u64,
    tail: Vec<u8>,
    appended: u64,
    records_read: Cell<u64>,
    flushes: [u64; 4],
    capacity: Option<u64>,
}

impl fmt::Debug for Log {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Log")
            .field("durable_end", &self.durable_end)
            .field("buffered", &self.tail.len())
            .finish()
    }
}

impl Log {
    pub fn create(mut dev: Device) -> Result<Self> {
        let mut header = [0u8; LOG_HEADER_SIZE as usize];
        header[..4].copy_from_slice(LOG_MAGIC);
        header[4..8].copy_from_slice(&LOG_VERSION.to_le_bytes());
        dev.write_at(0, &header)?;
        dev.sync()?;
        Ok(Self::with_end(dev, LOG_HEADER_SIZE))
    }

    /// Opens an existing log. A torn or garbage tail past the last valid
    /// frame is ignored and later overwritten.
    pub fn open(dev: Device) -> Result<Self> {
        let mut header = [0u8; LOG_HEADER_SIZE as usize];
        dev.read_at(0, &mut header)
            .map_err(|e| Error::Format(format!("log header: {e}")))?;
        if &header[..4] != LOG_MAGIC {
            return Err(Error::Format("bad log magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != LOG_VERSION {
            return Err(Error::Format(format!("unsupported log version {version}")));
        }
        let len = dev.len();
        let mut log = Self::with_end(dev, LOG_HEADER_SIZE);
        log.durable_end = len;
        let end = log.valid_end()?;
        log.durable_end = end;
        Ok(log)
    }

    fn with_end(dev: Device, end: u64) -> Self {
        Log {
            dev,
            durable_end: end,
            tail: Vec::new(),
            appended: 0,
            records_read: Cell::new(0),
            flushes: [0; 4],
            capacity: None,
        }
    }

    fn valid_end(&self) -> Result<u64> {
        let bytes = self.read_range(LOG_HEADER_SIZE, self.durable_end)?;
        let mut off = 0usize;
        while off + FRAME_OVERHEAD <= bytes.len() {
            let len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            if len < FRAME_OVERHEAD || off + len > bytes.len() {
                break;
            }
            let lsn = Lsn(LOG_HEADER_SIZE + off as u64);
            if LogRecord::decode(lsn, &bytes[off..off + len]).is_err() {
                break;
            }
            off += len;
        }
        Ok(LOG_HEADER_SIZE + off as u64)
    }

    /// Refuse appends past this many bytes; models a full log device.
    pub fn set_capacity(&mut self, bytes: Option<u64>) {
        self.capacity = bytes;
    }

    pub fn device(&self) -> &Device {
        &self.dev
    }

    pub fn device_mut(&mut self) -> &mut Device {
        &mut self.dev
    }

    /// LSN the next append will receive.
    pub fn end(&self) -> Lsn {
        Lsn(self.durable_end + self.tail.len() as u64)
    }

    /// Everything below this offset is on stable storage.
    pub fn durable_end(&self) -> Lsn {
        Lsn(self.durable_end)
    }

    pub fn append(&mut self, mut rec: LogRecord) -> Result<Lsn> {
        let lsn = self.end();
        rec.lsn = lsn;
        let bytes = rec.encode();
        if let Some(cap) = self.capacity {
            if lsn.0 + bytes.len() as u64 > cap {
                return Err(Error::System("log device full".into()));
            }
        }
        self.tail.extend_from_slice(&bytes);
        self.appended += 1;
        Ok(lsn)
    }

    /// Makes every record with lsn <= `up_to` durable. Returns whether any
    /// I/O happened. The whole buffer is written, never a partial record.
    pub fn flush(&mut self, up_to: Lsn, reason: FlushReason) -> Result<bool> {
        if up_to.is_nil() || up_to.0 < self.durable_end || self.tail.is_empty() {
            return Ok(false);
        }
        if up_to > self.end() {
            return Err(Error::Usage(format!("flush past log end: {up_to}")));
        }
        self.dev
            .write_at(self.durable_end, &self.tail)
            .and_then(|_| self.dev.sync())
            .map_err(|e| Error::System(format!("log flush: {e}")))?;
        self.durable_end += self.tail.len() as u64;
        self.tail.clear();
        self.flushes[reason as usize] += 1;
        Ok(true)
    }

    pub fn flush_all(&mut self, reason: FlushReason) -> Result<bool> {
        let end = self.end();
        if end.0 == self.durable_end {
            return Ok(false);
        }
        let last = self.last_lsn_before(end)?;
        self.flush(last, reason)
    }

    pub fn stats(&self) -> LogStats {
        LogStats {
            appended: self.appended,
            records_read: self.records_read.get(),
            flush_user_commit: self.flushes[FlushReason::UserCommit as usize],
            flush_checkpoint: self.flushes[FlushReason::Checkpoint as usize],
            flush_wal_rule: self.flushes[FlushReason::WalRule as usize],
            flush_shutdown: self.flushes[FlushReason::Shutdown as usize],
        }
    }

    fn read_range(&self, from: u64, to: u64) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity((to - from) as usize);
        let durable_to = to.min(self.durable_end);
        let mut off = from;
        while off < durable_to {
            let n = ((durable_to - off) as usize).min(SCAN_CHUNK);
            let start = out.len();
            out.resize(start + n, 0);
            self.dev
                .read_at(off, &mut out[start..])
                .map_err(|e| Error::System(format!("log read: {e}")))?;
            off += n as u64;
        }
        if to > self.durable_end {
            let a = (off.max(self.durable_end) - self.durable_end) as usize;
            let b = (to - self.durable_end) as usize;
            out.extend_from_slice(&self.tail[a..b]);
        }
        Ok(out)
    }

    fn check_lsn(&self, lsn: Lsn) -> Result<()> {
        if lsn.0 < LOG_HEADER_SIZE || lsn >= self.end() {
            return Err(Error::Usage(format!("invalid lsn {lsn}")));
        }
        Ok(())
    }

    /// Reads the record at `lsn`. One device read for typical records.
    pub fn read(&self, lsn: Lsn) -> Result<LogRecord> {
        self.check_lsn(lsn)?;
        self.records_read.set(self.records_read.get() + 1);
        let end = self.end().0;
        let guess = (end - lsn.0).min(512);
        let mut bytes = self.read_range(lsn.0, lsn.0 + guess)?;
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as u64;
        if len < FRAME_OVERHEAD as u64 || lsn.0 + len > end {
            return Err(Error::CorruptLog {
                lsn,
                reason: "bad frame length".into(),
            });
        }
        if len > guess {
            bytes.extend(self.read_range(lsn.0 + guess, lsn.0 + len)?);
        } else {
            bytes.truncate(len as usize);
        }
        LogRecord::decode(lsn, &bytes)
    }

    /// LSN of the record that ends exactly at `end`.
    pub fn last_lsn_before(&self, end: Lsn) -> Result<Lsn> {
        if end.0 <= LOG_HEADER_SIZE {
            return Ok(Lsn::NIL);
        }
        let b = self.read_range(end.0 - 4, end.0)?;
        let len = u32::from_le_bytes(b[..4].try_into().unwrap()) as u64;
        if len < FRAME_OVERHEAD as u64 || len > end.0 - LOG_HEADER_SIZE {
            return Err(Error::CorruptLog {
                lsn: end,
                reason: "bad suffix length".into(),
            });
        }
        Ok(Lsn(end.0 - len))
    }

    /// Records in `[from, to)` in append order, read in large chunks.
    pub fn scan(&self, from: Lsn, to: Lsn) -> Result<Vec<LogRecord>> {
        let from = from.0.max(LOG_HEADER_SIZE);
        let to = to.0.min(self.end().0);
        if from >= to {
            return Ok(Vec::new());
        }
        let bytes = self.read_range(from, to)?;
        let mut out = Vec::new();
        let mut off = 0usize;
        while off < bytes.len() {
            let lsn = Lsn(from + off as u64);
            if off + 4 > bytes.len() {
                return Err(Error::CorruptLog {
                    lsn,
                    reason: "truncated frame".into(),
                });
            }
            let len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            if len < FRAME_OVERHEAD || off + len > bytes.len() {
                return Err(Error::CorruptLog {
                    lsn,
                    reason: "bad frame length".into(),
                });
            }
            out.push(LogRecord::decode(lsn, &bytes[off..off + len])?);
            off += len;
        }
        Ok(out)
    }

    /// Newest-first walk using the trailing length of each frame.
    pub fn scan_backward(&self, from_end: Lsn, stop_at: Lsn) -> Result<Vec<LogRecord>> {
        let mut out = Vec::new();
        let mut end = from_end;
        while end.0 > LOG_HEADER_SIZE.max(stop_at.0) {
            let lsn = self.last_lsn_before(end)?;
            out.push(self.read(lsn)?);
            end = lsn;
        }
        Ok(out)
    }

    /// Most recent complete checkpoint, as (begin, end) LSNs.
    pub fn last_checkpoint(&self) -> Result<Option<(Lsn, Lsn)>> {
        let mut end = self.end();
        while end.0 > LOG_HEADER_SIZE {
            let lsn = self.last_lsn_before(end)?;
            let rec = self.read(lsn)?;
            if let Payload::CheckpointEnd { begin } = rec.payload {
                return Ok(Some((begin, lsn)));
            }
            end = lsn;
        }
        Ok(None)
    }
}
