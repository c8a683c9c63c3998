//! Page recovery index.
//!
//! An ordered map from page-id ranges to the newest backup of each page
//! and, when the page changed since that backup and is not resident, the
//! LSN of its latest log record. Adjacent pages sharing a backup source
//! collapse into one range entry, so a freshly formatted or fully backed-up
//! store needs a handful of entries regardless of size.
//!
//! The whole index is mirrored in memory. Durable copies live in pages of
//! kind `pri`; each such page covers a fixed id range and stores the
//! entries clipped to it as a sorted run of varint-encoded records.

use integer_encoding::VarInt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::page::PageId;
use crate::wal::Lsn;

/// Worst-case encoded size of one entry; bounds how many pages a PRI page
/// can cover.
pub const MAX_ENTRY_BYTES: usize = 10 + 10 + 1 + 10 + 10 + 5 + 1 + 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    /// Explicit copy in the backup file. For a range entry this is the slot
    /// of the first page; page `lo + i` lives at `slot + i`.
    BackupPage { slot: u64 },
    /// Page-format record; formatting info substitutes for a copy.
    FormatRecord(Lsn),
    /// Full page image inside the log.
    InLogImage(Lsn),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackupLocator {
    pub source: Source,
    /// PageLSN captured by the backup. For whole-store backups this is the
    /// LSN at which the backup was taken, an upper bound for every page.
    pub backup_lsn: Lsn,
    /// Page update counter captured by the backup, when known.
    pub backup_count: Option<u32>,
    /// Whether `backup_lsn` equals the PageLSN inside the image exactly.
    pub exact: bool,
}

impl BackupLocator {
    pub fn format(lsn: Lsn) -> Self {
        BackupLocator {
            source: Source::FormatRecord(lsn),
            backup_lsn: lsn,
            backup_count: Some(0),
            exact: true,
        }
    }

    pub fn backup_page(slot: u64, page_lsn: Lsn, count: u32) -> Self {
        BackupLocator {
            source: Source::BackupPage { slot },
            backup_lsn: page_lsn,
            backup_count: Some(count),
            exact: true,
        }
    }

    pub fn in_log(lsn: Lsn, page_lsn: Lsn, count: u32) -> Self {
        BackupLocator {
            source: Source::InLogImage(lsn),
            backup_lsn: page_lsn,
            backup_count: Some(count),
            exact: true,
        }
    }

    /// Whole-store backup at `taken_at` with page `lo` in `base_slot`.
    pub fn full_backup(base_slot: u64, taken_at: Lsn) -> Self {
        BackupLocator {
            source: Source::BackupPage { slot: base_slot },
            backup_lsn: taken_at,
            backup_count: None,
            exact: false,
        }
    }

    fn shifted(mut self, by: u64) -> Self {
        if let Source::BackupPage { slot } = &mut self.source {
            *slot += by;
        }
        self
    }

    fn continues(&self, left_len: u64, right: &BackupLocator) -> bool {
        let same_meta = self.backup_lsn == right.backup_lsn
            && self.backup_count == right.backup_count
            && self.exact == right.exact;
        same_meta
            && match (self.source, right.source) {
                (Source::FormatRecord(a), Source::FormatRecord(b)) => a == b,
                (Source::BackupPage { slot: a }, Source::BackupPage { slot: b }) => {
                    a + left_len == b
                }
                _ => false,
            }
    }
}

/// Entry covering `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriEntry {
    pub lo: u64,
    pub hi: u64,
    pub locator: BackupLocator,
    pub last_lsn: Option<Lsn>,
}

/// The view of one page's entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageRecoveryInfo {
    pub page: PageId,
    pub locator: BackupLocator,
    pub last_lsn: Option<Lsn>,
}

/// A logged change to the index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriOp {
    /// `page` was written durably with this PageLSN.
    Write { page: PageId, lsn: Lsn },
    /// `page` has a new backup; its update chain restarts there.
    Backup { page: PageId, locator: BackupLocator },
    /// Every page in `[lo, hi)` has a backup described by `locator`.
    Range { lo: u64, hi: u64, locator: BackupLocator },
}

impl PriOp {
    /// The data page this op is about (first page for ranges).
    pub fn subject(&self) -> PageId {
        match self {
            PriOp::Write { page, .. } | PriOp::Backup { page, .. } => *page,
            PriOp::Range { lo, .. } => PageId(*lo),
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum ReadCheck {
    Ok,
    SuspectStale { expected: Lsn },
}

/// Sorted, non-overlapping entries over a contiguous id range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryIndex {
    lo: u64,
    hi: u64,
    entries: Vec<PriEntry>,
}

impl RecoveryIndex {
    /// One entry covering `[lo, hi)`.
    pub fn new(lo: u64, hi: u64, locator: BackupLocator) -> Self {
        assert!(lo < hi);
        RecoveryIndex {
            lo,
            hi,
            entries: vec![PriEntry {
                lo,
                hi,
                locator,
                last_lsn: None,
            }],
        }
    }

    /// Rebuilds from entries, which must tile `[lo, hi)` in order.
    pub fn from_entries(lo: u64, hi: u64, entries: Vec<PriEntry>) -> Result<Self> {
        let mut at = lo;
        for e in &entries {
            if e.lo != at || e.hi <= e.lo {
                return Err(Error::Format(format!(
                    "recovery index entries do not tile [{lo},{hi}) at {at}"
                )));
            }
            at = e.hi;
        }
        if at != hi {
            return Err(Error::Format(format!(
                "recovery index entries stop at {at}, expected {hi}"
            )));
        }
        let mut idx = RecoveryIndex { lo, hi, entries };
        idx.normalize();
        Ok(idx)
    }

    pub fn range(&self) -> (u64, u64) {
        (self.lo, self.hi)
    }

    pub fn entries(&self) -> &[PriEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn find(&self, p: u64) -> Option<usize> {
        if p < self.lo || p >= self.hi {
            return None;
        }
        let i = self.entries.partition_point(|e| e.hi <= p);
        (i < self.entries.len() && self.entries[i].lo <= p).then_some(i)
    }

    pub fn lookup(&self, page: PageId) -> Option<PageRecoveryInfo> {
        let e = &self.entries[self.find(page.0)?];
        Some(PageRecoveryInfo {
            page,
            locator: e.locator.shifted(page.0 - e.lo),
            last_lsn: e.last_lsn,
        })
    }

    /// Consistency check for a page just read on a buffer fault.
    pub fn verify_on_read(&self, page: PageId, page_lsn_on_page: Lsn) -> ReadCheck {
        let Some(info) = self.lookup(page) else {
            return ReadCheck::Ok;
        };
        match info.last_lsn {
            Some(l) if l != page_lsn_on_page => ReadCheck::SuspectStale { expected: l },
            Some(_) => ReadCheck::Ok,
            None => {
                let b = info.locator.backup_lsn;
                let ok = if info.locator.exact {
                    page_lsn_on_page == b
                } else {
                    page_lsn_on_page <= b
                };
                if ok {
                    ReadCheck::Ok
                } else {
                    ReadCheck::SuspectStale { expected: b }
                }
            }
        }
    }

    /// Splits so that `at` starts an entry.
    fn split_at(&mut self, at: u64) {
        if at <= self.lo || at >= self.hi {
            return;
        }
        let i = self.find(at).expect("covered");
        let e = self.entries[i];
        if e.lo == at {
            return;
        }
        let right = PriEntry {
            lo: at,
            hi: e.hi,
            locator: e.locator.shifted(at - e.lo),
            last_lsn: e.last_lsn,
        };
        self.entries[i].hi = at;
        self.entries.insert(i + 1, right);
    }

    fn normalize(&mut self) {
        let mut out: Vec<PriEntry> = Vec::with_capacity(self.entries.len());
        for e in self.entries.drain(..) {
            if let Some(last) = out.last_mut() {
                if last.hi == e.lo
                    && last.last_lsn.is_none()
                    && e.last_lsn.is_none()
                    && last.locator.continues(last.hi - last.lo, &e.locator)
                {
                    last.hi = e.hi;
                    continue;
                }
            }
            out.push(e);
        }
        self.entries = out;
    }

    /// Applies a logged op to the part of it inside this index's range.
    /// Returns the previous locator of the page for single-page backups.
    pub fn apply(&mut self, op: &PriOp) -> Option<BackupLocator> {
        match *op {
            PriOp::Write { page, lsn } => {
                let i = self.isolate(page.0)?;
                self.entries[i].last_lsn = Some(lsn);
                None
            }
            PriOp::Backup { page, locator } => {
                let i = self.isolate(page.0)?;
                let old = self.entries[i].locator;
                self.entries[i].locator = locator;
                self.entries[i].last_lsn = None;
                self.normalize();
                Some(old)
            }
            PriOp::Range { lo, hi, locator } => {
                let a = lo.max(self.lo);
                let b = hi.min(self.hi);
                if a >= b {
                    return None;
                }
                self.split_at(a);
                self.split_at(b);
                let first = self.find(a).unwrap();
                let last = self.find(b - 1).unwrap();
                self.entries.splice(
                    first..=last,
                    [PriEntry {
                        lo: a,
                        hi: b,
                        locator: locator.shifted(a - lo),
                        last_lsn: None,
                    }],
                );
                self.normalize();
                None
            }
        }
    }

    fn isolate(&mut self, p: u64) -> Option<usize> {
        self.find(p)?;
        self.split_at(p);
        self.split_at(p + 1);
        self.find(p)
    }

    /// Entries restricted to `[lo, hi)`.
    pub fn clip(&self, lo: u64, hi: u64) -> RecoveryIndex {
        let lo = lo.max(self.lo);
        let hi = hi.min(self.hi);
        let entries = self
            .entries
            .iter()
            .filter(|e| e.hi > lo && e.lo < hi)
            .map(|e| {
                let a = e.lo.max(lo);
                PriEntry {
                    lo: a,
                    hi: e.hi.min(hi),
                    locator: e.locator.shifted(a - e.lo),
                    last_lsn: e.last_lsn,
                }
            })
            .collect();
        RecoveryIndex { lo, hi, entries }
    }

    /// Replaces the part of this index covered by `part`.
    pub fn splice(&mut self, part: &RecoveryIndex) {
        self.split_at(part.lo);
        self.split_at(part.hi);
        let first = self.find(part.lo).unwrap();
        let last = self.find(part.hi - 1).unwrap();
        self.entries
            .splice(first..=last, part.entries.iter().copied());
        self.normalize();
    }

    /// Body of a PRI page holding this index's entries.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.entries.len() * 16);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut buf = [0u8; 10];
        let mut put = |out: &mut Vec<u8>, v: u64| {
            let n = v.encode_var(&mut buf);
            out.extend_from_slice(&buf[..n]);
        };
        for e in &self.entries {
            put(&mut out, e.lo - self.lo);
            put(&mut out, e.hi - e.lo);
            let (tag, v) = match e.locator.source {
                Source::BackupPage { slot } => (0u8, slot),
                Source::FormatRecord(l) => (1, l.0),
                Source::InLogImage(l) => (2, l.0),
            };
            out.push(tag);
            put(&mut out, v);
            put(&mut out, e.locator.backup_lsn.0);
            put(&mut out, e.locator.backup_count.map_or(0, |c| c as u64 + 1));
            out.push(e.locator.exact as u8);
            put(&mut out, e.last_lsn.map_or(0, |l| l.0));
        }
        out
    }

    pub fn decode(bytes: &[u8], lo: u64, hi: u64) -> Result<Self> {
        let bad = || Error::Format("malformed recovery index page".into());
        if bytes.len() < 4 {
            return Err(bad());
        }
        let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if n as u64 > hi.saturating_sub(lo) {
            return Err(bad());
        }
        let mut at = 4usize;
        let get = |at: &mut usize| -> Result<u64> {
            let (v, used) = u64::decode_var(bytes.get(*at..).ok_or_else(bad)?).ok_or_else(bad)?;
            *at += used;
            Ok(v)
        };
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let elo = lo + get(&mut at)?;
            let ehi = elo + get(&mut at)?;
            let tag = *bytes.get(at).ok_or_else(bad)?;
            at += 1;
            let v = get(&mut at)?;
            let source = match tag {
                0 => Source::BackupPage { slot: v },
                1 => Source::FormatRecord(Lsn(v)),
                2 => Source::InLogImage(Lsn(v)),
                _ => return Err(bad()),
            };
            let backup_lsn = Lsn(get(&mut at)?);
            let count = get(&mut at)?;
            let exact = *bytes.get(at).ok_or_else(bad)? != 0;
            at += 1;
            let last = get(&mut at)?;
            entries.push(PriEntry {
                lo: elo,
                hi: ehi,
                locator: BackupLocator {
                    source,
                    backup_lsn,
                    backup_count: (count != 0).then(|| (count - 1) as u32),
                    exact,
                },
                last_lsn: (last != 0).then_some(Lsn(last)),
            });
        }
        RecoveryIndex::from_entries(lo, hi, entries)
    }
}
