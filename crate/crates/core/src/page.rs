//! Physical page format.
//!
//! ```text
//! 0      4        12    13       16        24            28        40
//! | crc  | page id | kind | (pad) | page lsn | update count | (pad)  | body ...
//! ```
//!
//! The checksum is CRC-32C over every page byte except the checksum field.
//! The update count is bumped by every applied update or compensation
//! record and reset by formatting, so it is a pure function of the log.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DetectionCause, Error, Result};
use crate::wal::Lsn;

pub const DEFAULT_PAGE_SIZE: usize = 8192;
pub const MIN_PAGE_SIZE: usize = 512;
pub const HEADER_SIZE: usize = 40;

const CHECKSUM_OFF: usize = 0;
const ID_OFF: usize = 4;
const KIND_OFF: usize = 12;
const LSN_OFF: usize = 16;
const COUNT_OFF: usize = 24;

/// Logical page number. Stable across relocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PageId(pub u64);

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum PageKind {
    Free = 0,
    Heap = 1,
    BtreeBranch = 2,
    BtreeLeaf = 3,
    Pri = 4,
    Meta = 5,
}

impl PageKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => PageKind::Free,
            1 => PageKind::Heap,
            2 => PageKind::BtreeBranch,
            3 => PageKind::BtreeLeaf,
            4 => PageKind::Pri,
            5 => PageKind::Meta,
            _ => return None,
        })
    }
}

pub fn checksum(bytes: &[u8]) -> u32 {
    crc32c::crc32c(&bytes[CHECKSUM_OFF + 4..])
}

/// An owned page image.
#[derive(Clone, PartialEq, Eq)]
pub struct Page {
    bytes: Box<[u8]>,
}

impl fmt::Debug for Page {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Page")
            .field("id", &self.id())
            .field("kind", &self.kind_raw())
            .field("page_lsn", &self.page_lsn())
            .field("update_count", &self.update_count())
            .finish()
    }
}

impl Page {
    /// An empty page of the given kind. Formatting log records reuse this,
    /// so the result must depend only on the arguments.
    pub fn new(page_size: usize, id: PageId, kind: PageKind, lsn: Lsn) -> Self {
        let mut page = Page {
            bytes: vec![0u8; page_size].into_boxed_slice(),
        };
        page.bytes[ID_OFF..ID_OFF + 8].copy_from_slice(&id.0.to_le_bytes());
        page.bytes[KIND_OFF] = kind as u8;
        page.set_page_lsn(lsn);
        page.seal();
        page
    }

    /// Wraps raw bytes without any verification.
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Page {
            bytes: bytes.into_boxed_slice(),
        }
    }

    /// Wraps raw bytes read for `expected`, rejecting bad checksums and
    /// misdirected reads.
    pub fn verified(bytes: Vec<u8>, expected: PageId) -> Result<Self> {
        if bytes.len() < MIN_PAGE_SIZE {
            return Err(Error::detected(expected, DetectionCause::ChecksumMismatch));
        }
        let page = Page::from_bytes(bytes);
        if !page.checksum_ok() {
            return Err(Error::detected(expected, DetectionCause::ChecksumMismatch));
        }
        if page.id() != expected {
            return Err(Error::detected(
                expected,
                DetectionCause::WrongPageId { found: page.id().0 },
            ));
        }
        Ok(page)
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes.into_vec()
    }

    pub fn id(&self) -> PageId {
        PageId(u64::from_le_bytes(self.bytes[ID_OFF..ID_OFF + 8].try_into().unwrap()))
    }

    fn kind_raw(&self) -> u8 {
        self.bytes[KIND_OFF]
    }

    pub fn kind(&self) -> Option<PageKind> {
        PageKind::from_u8(self.kind_raw())
    }

    pub fn page_lsn(&self) -> Lsn {
        Lsn(u64::from_le_bytes(self.bytes[LSN_OFF..LSN_OFF + 8].try_into().unwrap()))
    }

    pub fn set_page_lsn(&mut self, lsn: Lsn) {
        self.bytes[LSN_OFF..LSN_OFF + 8].copy_from_slice(&lsn.0.to_le_bytes());
    }

    pub fn update_count(&self) -> u32 {
        u32::from_le_bytes(self.bytes[COUNT_OFF..COUNT_OFF + 4].try_into().unwrap())
    }

    pub fn bump_update_count(&mut self) {
        let n = self.update_count().wrapping_add(1);
        self.bytes[COUNT_OFF..COUNT_OFF + 4].copy_from_slice(&n.to_le_bytes());
    }

    pub fn stored_checksum(&self) -> u32 {
        u32::from_le_bytes(self.bytes[CHECKSUM_OFF..CHECKSUM_OFF + 4].try_into().unwrap())
    }

    pub fn checksum_ok(&self) -> bool {
        self.stored_checksum() == checksum(&self.bytes)
    }

    /// Recomputes the checksum field.
    pub fn seal(&mut self) {
        let c = checksum(&self.bytes);
        self.bytes[CHECKSUM_OFF..CHECKSUM_OFF + 4].copy_from_slice(&c.to_le_bytes());
    }

    pub fn body(&self) -> &[u8] {
        &self.bytes[HEADER_SIZE..]
    }

    pub fn body_mut(&mut self) -> &mut [u8] {
        &mut self.bytes[HEADER_SIZE..]
    }

    pub fn body_capacity(&self) -> usize {
        self.bytes.len() - HEADER_SIZE
    }

    /// Replaces the body wholesale; the tail past `body.len()` is zeroed.
    pub fn set_body(&mut self, body: &[u8]) {
        let dst = self.body_mut();
        assert!(body.len() <= dst.len(), "body larger than page");
        dst[..body.len()].copy_from_slice(body);
        dst[body.len()..].fill(0);
    }

    /// Mutable access to every byte, for fault injection and tests.
    pub fn raw_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_page_is_sealed() {
        let p = Page::new(DEFAULT_PAGE_SIZE, PageId(7), PageKind::Heap, Lsn(99));
        assert!(p.checksum_ok());
        assert_eq!(p.id(), PageId(7));
        assert_eq!(p.kind(), Some(PageKind::Heap));
        assert_eq!(p.page_lsn(), Lsn(99));
        assert_eq!(p.update_count(), 0);
        assert!(p.body().iter().all(|b| *b == 0));
    }

    #[test]
    fn checksum_excludes_its_own_field() {
        let mut p = Page::new(1024, PageId(1), PageKind::Heap, Lsn(16));
        let before = checksum(p.bytes());
        p.raw_mut()[0] ^= 0xff;
        assert_eq!(checksum(p.bytes()), before);
        assert!(!p.checksum_ok());
    }

    #[test]
    fn any_single_bit_flip_is_caught() {
        let mut p = Page::new(512, PageId(3), PageKind::Heap, Lsn(16));
        p.body_mut()[..5].copy_from_slice(b"hello");
        p.seal();
        for byte in 0..p.size() {
            for bit in 0..8 {
                let mut q = p.clone();
                q.raw_mut()[byte] ^= 1 << bit;
                assert!(Page::verified(q.into_bytes(), PageId(3)).is_err());
            }
        }
    }

    #[test]
    fn misdirected_read_is_rejected() {
        let p = Page::new(1024, PageId(5), PageKind::Heap, Lsn(16));
        match Page::verified(p.into_bytes(), PageId(6)) {
            Err(Error::Detected(d)) => {
                assert_eq!(d.cause, DetectionCause::WrongPageId { found: 5 })
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
