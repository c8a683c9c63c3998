//! Backup file: a header page followed by page-sized slots, each holding a
//! sealed copy of one data page.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::device::Device;
use crate::error::{DetectionCause, Error, Result};
use crate::page::{Page, PageId, PageKind};
use crate::wal::Lsn;

pub const BACKUP_MAGIC: &[u8; 4] = b"PPHB";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BackupStats {
    pub reads: u64,
    pub writes: u64,
}

#[derive(Debug)]
pub struct BackupStore {
    dev: Device,
    page_size: usize,
    next: u64,
    free: BTreeSet<u64>,
    fail_writes: u32,
    stats: BackupStats,
}

impl BackupStore {
    pub fn create(mut dev: Device, page_size: usize) -> Result<Self> {
        let mut header = Page::new(page_size, PageId(0), PageKind::Meta, Lsn::NIL);
        let mut body = BACKUP_MAGIC.to_vec();
        body.extend_from_slice(&(page_size as u32).to_le_bytes());
        header.set_body(&body);
        header.seal();
        dev.write_at(0, header.bytes())?;
        dev.sync()?;
        Ok(BackupStore {
            dev,
            page_size,
            next: 1,
            free: BTreeSet::new(),
            fail_writes: 0,
            stats: BackupStats::default(),
        })
    }

    /// Opens an existing file. `in_use` lists the slots still referenced by
    /// the recovery index; every other slot below the end becomes free.
    pub fn open(dev: Device, page_size: usize, in_use: &BTreeSet<u64>) -> Result<Self> {
        let mut bytes = vec![0u8; page_size];
        dev.read_at(0, &mut bytes)
            .map_err(|e| Error::Format(format!("backup header: {e}")))?;
        let header = Page::verified(bytes, PageId(0))
            .map_err(|_| Error::Format("backup header checksum".into()))?;
        if &header.body()[..4] != BACKUP_MAGIC {
            return Err(Error::Format("bad backup file magic".into()));
        }
        let next = (dev.len() / page_size as u64).max(1);
        let free = (1..next).filter(|s| !in_use.contains(s)).collect();
        Ok(BackupStore {
            dev,
            page_size,
            next,
            free,
            fail_writes: 0,
            stats: BackupStats::default(),
        })
    }

    /// Rebuilds the free list: every slot not in `in_use` is free.
    pub fn set_in_use(&mut self, in_use: &BTreeSet<u64>) {
        self.free = (1..self.next).filter(|s| !in_use.contains(s)).collect();
    }

    pub fn stats(&self) -> BackupStats {
        self.stats.clone()
    }

    pub fn device(&self) -> &Device {
        &self.dev
    }

    pub fn device_mut(&mut self) -> &mut Device {
        &mut self.dev
    }

    /// Makes the next `n` backup writes fail.
    pub fn fail_next_writes(&mut self, n: u32) {
        self.fail_writes = n;
    }

    pub fn slots_in_use(&self) -> u64 {
        self.next - 1 - self.free.len() as u64
    }

    fn offset(&self, slot: u64) -> u64 {
        slot * self.page_size as u64
    }

    fn check_fail(&mut self) -> Result<()> {
        if self.fail_writes > 0 {
            self.fail_writes -= 1;
            return Err(Error::Io(std::io::Error::other("injected backup write failure")));
        }
        Ok(())
    }

    /// Copies a page into a free slot and makes it durable.
    pub fn write(&mut self, page: &Page) -> Result<u64> {
        self.check_fail()?;
        let slot = self.free.pop_first().unwrap_or_else(|| {
            self.next += 1;
            self.next - 1
        });
        let mut copy = page.clone();
        copy.seal();
        if let Err(e) = self.dev.write_at(self.offset(slot), copy.bytes()) {
            self.free.insert(slot);
            return Err(e.into());
        }
        self.dev.sync()?;
        self.stats.writes += 1;
        Ok(slot)
    }

    /// Writes a contiguous run of pages at the end of the file and returns
    /// the first slot.
    pub fn write_run<'a>(&mut self, pages: impl IntoIterator<Item = &'a Page>) -> Result<u64> {
        self.check_fail()?;
        let base = self.next;
        for page in pages {
            let mut copy = page.clone();
            copy.seal();
            self.dev.write_at(self.offset(self.next), copy.bytes())?;
            self.next += 1;
            self.stats.writes += 1;
        }
        self.dev.sync()?;
        Ok(base)
    }

    /// Reads the copy of `expected` stored in `slot`.
    pub fn read(&mut self, slot: u64, expected: PageId) -> Result<Page> {
        self.stats.reads += 1;
        if slot == 0 || slot >= self.next {
            return Err(Error::Media(format!("backup slot {slot} out of range")));
        }
        let mut bytes = vec![0u8; self.page_size];
        self.dev
            .read_at(self.offset(slot), &mut bytes)
            .map_err(|e| Error::detected(expected, DetectionCause::IoError(e.to_string())))?;
        Page::verified(bytes, expected)
    }

    pub fn free(&mut self, slot: u64) {
        if slot > 0 && slot < self.next {
            self.free.insert(slot);
        }
    }

    pub fn free_run(&mut self, base: u64, len: u64) {
        for s in base..base + len {
            self.free(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::MemDisk;

    fn page(id: u64, lsn: u64) -> Page {
        Page::new(1024, PageId(id), PageKind::Heap, Lsn(lsn))
    }

    #[test]
    fn round_trip_and_slot_reuse() {
        let disk = MemDisk::new();
        let mut b = BackupStore::create(Device::memory(disk.clone(), true), 1024).unwrap();
        let s1 = b.write(&page(5, 100)).unwrap();
        let s2 = b.write(&page(6, 200)).unwrap();
        assert_ne!(s1, s2);
        assert_eq!(b.read(s1, PageId(5)).unwrap().page_lsn(), Lsn(100));
        assert!(b.read(s1, PageId(6)).is_err());
        b.free(s1);
        assert_eq!(b.write(&page(7, 300)).unwrap(), s1);
        let in_use: BTreeSet<u64> = [s2].into();
        let mut reopened = BackupStore::open(Device::memory(disk.crash_image(), true), 1024, &in_use).unwrap();
        assert_eq!(reopened.read(s2, PageId(6)).unwrap().page_lsn(), Lsn(200));
        assert_eq!(reopened.slots_in_use(), 1);
    }

    #[test]
    fn runs_are_contiguous() {
        let mut b = BackupStore::create(Device::memory(MemDisk::new(), true), 1024).unwrap();
        let pages: Vec<Page> = (1..=4).map(|i| page(i, 10)).collect();
        let base = b.write_run(&pages).unwrap();
        for i in 0..4 {
            assert_eq!(b.read(base + i, PageId(i + 1)).unwrap().id(), PageId(i + 1));
        }
    }

    #[test]
    fn injected_failure_keeps_state() {
        let mut b = BackupStore::create(Device::memory(MemDisk::new(), true), 1024).unwrap();
        b.fail_next_writes(1);
        assert!(b.write(&page(1, 1)).is_err());
        assert_eq!(b.write(&page(1, 1)).unwrap(), 1);
    }
}
