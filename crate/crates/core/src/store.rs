//! Data file: fixed-size slots, logical-to-physical translation, bad-block
//! list, and the fault-injection hook every page read passes through.
//!
//! Slot 0 holds the meta page. Logical page `p` lives in slot `p` until it
//! is relocated after a single-page failure; relocated pages move to spare
//! slots past the last logical page and their old slot joins the bad-block
//! list for good. The translation exceptions and the bad-block list are
//! persisted in the meta page, which is rewritten synchronously on every
//! relocation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::Serialize;

use crate::device::Device;
use crate::error::{DetectionCause, Error, Result};
use crate::fault::{FaultInjector, FaultPlan, Injected};
use crate::layout::Layout;
use crate::page::{Page, PageId, PageKind, HEADER_SIZE};
use crate::wal::Lsn;

pub const DATA_MAGIC: &[u8; 4] = b"PPHX";
pub const DATA_VERSION: u32 = 1;
const META_FIXED: usize = 4 + 4 + 4 + 8 + 8 + 8 + 4 + 4 + 4;

/// Why a page image reached the data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteKind {
    /// Format at creation or a buffer-pool clean.
    Normal,
    /// A recovered page moved to a fresh slot.
    Relocation,
    /// Rewritten by media recovery.
    Restore,
}

/// Called with every page image that reaches the data file.
pub type WriteObserver = Box<dyn FnMut(WriteKind, PageId, &[u8]) + Send>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub reads: u64,
    pub writes: u64,
    pub detected: u64,
    pub relocations: u64,
    pub faults_fired: u64,
}

pub struct PageStore {
    dev: Device,
    layout: Layout,
    slot_count: u64,
    meta_slots: u64,
    remap: BTreeMap<u64, u64>,
    bad: BTreeSet<u64>,
    injector: Option<FaultInjector>,
    current: HashMap<PageId, Vec<u8>>,
    previous: HashMap<PageId, Vec<u8>>,
    observer: Option<WriteObserver>,
    stats: StoreStats,
}

impl fmt::Debug for PageStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PageStore")
            .field("layout", &self.layout)
            .field("slot_count", &self.slot_count)
            .field("remapped", &self.remap.len())
            .field("bad", &self.bad.len())
            .finish()
    }
}

/// Spare slots reserved for relocation.
fn spare_slots(layout: &Layout) -> u64 {
    (layout.pages / 8).max(16)
}

/// Meta slots needed to record every spare slot as used: slot 0 plus
/// overflow slots placed after the spare region.
fn meta_slots(layout: &Layout, spares: u64) -> u64 {
    let need = META_FIXED as u64 + spares * 12;
    need.div_ceil((layout.page_size - HEADER_SIZE) as u64)
}

impl PageStore {
    /// Creates the data file holding only the meta page.
    pub fn create(dev: Device, layout: Layout) -> Result<Self> {
        let spares = spare_slots(&layout);
        let slot_count = layout.pages + 1 + spares;
        let mut store = PageStore {
            dev,
            layout,
            slot_count,
            meta_slots: meta_slots(&layout, spares),
            remap: BTreeMap::new(),
            bad: BTreeSet::new(),
            injector: None,
            current: HashMap::new(),
            previous: HashMap::new(),
            observer: None,
            stats: StoreStats::default(),
        };
        store.write_meta()?;
        Ok(store)
    }

    /// Writes every logical page as formatted by the store-wide format
    /// record at `format_lsn`.
    pub fn format_all(&mut self, format_lsn: Lsn) -> Result<()> {
        let layout = self.layout;
        for p in 1..=layout.pages {
            self.write_page(layout.initial_image(PageId(p), format_lsn))?;
        }
        self.dev.sync()?;
        Ok(())
    }

    pub fn open(dev: Device) -> Result<Self> {
        let mut probe = vec![0u8; 64];
        dev.read_at(HEADER_SIZE as u64, &mut probe)
            .map_err(|e| Error::Format(format!("meta page: {e}")))?;
        if &probe[..4] != DATA_MAGIC {
            return Err(Error::Format("bad data file magic".into()));
        }
        let page_size = u32::from_le_bytes(probe[8..12].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; page_size];
        dev.read_at(0, &mut bytes)
            .map_err(|e| Error::Format(format!("meta page: {e}")))?;
        let meta = Page::verified(bytes, PageId(0))
            .map_err(|_| Error::Format("meta page checksum".into()))?;
        let mut b = meta.body().to_vec();
        let u32_in = |b: &[u8], o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_in = |b: &[u8], o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let version = u32_in(&b, 4);
        if version != DATA_VERSION {
            return Err(Error::Format(format!("unsupported data version {version}")));
        }
        let slot_count = u64_in(&b, 12);
        let pages = u64_in(&b, 20);
        let heap_pages = u64_in(&b, 28);
        let nremap = u32_in(&b, 36) as usize;
        let nbad = u32_in(&b, 40) as usize;
        let meta_slots = u32_in(&b, 44) as u64;
        let cap = page_size - HEADER_SIZE;
        let used = (META_FIXED + 8 * nremap + 4 * nbad).div_ceil(cap) as u64;
        if used > meta_slots {
            return Err(Error::Format(format!("meta needs {used} slots but has {meta_slots}")));
        }
        for i in 1..used {
            let mut bytes = vec![0u8; page_size];
            dev.read_at((slot_count + i - 1) * page_size as u64, &mut bytes)
                .map_err(|e| Error::Format(format!("meta overflow page: {e}")))?;
            let more = Page::verified(bytes, PageId(0))
                .map_err(|_| Error::Format("meta overflow page checksum".into()))?;
            b.extend_from_slice(more.body());
        }
        let u32_at = |o: usize| u32_in(&b, o);
        let layout = Layout::new(page_size, pages, heap_pages)?;
        let mut at = META_FIXED;
        let mut remap = BTreeMap::new();
        for _ in 0..nremap {
            remap.insert(u32_at(at) as u64, u32_at(at + 4) as u64);
            at += 8;
        }
        let mut bad = BTreeSet::new();
        for _ in 0..nbad {
            bad.insert(u32_at(at) as u64);
            at += 4;
        }
        Ok(PageStore {
            dev,
            layout,
            slot_count,
            meta_slots,
            remap,
            bad,
            injector: None,
            current: HashMap::new(),
            previous: HashMap::new(),
            observer: None,
            stats: StoreStats::default(),
        })
    }

    fn write_meta(&mut self) -> Result<()> {
        let mut body = Vec::with_capacity(META_FIXED);
        body.extend_from_slice(DATA_MAGIC);
        body.extend_from_slice(&DATA_VERSION.to_le_bytes());
        body.extend_from_slice(&(self.layout.page_size as u32).to_le_bytes());
        body.extend_from_slice(&self.slot_count.to_le_bytes());
        body.extend_from_slice(&self.layout.pages.to_le_bytes());
        body.extend_from_slice(&self.layout.heap_pages.to_le_bytes());
        body.extend_from_slice(&(self.remap.len() as u32).to_le_bytes());
        body.extend_from_slice(&(self.bad.len() as u32).to_le_bytes());
        body.extend_from_slice(&(self.meta_slots as u32).to_le_bytes());
        for (l, s) in &self.remap {
            body.extend_from_slice(&(*l as u32).to_le_bytes());
            body.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        for s in &self.bad {
            body.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        let cap = self.layout.page_size - HEADER_SIZE;
        if body.len() > cap * self.meta_slots as usize {
            return Err(Error::Media("meta area full: too many relocations".into()));
        }
        // Overflow first, so slot 0 never names overflow contents not yet written.
        for (i, chunk) in body.chunks(cap).enumerate().rev() {
            let mut page = Page::new(self.layout.page_size, PageId(0), PageKind::Meta, Lsn::NIL);
            page.set_body(chunk);
            page.seal();
            let slot = if i == 0 { 0 } else { self.slot_count + i as u64 - 1 };
            self.dev.write_at(slot * self.layout.page_size as u64, page.bytes())?;
        }
        self.dev.sync()?;
        Ok(())
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn device(&self) -> &Device {
        &self.dev
    }

    pub fn device_mut(&mut self) -> &mut Device {
        &mut self.dev
    }

    pub fn stats(&self) -> StoreStats {
        let mut s = self.stats.clone();
        s.faults_fired = self.injector.as_ref().map_or(0, |i| i.fired());
        s
    }

    pub fn set_fault_plan(&mut self, plan: Option<FaultPlan>) {
        self.injector = plan.map(FaultInjector::new);
    }

    pub fn injector_mut(&mut self) -> Option<&mut FaultInjector> {
        self.injector.as_mut()
    }

    pub fn set_write_observer(&mut self, obs: Option<WriteObserver>) {
        self.observer = obs;
    }

    pub fn slot_of(&self, id: PageId) -> Result<u64> {
        if !self.layout.contains(id) {
            return Err(Error::Usage(format!("page {id} is not mapped")));
        }
        Ok(self.remap.get(&id.0).copied().unwrap_or(id.0))
    }

    pub fn bad_blocks(&self) -> &BTreeSet<u64> {
        &self.bad
    }

    fn offset(&self, slot: u64) -> u64 {
        slot * self.layout.page_size as u64
    }

    /// Reads and verifies a page. Faults are applied to the raw bytes
    /// before verification. A stale image with a valid checksum passes
    /// here; the recovery index catches it.
    pub fn read_page(&mut self, id: PageId) -> Result<Page> {
        let slot = self.slot_of(id)?;
        self.stats.reads += 1;
        let mut bytes = vec![0u8; self.layout.page_size];
        let io = self.dev.read_at(self.offset(slot), &mut bytes);
        let injected = match &mut self.injector {
            Some(inj) => inj.on_read(id, &mut bytes, self.previous.get(&id).map(|v| v.as_slice())),
            None => Injected::None,
        };
        let result = match (io, injected) {
            (Err(e), _) => Err(Error::detected(id, DetectionCause::IoError(e.to_string()))),
            (Ok(()), Injected::Unreadable) => Err(Error::detected(
                id,
                DetectionCause::IoError("injected unreadable sector".into()),
            )),
            (Ok(()), _) => Page::verified(bytes, id),
        };
        if result.is_err() {
            self.stats.detected += 1;
        }
        result
    }

    /// Seals and writes a page to its mapped slot.
    pub fn write_page(&mut self, page: Page) -> Result<()> {
        self.write_page_as(page, WriteKind::Normal)
    }

    pub fn write_page_as(&mut self, mut page: Page, kind: WriteKind) -> Result<()> {
        let id = page.id();
        let slot = self.slot_of(id)?;
        page.seal();
        self.write_slot(slot, &page, kind)
    }

    fn write_slot(&mut self, slot: u64, page: &Page, kind: WriteKind) -> Result<()> {
        let id = page.id();
        self.dev.write_at(self.offset(slot), page.bytes())?;
        self.stats.writes += 1;
        if self.injector.is_some() {
            if let Some(old) = self.current.insert(id, page.bytes().to_vec()) {
                self.previous.insert(id, old);
            }
        }
        if let Some(obs) = &mut self.observer {
            obs(kind, id, page.bytes());
        }
        Ok(())
    }

    /// Moves `page` to a fresh slot, retiring the old one.
    pub fn relocate(&mut self, mut page: Page) -> Result<u64> {
        let id = page.id();
        let old = self.slot_of(id)?;
        let in_use: BTreeSet<u64> = self.remap.values().copied().collect();
        let new = (self.layout.pages + 1..self.slot_count)
            .find(|s| !in_use.contains(s) && !self.bad.contains(s))
            .ok_or_else(|| Error::Media(format!("no spare slot to relocate page {id}")))?;
        page.seal();
        self.write_slot(new, &page, WriteKind::Relocation)?;
        self.remap.insert(id.0, new);
        self.bad.insert(old);
        if let Err(e) = self.write_meta() {
            self.remap.insert(id.0, old);
            self.bad.remove(&old);
            return Err(e);
        }
        self.stats.relocations += 1;
        Ok(new)
    }

    /// Damages the stored bytes of a page without resealing.
    pub fn damage(&mut self, id: PageId, f: impl FnOnce(&mut [u8])) -> Result<()> {
        let slot = self.slot_of(id)?;
        let mut bytes = vec![0u8; self.layout.page_size];
        self.dev.read_at(self.offset(slot), &mut bytes)?;
        f(&mut bytes);
        self.dev.write_at(self.offset(slot), &bytes)?;
        Ok(())
    }

    /// Rewrites a page with a valid checksum over altered contents, as a
    /// firmware or software bug would.
    pub fn damage_sealed(&mut self, id: PageId, f: impl FnOnce(&mut Page)) -> Result<()> {
        let slot = self.slot_of(id)?;
        let mut bytes = vec![0u8; self.layout.page_size];
        self.dev.read_at(self.offset(slot), &mut bytes)?;
        let mut page = Page::from_bytes(bytes);
        f(&mut page);
        page.seal();
        self.dev.write_at(self.offset(slot), page.bytes())?;
        Ok(())
    }

    /// Raw slot bytes, bypassing verification and fault injection.
    pub fn raw(&self, id: PageId) -> Result<Vec<u8>> {
        let slot = self.slot_of(id)?;
        let mut bytes = vec![0u8; self.layout.page_size];
        self.dev.read_at(self.offset(slot), &mut bytes)?;
        Ok(bytes)
    }

    /// Forgets all relocations; used after restoring onto a fresh device.
    pub fn reset_translation(&mut self) -> Result<()> {
        self.remap.clear();
        self.bad.clear();
        self.write_meta()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::MemDisk;
    use crate::fault::{FaultMode, FaultRule};

    fn store(pages: u64) -> PageStore {
        let layout = Layout::new(1024, pages, 2).unwrap();
        let mut s = PageStore::create(Device::memory(MemDisk::new(), true), layout).unwrap();
        s.format_all(Lsn(16)).unwrap();
        s
    }

    fn heap_page(s: &PageStore) -> PageId {
        s.layout().heap_page(0).unwrap()
    }

    #[test]
    fn formatted_page_reads_back_identically() {
        let mut s = store(64);
        let id = heap_page(&s);
        let page = s.read_page(id).unwrap();
        assert_eq!(page, s.layout().initial_image(id, Lsn(16)));
        assert_eq!(page.kind(), Some(PageKind::Heap));
    }

    #[test]
    fn write_recomputes_checksum() {
        let mut s = store(64);
        let id = heap_page(&s);
        let mut page = s.read_page(id).unwrap();
        page.body_mut()[0] = 42;
        assert!(!page.checksum_ok());
        s.write_page(page.clone()).unwrap();
        let back = s.read_page(id).unwrap();
        assert_eq!(back.body()[0], 42);
        page.seal();
        assert_eq!(back, page);
    }

    #[test]
    fn bitflip_on_second_read() {
        let mut s = store(64);
        let id = heap_page(&s);
        s.set_fault_plan(Some(FaultPlan::new(3).with_rule(FaultRule::single(id, 2, FaultMode::Bitflip))));
        assert!(s.read_page(id).is_ok());
        match s.read_page(id) {
            Err(Error::Detected(d)) => assert_eq!(d.cause, DetectionCause::ChecksumMismatch),
            other => panic!("{other:?}"),
        }
        assert!(s.read_page(id).is_ok());
    }

    #[test]
    fn stale_returns_old_valid_version() {
        let mut s = store(64);
        let id = heap_page(&s);
        s.set_fault_plan(Some(FaultPlan::new(3).with_rule(FaultRule::single(id, 1, FaultMode::Stale))));
        let mut v1 = s.layout().initial_image(id, Lsn(16));
        v1.set_page_lsn(Lsn(100));
        s.write_page(v1.clone()).unwrap();
        let mut v2 = v1.clone();
        v2.set_page_lsn(Lsn(200));
        s.write_page(v2).unwrap();
        let got = s.read_page(id).unwrap();
        assert_eq!(got.page_lsn(), Lsn(100));
        assert_eq!(s.read_page(id).unwrap().page_lsn(), Lsn(200));
    }

    #[test]
    fn torn_write_is_detected() {
        let mut s = store(64);
        let id = heap_page(&s);
        s.set_fault_plan(Some(FaultPlan::new(3).with_rule(FaultRule::single(id, 2, FaultMode::Torn))));
        let mut v1 = s.read_page(id).unwrap();
        v1.body_mut().fill(1);
        s.write_page(v1.clone()).unwrap();
        v1.body_mut().fill(2);
        s.write_page(v1).unwrap();
        assert!(matches!(s.read_page(id), Err(Error::Detected(_))));
        assert_eq!(s.read_page(id).unwrap().body()[0], 2);
    }

    #[test]
    fn unreadable_and_unmapped() {
        let mut s = store(64);
        let id = heap_page(&s);
        s.set_fault_plan(Some(FaultPlan::new(3).with_rule(FaultRule::single(id, 1, FaultMode::Unreadable))));
        assert!(matches!(
            s.read_page(id),
            Err(Error::Detected(crate::error::DetectedFailure { cause: DetectionCause::IoError(_), .. }))
        ));
        assert!(matches!(s.read_page(PageId(10_000)), Err(Error::Usage(_))));
    }

    #[test]
    fn relocation_retires_slots_and_survives_reopen() {
        let disk = MemDisk::new();
        let layout = Layout::new(1024, 64, 2).unwrap();
        let mut s = PageStore::create(Device::memory(disk.clone(), true), layout).unwrap();
        s.format_all(Lsn(16)).unwrap();
        let id = heap_page(&s);
        let page = s.read_page(id).unwrap();
        let first = s.relocate(page.clone()).unwrap();
        assert_ne!(first, id.0);
        assert!(s.bad_blocks().contains(&id.0));
        let second = s.relocate(page.clone()).unwrap();
        assert_ne!(second, first);
        assert_eq!(s.bad_blocks().len(), 2);
        assert_eq!(s.read_page(id).unwrap(), page);
        let mut reopened = PageStore::open(Device::memory(disk.crash_image(), true)).unwrap();
        assert_eq!(reopened.slot_of(id).unwrap(), second);
        assert_eq!(reopened.bad_blocks(), s.bad_blocks());
        assert_eq!(reopened.read_page(id).unwrap(), page);
    }

    #[test]
    fn spare_exhaustion_is_media_failure() {
        let mut s = store(64);
        let id = heap_page(&s);
        let page = s.read_page(id).unwrap();
        let err = loop {
            if let Err(e) = s.relocate(page.clone()) {
                break e;
            }
        };
        assert!(matches!(err, Error::Media(_)));
        let bad: Vec<_> = s.bad_blocks().iter().copied().collect();
        assert_eq!(bad.len(), 16);
    }

    #[test]
    fn meta_spills_into_overflow_slots_only_as_needed() {
        let disk = MemDisk::new();
        let layout = Layout::new(512, 2000, 2).unwrap();
        let mut s = PageStore::create(Device::memory(disk.clone(), true), layout).unwrap();
        assert!(s.meta_slots > 2);
        s.format_all(Lsn(16)).unwrap();
        // Nothing relocated yet: the unused overflow slots were never written.
        PageStore::open(Device::memory(disk.crash_image(), true)).unwrap();
        let id = heap_page(&s);
        let page = s.read_page(id).unwrap();
        for _ in 0..60 {
            s.relocate(page.clone()).unwrap();
        }
        let mut reopened = PageStore::open(Device::memory(disk.crash_image(), true)).unwrap();
        assert_eq!(reopened.bad_blocks(), s.bad_blocks());
        assert_eq!(reopened.read_page(id).unwrap(), page);
    }
}
