//! Buffer pool frames and LRU bookkeeping.
//!
//! The frame table lives here; the fix/clean/evict protocol that ties it to
//! the log, the page store and the recovery index is implemented on
//! [`crate::engine::Engine`].

use std::collections::HashMap;

use crate::page::{Page, PageId};
use crate::wal::Lsn;

#[derive(Debug, Clone)]
pub struct Frame {
    pub page: Page,
    pub pins: u32,
    pub dirty: bool,
    /// First LSN that dirtied the frame since it was last clean.
    pub rec_lsn: Lsn,
    used: u64,
}

#[derive(Debug)]
pub struct BufferPool {
    capacity: usize,
    frames: HashMap<PageId, Frame>,
    tick: u64,
}

impl BufferPool {
    pub fn new(capacity: usize) -> Self {
        BufferPool {
            capacity,
            frames: HashMap::with_capacity(capacity),
            tick: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.frames.len() >= self.capacity
    }

    pub fn contains(&self, id: PageId) -> bool {
        self.frames.contains_key(&id)
    }

    pub fn get(&self, id: PageId) -> Option<&Frame> {
        self.frames.get(&id)
    }

    pub fn get_mut(&mut self, id: PageId) -> Option<&mut Frame> {
        self.frames.get_mut(&id)
    }

    /// Marks a use for LRU ordering.
    pub fn touch(&mut self, id: PageId) {
        self.tick += 1;
        if let Some(f) = self.frames.get_mut(&id) {
            f.used = self.tick;
        }
    }

    /// Installs a clean, unpinned frame. The caller made room.
    pub fn insert(&mut self, page: Page) {
        debug_assert!(!self.is_full() || self.contains(page.id()));
        self.tick += 1;
        self.frames.insert(
            page.id(),
            Frame {
                page,
                pins: 0,
                dirty: false,
                rec_lsn: Lsn::NIL,
                used: self.tick,
            },
        );
    }

    pub fn remove(&mut self, id: PageId) -> Option<Frame> {
        self.frames.remove(&id)
    }

    pub fn pin(&mut self, id: PageId) {
        if let Some(f) = self.frames.get_mut(&id) {
            f.pins += 1;
        }
        self.touch(id);
    }

    pub fn unpin(&mut self, id: PageId) {
        if let Some(f) = self.frames.get_mut(&id) {
            debug_assert!(f.pins > 0, "unpin of unpinned page {id}");
            f.pins = f.pins.saturating_sub(1);
        }
    }

    /// Records that `lsn` was applied to a frame.
    pub fn mark_dirty(&mut self, id: PageId, lsn: Lsn) {
        let f = self.frames.get_mut(&id).expect("dirtied page is resident");
        if !f.dirty {
            f.dirty = true;
            f.rec_lsn = lsn;
        }
    }

    pub fn mark_clean(&mut self, id: PageId) {
        if let Some(f) = self.frames.get_mut(&id) {
            f.dirty = false;
            f.rec_lsn = Lsn::NIL;
        }
    }

    /// Least recently used unpinned frame.
    pub fn victim(&self) -> Option<PageId> {
        self.frames
            .iter()
            .filter(|(_, f)| f.pins == 0)
            .min_by_key(|(_, f)| f.used)
            .map(|(id, _)| *id)
    }

    /// Dirty frames with their recovery LSN, ordered by page id.
    pub fn dirty_pages(&self) -> Vec<(PageId, Lsn)> {
        let mut v: Vec<_> = self
            .frames
            .iter()
            .filter(|(_, f)| f.dirty)
            .map(|(id, f)| (*id, f.rec_lsn))
            .collect();
        v.sort();
        v
    }

    pub fn resident(&self) -> Vec<PageId> {
        let mut v: Vec<_> = self.frames.keys().copied().collect();
        v.sort();
        v
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}
