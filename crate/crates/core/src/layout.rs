//! Store geometry: which logical pages hold what.
//!
//! Logical ids run `1..=pages`. The id space is split into two partitions,
//! A = `1..=mid` and B = `mid+1..=pages`. Recovery-index pages describing B
//! sit at the front of A and those describing A at the front of B, so no
//! index page ever describes itself. The remaining ("usable") ids are
//! handed out in order: heap pages first, then the B-tree root, then B-tree
//! nodes allocated on splits.

use serde::{Deserialize, Serialize};

use crate::btree::node::Node;
use crate::error::{Error, Result};
use crate::page::{Page, PageId, PageKind, HEADER_SIZE, MIN_PAGE_SIZE};
use crate::pri::{BackupLocator, RecoveryIndex, MAX_ENTRY_BYTES};
use crate::wal::Lsn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub page_size: usize,
    pub pages: u64,
    pub heap_pages: u64,
    /// Data pages described by one recovery-index page.
    pub pri_coverage: u64,
}

impl Layout {
    pub fn new(page_size: usize, pages: u64, heap_pages: u64) -> Result<Self> {
        if page_size < MIN_PAGE_SIZE || page_size > u16::MAX as usize + 1 {
            return Err(Error::Usage(format!("page size {page_size} out of range")));
        }
        let pri_coverage = ((page_size - HEADER_SIZE - 4) / MAX_ENTRY_BYTES) as u64;
        let layout = Layout {
            page_size,
            pages,
            heap_pages,
            pri_coverage,
        };
        if pages < 8 || layout.usable() < heap_pages + 2 {
            return Err(Error::Usage(format!(
                "{pages} pages cannot hold {heap_pages} heap pages plus a tree"
            )));
        }
        Ok(layout)
    }

    pub fn mid(&self) -> u64 {
        (self.pages + 1) / 2
    }

    /// Index pages covering partition B, stored at the front of A.
    fn pri_in_a(&self) -> u64 {
        (self.pages - self.mid()).div_ceil(self.pri_coverage)
    }

    /// Index pages covering partition A, stored at the front of B.
    fn pri_in_b(&self) -> u64 {
        self.mid().div_ceil(self.pri_coverage)
    }

    pub fn pri_pages(&self) -> impl Iterator<Item = PageId> + '_ {
        let a = (1..=self.pri_in_a()).map(PageId);
        let b = (self.mid() + 1..=self.mid() + self.pri_in_b()).map(PageId);
        a.chain(b)
    }

    pub fn is_pri(&self, p: PageId) -> bool {
        let mid = self.mid();
        (p.0 >= 1 && p.0 <= self.pri_in_a()) || (p.0 > mid && p.0 <= mid + self.pri_in_b())
    }

    pub fn contains(&self, p: PageId) -> bool {
        p.0 >= 1 && p.0 <= self.pages
    }

    /// The index page whose entries cover `p`.
    pub fn pri_page_for(&self, p: PageId) -> PageId {
        let mid = self.mid();
        if p.0 <= mid {
            PageId(mid + 1 + (p.0 - 1) / self.pri_coverage)
        } else {
            PageId(1 + (p.0 - mid - 1) / self.pri_coverage)
        }
    }

    /// Data-page ids `[lo, hi)` covered by index page `pri`.
    pub fn coverage(&self, pri: PageId) -> (u64, u64) {
        let mid = self.mid();
        if pri.0 <= mid {
            let lo = mid + 1 + (pri.0 - 1) * self.pri_coverage;
            (lo, (lo + self.pri_coverage).min(self.pages + 1))
        } else {
            let lo = 1 + (pri.0 - mid - 1) * self.pri_coverage;
            (lo, (lo + self.pri_coverage).min(mid + 1))
        }
    }

    pub fn usable(&self) -> u64 {
        self.pages - self.pri_in_a() - self.pri_in_b()
    }

    /// The `i`-th non-index page id.
    pub fn nth_usable(&self, i: u64) -> Option<PageId> {
        let a_first = self.pri_in_a() + 1;
        let a_len = self.mid() + 1 - a_first;
        if i < a_len {
            return Some(PageId(a_first + i));
        }
        let b_first = self.mid() + self.pri_in_b() + 1;
        let id = b_first + (i - a_len);
        (id <= self.pages).then_some(PageId(id))
    }

    /// Inverse of [`Layout::nth_usable`].
    pub fn usable_index(&self, p: PageId) -> Option<u64> {
        if !self.contains(p) || self.is_pri(p) {
            return None;
        }
        let a_first = self.pri_in_a() + 1;
        let a_len = self.mid() + 1 - a_first;
        if p.0 <= self.mid() {
            Some(p.0 - a_first)
        } else {
            Some(a_len + p.0 - (self.mid() + self.pri_in_b() + 1))
        }
    }

    pub fn heap_page(&self, i: u64) -> Option<PageId> {
        (i < self.heap_pages).then(|| self.nth_usable(i)).flatten()
    }

    pub fn root(&self) -> PageId {
        self.nth_usable(self.heap_pages).expect("validated")
    }

    /// Allocation cursor value for the first B-tree node after the root.
    pub fn first_alloc(&self) -> u64 {
        self.heap_pages + 1
    }

    fn kind_at_init(&self, p: PageId) -> PageKind {
        if self.is_pri(p) {
            PageKind::Pri
        } else if p == self.root() {
            PageKind::BtreeLeaf
        } else if self.usable_index(p).is_some_and(|i| i < self.heap_pages) {
            PageKind::Heap
        } else {
            PageKind::Free
        }
    }

    /// Image of page `p` right after the store-wide format record at `lsn`.
    pub fn initial_image(&self, p: PageId, lsn: Lsn) -> Page {
        let kind = self.kind_at_init(p);
        let mut page = Page::new(self.page_size, p, kind, lsn);
        match kind {
            PageKind::Pri => {
                let (lo, hi) = self.coverage(p);
                let idx = RecoveryIndex::new(lo, hi, BackupLocator::format(lsn));
                page.set_body(&idx.encode());
            }
            PageKind::BtreeLeaf => page.set_body(&Node::empty_root_leaf().encode()),
            _ => {}
        }
        page.seal();
        page
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_index_page_covers_itself() {
        for pages in [8u64, 9, 100, 1000, 10_000] {
            let l = Layout::new(1024, pages, 4).unwrap();
            let pri: Vec<_> = l.pri_pages().collect();
            for &p in &pri {
                let (lo, hi) = l.coverage(p);
                assert!(!(lo..hi).contains(&p.0), "{pages}: {p} covers itself");
            }
            for id in 1..=pages {
                let owner = l.pri_page_for(PageId(id));
                assert!(l.is_pri(owner));
                let (lo, hi) = l.coverage(owner);
                assert!((lo..hi).contains(&id));
            }
        }
    }

    #[test]
    fn usable_ids_skip_index_pages() {
        let l = Layout::new(1024, 1000, 10).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..l.usable() {
            let p = l.nth_usable(i).unwrap();
            assert!(!l.is_pri(p));
            assert!(seen.insert(p));
        }
        assert!(l.nth_usable(l.usable()).is_none());
        assert_eq!(seen.len() as u64 + l.pri_pages().count() as u64, 1000);
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(Layout::new(1024, 4, 0).is_err());
        assert!(Layout::new(100, 100, 0).is_err());
    }
}
