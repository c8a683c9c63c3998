//! Page access: fix with transparent single-page recovery, cleaning in the
//! write / log-index-update / evict order, and recovery-index maintenance.

use crate::error::{DetectionCause, Error, Result};
use crate::events::Event;
use crate::page::{Page, PageId};
use crate::pri::{BackupLocator, PriOp, ReadCheck, Source};
use crate::wal::{FlushReason, LogRecord, Lsn, Payload, RecordKind};

use super::{Engine, Writer};

/// Queued index changes are applied to index pages once this many pile up.
const PRI_DRAIN_THRESHOLD: usize = 16;

impl Engine {
    /// Makes `id` resident and pinned and returns a snapshot of it. A read
    /// that fails verification, or whose PageLSN disagrees with the
    /// recovery index, is repaired by single-page recovery before the
    /// caller sees it.
    pub fn fix(&mut self, id: PageId) -> Result<Page> {
        if !self.layout.contains(id) {
            return Err(Error::Usage(format!("page {id} is not allocated")));
        }
        if self.pool.contains(id) {
            self.pool.pin(id);
            return Ok(self.pool.get(id).unwrap().page.clone());
        }
        self.make_room()?;
        let page = self.fetch(id)?;
        self.pool.insert(page.clone());
        self.pool.pin(id);
        Ok(page)
    }

    pub fn unfix(&mut self, id: PageId) {
        self.pool.unpin(id);
    }

    /// Current image of a resident page.
    pub(crate) fn resident(&self, id: PageId) -> &Page {
        &self.pool.get(id).expect("page is fixed").page
    }

    /// Reads a page from the store, verifying it against the index.
    pub(crate) fn fetch(&mut self, id: PageId) -> Result<Page> {
        match self.store.read_page(id) {
            Ok(page) => match self.pri.verify_on_read(id, page.page_lsn()) {
                ReadCheck::Ok => Ok(page),
                // Restart may find pages written after their last logged
                // index update; redo verifies those through the page chain.
                ReadCheck::SuspectStale { expected } if self.recovering && page.page_lsn() > expected => {
                    Ok(page)
                }
                ReadCheck::SuspectStale { expected } => self.recover_page(
                    id,
                    DetectionCause::StalePageLsn {
                        on_page: page.page_lsn().0,
                        expected: expected.0,
                    },
                ),
            },
            Err(Error::Detected(d)) => self.recover_page(id, d.cause),
            Err(e) => Err(e),
        }
    }

    /// Evicts until a frame is free.
    pub(crate) fn make_room(&mut self) -> Result<()> {
        while self.pool.is_full() {
            let victim = self
                .pool
                .victim()
                .ok_or_else(|| Error::Usage("buffer pool exhausted: every frame pinned".into()))?;
            self.evict(victim)?;
        }
        Ok(())
    }

    /// Cleans if needed, then drops the frame. The index update for the
    /// write is appended before the frame goes away.
    pub fn evict(&mut self, id: PageId) -> Result<()> {
        match self.pool.get(id) {
            None => return Ok(()),
            Some(f) if f.pins > 0 => {
                return Err(Error::Usage(format!("evict of pinned page {id}")));
            }
            Some(_) => {}
        }
        self.clean(id)?;
        self.pool.remove(id);
        self.stats.evictions += 1;
        Ok(())
    }

    /// Writes a dirty frame: force the log through its PageLSN, write the
    /// page, then log the completed write (or new backup) for the recovery
    /// index without forcing. Returns whether a write happened.
    pub fn clean(&mut self, id: PageId) -> Result<bool> {
        let Some(frame) = self.pool.get(id) else {
            return Ok(false);
        };
        if !frame.dirty {
            return Ok(false);
        }
        let mut page = frame.page.clone();
        let due = self.backup_due(&page)?;
        if due && self.cfg.backup_in_log {
            let expect = self.log.end();
            let mut image = page.clone();
            image.set_page_lsn(expect);
            image.seal();
            let rec = self.append_record(
                Writer::SYSTEM,
                RecordKind::PageImage,
                Some(id),
                page.page_lsn(),
                Payload::Image(image.bytes().to_vec()),
            )?;
            debug_assert_eq!(rec.lsn, expect);
            self.apply_logged(id, &rec)?;
            page = self.pool.get(id).unwrap().page.clone();
            self.stats.in_log_images += 1;
        }
        self.log.flush(page.page_lsn(), FlushReason::WalRule)?;
        page.seal();
        self.store.write_page(page.clone())?;
        self.pool.mark_clean(id);
        self.stats.page_cleans += 1;
        let lsn = page.page_lsn();
        let count = page.update_count();
        let op = if !due {
            PriOp::Write { page: id, lsn }
        } else if self.cfg.backup_in_log {
            PriOp::Backup {
                page: id,
                locator: BackupLocator::in_log(lsn, lsn, count),
            }
        } else {
            match self.backups.write(&page) {
                Ok(slot) => {
                    self.stats.backups += 1;
                    PriOp::Backup {
                        page: id,
                        locator: BackupLocator::backup_page(slot, lsn, count),
                    }
                }
                Err(e) => {
                    self.stats.backup_failures += 1;
                    self.emit(Event::new("backup_failed").page(id.0).lsn(lsn.0).detail(e.to_string()));
                    PriOp::Write { page: id, lsn }
                }
            }
        };
        self.log_pri(op)?;
        Ok(true)
    }

    /// Whether the page has collected enough updates since its last backup.
    fn backup_due(&mut self, page: &Page) -> Result<bool> {
        let interval = self.cfg.backup_interval;
        if interval == 0 {
            return Ok(false);
        }
        let id = page.id();
        let Some(info) = self.pri.lookup(id) else {
            return Ok(false);
        };
        let base = match info.locator.backup_count {
            Some(c) => c,
            None => match self.backup_counts.get(&id) {
                Some(c) => *c,
                None => {
                    let Source::BackupPage { slot } = info.locator.source else {
                        return Ok(true);
                    };
                    let c = match self.backups.read(slot, id) {
                        Ok(p) => p.update_count(),
                        Err(_) => return Ok(true),
                    };
                    self.backup_counts.insert(id, c);
                    c
                }
            },
        };
        Ok(page.update_count().saturating_sub(base) >= interval)
    }

    /// Logs an index change on the chain of the index page covering it and
    /// applies it to the in-memory mirror. The index page itself is updated
    /// later, by [`Engine::drain_pri`].
    pub(crate) fn log_pri(&mut self, op: PriOp) -> Result<Lsn> {
        self.reap_backup_slots();
        let q = self.layout.pri_page_for(op.subject());
        let prev = self.pri_chain.get(&q).copied().unwrap_or(Lsn::NIL);
        let lsn = self.append(Writer::SYSTEM, RecordKind::PriUpdate, Some(q), prev, Payload::Pri(op.clone()))?;
        self.pri_chain.insert(q, lsn);
        match &op {
            PriOp::Backup { page, .. } => {
                self.backup_counts.remove(page);
            }
            PriOp::Range { lo, hi, .. } => {
                self.backup_counts.retain(|p, _| p.0 < *lo || p.0 >= *hi);
            }
            PriOp::Write { .. } => {}
        }
        if let Some(old) = self.pri.apply(&op) {
            if let Source::BackupPage { slot } = old.source {
                self.pending_free.push((lsn, slot));
            }
        }
        self.pri_pending.push_back((lsn, op));
        Ok(lsn)
    }

    /// Recycles replaced backup slots whose replacement is durable.
    fn reap_backup_slots(&mut self) {
        let durable = self.log.durable_end();
        let backups = &mut self.backups;
        self.pending_free.retain(|(lsn, slot)| {
            if *lsn < durable {
                backups.free(*slot);
                false
            } else {
                true
            }
        });
    }

    /// Applies queued index changes to the index pages in the pool.
    pub(crate) fn drain_pri(&mut self) -> Result<()> {
        while let Some((lsn, op)) = self.pri_pending.pop_front() {
            let q = self.layout.pri_page_for(op.subject());
            let page = match self.fix(q) {
                Ok(p) => p,
                Err(e) => {
                    self.pri_pending.push_front((lsn, op));
                    return Err(e);
                }
            };
            if lsn > page.page_lsn() {
                let mut rec = LogRecord::new(RecordKind::PriUpdate, Payload::Pri(op));
                rec.lsn = lsn;
                rec.page = Some(q);
                rec.system = true;
                rec.prev_page_lsn = page.page_lsn();
                self.apply_logged(q, &rec)?;
            }
            self.unfix(q);
        }
        Ok(())
    }

    /// Called at the end of every public operation.
    pub(crate) fn op_boundary(&mut self) -> Result<()> {
        if self.pri_pending.len() >= PRI_DRAIN_THRESHOLD {
            self.drain_pri()?;
        }
        Ok(())
    }

    /// Writes every dirty frame and empties the pool. Index changes logged
    /// by these writes stay queued.
    pub fn evict_all(&mut self) -> Result<()> {
        self.drain_pri()?;
        for id in self.pool.resident() {
            self.evict(id)?;
        }
        Ok(())
    }

    /// Drops every frame without writing: what a crash does to the pool.
    pub(crate) fn discard_pool(&mut self) {
        self.pool.clear();
    }

    /// Copies every page to the backup file in one sequential run per index
    /// page and records each run as a single range entry.
    pub fn full_backup(&mut self) -> Result<Lsn> {
        let start = std::time::Instant::now();
        let io = self.io_counts();
        self.drain_pri()?;
        for (id, _) in self.pool.dirty_pages() {
            self.clean(id)?;
        }
        let taken_at = self.log.end();
        let pri_pages: Vec<PageId> = self.layout.pri_pages().collect();
        let mut covered: Vec<(u64, u64)> = pri_pages.iter().map(|q| self.layout.coverage(*q)).collect();
        covered.sort();
        for (lo, hi) in covered {
            let mut pages = Vec::with_capacity((hi - lo) as usize);
            for p in lo..hi {
                let id = PageId(p);
                let page = match self.pool.get(id) {
                    Some(f) => f.page.clone(),
                    None => self.fetch(id)?,
                };
                pages.push(page);
            }
            let base = self.backups.write_run(&pages)?;
            self.log_pri(PriOp::Range {
                lo,
                hi,
                locator: BackupLocator::full_backup(base, taken_at),
            })?;
        }
        self.stats.full_backups += 1;
        let e = Event::new("full_backup")
            .lsn(taken_at.0)
            .took(start.elapsed().as_micros() as u64)
            .io(self.io_since(io));
        self.emit(e);
        Ok(taken_at)
    }
}
