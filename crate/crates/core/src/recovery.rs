//! Redo application, single-page recovery, restart, media recovery and
//! checkpoints.
//!
//! [`apply_record`] is the only function that changes page bytes. Forward
//! processing, redo at restart, single-page recovery and media recovery all
//! call it, which makes every recovered image bit-identical to the page
//! the forward path produced.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use crate::engine::{CheckpointReport, Engine, RecoveryRecord, RestartReport, Writer};
use crate::error::{DetectionCause, Error, Result};
use crate::events::Event;
use crate::layout::Layout;
use crate::page::{Page, PageId, PageKind};
use crate::pri::{BackupLocator, PriOp, ReadCheck, RecoveryIndex, Source};
use crate::store::WriteKind;
use crate::txn::TxnKind;
use crate::wal::{CheckpointPayload, FlushReason, FormatSpec, LogRecord, Lsn, Payload, RecordKind};

/// Applies the redo action of `rec` to `page` and sets its PageLSN.
pub(crate) fn apply_record(layout: &Layout, page: &mut Page, rec: &LogRecord) -> Result<()> {
    let id = page.id();
    let bad = |what: &str| Error::System(format!("record {} cannot be applied to page {id}: {what}", rec.lsn));
    match &rec.payload {
        Payload::Update { offset, after, .. } | Payload::Compensation { offset, after, .. } => {
            let o = *offset as usize;
            let body = page.body_mut();
            if o + after.len() > body.len() {
                return Err(bad("range past page end"));
            }
            body[o..o + after.len()].copy_from_slice(after);
            page.bump_update_count();
        }
        Payload::Format { lo, hi, spec } => {
            if id.0 < *lo || id.0 >= *hi {
                return Err(bad("page outside formatted range"));
            }
            match spec {
                FormatSpec::Initial => *page = layout.initial_image(id, rec.lsn),
                FormatSpec::Empty(kind) => {
                    *page = Page::new(layout.page_size, id, *kind, rec.lsn);
                    page.bump_update_count();
                }
                FormatSpec::Body(kind, body) => {
                    *page = Page::new(layout.page_size, id, *kind, rec.lsn);
                    if body.len() > page.body_capacity() {
                        return Err(bad("format body too large"));
                    }
                    page.set_body(body);
                    page.bump_update_count();
                }
            }
        }
        Payload::Image(bytes) => {
            let image = Page::from_bytes(bytes.clone());
            if image.id() != id || image.size() != layout.page_size {
                return Err(bad("image of another page"));
            }
            *page = image;
        }
        Payload::Pri(op) => {
            if page.kind() != Some(PageKind::Pri) {
                return Err(bad("index update on a non-index page"));
            }
            let (lo, hi) = layout.coverage(id);
            let mut idx = RecoveryIndex::decode(page.body(), lo, hi)?;
            idx.apply(op);
            let body = idx.encode();
            if body.len() > page.body_capacity() {
                return Err(bad("index page overflow"));
            }
            page.set_body(&body);
            page.bump_update_count();
        }
        _ => return Err(bad("record kind does not change pages")),
    }
    page.set_page_lsn(rec.lsn);
    Ok(())
}

/// Whether a record establishes a page image by itself, ending any
/// backward walk of the per-page chain.
fn is_base(rec: &LogRecord) -> bool {
    matches!(rec.payload, Payload::Format { .. } | Payload::Image(_))
}

fn blank(layout: &Layout, id: PageId) -> Page {
    Page::new(layout.page_size, id, PageKind::Free, Lsn::NIL)
}

/// Backup-file slots referenced by an index.
fn slots_in_use(idx: &RecoveryIndex) -> BTreeSet<u64> {
    let mut out = BTreeSet::new();
    for e in idx.entries() {
        if let Source::BackupPage { slot } = e.locator.source {
            out.extend(slot..slot + (e.hi - e.lo));
        }
    }
    out
}

fn media(id: PageId, e: impl std::fmt::Display) -> Error {
    Error::Media(format!("single-page recovery of page {id} failed: {e}"))
}

impl Engine {
    /// Reads the backup image the index names for `id`.
    pub(crate) fn load_backup(&mut self, id: PageId, loc: &BackupLocator) -> Result<Page> {
        let page = match loc.source {
            Source::BackupPage { slot } => self.backups.read(slot, id)?,
            Source::FormatRecord(lsn) | Source::InLogImage(lsn) => {
                let rec = self.log.read(lsn)?;
                if !is_base(&rec) {
                    return Err(Error::Media(format!("record {lsn} is not a backup source")));
                }
                let mut page = blank(&self.layout, id);
                apply_record(&self.layout, &mut page, &rec)?;
                page
            }
        };
        let ok = if loc.exact {
            page.page_lsn() == loc.backup_lsn
        } else {
            page.page_lsn() <= loc.backup_lsn
        };
        if !ok {
            return Err(Error::Media(format!(
                "backup of page {id} has page lsn {}, index says {}",
                page.page_lsn(),
                loc.backup_lsn
            )));
        }
        Ok(page)
    }

    /// Rolls `base` forward along the per-page chain to `target`. Returns
    /// the page and the number of log records read.
    fn replay_chain(&mut self, id: PageId, base: Page, target: Lsn) -> Result<(Page, u64)> {
        let floor = base.page_lsn();
        let mut stack = Vec::new();
        let mut cur = target;
        let mut from_scratch = false;
        while cur > floor {
            let rec = self.log.read(cur)?;
            if rec.page != Some(id) {
                return Err(Error::Media(format!("record {cur} on chain of page {id} names {:?}", rec.page)));
            }
            let prev = rec.prev_page_lsn;
            let base_rec = is_base(&rec);
            stack.push(rec);
            if base_rec {
                from_scratch = true;
                break;
            }
            cur = prev;
        }
        if !from_scratch && cur != floor {
            return Err(Error::Media(format!(
                "chain of page {id} passes its base at {floor} (reached {cur})"
            )));
        }
        let reads = stack.len() as u64;
        let mut page = if from_scratch { blank(&self.layout, id) } else { base };
        while let Some(rec) = stack.pop() {
            if !is_base(&rec) && rec.prev_page_lsn != page.page_lsn() {
                return Err(Error::detected(
                    id,
                    DetectionCause::ChainMismatch {
                        expected: rec.prev_page_lsn.0,
                        found: page.page_lsn().0,
                    },
                ));
            }
            apply_record(&self.layout, &mut page, &rec)?;
        }
        if page.page_lsn() != target {
            return Err(Error::Media(format!("replay of page {id} ended at {}", page.page_lsn())));
        }
        page.seal();
        Ok((page, reads))
    }

    /// Single-page recovery: backup image plus the page's own log chain,
    /// then a move to a fresh slot. A resident copy is rebuilt as well.
    pub(crate) fn recover_page(&mut self, id: PageId, cause: DetectionCause) -> Result<Page> {
        let start = Instant::now();
        self.emit(Event::new("detected").page(id.0).detail(cause.to_string()));
        let before = self.io_counts();
        let result = self.recover_page_inner(id);
        match result {
            Ok((page, k, base_in_log)) => {
                // A backup image held in the log is read through the log.
                let mut io = self.io_since(before);
                if base_in_log {
                    io.log_reads -= 1;
                    io.backup_reads += 1;
                }
                let took = start.elapsed().as_micros() as u64;
                self.stats.single_page_recoveries += 1;
                self.recoveries.push(RecoveryRecord {
                    page: id,
                    cause: cause.to_string(),
                    backup_reads: io.backup_reads,
                    log_reads: io.log_reads,
                    records_applied: k,
                    page_lsn: page.page_lsn(),
                    duration_us: took,
                });
                self.emit(
                    Event::new("single_page_recovery")
                        .page(id.0)
                        .lsn(page.page_lsn().0)
                        .took(took)
                        .io(io),
                );
                Ok(page)
            }
            Err(e) => {
                let e = match e {
                    Error::Media(_) => e,
                    other => media(id, other),
                };
                self.emit(Event::new("escalation").page(id.0).detail(e.to_string()));
                Err(e)
            }
        }
    }

    fn recover_page_inner(&mut self, id: PageId) -> Result<(Page, u64, bool)> {
        let info = self
            .pri
            .lookup(id)
            .ok_or_else(|| Error::Media(format!("no recovery index entry for page {id}")))?;
        let base = self.load_backup(id, &info.locator)?;
        let base_in_log = !matches!(info.locator.source, Source::BackupPage { .. });
        let target = info.last_lsn.unwrap_or(base.page_lsn());
        let (page, k) = self.replay_chain(id, base, target)?;
        self.store.relocate(page.clone())?;
        let resident = self.pool.get(id).map(|f| f.page.page_lsn());
        match resident {
            Some(lsn) if lsn != target => {
                let (newer, _) = self.replay_chain(id, page.clone(), lsn)?;
                self.pool.get_mut(id).unwrap().page = newer.clone();
                Ok((newer, k, base_in_log))
            }
            Some(_) => {
                self.pool.get_mut(id).unwrap().page = page.clone();
                Ok((page, k, base_in_log))
            }
            None => Ok((page, k, base_in_log)),
        }
    }

    /// Checks that the index can rebuild the stored image of `id`: its
    /// backup rolled forward along its chain must equal the page on disk.
    /// Nothing is written.
    pub fn verify_recoverable(&mut self, id: PageId) -> Result<()> {
        let info = self
            .pri
            .lookup(id)
            .ok_or_else(|| Error::Media(format!("no recovery index entry for page {id}")))?;
        let base = self.load_backup(id, &info.locator)?;
        let target = info.last_lsn.unwrap_or(base.page_lsn());
        let (rebuilt, _) = self.replay_chain(id, base, target)?;
        let stored = self.store.read_page(id)?;
        if stored.bytes() != rebuilt.bytes() {
            return Err(Error::Media(format!(
                "page {id}: stored image at {} differs from the one rebuilt at {}",
                stored.page_lsn(),
                rebuilt.page_lsn()
            )));
        }
        Ok(())
    }

    /// Repairs a page whose contents failed a structural check after it
    /// was read successfully.
    pub(crate) fn repair_page(&mut self, id: PageId, why: String) -> Result<Page> {
        self.recover_page(id, DetectionCause::Structure(why))
    }

    /// Builds the index mirror from the durable index pages plus the index
    /// updates in `recs`. Index pages that cannot be read are recovered
    /// through their own entries, which live in the other partition.
    /// Rebuilds the index mirror from the index pages and the log. Returns
    /// index pages written after the last durable record of their own
    /// write, with their PageLSNs.
    fn load_mirror(&mut self, recs: &[LogRecord]) -> Result<Vec<(PageId, Lsn)>> {
        let layout = self.layout;
        let mut mirror = RecoveryIndex::new(1, layout.pages + 1, BackupLocator::format(self.init_lsn));
        let mut loaded: HashMap<PageId, Lsn> = HashMap::new();
        let mut failed = Vec::new();
        let pri_pages: Vec<PageId> = layout.pri_pages().collect();
        for &q in &pri_pages {
            let (lo, hi) = layout.coverage(q);
            let part = self
                .store
                .read_page(q)
                .and_then(|p| RecoveryIndex::decode(p.body(), lo, hi).map(|idx| (p.page_lsn(), idx)));
            match part {
                Ok((lsn, idx)) => {
                    mirror.splice(&idx);
                    loaded.insert(q, lsn);
                }
                Err(Error::Detected(_)) | Err(Error::Format(_)) => failed.push(q),
                Err(e) => return Err(e),
            }
        }
        let ops_after = |q: PageId, from: Lsn| {
            recs.iter().filter(move |r| r.page == Some(q) && r.lsn > from).filter_map(|r| match &r.payload {
                Payload::Pri(op) => Some(op.clone()),
                _ => None,
            })
        };
        for (&q, &lsn) in &loaded {
            for op in ops_after(q, lsn) {
                mirror.apply(&op);
            }
        }
        self.pri = mirror;
        for &q in &pri_pages {
            let newest = recs
                .iter()
                .filter(|r| r.page == Some(q) && matches!(r.payload, Payload::Pri(_)))
                .map(|r| r.lsn)
                .max();
            let on_page = loaded.get(&q).copied().unwrap_or(Lsn::NIL);
            self.pri_chain.insert(q, newest.unwrap_or(on_page).max(on_page));
        }
        let mut unlogged = Vec::new();
        for (&q, &lsn) in &loaded {
            if let ReadCheck::SuspectStale { expected } = self.pri.verify_on_read(q, lsn) {
                if lsn < expected {
                    failed.push(q);
                } else {
                    unlogged.push((q, lsn));
                }
            }
        }
        unlogged.sort();
        failed.sort();
        for q in failed {
            let page = self.recover_page(q, DetectionCause::Structure("unusable index page at restart".into()))?;
            let (lo, hi) = layout.coverage(q);
            let mut part = RecoveryIndex::decode(page.body(), lo, hi)?;
            for op in ops_after(q, page.page_lsn()) {
                part.apply(&op);
            }
            self.pri.splice(&part);
            let chain = self.pri_chain.get(&q).copied().unwrap_or(Lsn::NIL).max(page.page_lsn());
            self.pri_chain.insert(q, chain);
            loaded.insert(q, page.page_lsn());
        }
        // Index pages are brought up to date lazily, like in normal
        // operation, rather than by redo.
        for r in recs {
            if let (Some(q), Payload::Pri(op)) = (r.page, &r.payload) {
                if loaded.get(&q).is_some_and(|&on_page| r.lsn > on_page) {
                    self.pri_pending.push_back((r.lsn, op.clone()));
                }
            }
        }
        let in_use = slots_in_use(&self.pri);
        self.backups.set_in_use(&in_use);
        Ok(unlogged)
    }

    /// Loads the index mirror without running restart.
    pub(crate) fn load_pri_offline(&mut self) -> Result<()> {
        let begin = match self.log.last_checkpoint()? {
            Some((b, _)) => b,
            None => self.init_lsn,
        };
        let recs = self.log.scan(begin, self.log.end())?;
        self.load_mirror(&recs)?;
        if let Some(Payload::Checkpoint(cp)) = recs.first().map(|r| &r.payload) {
            self.alloc_next = cp.alloc_next;
            self.txns.set_next_id(cp.next_txn);
        }
        for r in &recs {
            self.note_allocation(r);
        }
        Ok(())
    }

    fn note_allocation(&mut self, r: &LogRecord) {
        if let (Payload::Format { lo, hi, .. }, Some(p)) = (&r.payload, r.page) {
            if hi - lo == 1 {
                if let Some(i) = self.layout.usable_index(p) {
                    self.alloc_next = self.alloc_next.max(i + 1);
                }
            }
        }
    }

    /// Restart after a crash: analysis from the last complete checkpoint,
    /// redo of the pages that may lack logged changes, index repair, then
    /// rollback of incomplete system and user transactions.
    pub(crate) fn restart(&mut self) -> Result<()> {
        let start = Instant::now();
        let io0 = self.io_counts();
        let (begin, _) = self
            .log
            .last_checkpoint()?
            .ok_or_else(|| Error::Format("log holds no complete checkpoint".into()))?;
        let recs = self.log.scan(begin, self.log.end())?;
        let cp = match recs.first().map(|r| &r.payload) {
            Some(Payload::Checkpoint(cp)) => cp.clone(),
            _ => return Err(Error::Format(format!("no checkpoint record at {begin}"))),
        };
        self.recovering = true;
        self.discard_pool();
        self.pri_pending.clear();
        self.pri_chain.clear();
        self.pending_free.clear();
        self.backup_counts.clear();
        self.txns.clear();
        let unlogged = self.load_mirror(&recs)?;

        // Analysis.
        self.alloc_next = cp.alloc_next;
        self.txns.set_next_id(cp.next_txn);
        let mut att: BTreeMap<u64, (TxnKind, Lsn)> =
            cp.active.iter().map(|(t, l)| (*t, (TxnKind::User, *l))).collect();
        let mut last: HashMap<PageId, Lsn> = HashMap::new();
        let mut req: BTreeMap<PageId, Lsn> = BTreeMap::new();
        let mut by_page: HashMap<PageId, Vec<usize>> = HashMap::new();
        for (i, r) in recs.iter().enumerate() {
            self.note_allocation(r);
            if let Some(t) = r.txn {
                self.txns.set_next_id(t + 1);
                match r.kind {
                    RecordKind::TxnCommit | RecordKind::SysCommit | RecordKind::TxnAbort => {
                        att.remove(&t);
                    }
                    _ => {
                        let kind = if r.system { TxnKind::System } else { TxnKind::User };
                        att.insert(t, (kind, r.lsn));
                    }
                }
            }
            if let Some(p) = r.page {
                if r.kind.changes_page() && !self.layout.is_pri(p) {
                    last.insert(p, r.lsn);
                    req.entry(p).or_insert(r.lsn);
                    by_page.entry(p).or_default().push(i);
                }
            }
            if self.cfg.redo_skip {
                if let Payload::Pri(op) = &r.payload {
                    match op {
                        PriOp::Write { page, lsn } => {
                            if last.get(page).is_some_and(|l| lsn >= l) {
                                req.remove(page);
                            }
                        }
                        PriOp::Backup { page, locator } => {
                            if last.get(page).is_some_and(|l| locator.backup_lsn >= *l) {
                                req.remove(page);
                            }
                        }
                        PriOp::Range { lo, hi, locator } => {
                            req.retain(|p, _| {
                                !(p.0 >= *lo && p.0 < *hi && last.get(p).is_some_and(|l| *l <= locator.backup_lsn))
                            });
                        }
                    }
                }
            }
        }

        // Redo.
        let mut report = RestartReport {
            checkpoint: begin,
            records_scanned: recs.len() as u64,
            ..RestartReport::default()
        };
        let mut repairs: Vec<(PageId, Lsn)> = unlogged;
        for (&p, _) in &req {
            let idx = &by_page[&p];
            let mut attempt = 0;
            loop {
                if !self.pool.contains(p) {
                    report.redo_reads.push(p);
                }
                let page = self.fix(p)?;
                let on_disk = page.page_lsn();
                let mirror_ok = self.pri.verify_on_read(p, on_disk) == ReadCheck::Ok;
                let mut applied = 0u64;
                let mut failure = None;
                for &i in idx {
                    let r = &recs[i];
                    let cur = self.resident(p).page_lsn();
                    if r.lsn <= cur {
                        continue;
                    }
                    if !is_base(r) && r.prev_page_lsn != cur {
                        failure = Some(DetectionCause::ChainMismatch {
                            expected: r.prev_page_lsn.0,
                            found: cur.0,
                        });
                        break;
                    }
                    self.apply_logged(p, r)?;
                    applied += 1;
                }
                self.unfix(p);
                match failure {
                    None => {
                        report.records_redone += applied;
                        if applied == 0 && !mirror_ok {
                            repairs.push((p, on_disk));
                        }
                        break;
                    }
                    Some(cause) if attempt == 0 && applied == 0 => {
                        attempt += 1;
                        self.pool.remove(p);
                        self.recover_page(p, cause)?;
                    }
                    Some(cause) => {
                        return Err(Error::Media(format!("redo of page {p} broke its chain: {cause}")));
                    }
                }
            }
        }

        // Index repair: written pages whose index update never became durable.
        for (p, lsn) in repairs {
            self.log_pri(PriOp::Write { page: p, lsn })?;
            self.stats.pri_repairs += 1;
            report.pri_repairs.push(p);
            self.emit(Event::new("pri_repair").page(p.0).lsn(lsn.0));
        }

        // Undo: incomplete system transactions physically, newest first,
        // then user losers logically.
        let mut sys: Vec<(u64, Lsn)> = att
            .iter()
            .filter(|(_, (k, _))| *k == TxnKind::System)
            .map(|(t, (_, l))| (*t, *l))
            .collect();
        sys.sort_by_key(|(_, l)| std::cmp::Reverse(*l));
        for &(t, l) in &sys {
            self.txns.resume(t, TxnKind::System, l);
        }
        for &(t, _) in &sys {
            self.rollback_system(Writer {
                txn: Some(t),
                system: true,
            })?;
            report.sys_rolled_back.push(t);
        }
        let losers: Vec<(u64, Lsn)> = att
            .iter()
            .filter(|(_, (k, _))| *k == TxnKind::User)
            .map(|(t, (_, l))| (*t, *l))
            .collect();
        for &(t, l) in &losers {
            self.txns.resume(t, TxnKind::User, l);
        }
        for &(t, _) in losers.iter().rev() {
            let w = Writer {
                txn: Some(t),
                system: false,
            };
            self.rollback(w)?;
            self.append(w, RecordKind::TxnAbort, None, Lsn::NIL, Payload::None)?;
            self.txns.end(t, crate::txn::TxnState::Aborted);
            report.losers.push(t);
        }
        self.recovering = false;
        self.checkpoint()?;
        self.stats.restarts += 1;
        report.duration_us = start.elapsed().as_micros() as u64;
        let e = Event::new("restart")
            .lsn(begin.0)
            .took(report.duration_us)
            .io(self.io_since(io0))
            .detail(format!(
                "redo_reads={} redone={} repairs={} losers={} sys_rolled_back={}",
                report.redo_reads.len(),
                report.records_redone,
                report.pri_repairs.len(),
                report.losers.len(),
                report.sys_rolled_back.len()
            ));
        self.emit(e);
        self.last_restart = report;
        Ok(())
    }

    /// Starts a checkpoint: applies queued index updates, then records the
    /// dirty set and active transactions.
    pub fn checkpoint_begin(&mut self) -> Result<Lsn> {
        if self.ckpt.is_some() {
            return Err(Error::Usage("checkpoint already in progress".into()));
        }
        self.drain_pri()?;
        let dirty = self.pool.dirty_pages();
        let payload = CheckpointPayload {
            active: self.txns.active_user().map(|t| (t.id, t.last_lsn)).collect(),
            dirty: dirty.clone(),
            next_txn: self.txns.next_id(),
            alloc_next: self.alloc_next,
        };
        let lsn = self.append(
            Writer::SYSTEM,
            RecordKind::CheckpointBegin,
            None,
            Lsn::NIL,
            Payload::Checkpoint(payload),
        )?;
        self.ckpt = Some(CheckpointReport {
            begin: lsn,
            end: Lsn::NIL,
            dirty_at_begin: dirty.into_iter().map(|(p, _)| p).collect(),
            written: Vec::new(),
        });
        Ok(lsn)
    }

    /// Writes the frames that were dirty at begin and still are, then
    /// closes the checkpoint and forces the log.
    pub fn checkpoint_finish(&mut self) -> Result<Lsn> {
        let Some(mut rep) = self.ckpt.take() else {
            return Err(Error::Usage("no checkpoint in progress".into()));
        };
        let start = Instant::now();
        let io0 = self.io_counts();
        for id in rep.dirty_at_begin.clone() {
            if self.clean(id)? {
                rep.written.push(id);
            }
        }
        let end = self.append(
            Writer::SYSTEM,
            RecordKind::CheckpointEnd,
            None,
            Lsn::NIL,
            Payload::CheckpointEnd { begin: rep.begin },
        )?;
        self.log.flush(end, FlushReason::Checkpoint)?;
        rep.end = end;
        self.stats.checkpoints += 1;
        let e = Event::new("checkpoint")
            .lsn(end.0)
            .took(start.elapsed().as_micros() as u64)
            .io(self.io_since(io0))
            .detail(format!("dirty_at_begin={} written={}", rep.dirty_at_begin.len(), rep.written.len()));
        self.emit(e);
        self.last_checkpoint = rep;
        Ok(end)
    }

    pub fn checkpoint(&mut self) -> Result<Lsn> {
        self.checkpoint_begin()?;
        self.checkpoint_finish()
    }

    /// Restores the whole data file: every page from the newest backup the
    /// log names for it, then the entire log replayed forward. Active
    /// transactions are rolled back afterwards.
    pub fn media_recover(&mut self) -> Result<()> {
        let start = Instant::now();
        let io0 = self.io_counts();
        if self.ckpt.is_some() {
            return Err(Error::Usage("media recovery during a checkpoint".into()));
        }
        self.recovering = true;
        self.log.flush_all(FlushReason::WalRule)?;
        self.discard_pool();
        self.pri_pending.clear();
        self.backup_counts.clear();
        let layout = self.layout;
        let recs = self.log.scan(self.init_lsn, self.log.end())?;
        let mut mirror = RecoveryIndex::new(1, layout.pages + 1, BackupLocator::format(self.init_lsn));
        for r in &recs {
            if let Payload::Pri(op) = &r.payload {
                mirror.apply(op);
            }
        }
        let n = layout.pages as usize;
        let mut pages: Vec<Page> = Vec::with_capacity(n);
        for p in 1..=layout.pages {
            let id = PageId(p);
            let info = mirror
                .lookup(id)
                .ok_or_else(|| Error::Media(format!("no index entry for page {id}")))?;
            let page = match info.locator.source {
                Source::FormatRecord(l) if l == self.init_lsn => layout.initial_image(id, l),
                _ => self
                    .load_backup(id, &info.locator)
                    .map_err(|e| Error::Media(format!("backup of page {id} unusable: {e}")))?,
            };
            pages.push(page);
        }
        let mut applied = 0u64;
        for r in &recs {
            let Some(p) = r.page else { continue };
            if !r.kind.changes_page() {
                continue;
            }
            let page = &mut pages[(p.0 - 1) as usize];
            if r.lsn <= page.page_lsn() {
                continue;
            }
            if !is_base(r) && r.prev_page_lsn != page.page_lsn() {
                return Err(Error::Media(format!(
                    "log replay of page {p}: record {} follows {}, page is at {}",
                    r.lsn,
                    r.prev_page_lsn,
                    page.page_lsn()
                )));
            }
            apply_record(&layout, page, r)?;
            applied += 1;
        }
        self.store.reset_translation()?;
        for page in &mut pages {
            page.seal();
            self.store.write_page_as(page.clone(), WriteKind::Restore)?;
        }
        self.store.device_mut().sync()?;
        self.pri = mirror;
        self.pri_chain = layout.pri_pages().map(|q| (q, pages[(q.0 - 1) as usize].page_lsn())).collect();
        let in_use = slots_in_use(&self.pri);
        self.backups.set_in_use(&in_use);
        self.pending_free.clear();
        for page in &pages {
            if self.pri.verify_on_read(page.id(), page.page_lsn()) != ReadCheck::Ok {
                self.log_pri(PriOp::Write {
                    page: page.id(),
                    lsn: page.page_lsn(),
                })?;
            }
        }
        drop(pages);
        let sys: Vec<u64> = self.txns.active_system().map(|t| t.id).collect();
        for t in sys {
            self.rollback_system(Writer {
                txn: Some(t),
                system: true,
            })?;
        }
        let users: Vec<u64> = self.txns.active_user().map(|t| t.id).collect();
        for t in users {
            let w = Writer {
                txn: Some(t),
                system: false,
            };
            self.rollback(w)?;
            self.append(w, RecordKind::TxnAbort, None, Lsn::NIL, Payload::None)?;
            self.txns.end(t, crate::txn::TxnState::Aborted);
            self.stats.user_aborts += 1;
        }
        self.recovering = false;
        self.checkpoint()?;
        self.stats.media_recoveries += 1;
        let e = Event::new("media_recovery")
            .took(start.elapsed().as_micros() as u64)
            .io(self.io_since(io0))
            .detail(format!("pages={} records_applied={applied}", layout.pages));
        self.emit(e);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use crate::engine::testing::{heap_put, reopen, small};
    use crate::engine::{Config, Storage};
    use crate::error::DetectionCause;
    use crate::page::PageId;
    use crate::wal::{Lsn, RecordKind};

    fn heap0(e: &crate::Engine) -> PageId {
        e.layout().heap_page(0).unwrap()
    }

    #[test]
    fn page_without_updates_recovers_to_its_backup_verbatim() {
        let (_, mut e) = small(Config::default());
        let id = heap0(&e);
        let want = e.layout().initial_image(id, e.init_lsn());
        e.store.damage(id, |b| b[100] ^= 4).unwrap();
        let got = e.fix(id).unwrap();
        e.unfix(id);
        assert_eq!(got.bytes(), want.bytes());
        assert_eq!(e.recoveries()[0].records_applied, 0);
        assert_eq!(e.recoveries()[0].backup_reads, 1);
    }

    #[test]
    fn five_updates_replay_exactly_five_records() {
        let (_, mut e) = small(Config {
            backup_interval: 0,
            ..Config::default()
        });
        let id = heap0(&e);
        let from = e.log().end();
        for i in 0..5 {
            heap_put(&mut e, i, format!("row{i}").as_bytes());
        }
        let updates: Vec<Lsn> = e
            .log()
            .scan(from, e.log().end())
            .unwrap()
            .into_iter()
            .filter(|r| r.page == Some(id) && r.kind == RecordKind::Update)
            .map(|r| r.lsn)
            .collect();
        assert_eq!(updates.len(), 5);
        e.evict(id).unwrap();
        let page = e.recover_page(id, DetectionCause::Structure("test".into())).unwrap();
        let r = &e.recoveries()[0];
        assert_eq!(r.records_applied, 5);
        assert_eq!(r.log_reads, 5);
        assert_eq!(page.page_lsn(), *updates.last().unwrap());
        for i in 0..5 {
            assert_eq!(e.heap_read(e.heap_row(i)).unwrap(), Some(format!("row{i}").into_bytes()));
        }
    }

    #[test]
    fn backup_interval_bounds_replay_length() {
        let (_, mut e) = small(Config {
            backup_interval: 10,
            ..Config::default()
        });
        let id = heap0(&e);
        for n in 0..34u64 {
            heap_put(&mut e, n % 12, &n.to_le_bytes());
            e.evict(id).unwrap();
            let page = e.recover_page(id, DetectionCause::Structure("test".into())).unwrap();
            assert_eq!(page.bytes(), e.store.raw(id).unwrap().as_slice());
            let r = e.recoveries().last().unwrap();
            assert!(r.records_applied < 10, "{} records after {n} updates", r.records_applied);
            assert_eq!(r.backup_reads, 1);
        }
        assert_eq!(e.stats().backups, 3);
    }

    #[test]
    fn in_log_backups_recover_the_same_way() {
        let (_, mut e) = small(Config {
            backup_interval: 3,
            backup_in_log: true,
            ..Config::default()
        });
        let id = heap0(&e);
        for n in 0..10u64 {
            heap_put(&mut e, 0, &n.to_le_bytes());
            e.evict(id).unwrap();
        }
        assert!(e.stats().in_log_images >= 2);
        let page = e.recover_page(id, DetectionCause::Structure("test".into())).unwrap();
        assert_eq!(page.bytes(), e.store.raw(id).unwrap().as_slice());
        assert_eq!(e.recoveries()[0].backup_reads, 1);
    }

    #[test]
    fn redo_reads_only_pages_without_a_logged_write() {
        let (mem, mut e) = small(Config::default());
        let a = e.layout().heap_page(0).unwrap();
        let b = e.layout().heap_page(1).unwrap();
        let per = e.heap_cells_per_page() as u64;
        heap_put(&mut e, 0, b"on a");
        heap_put(&mut e, per, b"on b");
        e.evict(a).unwrap();
        e.flush_log().unwrap();
        let cfg = e.config().clone();
        drop(e);
        let mut e = reopen(&mem, cfg);
        assert_eq!(e.last_restart().redo_reads, vec![b]);
        assert_eq!(e.heap_read(e.heap_row(0)).unwrap(), Some(b"on a".to_vec()));
        assert_eq!(e.heap_read(e.heap_row(per)).unwrap(), Some(b"on b".to_vec()));
    }

    #[test]
    fn idle_crash_after_checkpoint_reads_nothing() {
        let (mem, mut e) = small(Config::default());
        heap_put(&mut e, 0, b"x");
        e.checkpoint().unwrap();
        let cfg = e.config().clone();
        drop(e);
        let e = reopen(&mem, cfg);
        assert!(e.last_restart().redo_reads.is_empty());
    }

    #[test]
    fn idle_checkpoint_writes_two_records() {
        let (_, mut e) = small(Config::default());
        e.checkpoint().unwrap();
        let from = e.log().end();
        e.checkpoint().unwrap();
        let recs = e.log().scan(from, e.log().end()).unwrap();
        let kinds: Vec<RecordKind> = recs.iter().map(|r| r.kind).collect();
        assert_eq!(kinds, vec![RecordKind::CheckpointBegin, RecordKind::CheckpointEnd]);
        assert!(e.last_checkpoint().dirty_at_begin.is_empty());
    }

    #[test]
    fn checkpoint_skips_pages_dirtied_after_begin() {
        let (mem, mut e) = small(Config::default());
        let per = e.heap_cells_per_page() as u64;
        heap_put(&mut e, 0, b"before");
        e.checkpoint_begin().unwrap();
        heap_put(&mut e, per, b"during");
        heap_put(&mut e, 2 * per, b"during");
        e.checkpoint_finish().unwrap();
        let ck = e.last_checkpoint().clone();
        let a = e.layout().heap_page(0).unwrap();
        assert!(ck.dirty_at_begin.contains(&a));
        assert_eq!(ck.written, ck.dirty_at_begin);
        for i in [1, 2] {
            let p = e.layout().heap_page(i).unwrap();
            assert!(!ck.written.contains(&p));
            assert!(e.pool.get(p).unwrap().dirty);
        }
        let cfg = e.config().clone();
        drop(e);
        let e = reopen(&mem, cfg);
        assert!(e.last_restart().redo_reads.len() <= 2);
    }

    #[test]
    fn media_recovery_matches_restart_of_an_intact_store() {
        let (mem, mut e) = small(Config {
            backup_interval: 4,
            ..Config::default()
        });
        for n in 0..200u64 {
            heap_put(&mut e, (n * 7) % 120, &n.to_le_bytes());
        }
        let t = e.begin();
        e.heap_write(t, e.heap_row(5), b"loser").unwrap();
        e.flush_log().unwrap();
        let cfg = e.config().clone();
        drop(e);
        let img = mem.crash_image();
        let mut restarted = crate::Engine::open(&Storage::Memory(img.clone()), cfg.clone()).unwrap();
        let mut restored = crate::Engine::open(&Storage::Memory(img), cfg).unwrap();
        restored.media_recover().unwrap();
        for i in 0..restarted.heap_rows() {
            let r = restarted.heap_row(i);
            assert_eq!(restarted.heap_read(r).unwrap(), restored.heap_read(r).unwrap(), "row {i}");
        }
    }

    #[test]
    fn media_recovery_of_untouched_store_restores_initial_images() {
        let (_, mut e) = small(Config::default());
        e.media_recover().unwrap();
        e.evict_all().unwrap();
        let id = heap0(&e);
        let want = e.layout().initial_image(id, e.init_lsn());
        assert_eq!(e.store.raw(id).unwrap(), want.bytes());
    }
}
