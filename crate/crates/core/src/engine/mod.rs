//! The storage engine: data file, log, backup file, buffer pool, recovery
//! index mirror and transaction table behind one owner.
//!
//! Every page change is made the same way: build a log record, append it,
//! then apply it to the pooled page with the very function redo uses. The
//! forward path and every recovery path therefore produce identical bytes.

mod access;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use crate::backup::BackupStore;
use crate::buffer::BufferPool;
use crate::device::{CrashControl, Device, MemDisk};
use crate::error::{Error, Result};
use crate::events::{Event, EventLog, IoCounts};
use crate::layout::Layout;
use crate::page::{Page, PageId, PageKind, DEFAULT_PAGE_SIZE};
use crate::pri::{BackupLocator, PriOp, RecoveryIndex, Source};
use crate::recovery::apply_record;
use crate::store::{PageStore, WriteObserver};
use crate::txn::TxnTable;
use crate::wal::{FlushReason, FormatSpec, Log, LogRecord, Lsn, Payload, RecordKind, Undo, LOG_HEADER_SIZE};

pub const DATA_FILE: &str = "data.phx";
pub const LOG_FILE: &str = "log.phx";
pub const BACKUP_FILE: &str = "backup.phx";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub pool_frames: usize,
    /// Take a page backup once this many updates accumulated since the
    /// previous one. Zero disables the policy.
    pub backup_interval: u32,
    /// Back pages up as full images in the log instead of the backup file.
    pub backup_in_log: bool,
    /// Skip redo for pages whose last update is followed by a logged write.
    pub redo_skip: bool,
    /// Synthetic latency added to every device I/O.
    pub io_delay: Duration,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            pool_frames: 64,
            backup_interval: 100,
            backup_in_log: false,
            redo_skip: true,
            io_delay: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Geometry {
    pub pages: u64,
    pub page_size: usize,
    pub heap_pages: u64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            pages: 1024,
            page_size: DEFAULT_PAGE_SIZE,
            heap_pages: 16,
        }
    }
}

/// Three in-memory disks sharing one crash control.
#[derive(Debug, Clone)]
pub struct MemStorage {
    pub data: MemDisk,
    pub log: MemDisk,
    pub backup: MemDisk,
    pub crash: Arc<CrashControl>,
}

impl MemStorage {
    pub fn new() -> Self {
        MemStorage {
            data: MemDisk::new(),
            log: MemDisk::new(),
            backup: MemDisk::new(),
            crash: CrashControl::new(),
        }
    }

    /// What a restarted process would find: only durable bytes.
    pub fn crash_image(&self) -> MemStorage {
        MemStorage {
            data: self.data.crash_image(),
            log: self.log.crash_image(),
            backup: self.backup.crash_image(),
            crash: CrashControl::new(),
        }
    }
}

impl Default for MemStorage {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub enum Storage {
    Dir(PathBuf),
    Memory(MemStorage),
}

struct Devices {
    data: Device,
    log: Device,
    backup: Device,
}

fn devices(storage: &Storage, create: bool, delay: Duration) -> Result<Devices> {
    let mut d = match storage {
        Storage::Memory(m) => Devices {
            data: Device::memory(m.data.clone(), true).with_crash_control(m.crash.clone()),
            log: Device::memory(m.log.clone(), false).with_crash_control(m.crash.clone()),
            backup: Device::memory(m.backup.clone(), true).with_crash_control(m.crash.clone()),
        },
        Storage::Dir(dir) => {
            let f = |name: &str| dir.join(name);
            if create {
                if dir.exists() {
                    return Err(Error::Usage(format!("{} already exists", dir.display())));
                }
                std::fs::create_dir_all(dir)?;
                Devices {
                    data: Device::create_file(&f(DATA_FILE), true)?,
                    log: Device::create_file(&f(LOG_FILE), false)?,
                    backup: Device::create_file(&f(BACKUP_FILE), true)?,
                }
            } else {
                let open = |name: &str, ev| {
                    Device::open_file(&f(name), ev)
                        .map_err(|e| Error::Usage(format!("{}: {e}", f(name).display())))
                };
                Devices {
                    data: open(DATA_FILE, true)?,
                    log: open(LOG_FILE, false)?,
                    backup: open(BACKUP_FILE, true)?,
                }
            }
        }
    };
    d.data.set_delay(delay);
    d.log.set_delay(delay);
    d.backup.set_delay(delay);
    Ok(d)
}

/// Who is writing a log record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Writer {
    pub txn: Option<u64>,
    pub system: bool,
}

impl Writer {
    /// A self-contained system action, complete with its single record.
    pub const SYSTEM: Writer = Writer {
        txn: None,
        system: true,
    };
}

/// How a page change is logged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Change {
    Update(Undo),
    Compensation { undo_next: Lsn },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub user_commits: u64,
    pub user_aborts: u64,
    pub sys_commits: u64,
    pub sys_rollbacks: u64,
    pub checkpoints: u64,
    pub page_cleans: u64,
    pub evictions: u64,
    pub backups: u64,
    pub in_log_images: u64,
    pub backup_failures: u64,
    pub full_backups: u64,
    pub single_page_recoveries: u64,
    pub media_recoveries: u64,
    pub restarts: u64,
    pub splits: u64,
    pub adoptions: u64,
    pub root_growths: u64,
    pub compactions: u64,
    pub pri_repairs: u64,
}

/// Counters of one single-page recovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryRecord {
    pub page: PageId,
    pub cause: String,
    pub backup_reads: u64,
    pub log_reads: u64,
    pub records_applied: u64,
    pub page_lsn: Lsn,
    pub duration_us: u64,
}

/// Pages written by one checkpoint, against the dirty set at its begin.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CheckpointReport {
    pub begin: Lsn,
    pub end: Lsn,
    pub dirty_at_begin: Vec<PageId>,
    pub written: Vec<PageId>,
}

/// Outcome of the last restart.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RestartReport {
    pub checkpoint: Lsn,
    pub records_scanned: u64,
    /// Pages redo had to read, in the order read.
    pub redo_reads: Vec<PageId>,
    pub records_redone: u64,
    pub pri_repairs: Vec<PageId>,
    pub losers: Vec<u64>,
    pub sys_rolled_back: Vec<u64>,
    pub duration_us: u64,
}

pub struct Engine {
    pub(crate) cfg: Config,
    pub(crate) layout: Layout,
    pub(crate) store: PageStore,
    pub(crate) log: Log,
    pub(crate) backups: BackupStore,
    pub(crate) pool: BufferPool,
    /// In-memory mirror of the whole recovery index.
    pub(crate) pri: RecoveryIndex,
    /// Logged index changes not yet applied to their index page.
    pub(crate) pri_pending: VecDeque<(Lsn, PriOp)>,
    /// Newest log record of every index page.
    pub(crate) pri_chain: HashMap<PageId, Lsn>,
    /// Backup slots to recycle once the record replacing them is durable.
    pub(crate) pending_free: Vec<(Lsn, u64)>,
    /// Update counters of pages inside whole-store backups, read lazily.
    pub(crate) backup_counts: HashMap<PageId, u32>,
    pub(crate) txns: TxnTable,
    pub(crate) alloc_next: u64,
    pub(crate) init_lsn: Lsn,
    pub(crate) events: EventLog,
    pub(crate) stats: EngineStats,
    pub(crate) recoveries: Vec<RecoveryRecord>,
    pub(crate) last_checkpoint: CheckpointReport,
    pub(crate) ckpt: Option<CheckpointReport>,
    pub(crate) last_restart: RestartReport,
    /// Set while restart or media recovery runs.
    pub(crate) recovering: bool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("layout", &self.layout)
            .field("log", &self.log)
            .field("pool", &self.pool.len())
            .finish()
    }
}

impl Engine {
    pub fn create(storage: &Storage, geo: Geometry, cfg: Config) -> Result<Engine> {
        Self::create_with(storage, geo, cfg, None)
    }

    /// Creates a store: one store-wide format record, every page written
    /// from it, and an index whose single entry points at that record.
    pub fn create_with(
        storage: &Storage,
        geo: Geometry,
        cfg: Config,
        observer: Option<WriteObserver>,
    ) -> Result<Engine> {
        if cfg.pool_frames < 8 {
            return Err(Error::Usage("pool needs at least 8 frames".into()));
        }
        let layout = Layout::new(geo.page_size, geo.pages, geo.heap_pages)?;
        let devs = devices(storage, true, Duration::ZERO)?;
        let mut log = Log::create(devs.log)?;
        let mut rec = LogRecord::new(
            RecordKind::PageFormat,
            Payload::Format {
                lo: 1,
                hi: layout.pages + 1,
                spec: FormatSpec::Initial,
            },
        );
        rec.system = true;
        let init = log.append(rec)?;
        log.flush(init, FlushReason::WalRule)?;
        let mut store = PageStore::create(devs.data, layout)?;
        store.set_write_observer(observer);
        store.format_all(init)?;
        let backups = BackupStore::create(devs.backup, layout.page_size)?;
        let pri_chain = layout.pri_pages().map(|q| (q, init)).collect();
        let mut engine = Engine::assemble(cfg, layout, store, log, backups);
        engine.pri = RecoveryIndex::new(1, layout.pages + 1, BackupLocator::format(init));
        engine.pri_chain = pri_chain;
        engine.init_lsn = init;
        engine.alloc_next = layout.first_alloc();
        engine.apply_delay();
        engine.checkpoint()?;
        engine.events.emit(Event::new("init").lsn(init.0));
        Ok(engine)
    }

    pub fn open(storage: &Storage, cfg: Config) -> Result<Engine> {
        Self::open_with(storage, cfg, None)
    }

    /// Opens a store and runs restart recovery.
    pub fn open_with(storage: &Storage, cfg: Config, observer: Option<WriteObserver>) -> Result<Engine> {
        Self::open_inner(storage, cfg, observer, true)
    }

    /// Opens a store without restart, for offline inspection of its
    /// durable state.
    pub fn open_offline(storage: &Storage, cfg: Config) -> Result<Engine> {
        Self::open_inner(storage, cfg, None, false)
    }

    fn open_inner(
        storage: &Storage,
        cfg: Config,
        observer: Option<WriteObserver>,
        restart: bool,
    ) -> Result<Engine> {
        if cfg.pool_frames < 8 {
            return Err(Error::Usage("pool needs at least 8 frames".into()));
        }
        let devs = devices(storage, false, Duration::ZERO)?;
        let mut store = PageStore::open(devs.data)?;
        store.set_write_observer(observer);
        let layout = *store.layout();
        let log = Log::open(devs.log)?;
        let backups = BackupStore::open(devs.backup, layout.page_size, &BTreeSet::new())?;
        let mut engine = Engine::assemble(cfg, layout, store, log, backups);
        let first = engine.log.read(Lsn(LOG_HEADER_SIZE))?;
        if !matches!(first.payload, Payload::Format { spec: FormatSpec::Initial, .. }) {
            return Err(Error::Format("log lacks the initial format record".into()));
        }
        engine.init_lsn = first.lsn;
        engine.apply_delay();
        if restart {
            engine.restart()?;
        } else {
            engine.load_pri_offline()?;
        }
        Ok(engine)
    }

    fn assemble(cfg: Config, layout: Layout, store: PageStore, log: Log, backups: BackupStore) -> Engine {
        Engine {
            pool: BufferPool::new(cfg.pool_frames),
            cfg,
            layout,
            store,
            log,
            backups,
            pri: RecoveryIndex::new(1, layout.pages + 1, BackupLocator::format(Lsn::NIL)),
            pri_pending: VecDeque::new(),
            pri_chain: HashMap::new(),
            pending_free: Vec::new(),
            backup_counts: HashMap::new(),
            txns: TxnTable::default(),
            alloc_next: layout.first_alloc(),
            init_lsn: Lsn::NIL,
            events: EventLog::default(),
            stats: EngineStats::default(),
            recoveries: Vec::new(),
            last_checkpoint: CheckpointReport::default(),
            ckpt: None,
            last_restart: RestartReport::default(),
            recovering: false,
        }
    }

    fn apply_delay(&mut self) {
        let d = self.cfg.io_delay;
        self.store.device_mut().set_delay(d);
        self.log.device_mut().set_delay(d);
        self.backups.device_mut().set_delay(d);
    }

    pub fn set_io_delay(&mut self, d: Duration) {
        self.cfg.io_delay = d;
        self.apply_delay();
    }

    /// Clean shutdown: everything written, checkpoint taken, log forced.
    pub fn close(mut self) -> Result<()> {
        self.shutdown()
    }

    pub fn shutdown(&mut self) -> Result<()> {
        if self.txns.active_user().next().is_some() {
            return Err(Error::Usage("close with active transactions".into()));
        }
        self.checkpoint()?;
        self.log.flush_all(FlushReason::Shutdown)?;
        self.events.flush();
        Ok(())
    }

    /// Forces the whole log tail to stable storage.
    pub fn flush_log(&mut self) -> Result<()> {
        self.log.flush_all(FlushReason::WalRule)?;
        Ok(())
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn set_config(&mut self, cfg: Config) {
        self.cfg = cfg;
        self.apply_delay();
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn log(&self) -> &Log {
        &self.log
    }

    pub fn store(&self) -> &PageStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut PageStore {
        &mut self.store
    }

    pub fn backups_mut(&mut self) -> &mut BackupStore {
        &mut self.backups
    }

    pub fn pool(&self) -> &BufferPool {
        &self.pool
    }

    pub fn recovery_index(&self) -> &RecoveryIndex {
        &self.pri
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn events_mut(&mut self) -> &mut EventLog {
        &mut self.events
    }

    pub fn recoveries(&self) -> &[RecoveryRecord] {
        &self.recoveries
    }

    pub fn last_checkpoint(&self) -> &CheckpointReport {
        &self.last_checkpoint
    }

    pub fn last_restart(&self) -> &RestartReport {
        &self.last_restart
    }

    pub fn init_lsn(&self) -> Lsn {
        self.init_lsn
    }

    pub fn io_counts(&self) -> IoCounts {
        let s = self.store.stats();
        IoCounts {
            backup_reads: self.backups.stats().reads,
            log_reads: self.log.stats().records_read,
            page_reads: s.reads,
            page_writes: s.writes,
        }
    }

    pub(crate) fn io_since(&self, before: IoCounts) -> IoCounts {
        let now = self.io_counts();
        IoCounts {
            backup_reads: now.backup_reads - before.backup_reads,
            log_reads: now.log_reads - before.log_reads,
            page_reads: now.page_reads - before.page_reads,
            page_writes: now.page_writes - before.page_writes,
        }
    }

    /// Serialized size of the recovery index as stored in its pages.
    pub fn pri_bytes(&self) -> usize {
        self.layout
            .pri_pages()
            .map(|q| {
                let (lo, hi) = self.layout.coverage(q);
                self.pri.clip(lo, hi).encode().len()
            })
            .sum()
    }

    /// Appends a record, threading both back chains.
    pub(crate) fn append(
        &mut self,
        w: Writer,
        kind: RecordKind,
        page: Option<PageId>,
        prev_page: Lsn,
        payload: Payload,
    ) -> Result<Lsn> {
        self.append_record(w, kind, page, prev_page, payload).map(|r| r.lsn)
    }

    /// Like [`Engine::append`], returning the record as logged.
    pub(crate) fn append_record(
        &mut self,
        w: Writer,
        kind: RecordKind,
        page: Option<PageId>,
        prev_page: Lsn,
        payload: Payload,
    ) -> Result<LogRecord> {
        debug_assert!(
            !w.system
                || matches!(
                    kind,
                    RecordKind::PageFormat
                        | RecordKind::PageImage
                        | RecordKind::PriUpdate
                        | RecordKind::Update
                        | RecordKind::Compensation
                        | RecordKind::SysCommit
                        | RecordKind::TxnAbort
                        | RecordKind::CheckpointBegin
                        | RecordKind::CheckpointEnd
                ),
            "illegal record kind {kind:?} in a system transaction"
        );
        let mut rec = LogRecord::new(kind, payload);
        rec.system = w.system;
        rec.txn = w.txn;
        rec.page = page;
        rec.prev_page_lsn = prev_page;
        if let Some(t) = w.txn {
            rec.prev_txn_lsn = self.txns.last_lsn(t);
        }
        let lsn = self.log.append(rec.clone())?;
        rec.lsn = lsn;
        if let Some(t) = w.txn {
            self.txns.set_last_lsn(t, lsn);
        }
        Ok(rec)
    }

    /// Logs and applies a change of a resident page's body. Returns `None`
    /// when the body is unchanged.
    pub(crate) fn change_page(
        &mut self,
        w: Writer,
        id: PageId,
        change: Change,
        new_body: &[u8],
    ) -> Result<Option<Lsn>> {
        let frame = self
            .pool
            .get(id)
            .ok_or_else(|| Error::Usage(format!("page {id} changed while not resident")))?;
        let old = frame.page.body();
        if new_body.len() > old.len() {
            return Err(Error::Usage(format!("body of page {id} overflows")));
        }
        let at = |i: usize| new_body.get(i).copied().unwrap_or(0);
        let Some(first) = (0..old.len()).find(|&i| old[i] != at(i)) else {
            return Ok(None);
        };
        let last = (0..old.len()).rev().find(|&i| old[i] != at(i)).unwrap();
        let after: Vec<u8> = (first..=last).map(at).collect();
        let before = old[first..=last].to_vec();
        let prev_page = frame.page.page_lsn();
        let (kind, payload) = match change {
            Change::Update(undo) => (
                RecordKind::Update,
                Payload::Update {
                    offset: first as u32,
                    before,
                    after,
                    undo,
                },
            ),
            Change::Compensation { undo_next } => (
                RecordKind::Compensation,
                Payload::Compensation {
                    offset: first as u32,
                    after,
                    undo_next,
                },
            ),
        };
        let rec = self.append_record(w, kind, Some(id), prev_page, payload)?;
        self.apply_logged(id, &rec)?;
        Ok(Some(rec.lsn))
    }

    /// Applies a just-appended record to resident page `id`.
    pub(crate) fn apply_logged(&mut self, id: PageId, rec: &LogRecord) -> Result<()> {
        let frame = self.pool.get_mut(id).expect("resident");
        apply_record(&self.layout, &mut frame.page, rec)?;
        self.pool.mark_dirty(id, rec.lsn);
        Ok(())
    }

    /// Formats a newly allocated page without reading it. The page is left
    /// resident and pinned.
    pub(crate) fn format_new(&mut self, w: Writer, id: PageId, kind: PageKind, body: Vec<u8>) -> Result<Lsn> {
        if !self.pool.contains(id) {
            self.make_room()?;
            self.pool
                .insert(Page::new(self.layout.page_size, id, PageKind::Free, Lsn::NIL));
        }
        self.pool.pin(id);
        let rec = self.append_record(
            w,
            RecordKind::PageFormat,
            Some(id),
            Lsn::NIL,
            Payload::Format {
                lo: id.0,
                hi: id.0 + 1,
                spec: FormatSpec::Body(kind, body),
            },
        )?;
        self.apply_logged(id, &rec)?;
        Ok(rec.lsn)
    }

    /// Hands out the next never-used page id.
    pub(crate) fn allocate(&mut self) -> Result<PageId> {
        let id = self
            .layout
            .nth_usable(self.alloc_next)
            .ok_or_else(|| Error::Media("store is full".into()))?;
        self.alloc_next += 1;
        Ok(id)
    }

    pub fn allocated_pages(&self) -> u64 {
        self.alloc_next
    }

    /// The source the index names for a page, for reports.
    pub fn describe_locator(&self, id: PageId) -> Option<String> {
        let info = self.pri.lookup(id)?;
        Some(match info.locator.source {
            Source::BackupPage { slot } => format!("backup slot {slot}"),
            Source::FormatRecord(l) => format!("format record {l}"),
            Source::InLogImage(l) => format!("log image {l}"),
        })
    }

    pub(crate) fn emit(&mut self, e: Event) {
        self.events.emit(e);
    }

    pub fn set_event_sink(&mut self, sink: Option<Box<dyn std::io::Write + Send>>) {
        self.events.set_sink(sink);
    }

    pub fn data_path(dir: &Path) -> PathBuf {
        dir.join(DATA_FILE)
    }
}
