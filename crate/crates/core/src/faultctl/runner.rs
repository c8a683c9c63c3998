//! Drives a scenario: virtual workers issuing transactions over disjoint
//! key partitions, random single-page faults, crash points, and checks of
//! every outcome against the shadow oracle.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::btree::TreeReport;
use crate::engine::{Config, Engine, EngineStats, Geometry, MemStorage, RecoveryRecord, Storage};
use crate::error::{Error, Result};
use crate::events::Event;
use crate::fault::{FaultMode, FaultPlan, FaultRule};
use crate::page::PageId;

use super::oracle::{Effect, ImageShadow, LogicalOracle, LogicalState};
use super::scenario::{CrashPoint, Scenario};

/// Outcome of one scenario run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub ops: u64,
    pub commits: u64,
    pub aborts: u64,
    /// Transactions aborted because an operation failed.
    pub failed_txns: u64,
    pub errors: Vec<String>,
    pub faults_attempted: u64,
    pub faults_injected: u64,
    /// Every fault that fired, plan rules included.
    pub faults_fired: u64,
    pub single_page_recoveries: u64,
    pub relocations_checked: u64,
    pub relocations_unverified: u64,
    pub crashes: u64,
    pub checkpoints: u64,
    pub divergences: Vec<String>,
    pub tree: TreeReport,
    pub final_stats: EngineStats,
    pub duration_ms: u64,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.divergences.is_empty() && self.errors.is_empty() && self.tree.is_clean()
    }
}

#[derive(Debug, Default)]
struct Worker {
    txn: Option<u64>,
    left: u32,
    effects: Vec<Effect>,
}

pub struct Runner {
    sc: Scenario,
    storage: Storage,
    engine: Option<Engine>,
    oracle: LogicalOracle,
    shadow: Arc<Mutex<ImageShadow>>,
    rng: ChaCha8Rng,
    workers: Vec<Worker>,
    crash_points: Vec<CrashPoint>,
    events: Vec<Event>,
    recoveries: Vec<RecoveryRecord>,
    report: RunReport,
    stopped: bool,
    kept: Option<Vec<CrashImage>>,
}

/// The durable image at a crash, before restart touched it.
#[derive(Debug, Clone)]
pub struct CrashImage {
    pub event: u64,
    pub storage: MemStorage,
    /// Logical state the image must expose after restart.
    pub expected: LogicalState,
}

fn key(i: u64) -> Vec<u8> {
    format!("key{i:010}").into_bytes()
}

pub fn config_of(sc: &Scenario) -> Config {
    Config {
        pool_frames: sc.pool_frames,
        backup_interval: sc.backup_interval,
        backup_in_log: sc.backup_in_log,
        redo_skip: sc.redo_skip,
        io_delay: Duration::ZERO,
    }
}

pub fn geometry_of(sc: &Scenario) -> Geometry {
    Geometry {
        pages: sc.pages,
        page_size: sc.page_size,
        heap_pages: sc.heap_pages,
    }
}

/// Reads the whole logical state through the engine.
pub fn logical_state(e: &mut Engine) -> Result<LogicalState> {
    let mut s = LogicalState::default();
    s.tree = e.tree_entries()?.into_iter().collect();
    for i in 0..e.heap_rows() {
        if let Some(v) = e.heap_read(e.heap_row(i))? {
            s.heap.insert(i, v);
        }
    }
    Ok(s)
}

impl Runner {
    /// A fresh in-memory store built from the scenario geometry.
    pub fn in_memory(sc: Scenario) -> Result<Self> {
        let mem = MemStorage::new();
        let shadow = ImageShadow::shared(Some(mem.crash.clone()));
        let storage = Storage::Memory(mem);
        let engine = Engine::create_with(
            &storage,
            geometry_of(&sc),
            config_of(&sc),
            Some(ImageShadow::observer(&shadow)),
        )?;
        Self::start(sc, storage, engine, shadow, LogicalState::default())
    }

    /// An existing store on disk. Its current contents become the baseline.
    pub fn on_disk(sc: Scenario, dir: PathBuf) -> Result<Self> {
        if sc.crash_points.iter().any(|c| matches!(c, CrashPoint::Event(_))) {
            return Err(Error::Usage("event crash points need an in-memory store".into()));
        }
        let shadow = ImageShadow::shared(None);
        let storage = Storage::Dir(dir);
        let mut engine = Engine::open_with(&storage, config_of(&sc), Some(ImageShadow::observer(&shadow)))?;
        let base = logical_state(&mut engine)?;
        Self::start(sc, storage, engine, shadow, base)
    }

    fn start(
        sc: Scenario,
        storage: Storage,
        mut engine: Engine,
        shadow: Arc<Mutex<ImageShadow>>,
        base: LogicalState,
    ) -> Result<Self> {
        engine.store_mut().set_fault_plan(Some(sc.fault_plan.clone()));
        let mut crash_points = sc.crash_points.clone();
        crash_points.sort_by_key(|c| match c {
            CrashPoint::Op(n) | CrashPoint::Event(n) => *n,
        });
        crash_points.reverse();
        let workers = (0..sc.workers).map(|_| Worker::default()).collect();
        let mut r = Runner {
            rng: ChaCha8Rng::seed_from_u64(sc.seed),
            report: RunReport {
                seed: sc.seed,
                ..Default::default()
            },
            sc,
            storage,
            engine: Some(engine),
            oracle: LogicalOracle::new(base),
            shadow,
            workers,
            crash_points,
            events: Vec::new(),
            recoveries: Vec::new(),
            stopped: false,
            kept: None,
        };
        r.arm_next_event_crash();
        r.drain_events();
        Ok(r)
    }

    pub fn engine(&mut self) -> &mut Engine {
        self.engine.as_mut().expect("engine running")
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn oracle(&self) -> &LogicalOracle {
        &self.oracle
    }

    /// Every event so far, engine and runner alike, in order.
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn stream_without_timing(&self) -> String {
        self.events.iter().map(|e| e.to_json_without_timing() + "\n").collect()
    }

    /// Single-page recoveries over all engine lifetimes.
    pub fn recoveries(&self) -> &[RecoveryRecord] {
        &self.recoveries
    }

    /// Keeps a copy of every crash image from now on.
    pub fn keep_crash_images(&mut self) {
        self.kept.get_or_insert_with(Vec::new);
    }

    pub fn crash_images(&self) -> &[CrashImage] {
        self.kept.as_deref().unwrap_or(&[])
    }

    fn note(&mut self, e: Event) {
        self.drain_events();
        self.events.push(e);
    }

    fn drain_events(&mut self) {
        if let Some(e) = self.engine.as_mut() {
            self.events.extend(e.events_mut().take());
        }
    }

    fn crash_control_events(&self) -> u64 {
        match &self.storage {
            Storage::Memory(m) => m.crash.events(),
            Storage::Dir(_) => 0,
        }
    }

    fn arm_next_event_crash(&mut self) {
        if let (Some(CrashPoint::Event(n)), Storage::Memory(m)) = (self.crash_points.last(), &self.storage) {
            m.crash.arm(*n);
            self.shadow.lock().unwrap().arm(*n);
        }
    }

    fn divergence(&mut self, msg: String) {
        self.note(Event::new("divergence").detail(msg.clone()));
        self.report.divergences.push(msg);
    }

    /// Runs the whole scenario.
    pub fn run(&mut self) -> Result<RunReport> {
        let start = Instant::now();
        self.bulk_load()?;
        let mut op = 0;
        loop {
            if self.frozen() {
                let Some(CrashPoint::Event(n)) = self.crash_points.pop() else {
                    unreachable!("frozen without an event crash point")
                };
                self.crash(n)?;
                continue;
            }
            if let Some(&CrashPoint::Op(n)) = self.crash_points.last() {
                if op >= n && !self.stopped {
                    self.crash_points.pop();
                    let at = self.crash_control_events();
                    if let Storage::Memory(m) = &self.storage {
                        m.crash.arm(at);
                    }
                    self.crash(at)?;
                    continue;
                }
            }
            if op >= self.sc.ops || self.stopped {
                break;
            }
            self.step()?;
            op += 1;
            self.report.ops = op;
            if self.frozen() {
                continue;
            }
            if self.sc.checkpoint_every > 0 && op % self.sc.checkpoint_every == 0 {
                self.engine().checkpoint()?;
                self.report.checkpoints += 1;
            }
            if self.sc.fault_every > 0
                && op % self.sc.fault_every == 0
                && self.report.faults_injected < self.sc.random_faults
            {
                self.inject_random_fault()?;
            }
        }
        if !self.stopped {
            self.finish()?;
        }
        self.report.duration_ms = start.elapsed().as_millis() as u64;
        Ok(self.report.clone())
    }

    fn frozen(&self) -> bool {
        matches!(&self.storage, Storage::Memory(m) if m.crash.is_frozen())
    }

    fn bulk_load(&mut self) -> Result<()> {
        let n = self.sc.bulk_load;
        let mut i = 0;
        while i < n {
            let e = self.engine();
            let t = e.begin();
            let mut effects = Vec::new();
            for k in i..(i + 100).min(n) {
                let v = format!("bulk{k}").into_bytes();
                e.insert(t, &key(k), &v)?;
                effects.push(Effect::Put(key(k), v));
            }
            e.commit(t)?;
            let ev = self.crash_control_events();
            self.oracle.commit(ev, effects);
            self.report.commits += 1;
            i += 100;
        }
        if self.sc.full_backup_after_load {
            self.engine().full_backup()?;
        }
        self.drain_events();
        Ok(())
    }

    /// One operation of one worker.
    fn step(&mut self) -> Result<()> {
        let w = self.rng.gen_range(0..self.sc.workers) as usize;
        if self.workers[w].txn.is_none() {
            let t = self.engine().begin();
            let left = self.rng.gen_range(self.sc.txn_min..=self.sc.txn_max);
            self.workers[w] = Worker {
                txn: Some(t),
                left,
                effects: Vec::new(),
            };
        }
        let t = self.workers[w].txn.unwrap();
        let ok = match self.operation(w, t) {
            Ok(()) => true,
            Err(e) => {
                let msg = format!("txn {t}: {e}");
                self.note(Event::new("op_failed").detail(msg.clone()));
                self.report.errors.push(msg);
                false
            }
        };
        self.workers[w].left -= 1;
        if !ok {
            self.end_txn(w, false)?;
            self.report.failed_txns += 1;
        } else if self.workers[w].left == 0 {
            let commit = self.rng.gen_range(0..100) >= self.sc.abort_pct;
            self.end_txn(w, commit)?;
        }
        self.drain_events();
        Ok(())
    }

    fn end_txn(&mut self, w: usize, commit: bool) -> Result<()> {
        let worker = std::mem::take(&mut self.workers[w]);
        let t = worker.txn.expect("open transaction");
        if commit {
            self.engine().commit(t)?;
            let ev = self.crash_control_events();
            self.oracle.commit(ev, worker.effects);
            self.report.commits += 1;
        } else {
            self.engine().abort(t)?;
            self.report.aborts += 1;
        }
        Ok(())
    }

    /// What worker `w` sees for key `k`: its own writes, then committed.
    fn view(&self, w: usize, k: &[u8]) -> Option<Vec<u8>> {
        for e in self.workers[w].effects.iter().rev() {
            match e {
                Effect::Put(x, v) if x == k => return Some(v.clone()),
                Effect::Del(x) if x == k => return None,
                _ => {}
            }
        }
        self.oracle.committed().tree.get(k).cloned()
    }

    fn heap_view(&self, w: usize, r: u64) -> Option<Vec<u8>> {
        for e in self.workers[w].effects.iter().rev() {
            if let Effect::Heap(x, v) = e {
                if *x == r {
                    return v.clone();
                }
            }
        }
        self.oracle.committed().heap.get(&r).cloned()
    }

    /// A key of worker `w`'s partition, preferring one present or absent
    /// as asked.
    fn pick_key(&mut self, w: usize, present: bool) -> Option<Vec<u8>> {
        let n = self.sc.workers as u64;
        let slots = (self.sc.keys + n - 1 - w as u64) / n;
        if slots == 0 {
            return None;
        }
        for _ in 0..8 {
            let k = key(w as u64 + n * self.rng.gen_range(0..slots));
            if self.view(w, &k).is_some() == present {
                return Some(k);
            }
        }
        None
    }

    fn value(&mut self, max: usize) -> Vec<u8> {
        let len = self.rng.gen_range(4..=max);
        (0..len).map(|_| self.rng.gen_range(b'a'..=b'z')).collect()
    }

    fn operation(&mut self, w: usize, t: u64) -> Result<()> {
        let m = self.sc.mix.clone();
        let mut roll = self.rng.gen_range(0..m.total());
        let mut kind = 0;
        for weight in [m.insert, m.update, m.delete, m.get, m.heap] {
            if roll < weight {
                break;
            }
            roll -= weight;
            kind += 1;
        }
        match kind {
            0..=2 => {
                let present = kind != 0;
                let (k, present) = match self.pick_key(w, present) {
                    Some(k) => (k, present),
                    None => match self.pick_key(w, !present) {
                        Some(k) => (k, !present),
                        None => return Ok(()),
                    },
                };
                if !present {
                    let v = self.value(40);
                    self.engine().insert(t, &k, &v)?;
                    self.workers[w].effects.push(Effect::Put(k, v));
                } else if kind == 2 {
                    self.engine().delete(t, &k)?;
                    self.workers[w].effects.push(Effect::Del(k));
                } else {
                    let v = self.value(40);
                    self.engine().update(t, &k, &v)?;
                    self.workers[w].effects.push(Effect::Put(k, v));
                }
            }
            3 => {
                let n = self.sc.workers as u64;
                let slots = (self.sc.keys + n - 1 - w as u64) / n;
                if slots == 0 {
                    return Ok(());
                }
                let k = key(w as u64 + n * self.rng.gen_range(0..slots));
                let got = self.engine().get(&k)?;
                let want = self.view(w, &k);
                if got != want {
                    self.divergence(format!(
                        "get {} returned {got:?}, expected {want:?}",
                        String::from_utf8_lossy(&k)
                    ));
                }
            }
            _ => {
                let n = self.sc.workers as u64;
                let rows = self.engine().heap_rows();
                let slots = (rows + n - 1 - w as u64) / n;
                if slots == 0 {
                    return Ok(());
                }
                let r = w as u64 + n * self.rng.gen_range(0..slots);
                let row = self.engine().heap_row(r);
                if self.heap_view(w, r).is_some() && self.rng.gen_bool(0.3) {
                    self.engine().heap_clear(t, row)?;
                    self.workers[w].effects.push(Effect::Heap(r, None));
                } else {
                    let v = self.value(crate::heap::CELL_DATA);
                    self.engine().heap_write(t, row, &v)?;
                    self.workers[w].effects.push(Effect::Heap(r, Some(v)));
                }
            }
        }
        Ok(())
    }

    /// Arms a fault on the next read of a random heap or tree page and
    /// reads it. Retries elsewhere when the fault cannot take effect, as
    /// a stale read of a page never rewritten.
    pub fn inject_random_fault(&mut self) -> Result<()> {
        for _ in 0..8 {
            let used = self.engine().allocated_pages();
            let idx = self.rng.gen_range(0..used);
            let id = self.engine().layout().nth_usable(idx).expect("allocated page");
            let mode = self.sc.fault_modes[self.rng.gen_range(0..self.sc.fault_modes.len())];
            self.report.faults_attempted += 1;
            if self.inject_at(id, mode)? {
                return Ok(());
            }
        }
        Ok(())
    }

    /// Injects `mode` on the next read of `id` and reads it. Returns
    /// whether the fault took effect.
    pub fn inject_at(&mut self, id: PageId, mode: FaultMode) -> Result<bool> {
        let e = self.engine.as_mut().expect("engine running");
        e.evict(id)?;
        let fired0 = e.store().stats().faults_fired;
        let rec0 = e.stats().single_page_recoveries;
        let inj = e.store_mut().injector_mut().expect("injector installed");
        let next = inj.reads_of(id) + 1;
        inj.add_rule(FaultRule::single(id, next, mode));
        let read = e.fix(id);
        if read.is_ok() {
            e.unfix(id);
        }
        let fired = e.store().stats().faults_fired > fired0;
        let recovered = e.stats().single_page_recoveries - rec0;
        if fired {
            self.report.faults_injected += 1;
            self.note(Event::new("fault_injected").page(id.0).detail(mode.to_string()));
            match read {
                Err(err) => self.divergence(format!("{mode} fault on page {id} escalated: {err}")),
                Ok(_) if recovered != 1 => {
                    self.divergence(format!("{mode} fault on page {id} gave {recovered} recoveries"))
                }
                Ok(_) => {}
            }
        } else if let Err(err) = read {
            return Err(err);
        }
        Ok(fired)
    }

    /// Simulated crash after durability event `n`: reopen the durable
    /// image, run restart, and compare with what the oracle says survived.
    fn crash(&mut self, n: u64) -> Result<()> {
        self.drain_events();
        let engine = self.engine.take().expect("engine running");
        self.recoveries.extend(engine.recoveries().iter().cloned());
        self.report.faults_fired += engine.store().stats().faults_fired;
        drop(engine);
        self.report.crashes += 1;
        self.events.push(Event::new("crash").detail(format!("after durability event {n}")));
        let storage = match &self.storage {
            Storage::Memory(m) => Storage::Memory(m.crash_image()),
            Storage::Dir(d) => Storage::Dir(d.clone()),
        };
        if let (Some(kept), Storage::Memory(m)) = (self.kept.as_mut(), &storage) {
            kept.push(CrashImage {
                event: n,
                storage: m.crash_image(),
                expected: self.oracle.durable_at(n),
            });
        }
        let crash = match &storage {
            Storage::Memory(m) => Some(m.crash.clone()),
            Storage::Dir(_) => None,
        };
        self.shadow.lock().unwrap().crashed(crash);
        self.storage = storage;
        let mut engine = Engine::open_with(
            &self.storage,
            config_of(&self.sc),
            Some(ImageShadow::observer(&self.shadow)),
        )?;
        engine.store_mut().set_fault_plan(Some(FaultPlan::new(self.sc.seed)));
        self.engine = Some(engine);
        self.drain_events();
        let expected = self.oracle.durable_at(n);
        let actual = logical_state(self.engine())?;
        for d in expected.diff(&actual, 10) {
            self.divergence(format!("after crash at event {n}: {d}"));
        }
        let report = self.engine().verify_tree();
        for v in report.violations.iter().take(10) {
            self.divergence(format!("after crash at event {n}: tree: {v}"));
        }
        self.oracle.reset(expected);
        for w in &mut self.workers {
            *w = Worker::default();
        }
        self.drain_events();
        self.arm_next_event_crash();
        if !self.sc.continue_after_crash {
            self.stopped = true;
            self.finish_report();
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        for w in 0..self.workers.len() {
            if self.workers[w].txn.is_some() {
                self.end_txn(w, true)?;
            }
        }
        let expected = self.oracle.committed().clone();
        let actual = logical_state(self.engine())?;
        for d in expected.diff(&actual, 10) {
            self.divergence(format!("final state: {d}"));
        }
        self.engine().shutdown()?;
        // A crash point among the closing commits or the shutdown flush.
        if self.frozen() {
            let Some(CrashPoint::Event(n)) = self.crash_points.pop() else {
                unreachable!("frozen without an event crash point")
            };
            self.crash(n)?;
            return if self.stopped { Ok(()) } else { self.finish() };
        }
        self.finish_report();
        Ok(())
    }

    fn finish_report(&mut self) {
        let tree = self.engine().verify_tree();
        for v in tree.violations.iter().take(10) {
            let msg = format!("tree: {v}");
            self.report.divergences.push(msg);
        }
        self.report.tree = tree;
        self.drain_events();
        let e = self.engine.as_ref().expect("engine running");
        self.recoveries.extend(e.recoveries().iter().cloned());
        self.report.final_stats = e.stats().clone();
        self.report.faults_fired += e.store().stats().faults_fired;
        self.report.single_page_recoveries = self.recoveries.len() as u64;
        let s = self.shadow.lock().unwrap();
        self.report.relocations_checked = s.relocations_checked;
        self.report.relocations_unverified = s.relocations_unverified;
        self.report.divergences.extend(s.divergences.iter().cloned());
    }

    /// Hands the engine over, for inspection after the run.
    pub fn into_engine(mut self) -> Engine {
        self.engine.take().expect("engine running")
    }
}
