//! Scenario files: line-oriented `key value...` text.
//!
//! ```text
//! seed 7
//! pages 10000
//! page_size 8192
//! heap_pages 64
//! pool_frames 64
//! backup_interval 100
//! backup_in_log false
//! checkpoint_every 200
//! workers 4
//! ops 10000
//! keys 4000
//! txn_size 1 4
//! mix insert=40 update=25 delete=10 get=15 heap=10
//! abort_pct 5
//! bulk_load 2000
//! full_backup_after_load true
//! random_faults 100 bitflip torn stale unreadable
//! fault_every 10
//! crash_at op 250
//! crash_at event 1400
//! continue_after_crash true
//! io_delay_us 0
//! fault 120 3 bitflip
//! ```
//!
//! `fault` and `seed` lines follow the fault-plan grammar; `fault` rules
//! are installed before the workload starts.

use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fault::{FaultMode, FaultPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPoint {
    /// Before the operation with this index.
    Op(u64),
    /// Right after this durability event (memory stores only).
    Event(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mix {
    pub insert: u32,
    pub update: u32,
    pub delete: u32,
    pub get: u32,
    pub heap: u32,
}

impl Mix {
    pub fn total(&self) -> u32 {
        self.insert + self.update + self.delete + self.get + self.heap
    }
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            insert: 40,
            update: 25,
            delete: 10,
            get: 15,
            heap: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Scenario {
    pub seed: u64,
    pub pages: u64,
    pub page_size: usize,
    pub heap_pages: u64,
    pub pool_frames: usize,
    pub backup_interval: u32,
    pub backup_in_log: bool,
    pub redo_skip: bool,
    /// Checkpoint after every this many operations; zero disables.
    pub checkpoint_every: u64,
    pub workers: u32,
    pub ops: u64,
    pub keys: u64,
    pub txn_min: u32,
    pub txn_max: u32,
    pub mix: Mix,
    pub abort_pct: u32,
    /// Keys inserted in order before the workload, in batches.
    pub bulk_load: u64,
    pub full_backup_after_load: bool,
    pub random_faults: u64,
    pub fault_modes: Vec<FaultMode>,
    /// Operations between two random fault injections.
    pub fault_every: u64,
    pub crash_points: Vec<CrashPoint>,
    pub continue_after_crash: bool,
    pub io_delay_us: u64,
    #[serde(skip)]
    pub fault_plan: FaultPlan,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 0,
            pages: 2000,
            page_size: 4096,
            heap_pages: 16,
            pool_frames: 64,
            backup_interval: 100,
            backup_in_log: false,
            redo_skip: true,
            checkpoint_every: 200,
            workers: 4,
            ops: 1000,
            keys: 2000,
            txn_min: 1,
            txn_max: 4,
            mix: Mix::default(),
            abort_pct: 5,
            bulk_load: 0,
            full_backup_after_load: false,
            random_faults: 0,
            fault_modes: FaultMode::ALL.to_vec(),
            fault_every: 10,
            crash_points: Vec::new(),
            continue_after_crash: true,
            io_delay_us: 0,
            fault_plan: FaultPlan::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: Option<&str>) -> Result<T> {
    let v = v.ok_or_else(|| Error::Usage(format!("`{key}` needs a value")))?;
    v.parse()
        .map_err(|_| Error::Usage(format!("bad value `{v}` for `{key}`")))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Scenario::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            s.apply_line(line)
                .map_err(|e| Error::Usage(format!("scenario line {}: {e}", n + 1)))?;
        }
        s.validate()?;
        Ok(s)
    }

    fn apply_line(&mut self, line: &str) -> Result<()> {
        let mut it = line.split_whitespace();
        let key = it.next().unwrap();
        match key {
            "seed" | "fault" => {
                self.fault_plan.parse_line(line)?;
                if key == "seed" {
                    self.seed = parse(key, line.split_whitespace().nth(1))?;
                }
            }
            "pages" => self.pages = parse(key, it.next())?,
            "page_size" => self.page_size = parse(key, it.next())?,
            "heap_pages" => self.heap_pages = parse(key, it.next())?,
            "pool_frames" => self.pool_frames = parse(key, it.next())?,
            "backup_interval" => self.backup_interval = parse(key, it.next())?,
            "backup_in_log" => self.backup_in_log = parse(key, it.next())?,
            "redo_skip" => self.redo_skip = parse(key, it.next())?,
            "checkpoint_every" => self.checkpoint_every = parse(key, it.next())?,
            "workers" => self.workers = parse(key, it.next())?,
            "ops" => self.ops = parse(key, it.next())?,
            "keys" => self.keys = parse(key, it.next())?,
            "txn_size" => {
                self.txn_min = parse(key, it.next())?;
                self.txn_max = parse(key, it.next())?;
            }
            "mix" => {
                let mut m = Mix {
                    insert: 0,
                    update: 0,
                    delete: 0,
                    get: 0,
                    heap: 0,
                };
                for part in it {
                    let (k, v) = part
                        .split_once('=')
                        .ok_or_else(|| Error::Usage(format!("bad mix entry `{part}`")))?;
                    let v: u32 = parse(k, Some(v))?;
                    match k {
                        "insert" => m.insert = v,
                        "update" => m.update = v,
                        "delete" => m.delete = v,
                        "get" => m.get = v,
                        "heap" => m.heap = v,
                        _ => return Err(Error::Usage(format!("unknown mix op `{k}`"))),
                    }
                }
                self.mix = m;
            }
            "abort_pct" => self.abort_pct = parse(key, it.next())?,
            "bulk_load" => self.bulk_load = parse(key, it.next())?,
            "full_backup_after_load" => self.full_backup_after_load = parse(key, it.next())?,
            "random_faults" => {
                self.random_faults = parse(key, it.next())?;
                let modes: Vec<FaultMode> = it.map(str::parse).collect::<Result<_>>()?;
                if !modes.is_empty() {
                    self.fault_modes = modes;
                }
            }
            "fault_every" => self.fault_every = parse(key, it.next())?,
            "crash_at" => {
                let kind = it.next().unwrap_or("");
                let n: u64 = parse(key, it.next())?;
                self.crash_points.push(match kind {
                    "op" => CrashPoint::Op(n),
                    "event" => CrashPoint::Event(n),
                    _ => return Err(Error::Usage(format!("crash_at expects `op` or `event`, got `{kind}`"))),
                });
            }
            "continue_after_crash" => self.continue_after_crash = parse(key, it.next())?,
            "io_delay_us" => self.io_delay_us = parse(key, it.next())?,
            _ => return Err(Error::Usage(format!("unknown scenario key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Usage("workers must be at least 1".into()));
        }
        if self.txn_min == 0 || self.txn_min > self.txn_max {
            return Err(Error::Usage("txn_size needs 1 <= min <= max".into()));
        }
        if self.mix.total() == 0 {
            return Err(Error::Usage("operation mix is empty".into()));
        }
        if self.abort_pct > 100 {
            return Err(Error::Usage("abort_pct above 100".into()));
        }
        if self.fault_modes.is_empty() {
            return Err(Error::Usage("no fault modes".into()));
        }
        if self.bulk_load > self.keys {
            return Err(Error::Usage("bulk_load exceeds the key space".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.mix;
        let modes: Vec<String> = self.fault_modes.iter().map(|m| m.to_string()).collect();
        let mut out = format!(
            "seed {}\npages {}\npage_size {}\nheap_pages {}\npool_frames {}\nbackup_interval {}\n\
             backup_in_log {}\nredo_skip {}\ncheckpoint_every {}\nworkers {}\nops {}\nkeys {}\n\
             txn_size {} {}\nmix insert={} update={} delete={} get={} heap={}\nabort_pct {}\n\
             bulk_load {}\nfull_backup_after_load {}\nrandom_faults {} {}\nfault_every {}\n\
             continue_after_crash {}\nio_delay_us {}\n",
            self.seed,
            self.pages,
            self.page_size,
            self.heap_pages,
            self.pool_frames,
            self.backup_interval,
            self.backup_in_log,
            self.redo_skip,
            self.checkpoint_every,
            self.workers,
            self.ops,
            self.keys,
            self.txn_min,
            self.txn_max,
            m.insert,
            m.update,
            m.delete,
            m.get,
            m.heap,
            self.abort_pct,
            self.bulk_load,
            self.full_backup_after_load,
            self.random_faults,
            modes.join(" "),
            self.fault_every,
            self.continue_after_crash,
            self.io_delay_us,
        );
        for c in &self.crash_points {
            match c {
                CrashPoint::Op(n) => out.push_str(&format!("crash_at op {n}\n")),
                CrashPoint::Event(n) => out.push_str(&format!("crash_at event {n}\n")),
            }
        }
        for r in &self.fault_plan.rules {
            let range = if r.hi == r.lo + 1 {
                r.lo.to_string()
            } else {
                format!("{}..{}", r.lo, r.hi)
            };
            out.push_str(&format!("fault {range} {} {}\n", r.read_count, r.mode));
        }
        out
    }
}
