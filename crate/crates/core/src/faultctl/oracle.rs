//! The shadow oracle: expected logical state and expected page images,
//! maintained without consulting the engine.
//!
//! Logical state is tracked per committed transaction together with the
//! durability event of its commit, so the state any crash point must
//! expose can be derived. Page images are captured through the store's
//! write observer; every relocation must reproduce the last image written
//! for that page, byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use crate::device::CrashControl;
use crate::page::PageId;
use crate::store::{WriteKind, WriteObserver};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Put(Vec<u8>, Vec<u8>),
    Del(Vec<u8>),
    /// Heap row by index; `None` clears it.
    Heap(u64, Option<Vec<u8>>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogicalState {
    pub tree: BTreeMap<Vec<u8>, Vec<u8>>,
    pub heap: BTreeMap<u64, Vec<u8>>,
}

impl LogicalState {
    pub fn apply(&mut self, e: &Effect) {
        match e {
            Effect::Put(k, v) => {
                self.tree.insert(k.clone(), v.clone());
            }
            Effect::Del(k) => {
                self.tree.remove(k);
            }
            Effect::Heap(r, Some(v)) => {
                self.heap.insert(*r, v.clone());
            }
            Effect::Heap(r, None) => {
                self.heap.remove(r);
            }
        }
    }

    /// Human-readable differences, at most `limit` of them.
    pub fn diff(&self, actual: &LogicalState, limit: usize) -> Vec<String> {
        let mut out = Vec::new();
        let show = |b: &[u8]| String::from_utf8_lossy(b).into_owned();
        for (k, v) in &self.tree {
            match actual.tree.get(k) {
                None => out.push(format!("key {} missing", show(k))),
                Some(a) if a != v => out.push(format!("key {} holds {:?}, expected {:?}", show(k), a, v)),
                _ => {}
            }
        }
        for k in actual.tree.keys().filter(|k| !self.tree.contains_key(*k)) {
            out.push(format!("key {} present but never committed", show(k)));
        }
        for (r, v) in &self.heap {
            match actual.heap.get(r) {
                None => out.push(format!("heap row {r} empty")),
                Some(a) if a != v => out.push(format!("heap row {r} holds {a:?}, expected {v:?}")),
                _ => {}
            }
        }
        for r in actual.heap.keys().filter(|r| !self.heap.contains_key(*r)) {
            out.push(format!("heap row {r} filled but never committed"));
        }
        out.truncate(limit);
        out
    }
}

/// Committed logical state plus the commit history since the last crash.
#[derive(Debug, Default)]
pub struct LogicalOracle {
    base: LogicalState,
    /// Commits since `base`, each with the durability event that made it
    /// stable.
    history: Vec<(u64, Vec<Effect>)>,
    committed: LogicalState,
}

impl LogicalOracle {
    pub fn new(base: LogicalState) -> Self {
        LogicalOracle {
            committed: base.clone(),
            base,
            history: Vec::new(),
        }
    }

    pub fn committed(&self) -> &LogicalState {
        &self.committed
    }

    pub fn commit(&mut self, event: u64, effects: Vec<Effect>) {
        for e in &effects {
            self.committed.apply(e);
        }
        self.history.push((event, effects));
    }

    /// State a crash right after durability event `n` must expose.
    pub fn durable_at(&self, n: u64) -> LogicalState {
        let mut s = self.base.clone();
        for (ev, effects) in &self.history {
            if *ev <= n {
                for e in effects {
                    s.apply(e);
                }
            }
        }
        s
    }

    pub fn reset(&mut self, state: LogicalState) {
        *self = LogicalOracle::new(state);
    }
}

/// Expected page images, fed by the store's write observer.
#[derive(Debug, Default)]
pub struct ImageShadow {
    durable: HashMap<PageId, Vec<u8>>,
    /// Writes after an armed crash point; lost at the crash.
    volatile: HashMap<PageId, Vec<u8>>,
    crash: Option<Arc<CrashControl>>,
    crash_after: Option<u64>,
    pub relocations_checked: u64,
    /// Relocations of pages written before this process started.
    pub relocations_unverified: u64,
    pub divergences: Vec<String>,
}

impl ImageShadow {
    pub fn shared(crash: Option<Arc<CrashControl>>) -> Arc<Mutex<ImageShadow>> {
        Arc::new(Mutex::new(ImageShadow {
            crash,
            ..Default::default()
        }))
    }

    /// Writes after durability event `n` go to the volatile side.
    pub fn arm(&mut self, n: u64) {
        self.crash_after = Some(n);
    }

    /// Forgets volatile writes and switches to the post-crash devices.
    pub fn crashed(&mut self, crash: Option<Arc<CrashControl>>) {
        self.volatile.clear();
        self.crash_after = None;
        self.crash = crash;
    }

    pub fn expected(&self, id: PageId) -> Option<&Vec<u8>> {
        self.volatile.get(&id).or_else(|| self.durable.get(&id))
    }

    fn on_write(&mut self, kind: WriteKind, id: PageId, bytes: &[u8]) {
        if kind == WriteKind::Relocation {
            let mismatch = match self.expected(id) {
                None => None,
                Some(want) => Some(want.iter().zip(bytes).position(|(a, b)| a != b)),
            };
            match mismatch {
                None => self.relocations_unverified += 1,
                Some(at) => {
                    self.relocations_checked += 1;
                    if let Some(at) = at {
                        self.divergences
                            .push(format!("relocated page {id} differs from its last written image at byte {at}"));
                    }
                }
            }
        }
        let event = self.crash.as_ref().map_or(0, |c| c.events());
        let volatile = self.crash_after.is_some_and(|n| event > n);
        if volatile {
            self.volatile.insert(id, bytes.to_vec());
        } else {
            self.durable.insert(id, bytes.to_vec());
        }
    }

    pub fn observer(shadow: &Arc<Mutex<ImageShadow>>) -> WriteObserver {
        let shadow = shadow.clone();
        Box::new(move |kind, id, bytes| shadow.lock().unwrap().on_write(kind, id, bytes))
    }
}
