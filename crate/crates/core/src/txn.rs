//! User and system transactions.
//!
//! A user transaction's commit forces the log; a system transaction's
//! commit is appended and left in the buffer. Rollback walks the
//! per-transaction chain newest to oldest and logs every undo action as a
//! compensation record whose `undo_next` skips the undone record.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::engine::{Change, Engine, Writer};
use crate::error::{Error, Result};
use crate::page::PageId;
use crate::wal::{FlushReason, Lsn, Payload, RecordKind, Undo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnKind {
    User,
    System,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnState {
    Active,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Txn {
    pub id: u64,
    pub kind: TxnKind,
    pub last_lsn: Lsn,
    pub state: TxnState,
}

/// Active transactions. Finished ones are dropped.
#[derive(Debug, Default)]
pub struct TxnTable {
    next_id: u64,
    active: BTreeMap<u64, Txn>,
}

impl TxnTable {
    pub fn begin(&mut self, kind: TxnKind) -> u64 {
        self.next_id = self.next_id.max(1);
        let id = self.next_id;
        self.next_id += 1;
        self.active.insert(
            id,
            Txn {
                id,
                kind,
                last_lsn: Lsn::NIL,
                state: TxnState::Active,
            },
        );
        id
    }

    /// Re-registers a transaction found by restart analysis.
    pub fn resume(&mut self, id: u64, kind: TxnKind, last_lsn: Lsn) {
        self.next_id = self.next_id.max(id + 1);
        self.active.insert(
            id,
            Txn {
                id,
                kind,
                last_lsn,
                state: TxnState::Active,
            },
        );
    }

    pub fn get(&self, id: u64) -> Option<&Txn> {
        self.active.get(&id)
    }

    pub fn last_lsn(&self, id: u64) -> Lsn {
        self.active.get(&id).map_or(Lsn::NIL, |t| t.last_lsn)
    }

    pub fn set_last_lsn(&mut self, id: u64, lsn: Lsn) {
        if let Some(t) = self.active.get_mut(&id) {
            t.last_lsn = lsn;
        }
    }

    /// Removes a finished transaction and returns it in its final state.
    pub fn end(&mut self, id: u64, state: TxnState) -> Option<Txn> {
        let mut t = self.active.remove(&id)?;
        t.state = state;
        Some(t)
    }

    pub fn active_user(&self) -> impl Iterator<Item = &Txn> {
        self.active.values().filter(|t| t.kind == TxnKind::User)
    }

    pub fn active_system(&self) -> impl Iterator<Item = &Txn> {
        self.active.values().filter(|t| t.kind == TxnKind::System)
    }

    pub fn next_id(&self) -> u64 {
        self.next_id.max(1)
    }

    pub fn set_next_id(&mut self, id: u64) {
        self.next_id = self.next_id.max(id);
    }

    pub fn clear(&mut self) {
        self.active.clear();
    }
}

impl Engine {
    /// Starts a user transaction.
    pub fn begin(&mut self) -> u64 {
        self.txns.begin(TxnKind::User)
    }

    /// Commits a user transaction and forces the log through its commit
    /// record.
    pub fn commit(&mut self, txn: u64) -> Result<()> {
        self.check_user(txn)?;
        let w = Writer {
            txn: Some(txn),
            system: false,
        };
        let lsn = self.append(w, RecordKind::TxnCommit, None, Lsn::NIL, Payload::None)?;
        self.log.flush(lsn, FlushReason::UserCommit)?;
        self.txns.end(txn, TxnState::Committed);
        self.stats.user_commits += 1;
        self.op_boundary()
    }

    /// Rolls back a user transaction.
    pub fn abort(&mut self, txn: u64) -> Result<()> {
        self.check_user(txn)?;
        let w = Writer {
            txn: Some(txn),
            system: false,
        };
        self.rollback(w)?;
        self.append(w, RecordKind::TxnAbort, None, Lsn::NIL, Payload::None)?;
        self.txns.end(txn, TxnState::Aborted);
        self.stats.user_aborts += 1;
        self.op_boundary()
    }

    fn check_user(&self, txn: u64) -> Result<()> {
        match self.txns.get(txn) {
            Some(t) if t.kind == TxnKind::User => Ok(()),
            _ => Err(Error::Usage(format!("no active user transaction {txn}"))),
        }
    }

    pub(crate) fn begin_system(&mut self) -> Writer {
        Writer {
            txn: Some(self.txns.begin(TxnKind::System)),
            system: true,
        }
    }

    /// Appends the system commit without forcing.
    pub(crate) fn commit_system(&mut self, w: Writer) -> Result<()> {
        let t = w.txn.expect("system transaction has an id");
        self.append(w, RecordKind::SysCommit, None, Lsn::NIL, Payload::None)?;
        self.txns.end(t, TxnState::Committed);
        self.stats.sys_commits += 1;
        Ok(())
    }

    /// Physically undoes an incomplete system transaction and marks it
    /// finished with an abort record.
    pub(crate) fn rollback_system(&mut self, w: Writer) -> Result<()> {
        let t = w.txn.expect("system transaction has an id");
        self.rollback(w)?;
        self.append(w, RecordKind::TxnAbort, None, Lsn::NIL, Payload::None)?;
        self.txns.end(t, TxnState::Aborted);
        self.stats.sys_rollbacks += 1;
        Ok(())
    }

    /// Undoes every not-yet-compensated update of a transaction.
    pub(crate) fn rollback(&mut self, w: Writer) -> Result<()> {
        let t = w.txn.expect("rollback needs a transaction");
        let mut next = self.txns.last_lsn(t);
        while !next.is_nil() {
            let rec = self.log.read(next)?;
            if rec.txn != Some(t) {
                return Err(Error::System(format!(
                    "transaction chain of {t} reaches record {} of {:?}",
                    rec.lsn, rec.txn
                )));
            }
            match rec.payload {
                Payload::Compensation { undo_next, .. } => {
                    next = undo_next;
                    continue;
                }
                Payload::Update {
                    offset,
                    before,
                    undo,
                    ..
                } => {
                    let undo_next = rec.prev_txn_lsn;
                    let page = rec.page.expect("update names its page");
                    match undo {
                        Undo::Logical(lu) => self.undo_logical(w, &lu, undo_next)?,
                        Undo::Physical | Undo::None => {
                            self.undo_physical(w, page, offset as usize, &before, undo_next)?
                        }
                    }
                }
                _ => {}
            }
            next = rec.prev_txn_lsn;
        }
        Ok(())
    }

    fn undo_physical(
        &mut self,
        w: Writer,
        id: PageId,
        offset: usize,
        before: &[u8],
        undo_next: Lsn,
    ) -> Result<()> {
        let page = self.fix(id)?;
        let mut body = page.body().to_vec();
        body[offset..offset + before.len()].copy_from_slice(before);
        let r = self.change_page(w, id, Change::Compensation { undo_next }, &body);
        self.unfix(id);
        r.map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_distinct_and_resume_advances() {
        let mut t = TxnTable::default();
        let a = t.begin(TxnKind::User);
        let b = t.begin(TxnKind::System);
        assert_ne!(a, b);
        t.resume(10, TxnKind::User, Lsn(99));
        assert!(t.begin(TxnKind::User) > 10);
        assert_eq!(t.active_user().count(), 3);
        assert_eq!(t.end(b, TxnState::Committed).unwrap().state, TxnState::Committed);
        assert_eq!(t.active_system().count(), 0);
    }

    use crate::engine::testing::{heap_put, reopen, small};
    use crate::engine::{Change, Config};
    use crate::wal::Undo;

    fn key(i: u32) -> Vec<u8> {
        format!("key{i:06}").into_bytes()
    }

    #[test]
    fn user_commit_forces_and_system_commit_does_not() {
        let (_, mut e) = small(Config::default());
        let before = e.log.stats();
        let t = e.begin();
        e.insert(t, b"a", b"1").unwrap();
        e.commit(t).unwrap();
        let mid = e.log.stats();
        assert_eq!(mid.flush_user_commit, before.flush_user_commit + 1);
        let w = e.begin_system();
        e.commit_system(w).unwrap();
        assert_eq!(e.log.stats(), {
            let mut s = mid.clone();
            s.appended += 1;
            s
        });
    }

    #[test]
    fn abort_without_updates_appends_only_the_abort_record() {
        let (_, mut e) = small(Config::default());
        let t = e.begin();
        let n = e.log.stats().appended;
        e.abort(t).unwrap();
        assert_eq!(e.log.stats().appended, n + 1);
        let last = e.log.read(e.log.last_lsn_before(e.log.end()).unwrap()).unwrap();
        assert_eq!(last.kind, RecordKind::TxnAbort);
        assert_eq!(last.txn, Some(t));
    }

    #[test]
    fn aborted_insert_leaves_no_trace_and_committer_is_intact() {
        let (_, mut e) = small(Config::default());
        let a = e.begin();
        let b = e.begin();
        e.insert(a, b"aborted", b"x").unwrap();
        e.insert(b, b"kept", b"y").unwrap();
        e.heap_write(a, e.heap_row(0), b"gone").unwrap();
        e.heap_write(b, e.heap_row(1), b"stays").unwrap();
        e.abort(a).unwrap();
        e.commit(b).unwrap();
        assert_eq!(e.get(b"aborted").unwrap(), None);
        assert_eq!(e.get(b"kept").unwrap(), Some(b"y".to_vec()));
        assert_eq!(e.heap_read(e.heap_row(0)).unwrap(), None);
        assert_eq!(e.heap_read(e.heap_row(1)).unwrap(), Some(b"stays".to_vec()));
        assert_eq!(e.tree_entries().unwrap(), vec![(b"kept".to_vec(), b"y".to_vec())]);
    }

    #[test]
    fn split_inside_an_aborted_transaction_survives() {
        let (_, mut e) = small(Config::default());
        let t = e.begin();
        for i in 0..40 {
            e.insert(t, &key(i), &[7u8; 30]).unwrap();
        }
        e.commit(t).unwrap();
        let (_, leaves_before) = e.tree_shape().unwrap();
        let t = e.begin();
        let mut i = 1000;
        while e.stats.splits == 0 || e.tree_shape().unwrap().1 == leaves_before {
            e.insert(t, &key(i), &[9u8; 30]).unwrap();
            i += 1;
        }
        let (_, leaves_split) = e.tree_shape().unwrap();
        e.abort(t).unwrap();
        assert_eq!(e.tree_shape().unwrap().1, leaves_split);
        assert_eq!(e.tree_entries().unwrap().len(), 40);
        assert!(e.verify_tree().is_clean());
    }

    #[test]
    fn incomplete_system_transaction_is_rolled_back_at_restart() {
        let (mem, mut e) = small(Config::default());
        heap_put(&mut e, 0, b"committed");
        let id = e.layout.heap_page(0).unwrap();
        let w = e.begin_system();
        let page = e.fix(id).unwrap();
        let mut body = page.body().to_vec();
        body[200] ^= 0xff;
        e.change_page(w, id, Change::Update(Undo::Physical), &body).unwrap();
        e.unfix(id);
        e.flush_log().unwrap();
        let cfg = e.cfg.clone();
        drop(e);
        let mut e = reopen(&mem, cfg);
        assert_eq!(e.last_restart().sys_rolled_back, vec![w.txn.unwrap()]);
        assert_eq!(e.heap_read(e.heap_row(0)).unwrap(), Some(b"committed".to_vec()));
        let page = e.fix(id).unwrap();
        e.unfix(id);
        assert_eq!(page.body()[200], 0);
    }
}
