//! Heap pages: fixed 64-byte cells addressed by (heap page, cell).
//!
//! Cells never move, so heap updates are undone physically.

use serde::{Deserialize, Serialize};

use crate::engine::{Change, Engine, Writer};
use crate::error::{Error, Result};
use crate::page::PageId;
use crate::wal::Undo;

pub const CELL_SIZE: usize = 64;
/// Largest value a cell holds.
pub const CELL_DATA: usize = CELL_SIZE - 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowId {
    /// Index among the heap pages.
    pub page: u64,
    pub cell: u16,
}

fn cell_value(body: &[u8], cell: usize) -> Option<Vec<u8>> {
    let c = &body[cell * CELL_SIZE..(cell + 1) * CELL_SIZE];
    (c[0] == 1).then(|| c[2..2 + c[1] as usize].to_vec())
}

impl Engine {
    pub fn heap_cells_per_page(&self) -> u16 {
        ((self.layout.page_size - crate::page::HEADER_SIZE) / CELL_SIZE) as u16
    }

    pub fn heap_rows(&self) -> u64 {
        self.layout.heap_pages * self.heap_cells_per_page() as u64
    }

    /// Row `i` in heap order.
    pub fn heap_row(&self, i: u64) -> RowId {
        let per = self.heap_cells_per_page() as u64;
        RowId {
            page: i / per,
            cell: (i % per) as u16,
        }
    }

    fn heap_page_id(&self, row: RowId) -> Result<PageId> {
        if row.cell >= self.heap_cells_per_page() {
            return Err(Error::Usage(format!("cell {} out of range", row.cell)));
        }
        self.layout
            .heap_page(row.page)
            .ok_or_else(|| Error::Usage(format!("heap page {} out of range", row.page)))
    }

    pub fn heap_read(&mut self, row: RowId) -> Result<Option<Vec<u8>>> {
        let id = self.heap_page_id(row)?;
        let page = self.fix(id)?;
        self.unfix(id);
        self.op_boundary()?;
        Ok(cell_value(page.body(), row.cell as usize))
    }

    /// Stores `data` in a cell, live or not.
    pub fn heap_write(&mut self, txn: u64, row: RowId, data: &[u8]) -> Result<()> {
        if data.len() > CELL_DATA {
            return Err(Error::Usage(format!("heap value of {} bytes exceeds {CELL_DATA}", data.len())));
        }
        self.heap_change(txn, row, |cell| {
            cell.fill(0);
            cell[0] = 1;
            cell[1] = data.len() as u8;
            cell[2..2 + data.len()].copy_from_slice(data);
        })
    }

    /// Empties a cell. Fails if it holds nothing.
    pub fn heap_clear(&mut self, txn: u64, row: RowId) -> Result<()> {
        let id = self.heap_page_id(row)?;
        let page = self.fix(id)?;
        self.unfix(id);
        if cell_value(page.body(), row.cell as usize).is_none() {
            return Err(Error::KeyNotFound);
        }
        self.heap_change(txn, row, |cell| cell.fill(0))
    }

    fn heap_change(&mut self, txn: u64, row: RowId, f: impl FnOnce(&mut [u8])) -> Result<()> {
        let id = self.heap_page_id(row)?;
        if self.txns.get(txn).is_none() {
            return Err(Error::Usage(format!("no active transaction {txn}")));
        }
        let page = self.fix(id)?;
        let at = row.cell as usize * CELL_SIZE;
        let mut cell = page.body()[at..at + CELL_SIZE].to_vec();
        f(&mut cell);
        let mut body = page.body()[..at + CELL_SIZE].to_vec();
        body[at..].copy_from_slice(&cell);
        body.extend_from_slice(&page.body()[at + CELL_SIZE..]);
        let w = Writer {
            txn: Some(txn),
            system: false,
        };
        let r = self.change_page(w, id, Change::Update(Undo::Physical), &body);
        self.unfix(id);
        r?;
        self.op_boundary()
    }
}

#[cfg(test)]
mod tests {
    use crate::engine::testing::{heap_put, reopen, small};
    use crate::engine::Config;
    use crate::error::Error;

    use super::CELL_DATA;

    #[test]
    fn write_read_clear_round_trip() {
        let (_, mut e) = small(Config::default());
        let row = e.heap_row(17);
        assert_eq!(e.heap_read(row).unwrap(), None);
        heap_put(&mut e, 17, b"abc");
        assert_eq!(e.heap_read(row).unwrap(), Some(b"abc".to_vec()));
        heap_put(&mut e, 17, b"");
        assert_eq!(e.heap_read(row).unwrap(), Some(Vec::new()));
        let t = e.begin();
        e.heap_clear(t, row).unwrap();
        e.commit(t).unwrap();
        assert_eq!(e.heap_read(row).unwrap(), None);
    }

    #[test]
    fn abort_restores_the_previous_cell() {
        let (_, mut e) = small(Config::default());
        heap_put(&mut e, 2, b"old");
        let t = e.begin();
        e.heap_write(t, e.heap_row(2), b"new").unwrap();
        e.heap_write(t, e.heap_row(3), b"other").unwrap();
        e.abort(t).unwrap();
        assert_eq!(e.heap_read(e.heap_row(2)).unwrap(), Some(b"old".to_vec()));
        assert_eq!(e.heap_read(e.heap_row(3)).unwrap(), None);
    }

    #[test]
    fn rejects_bad_rows_and_values() {
        let (_, mut e) = small(Config::default());
        let t = e.begin();
        let big = vec![1u8; CELL_DATA + 1];
        assert!(matches!(e.heap_write(t, e.heap_row(0), &big), Err(Error::Usage(_))));
        let past = e.heap_row(e.heap_rows());
        assert!(matches!(e.heap_write(t, past, b"x"), Err(Error::Usage(_))));
        assert!(matches!(e.heap_clear(t, e.heap_row(0)), Err(Error::KeyNotFound)));
        e.heap_write(t, e.heap_row(0), &vec![7u8; CELL_DATA]).unwrap();
        e.commit(t).unwrap();
    }

    #[test]
    fn committed_rows_survive_a_crash_and_uncommitted_do_not() {
        let cfg = Config::default();
        let (mem, mut e) = small(cfg.clone());
        heap_put(&mut e, 40, b"kept");
        let t = e.begin();
        e.heap_write(t, e.heap_row(41), b"lost").unwrap();
        drop(e);
        let mut e = reopen(&mem, cfg);
        assert_eq!(e.heap_read(e.heap_row(40)).unwrap(), Some(b"kept".to_vec()));
        assert_eq!(e.heap_read(e.heap_row(41)).unwrap(), None);
    }
}
