//! Offline tools on a quiesced store: full verification and persistent
//! damage for experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::btree::TreeReport;
use crate::engine::{Config, Engine, Storage};
use crate::error::{Error, Result};
use crate::fault::FaultMode;
use crate::page::PageId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    /// `tree`, `checksum` or `recoverability`.
    pub check: &'static str,
    pub page_id: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub pages_checked: u64,
    pub tree: TreeReport,
    pub findings: Vec<Finding>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Tree verification, a checksum sweep over every page, and a rebuild of
/// every page from its backup and log chain compared with the stored image.
pub fn verify_store(storage: &Storage) -> Result<VerifyReport> {
    let mut e = Engine::open_offline(storage, Config::default())?;
    let mut report = VerifyReport {
        tree: e.verify_tree(),
        ..Default::default()
    };
    for v in &report.tree.violations {
        report.findings.push(Finding {
            check: "tree",
            page_id: None,
            detail: v.clone(),
        });
    }
    for p in 1..=e.layout().pages {
        let id = PageId(p);
        report.pages_checked += 1;
        if let Err(err) = e.store_mut().read_page(id) {
            report.findings.push(Finding {
                check: "checksum",
                page_id: Some(p),
                detail: err.to_string(),
            });
            continue;
        }
        if let Err(err) = e.verify_recoverable(id) {
            report.findings.push(Finding {
                check: "recoverability",
                page_id: Some(p),
                detail: err.to_string(),
            });
        }
    }
    Ok(report)
}

/// Persistently damages page `id` on a closed store. `unreadable` zeroes
/// the page so that every read fails verification; `stale` puts back the
/// image the page's backup holds.
pub fn inject(storage: &Storage, id: PageId, mode: FaultMode, seed: u64) -> Result<String> {
    let mut e = Engine::open_offline(storage, Config::default())?;
    if !e.layout().contains(id) {
        return Err(Error::Usage(format!("page {id} outside the store")));
    }
    let size = e.layout().page_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let detail = match mode {
        FaultMode::Bitflip => {
            let bit = rng.gen_range(0..size * 8);
            e.store_mut().damage(id, |b| b[bit / 8] ^= 1 << (bit % 8))?;
            format!("flipped bit {bit}")
        }
        FaultMode::Torn => {
            e.store_mut().damage(id, |b| b[size / 2..].fill(0))?;
            format!("zeroed bytes {}..{size}", size / 2)
        }
        FaultMode::Unreadable => {
            e.store_mut().damage(id, |b| b.fill(0))?;
            "zeroed the whole page".to_string()
        }
        FaultMode::Stale => {
            let info = e
                .recovery_index()
                .lookup(id)
                .ok_or_else(|| Error::Usage(format!("no index entry for page {id}")))?;
            let old = e.load_backup(id, &info.locator)?;
            let current = e.store().raw(id)?;
            if old.bytes() == current.as_slice() {
                return Err(Error::Usage(format!("page {id} has no older version than its backup")));
            }
            let mut old = old;
            old.seal();
            e.store_mut().damage(id, |b| b.copy_from_slice(old.bytes()))?;
            format!("restored the backup image at lsn {}", old.page_lsn())
        }
    };
    Ok(detail)
}
