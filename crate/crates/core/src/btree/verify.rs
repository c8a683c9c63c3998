//! Exhaustive offline tree verification.
//!
//! Reads every reachable node without triggering recovery and reports
//! every violated invariant: undecodable or internally inconsistent nodes,
//! fence/separator disagreement on any seam, level mismatches, foster
//! chains whose high fence differs from their parent's, and nodes with
//! more than one incoming pointer.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::engine::Engine;
use crate::error::Result;
use crate::page::{Page, PageId};

use super::node::{Bound, Node};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TreeReport {
    pub nodes: u64,
    pub leaves: u64,
    pub height: u8,
    pub foster_edges: u64,
    pub violations: Vec<String>,
}

impl TreeReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Visit {
    page: PageId,
    from: Option<PageId>,
    low: Bound,
    high: Bound,
    level: Option<u8>,
}

impl Engine {
    /// Current image without recovery: the pool copy if resident, the
    /// stored page otherwise.
    fn peek(&mut self, id: PageId) -> Result<Page> {
        match self.pool.get(id) {
            Some(f) => Ok(f.page.clone()),
            None => self.store.read_page(id),
        }
    }

    pub fn verify_tree(&mut self) -> TreeReport {
        let mut report = TreeReport::default();
        let mut incoming: BTreeMap<PageId, Vec<Option<PageId>>> = BTreeMap::new();
        let mut queue = VecDeque::new();
        queue.push_back(Visit {
            page: self.layout.root(),
            from: None,
            low: Bound::NegInf,
            high: Bound::PosInf,
            level: None,
        });
        while let Some(v) = queue.pop_front() {
            let seen = incoming.entry(v.page).or_default();
            seen.push(v.from);
            if seen.len() > 1 {
                report.violations.push(format!("node {} has incoming pointers from {seen:?}", v.page));
                continue;
            }
            let where_ = match v.from {
                Some(p) => format!("node {} (from {p})", v.page),
                None => format!("root {}", v.page),
            };
            let page = match self.peek(v.page) {
                Ok(p) => p,
                Err(e) => {
                    report.violations.push(format!("{where_}: unreadable: {e}"));
                    continue;
                }
            };
            let node = match Node::decode(page.body()) {
                Ok(n) => n,
                Err(e) => {
                    report.violations.push(format!("{where_}: undecodable: {e}"));
                    continue;
                }
            };
            report.nodes += 1;
            if v.from.is_none() {
                report.height = node.level + 1;
            }
            if let Err(e) = node.check() {
                report.violations.push(format!("{where_}: {e}"));
            }
            if node.low != v.low {
                report
                    .violations
                    .push(format!("{where_}: low fence {:?}, parent holds {:?}", node.low, v.low));
            }
            if node.high != v.high {
                report
                    .violations
                    .push(format!("{where_}: high fence {:?}, parent holds {:?}", node.high, v.high));
            }
            if let Some(l) = v.level {
                if node.level != l {
                    report
                        .violations
                        .push(format!("{where_}: level {}, parent expects {l}", node.level));
                }
            }
            if node.is_leaf() {
                report.leaves += 1;
            } else if node.level > 0 {
                let children = node.children().to_vec();
                let consistent = node.check().is_ok();
                for (i, c) in children.into_iter().enumerate() {
                    if !consistent && i > 0 {
                        break;
                    }
                    let (low, high) = if consistent {
                        node.child_fences(i)
                    } else {
                        (node.low.clone(), node.upper())
                    };
                    queue.push_back(Visit {
                        page: c,
                        from: Some(v.page),
                        low,
                        high,
                        level: Some(node.level - 1),
                    });
                }
            }
            if let Some(f) = &node.foster {
                report.foster_edges += 1;
                queue.push_back(Visit {
                    page: f.child,
                    from: Some(v.page),
                    low: Bound::key(&f.sep),
                    high: node.high.clone(),
                    level: Some(node.level),
                });
            }
        }
        report
    }
}
