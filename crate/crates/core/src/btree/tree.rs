//! Foster B-tree operations on the engine.
//!
//! Every pointer traversal, parent to child and foster parent to foster
//! child, compares the child's fences and level with the two keys the
//! parent holds for it. A mismatch is a single-page failure: the child is
//! recovered first, then the parent, and the traversal restarts. User
//! transactions log only leaf record changes; splits, adoptions, root
//! growth and ghost purges are system transactions.

use crate::engine::{Change, Engine, Writer};
use crate::error::{Error, Result};
use crate::page::{PageId, PageKind, HEADER_SIZE};
use crate::wal::{LogicalUndo, Lsn, Undo};

use super::node::{Bound, Content, Foster, Node};

/// Traversal restarts that repaired a page before the failure counts as
/// unrecoverable.
const MAX_REPAIRS: u32 = 4;

fn kind_of(node: &Node) -> PageKind {
    if node.is_leaf() {
        PageKind::BtreeLeaf
    } else {
        PageKind::BtreeBranch
    }
}

/// Why a node did not match what its parent expects, if it does not.
fn mismatch(node: &Node, low: &Bound, high: &Bound, level: Option<u8>) -> Option<String> {
    if let Err(e) = node.check() {
        return Some(e);
    }
    if &node.low != low {
        return Some(format!("low fence {:?} but parent holds {:?}", node.low, low));
    }
    if &node.high != high {
        return Some(format!("high fence {:?} but parent holds {:?}", node.high, high));
    }
    match level {
        Some(l) if node.level != l => Some(format!("level {} but parent expects {l}", node.level)),
        _ => None,
    }
}

/// Splits a node's own content in two. Returns the left part, the right
/// part and the separator; fosters are left to the caller.
fn split_content(node: &Node) -> Option<(Node, Node, Vec<u8>)> {
    match &node.content {
        Content::Leaf { low_value, records } => {
            if records.is_empty() {
                return None;
            }
            let total: usize = records.iter().map(|r| r.key.len() + r.value.len() + 6).sum();
            let mut acc = 0;
            let mut m = records.len() - 1;
            for (i, r) in records.iter().enumerate() {
                acc += r.key.len() + r.value.len() + 6;
                if acc * 2 >= total {
                    m = i;
                    break;
                }
            }
            let sep = records[m].key.clone();
            let left = Node {
                level: 0,
                low: node.low.clone(),
                high: node.high.clone(),
                foster: None,
                content: Content::Leaf {
                    low_value: low_value.clone(),
                    records: records[..m].to_vec(),
                },
            };
            let right = Node {
                level: 0,
                low: Bound::key(&sep),
                high: node.high.clone(),
                foster: None,
                content: Content::Leaf {
                    low_value: (!records[m].ghost).then(|| records[m].value.clone()),
                    records: records[m + 1..].to_vec(),
                },
            };
            Some((left, right, sep))
        }
        Content::Branch { children, seps } => {
            if children.len() < 2 {
                return None;
            }
            let m = children.len() / 2;
            let sep = seps[m - 1].clone();
            let left = Node {
                level: node.level,
                low: node.low.clone(),
                high: node.high.clone(),
                foster: None,
                content: Content::Branch {
                    children: children[..m].to_vec(),
                    seps: seps[..m - 1].to_vec(),
                },
            };
            let right = Node {
                level: node.level,
                low: Bound::key(&sep),
                high: node.high.clone(),
                foster: None,
                content: Content::Branch {
                    children: children[m..].to_vec(),
                    seps: seps[m..].to_vec(),
                },
            };
            Some((left, right, sep))
        }
    }
}

/// Outcome of fixing a child during a traversal.
enum Step {
    Node(Node),
    /// A page was repaired; start over from the root.
    Restart,
}

impl Engine {
    fn node_capacity(&self) -> usize {
        self.layout.page_size - HEADER_SIZE
    }

    /// Largest key plus value the tree accepts.
    pub fn max_entry_size(&self) -> usize {
        self.node_capacity() / 4 - 16
    }

    fn decode_resident(&self, id: PageId) -> std::result::Result<Node, String> {
        Node::decode(self.resident(id).body())
    }

    /// Fixes `child` and checks it against the parent's view. On mismatch
    /// the child is recovered and checked again; if it still disagrees the
    /// parent is recovered and the caller restarts.
    fn fix_child(
        &mut self,
        parent: PageId,
        child: PageId,
        low: &Bound,
        high: &Bound,
        level: u8,
    ) -> Result<Step> {
        for attempt in 0..2 {
            self.fix(child)?;
            let why = match self.decode_resident(child) {
                Ok(node) => match mismatch(&node, low, high, Some(level)) {
                    None => return Ok(Step::Node(node)),
                    Some(why) => why,
                },
                Err(e) => e,
            };
            self.unfix(child);
            let why = format!("seam {parent}->{child}: {why}");
            if attempt == 0 {
                self.repair_page(child, why)?;
            } else {
                self.repair_page(parent, why)?;
            }
        }
        Ok(Step::Restart)
    }

    fn fix_root(&mut self) -> Result<Node> {
        let root = self.layout.root();
        for attempt in 0..2 {
            self.fix(root)?;
            let why = match self.decode_resident(root) {
                Ok(node) => match mismatch(&node, &Bound::NegInf, &Bound::PosInf, None) {
                    None => return Ok(node),
                    Some(why) => why,
                },
                Err(e) => e,
            };
            self.unfix(root);
            if attempt == 0 {
                self.repair_page(root, format!("root: {why}"))?;
            } else {
                return Err(Error::Media(format!("root {root} fails verification after recovery: {why}")));
            }
        }
        unreachable!()
    }

    /// Root-to-leaf pass for `key`. Returns the leaf, pinned. A writing
    /// pass adopts foster children into parents with room, splits parents
    /// without room, and grows the tree when the root is a foster parent.
    fn descend(&mut self, key: &[u8], write: bool) -> Result<(PageId, Node)> {
        let mut repairs = 0;
        'outer: loop {
            if repairs > MAX_REPAIRS {
                return Err(Error::Media(format!("tree keeps failing verification near key {key:?}")));
            }
            let root = self.layout.root();
            let mut node = self.fix_root()?;
            let mut cur = root;
            if write && node.foster.is_some() {
                self.unfix(root);
                self.grow_root()?;
                continue;
            }
            loop {
                if let Some(f) = node.foster.clone() {
                    if !Bound::key(&f.sep).gt_key(key) {
                        let low = Bound::key(&f.sep);
                        let step = self.fix_child(cur, f.child, &low, &node.high, node.level);
                        self.unfix(cur);
                        match step? {
                            Step::Node(n) => {
                                cur = f.child;
                                node = n;
                                continue;
                            }
                            Step::Restart => {
                                repairs += 1;
                                continue 'outer;
                            }
                        }
                    }
                }
                if node.is_leaf() {
                    return Ok((cur, node));
                }
                let (i, child, low, high) = node.route(key).expect("branch routes");
                let step = match self.fix_child(cur, child, &low, &high, node.level - 1) {
                    Ok(s) => s,
                    Err(e) => {
                        self.unfix(cur);
                        return Err(e);
                    }
                };
                let cnode = match step {
                    Step::Node(n) => n,
                    Step::Restart => {
                        self.unfix(cur);
                        repairs += 1;
                        continue 'outer;
                    }
                };
                if write {
                    if let Some(f) = cnode.foster.clone() {
                        let mut parent = node.clone();
                        if let Content::Branch { children, seps } = &mut parent.content {
                            children.insert(i + 1, f.child);
                            seps.insert(i, f.sep.clone());
                        }
                        let r = if parent.encoded_len() <= self.node_capacity() {
                            self.adopt(cur, &parent, child, &cnode)
                        } else {
                            Ok(())
                        };
                        self.unfix(child);
                        self.unfix(cur);
                        r?;
                        if parent.encoded_len() > self.node_capacity() {
                            self.split_node(cur)?;
                        }
                        continue 'outer;
                    }
                }
                self.unfix(cur);
                cur = child;
                node = cnode;
            }
        }
    }

    /// Posts a foster child's separator into its parent.
    fn adopt(&mut self, parent: PageId, new_parent: &Node, child: PageId, cnode: &Node) -> Result<()> {
        let w = self.begin_system();
        let mut c = cnode.clone();
        let f = c.foster.take().expect("foster parent");
        c.high = Bound::key(&f.sep);
        self.change_page(w, parent, Change::Update(Undo::None), &new_parent.encode())?;
        self.change_page(w, child, Change::Update(Undo::None), &c.encode())?;
        self.commit_system(w)?;
        self.stats.adoptions += 1;
        Ok(())
    }

    /// Splits a node: its upper half moves to a new foster child.
    fn split_node(&mut self, id: PageId) -> Result<()> {
        self.fix(id)?;
        let node = match self.decode_resident(id) {
            Ok(n) => n,
            Err(e) => {
                self.unfix(id);
                return Err(Error::Media(format!("split of undecodable node {id}: {e}")));
            }
        };
        let Some((mut left, mut right, sep)) = split_content(&node) else {
            self.unfix(id);
            return Err(Error::Usage(format!("node {id} is too small to split")));
        };
        let r = (|| {
            let f = self.allocate()?;
            let w = self.begin_system();
            right.foster = node.foster.clone();
            left.foster = Some(Foster { child: f, sep });
            self.format_new(w, f, kind_of(&right), right.encode())?;
            self.unfix(f);
            self.change_page(w, id, Change::Update(Undo::None), &left.encode())?;
            self.commit_system(w)
        })();
        self.unfix(id);
        r?;
        self.stats.splits += 1;
        Ok(())
    }

    /// Moves the root's contents to a new node and makes the root a branch
    /// above it, so the root keeps its page id.
    fn grow_root(&mut self) -> Result<()> {
        let root = self.layout.root();
        let node = self.fix_root()?;
        let r = (|| {
            let l = self.allocate()?;
            let w = self.begin_system();
            self.format_new(w, l, kind_of(&node), node.encode())?;
            self.unfix(l);
            let top = Node {
                level: node.level + 1,
                low: Bound::NegInf,
                high: Bound::PosInf,
                foster: None,
                content: Content::Branch {
                    children: vec![l],
                    seps: Vec::new(),
                },
            };
            self.change_page(w, root, Change::Update(Undo::None), &top.encode())?;
            self.commit_system(w)
        })();
        self.unfix(root);
        r?;
        self.stats.root_growths += 1;
        Ok(())
    }

    /// Drops ghost records from a leaf.
    fn compact(&mut self, id: PageId, node: &Node) -> Result<()> {
        let mut n = node.clone();
        if n.purge_ghosts() == 0 {
            return Ok(());
        }
        let w = self.begin_system();
        self.change_page(w, id, Change::Update(Undo::None), &n.encode())?;
        self.commit_system(w)?;
        self.stats.compactions += 1;
        Ok(())
    }

    /// Applies `f` to the leaf holding `key`, making room first if the
    /// result would not fit.
    fn modify_leaf<F>(&mut self, w: Writer, key: &[u8], change: Change, f: F) -> Result<()>
    where
        F: Fn(&mut Node) -> Result<()>,
    {
        loop {
            let (leaf, node) = self.descend(key, true)?;
            let mut new = node.clone();
            if let Err(e) = f(&mut new) {
                self.unfix(leaf);
                return Err(e);
            }
            if new.encoded_len() <= self.node_capacity() {
                let r = self.change_page(w, leaf, change.clone(), &new.encode());
                self.unfix(leaf);
                return r.map(|_| ());
            }
            let has_ghosts = matches!(&node.content, Content::Leaf { records, .. } if records.iter().any(|r| r.ghost));
            let r = if has_ghosts {
                self.compact(leaf, &node)
            } else {
                Ok(())
            };
            self.unfix(leaf);
            r?;
            if !has_ghosts {
                self.split_node(leaf)?;
            }
        }
    }

    fn check_entry(&self, txn: u64, key: &[u8], value: &[u8]) -> Result<()> {
        if self.txns.get(txn).is_none() {
            return Err(Error::Usage(format!("no active transaction {txn}")));
        }
        if key.len() + value.len() > self.max_entry_size() {
            return Err(Error::Usage(format!(
                "entry of {} bytes exceeds {}",
                key.len() + value.len(),
                self.max_entry_size()
            )));
        }
        Ok(())
    }

    pub fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let (leaf, node) = self.descend(key, false)?;
        self.unfix(leaf);
        self.op_boundary()?;
        Ok(node.get(key).map(|v| v.to_vec()))
    }

    /// Adds a key that is not present.
    pub fn insert(&mut self, txn: u64, key: &[u8], value: &[u8]) -> Result<()> {
        self.check_entry(txn, key, value)?;
        let w = Writer {
            txn: Some(txn),
            system: false,
        };
        let undo = Undo::Logical(LogicalUndo::Remove { key: key.to_vec() });
        self.modify_leaf(w, key, Change::Update(undo), |n| {
            if n.get(key).is_some() {
                return Err(Error::DuplicateKey);
            }
            n.put(key, value);
            Ok(())
        })?;
        self.op_boundary()
    }

    /// Replaces the value of a present key.
    pub fn update(&mut self, txn: u64, key: &[u8], value: &[u8]) -> Result<()> {
        self.check_entry(txn, key, value)?;
        let old = self.get(key)?.ok_or(Error::KeyNotFound)?;
        let w = Writer {
            txn: Some(txn),
            system: false,
        };
        let undo = Undo::Logical(LogicalUndo::Put {
            key: key.to_vec(),
            value: old,
        });
        self.modify_leaf(w, key, Change::Update(undo), |n| {
            n.put(key, value).ok_or(Error::KeyNotFound).map(|_| ())
        })?;
        self.op_boundary()
    }

    /// Turns a present key into a ghost.
    pub fn delete(&mut self, txn: u64, key: &[u8]) -> Result<()> {
        self.check_entry(txn, key, &[])?;
        let old = self.get(key)?.ok_or(Error::KeyNotFound)?;
        let w = Writer {
            txn: Some(txn),
            system: false,
        };
        let undo = Undo::Logical(LogicalUndo::Put {
            key: key.to_vec(),
            value: old,
        });
        self.modify_leaf(w, key, Change::Update(undo), |n| {
            n.remove(key).ok_or(Error::KeyNotFound).map(|_| ())
        })?;
        self.op_boundary()
    }

    /// Undoes a leaf change by key, wherever the key lives now.
    pub(crate) fn undo_logical(&mut self, w: Writer, lu: &LogicalUndo, undo_next: Lsn) -> Result<()> {
        let change = Change::Compensation { undo_next };
        match lu {
            LogicalUndo::Put { key, value } => self.modify_leaf(w, key, change, |n| {
                n.put(key, value);
                Ok(())
            }),
            LogicalUndo::Remove { key } => self.modify_leaf(w, key, change, |n| {
                n.remove(key);
                Ok(())
            }),
        }
    }

    /// Every live entry in key order, read through verified traversals.
    pub fn tree_entries(&mut self) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let mut out = Vec::new();
        let mut from: Option<Vec<u8>> = Some(Vec::new());
        while let Some(key) = from.take() {
            let (leaf, node) = self.descend(&key, false)?;
            self.unfix(leaf);
            out.extend(node.live_entries().into_iter().filter(|(k, _)| k.as_slice() >= key.as_slice()));
            if let Bound::Key(next) = node.upper() {
                from = Some(next);
            }
        }
        self.op_boundary()?;
        Ok(out)
    }

    /// Leaf count and height, read through verified traversals.
    pub fn tree_shape(&mut self) -> Result<(u8, u64)> {
        let root = self.fix_root()?;
        self.unfix(self.layout.root());
        let (mut leaves, mut from) = (0u64, Some(Vec::new()));
        while let Some(key) = from.take() {
            let (leaf, node) = self.descend(&key, false)?;
            self.unfix(leaf);
            leaves += 1;
            if let Bound::Key(next) = node.upper() {
                from = Some(next);
            }
        }
        Ok((root.level + 1, leaves))
    }
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::node::{Bound, Content, Node};
    use crate::engine::testing::{reopen, small};
    use crate::engine::Config;
    use crate::page::PageId;

    fn key(i: u32) -> Vec<u8> {
        format!("k{i:05}").into_bytes()
    }

    fn put(e: &mut crate::engine::Engine, i: u32) {
        let t = e.begin();
        e.insert(t, &key(i), &i.to_le_bytes()).unwrap();
        e.commit(t).unwrap();
    }

    fn node_of(e: &mut crate::engine::Engine, id: PageId) -> Node {
        let p = e.fix(id).unwrap();
        e.unfix(id);
        Node::decode(p.body()).unwrap()
    }

    #[test]
    fn empty_tree_has_no_keys() {
        let (_, mut e) = small(Config::default());
        assert_eq!(e.get(b"anything").unwrap(), None);
        assert!(e.tree_entries().unwrap().is_empty());
        let r = e.verify_tree();
        assert!(r.is_clean(), "{:?}", r.violations);
        assert_eq!(r.nodes, 1);
    }

    #[test]
    fn shuffled_inserts_are_all_found() {
        let (_, mut e) = small(Config::default());
        let mut order: Vec<u32> = (1..=1000).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        for &i in &order {
            put(&mut e, i);
        }
        for i in 1..=1000 {
            assert_eq!(e.get(&key(i)).unwrap(), Some(i.to_le_bytes().to_vec()), "{i}");
        }
        let entries = e.tree_entries().unwrap();
        assert_eq!(entries.len(), 1000);
        assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        let r = e.verify_tree();
        assert!(r.is_clean(), "{:?}", r.violations);
        assert!(r.height >= 2);
    }

    #[test]
    fn first_split_leaves_a_foster_child_or_grows_the_root() {
        let (_, mut e) = small(Config::default());
        let root = e.layout.root();
        let mut i = 0;
        while node_of(&mut e, root).is_leaf() && node_of(&mut e, root).foster.is_none() {
            put(&mut e, i);
            i += 1;
            assert!(i < 200, "root never split");
        }
        let r = e.verify_tree();
        assert!(r.is_clean(), "{:?}", r.violations);
        assert!(r.nodes >= 2);
        assert!(r.foster_edges == 1 || r.height == 2, "{r:?}");
        for j in 0..i {
            assert!(e.get(&key(j)).unwrap().is_some());
        }
    }

    #[test]
    fn deleting_everything_keeps_the_fences() {
        let (_, mut e) = small(Config::default());
        for i in 0..300 {
            put(&mut e, i);
        }
        for i in 0..300 {
            let t = e.begin();
            e.delete(t, &key(i)).unwrap();
            e.commit(t).unwrap();
        }
        assert!(e.tree_entries().unwrap().is_empty());
        let r = e.verify_tree();
        assert!(r.is_clean(), "{:?}", r.violations);
        let root_id = e.layout.root();
        let root = node_of(&mut e, root_id);
        assert_eq!(root.low, Bound::NegInf);
        assert_eq!(root.high, Bound::PosInf);
    }

    #[test]
    fn duplicate_insert_and_missing_update_are_rejected() {
        let (_, mut e) = small(Config::default());
        put(&mut e, 1);
        let t = e.begin();
        assert!(matches!(e.insert(t, &key(1), b"x"), Err(crate::Error::DuplicateKey)));
        assert!(matches!(e.update(t, &key(2), b"x"), Err(crate::Error::KeyNotFound)));
        assert!(matches!(e.delete(t, &key(2)), Err(crate::Error::KeyNotFound)));
        e.commit(t).unwrap();
    }

    #[test]
    fn corrupted_fence_is_detected_on_the_next_search_and_repaired() {
        let (_, mut e) = small(Config::default());
        for i in 0..400 {
            put(&mut e, i);
        }
        e.shutdown().unwrap();
        // A leaf whose low fence is a real key.
        let mut target = None;
        for i in e.layout.first_alloc()..e.allocated_pages() {
            let id = e.layout.nth_usable(i).unwrap();
            let Ok(p) = e.store_mut().read_page(id) else { continue };
            if let Ok(n) = Node::decode(p.body()) {
                if n.is_leaf() && matches!(n.low, Bound::Key(_)) && matches!(n.content, Content::Leaf { .. }) {
                    target = Some((id, n));
                    break;
                }
            }
        }
        let (id, mut n) = target.expect("no interior leaf");
        let Bound::Key(low) = n.low.clone() else { unreachable!() };
        e.evict_all().unwrap();
        let mut bad = low.clone();
        *bad.last_mut().unwrap() ^= 1;
        n.low = Bound::Key(bad);
        let body = n.encode();
        e.store_mut().damage_sealed(id, |p| p.set_body(&body)).unwrap();
        let before = e.recoveries().len();
        let found = e.get(&low).unwrap();
        assert!(found.is_some());
        assert!(e.recoveries()[before..].iter().any(|r| r.page == id), "{:?}", e.recoveries());
        let r = e.verify_tree();
        assert!(r.is_clean(), "{:?}", r.violations);
    }

    #[test]
    fn tree_survives_restart() {
        let cfg = Config::default();
        let (mem, mut e) = small(cfg.clone());
        for i in 0..500 {
            put(&mut e, i);
        }
        let expected = e.tree_entries().unwrap();
        drop(e);
        let mut e = reopen(&mem, cfg);
        assert_eq!(e.tree_entries().unwrap(), expected);
        assert!(e.verify_tree().is_clean());
    }
}
