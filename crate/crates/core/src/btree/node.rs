//! Foster B-tree node format.
//!
//! Every node carries a low and a high fence key. A leaf stores its fences
//! as two records, first and last; the high fence record is always a ghost
//! and the low one is valid only when the key equal to the low fence
//! exists. A branch with N children stores N+1 keys: the low fence, N-1
//! separators and the high fence. A foster parent additionally stores the
//! pointer to its foster child and the separator between them, while its
//! high fence remains the high fence of the whole foster chain.
//!
//! ```text
//! level u8 | flags u8 | [foster child u64 | foster sep key]
//! leaf:    nrec u16 | (rflags u8 | bound | vlen u16 | value)*
//! branch:  low bound | nchild u16 | (child u64 | sep key)* child u64 | high bound
//! bound:   tag u8 (0 = -inf, 1 = key, 2 = +inf) [| len u16 | bytes]
//! key:     len u16 | bytes
//! ```

use std::cmp::Ordering;

use crate::page::PageId;

const FLAG_FOSTER: u8 = 1;
const FLAG_LEAF: u8 = 2;
const REC_GHOST: u8 = 1;
const REC_FENCE: u8 = 2;

/// A fence key. Variant order gives -inf < any key < +inf.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bound {
    NegInf,
    Key(Vec<u8>),
    PosInf,
}

impl Bound {
    pub fn key(k: &[u8]) -> Self {
        Bound::Key(k.to_vec())
    }

    fn cmp_key(&self, k: &[u8]) -> Ordering {
        match self {
            Bound::NegInf => Ordering::Less,
            Bound::Key(b) => b.as_slice().cmp(k),
            Bound::PosInf => Ordering::Greater,
        }
    }

    /// `self <= k`
    pub fn le_key(&self, k: &[u8]) -> bool {
        self.cmp_key(k) != Ordering::Greater
    }

    /// `k < self`
    pub fn gt_key(&self, k: &[u8]) -> bool {
        self.cmp_key(k) == Ordering::Greater
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafRecord {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub ghost: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Foster {
    pub child: PageId,
    pub sep: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Content {
    Leaf {
        /// Value of the low fence record when it is a valid record.
        low_value: Option<Vec<u8>>,
        /// Records strictly between the low fence and the upper bound.
        records: Vec<LeafRecord>,
    },
    Branch {
        children: Vec<PageId>,
        /// `children.len() - 1` separators.
        seps: Vec<Vec<u8>>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub level: u8,
    pub low: Bound,
    pub high: Bound,
    pub foster: Option<Foster>,
    pub content: Content,
}

/// Which key a span of encoded bytes belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyRole {
    LowFence,
    HighFence,
    Separator(usize),
    FosterSeparator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySpan {
    pub role: KeyRole,
    pub start: usize,
    pub end: usize,
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, String> {
        let v = *self.b.get(self.at).ok_or("truncated node")?;
        self.at += 1;
        Ok(v)
    }
    fn u16(&mut self) -> Result<u16, String> {
        let s = self.b.get(self.at..self.at + 2).ok_or("truncated node")?;
        self.at += 2;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }
    fn u64(&mut self) -> Result<u64, String> {
        let s = self.b.get(self.at..self.at + 8).ok_or("truncated node")?;
        self.at += 8;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, String> {
        let n = self.u16()? as usize;
        let s = self.b.get(self.at..self.at + n).ok_or("truncated key")?;
        self.at += n;
        Ok(s.to_vec())
    }
    fn bound(&mut self) -> Result<Bound, String> {
        match self.u8()? {
            0 => Ok(Bound::NegInf),
            1 => Ok(Bound::Key(self.bytes()?)),
            2 => Ok(Bound::PosInf),
            t => Err(format!("bad bound tag {t}")),
        }
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u16).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_bound(out: &mut Vec<u8>, b: &Bound) {
    match b {
        Bound::NegInf => out.push(0),
        Bound::Key(k) => {
            out.push(1);
            put_bytes(out, k);
        }
        Bound::PosInf => out.push(2),
    }
}

impl Node {
    pub fn empty_leaf(low: Bound, high: Bound) -> Self {
        Node {
            level: 0,
            low,
            high,
            foster: None,
            content: Content::Leaf {
                low_value: None,
                records: Vec::new(),
            },
        }
    }

    pub fn empty_root_leaf() -> Self {
        Self::empty_leaf(Bound::NegInf, Bound::PosInf)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.content, Content::Leaf { .. })
    }

    /// Exclusive upper bound of keys held by this node itself.
    pub fn upper(&self) -> Bound {
        match &self.foster {
            Some(f) => Bound::Key(f.sep.clone()),
            None => self.high.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.push(self.level);
        let mut flags = 0;
        if self.foster.is_some() {
            flags |= FLAG_FOSTER;
        }
        if self.is_leaf() {
            flags |= FLAG_LEAF;
        }
        out.push(flags);
        if let Some(f) = &self.foster {
            out.extend_from_slice(&f.child.0.to_le_bytes());
            put_bytes(&mut out, &f.sep);
        }
        match &self.content {
            Content::Leaf { low_value, records } => {
                out.extend_from_slice(&((records.len() + 2) as u16).to_le_bytes());
                out.push(REC_FENCE | if low_value.is_some() { 0 } else { REC_GHOST });
                put_bound(&mut out, &self.low);
                put_bytes(&mut out, low_value.as_deref().unwrap_or(&[]));
                for r in records {
                    out.push(if r.ghost { REC_GHOST } else { 0 });
                    put_bound(&mut out, &Bound::Key(r.key.clone()));
                    put_bytes(&mut out, &r.value);
                }
                out.push(REC_FENCE | REC_GHOST);
                put_bound(&mut out, &self.high);
                put_bytes(&mut out, &[]);
            }
            Content::Branch { children, seps } => {
                put_bound(&mut out, &self.low);
                out.extend_from_slice(&(children.len() as u16).to_le_bytes());
                for (i, c) in children.iter().enumerate() {
                    out.extend_from_slice(&c.0.to_le_bytes());
                    if i + 1 < children.len() {
                        put_bytes(&mut out, &seps[i]);
                    }
                }
                put_bound(&mut out, &self.high);
            }
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        self.encode().len()
    }

    pub fn decode(body: &[u8]) -> Result<Self, String> {
        Self::decode_with_spans(body).map(|(n, _)| n)
    }

    /// Decodes and reports where every fence and separator key sits.
    pub fn decode_with_spans(body: &[u8]) -> Result<(Self, Vec<KeySpan>), String> {
        let mut r = Reader { b: body, at: 0 };
        let mut spans = Vec::new();
        let level = r.u8()?;
        let flags = r.u8()?;
        if flags & !(FLAG_FOSTER | FLAG_LEAF) != 0 {
            return Err(format!("bad node flags {flags:#x}"));
        }
        let foster = if flags & FLAG_FOSTER != 0 {
            let child = PageId(r.u64()?);
            let start = r.at;
            let sep = r.bytes()?;
            spans.push(KeySpan { role: KeyRole::FosterSeparator, start, end: r.at });
            Some(Foster { child, sep })
        } else {
            None
        };
        let node = if flags & FLAG_LEAF != 0 {
            let n = r.u16()? as usize;
            if n < 2 {
                return Err("leaf without fence records".into());
            }
            let mut low = Bound::NegInf;
            let mut high = Bound::PosInf;
            let mut low_value = None;
            let mut records = Vec::with_capacity(n - 2);
            for i in 0..n {
                let rf = r.u8()?;
                if rf & !(REC_GHOST | REC_FENCE) != 0 {
                    return Err(format!("bad record flags {rf:#x}"));
                }
                let is_fence = rf & REC_FENCE != 0;
                if is_fence != (i == 0 || i == n - 1) {
                    return Err("fence record out of place".into());
                }
                let start = r.at;
                let key = r.bound()?;
                let end = r.at;
                let value = r.bytes()?;
                let ghost = rf & REC_GHOST != 0;
                if i == 0 {
                    spans.push(KeySpan { role: KeyRole::LowFence, start, end });
                    if !ghost {
                        low_value = Some(value);
                    } else if !value.is_empty() {
                        return Err("ghost fence with value".into());
                    }
                    low = key;
                } else if i == n - 1 {
                    spans.push(KeySpan { role: KeyRole::HighFence, start, end });
                    if !ghost || !value.is_empty() {
                        return Err("high fence record must be an empty ghost".into());
                    }
                    high = key;
                } else {
                    let Bound::Key(key) = key else {
                        return Err("infinite key in user record".into());
                    };
                    records.push(LeafRecord { key, value, ghost });
                }
            }
            Node { level, low, high, foster, content: Content::Leaf { low_value, records } }
        } else {
            let start = r.at;
            let low = r.bound()?;
            spans.push(KeySpan { role: KeyRole::LowFence, start, end: r.at });
            let n = r.u16()? as usize;
            if n == 0 {
                return Err("branch without children".into());
            }
            let mut children = Vec::with_capacity(n);
            let mut seps = Vec::with_capacity(n - 1);
            for i in 0..n {
                children.push(PageId(r.u64()?));
                if i + 1 < n {
                    let start = r.at;
                    seps.push(r.bytes()?);
                    spans.push(KeySpan { role: KeyRole::Separator(i), start, end: r.at });
                }
            }
            let start = r.at;
            let high = r.bound()?;
            spans.push(KeySpan { role: KeyRole::HighFence, start, end: r.at });
            Node { level, low, high, foster, content: Content::Branch { children, seps } }
        };
        if body[r.at..].iter().any(|b| *b != 0) {
            return Err("garbage after node".into());
        }
        node.check()?;
        Ok((node, spans))
    }

    /// In-page invariants: ordering, fence containment, shape.
    pub fn check(&self) -> Result<(), String> {
        if self.low >= self.high {
            return Err("low fence not below high fence".into());
        }
        let upper = self.upper();
        if let Some(f) = &self.foster {
            if !(self.low.le_key(&f.sep) && self.high.gt_key(&f.sep)) || self.low == Bound::key(&f.sep) {
                return Err("foster separator outside fences".into());
            }
        }
        match &self.content {
            Content::Leaf { low_value, records } => {
                if self.level != 0 {
                    return Err("leaf with nonzero level".into());
                }
                if low_value.is_some() && !matches!(self.low, Bound::Key(_)) {
                    return Err("valid record at infinite fence".into());
                }
                let mut prev: Option<&[u8]> = None;
                for rec in records {
                    if self.low.cmp_key(&rec.key) != Ordering::Less || !upper.gt_key(&rec.key) {
                        return Err("record outside fences".into());
                    }
                    if prev.is_some_and(|p| p >= rec.key.as_slice()) {
                        return Err("records out of order".into());
                    }
                    prev = Some(&rec.key);
                }
            }
            Content::Branch { children, seps } => {
                if self.level == 0 {
                    return Err("branch at leaf level".into());
                }
                if seps.len() + 1 != children.len() {
                    return Err("separator count mismatch".into());
                }
                let mut prev = self.low.clone();
                for s in seps {
                    let b = Bound::key(s);
                    if b <= prev || !upper.gt_key(s) {
                        return Err("separators out of order".into());
                    }
                    prev = b;
                }
                if prev >= upper {
                    return Err("last separator not below upper bound".into());
                }
                if children.iter().any(|c| c.0 == 0) {
                    return Err("null child pointer".into());
                }
            }
        }
        Ok(())
    }

    /// Child covering `key` with the fences that child must carry.
    pub fn route(&self, key: &[u8]) -> Option<(usize, PageId, Bound, Bound)> {
        let Content::Branch { children, seps } = &self.content else {
            return None;
        };
        let i = seps.partition_point(|s| s.as_slice() <= key);
        let low = if i == 0 { self.low.clone() } else { Bound::key(&seps[i - 1]) };
        let high = if i == seps.len() { self.upper() } else { Bound::key(&seps[i]) };
        Some((i, children[i], low, high))
    }

    /// Expected fences of child `i`.
    pub fn child_fences(&self, i: usize) -> (Bound, Bound) {
        let Content::Branch { seps, .. } = &self.content else {
            panic!("not a branch");
        };
        let low = if i == 0 { self.low.clone() } else { Bound::key(&seps[i - 1]) };
        let high = if i == seps.len() { self.upper() } else { Bound::key(&seps[i]) };
        (low, high)
    }

    pub fn children(&self) -> &[PageId] {
        match &self.content {
            Content::Branch { children, .. } => children,
            Content::Leaf { .. } => &[],
        }
    }

    /// Live value for `key` in a leaf.
    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        let Content::Leaf { low_value, records } = &self.content else {
            return None;
        };
        if self.low.cmp_key(key) == Ordering::Equal {
            return low_value.as_deref();
        }
        let i = records.binary_search_by(|r| r.key.as_slice().cmp(key)).ok()?;
        let r = &records[i];
        (!r.ghost).then_some(r.value.as_slice())
    }

    /// Makes `key` live with `value`. Returns the previous live value.
    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Option<Vec<u8>> {
        let is_low = self.low.cmp_key(key) == Ordering::Equal;
        let Content::Leaf { low_value, records } = &mut self.content else {
            panic!("put on branch");
        };
        if is_low {
            return low_value.replace(value.to_vec());
        }
        match records.binary_search_by(|r| r.key.as_slice().cmp(key)) {
            Ok(i) => {
                let r = &mut records[i];
                let old = (!r.ghost).then(|| std::mem::take(&mut r.value));
                r.value = value.to_vec();
                r.ghost = false;
                old
            }
            Err(i) => {
                records.insert(
                    i,
                    LeafRecord { key: key.to_vec(), value: value.to_vec(), ghost: false },
                );
                None
            }
        }
    }

    /// Turns `key` into a ghost. Returns the value it had.
    pub fn remove(&mut self, key: &[u8]) -> Option<Vec<u8>> {
        let is_low = self.low.cmp_key(key) == Ordering::Equal;
        let Content::Leaf { low_value, records } = &mut self.content else {
            panic!("remove on branch");
        };
        if is_low {
            return low_value.take();
        }
        let i = records.binary_search_by(|r| r.key.as_slice().cmp(key)).ok()?;
        let r = &mut records[i];
        if r.ghost {
            return None;
        }
        r.ghost = true;
        Some(std::mem::take(&mut r.value))
    }

    /// Drops ghost records. The fence records stay.
    pub fn purge_ghosts(&mut self) -> usize {
        let Content::Leaf { records, .. } = &mut self.content else {
            return 0;
        };
        let before = records.len();
        records.retain(|r| !r.ghost);
        before - records.len()
    }

    pub fn live_entries(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        let Content::Leaf { low_value, records } = &self.content else {
            return Vec::new();
        };
        let mut out = Vec::new();
        if let (Some(v), Bound::Key(k)) = (low_value, &self.low) {
            out.push((k.clone(), v.clone()));
        }
        out.extend(records.iter().filter(|r| !r.ghost).map(|r| (r.key.clone(), r.value.clone())));
        out
    }

    /// Number of key values, fence keys included.
    pub fn key_count(&self) -> usize {
        match &self.content {
            Content::Leaf { records, .. } => records.len() + 2,
            Content::Branch { seps, .. } => seps.len() + 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_with(keys: &[&str]) -> Node {
        let mut n = Node::empty_root_leaf();
        for k in keys {
            n.put(k.as_bytes(), b"v");
        }
        n
    }

    #[test]
    fn empty_leaf_has_two_fence_records_one_ghost() {
        let n = Node::empty_root_leaf();
        let body = n.encode();
        assert_eq!(u16::from_le_bytes([body[2], body[3]]), 2);
        let (back, spans) = Node::decode_with_spans(&body).unwrap();
        assert_eq!(back, n);
        assert_eq!(spans.len(), 2);
        assert_eq!(n.key_count(), 2);
    }

    #[test]
    fn leaf_round_trip_and_lookup() {
        let mut n = leaf_with(&["b", "a", "c"]);
        assert_eq!(n.get(b"b"), Some(&b"v"[..]));
        n.remove(b"b");
        assert_eq!(n.get(b"b"), None);
        let back = Node::decode(&n.encode()).unwrap();
        assert_eq!(back, n);
        assert_eq!(n.purge_ghosts(), 1);
        assert_eq!(n.live_entries().len(), 2);
    }

    #[test]
    fn low_fence_record_turns_valid() {
        let mut n = Node::empty_leaf(Bound::key(b"m"), Bound::PosInf);
        assert_eq!(n.put(b"m", b"1"), None);
        assert_eq!(n.get(b"m"), Some(&b"1"[..]));
        let back = Node::decode(&n.encode()).unwrap();
        assert_eq!(back.get(b"m"), Some(&b"1"[..]));
        assert_eq!(n.remove(b"m"), Some(b"1".to_vec()));
        assert_eq!(n.key_count(), 2);
    }

    #[test]
    fn branch_has_n_plus_one_keys() {
        let n = Node {
            level: 1,
            low: Bound::NegInf,
            high: Bound::PosInf,
            foster: None,
            content: Content::Branch {
                children: vec![PageId(3), PageId(4), PageId(5)],
                seps: vec![b"g".to_vec(), b"p".to_vec()],
            },
        };
        assert_eq!(n.key_count(), 4);
        let (back, spans) = Node::decode_with_spans(&n.encode()).unwrap();
        assert_eq!(back, n);
        assert_eq!(spans.len(), 4);
        assert_eq!(n.route(b"a").unwrap().1, PageId(3));
        assert_eq!(n.route(b"g").unwrap().1, PageId(4));
        let (_, c, lo, hi) = n.route(b"z").unwrap();
        assert_eq!((c, lo, hi), (PageId(5), Bound::key(b"p"), Bound::PosInf));
    }

    #[test]
    fn foster_parent_keeps_chain_high_fence() {
        let mut n = leaf_with(&["a", "b"]);
        n.foster = Some(Foster { child: PageId(9), sep: b"m".to_vec() });
        assert_eq!(n.upper(), Bound::key(b"m"));
        let back = Node::decode(&n.encode()).unwrap();
        assert_eq!(back.high, Bound::PosInf);
        n.put(b"x", b"v");
        assert!(n.check().is_err());
    }

    #[test]
    fn rejects_trailing_garbage_and_disorder() {
        let n = leaf_with(&["a"]);
        let mut body = n.encode();
        body.extend_from_slice(&[0, 0, 7]);
        assert!(Node::decode(&body).is_err());
        let bad = Node {
            content: Content::Leaf {
                low_value: None,
                records: vec![
                    LeafRecord { key: b"b".to_vec(), value: vec![], ghost: false },
                    LeafRecord { key: b"a".to_vec(), value: vec![], ghost: false },
                ],
            },
            ..Node::empty_root_leaf()
        };
        assert!(Node::decode(&bad.encode()).is_err());
    }
}
