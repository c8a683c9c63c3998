//! Deterministic fault injection on the page read path.
//!
//! A plan is a seed plus rules of the form "on the n-th physical read of
//! page p (or any page in lo..hi), corrupt the bytes in this way". Reads are
//! counted per logical page, so the same plan over the same read sequence
//! always injects the same faults.
//!
//! Text form, one directive per line, `#` starts a comment:
//!
//! ```text
//! seed 42
//! fault 7 2 bitflip
//! fault 100..200 1 stale
//! ```

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::page::PageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// One random bit of the page flipped.
    Bitflip,
    /// Second half of the page still holds the previous image.
    Torn,
    /// The complete previous image, checksum and all.
    Stale,
    /// The device reports an error.
    Unreadable,
}

impl FaultMode {
    pub const ALL: [FaultMode; 4] = [
        FaultMode::Bitflip,
        FaultMode::Torn,
        FaultMode::Stale,
        FaultMode::Unreadable,
    ];
}

impl fmt::Display for FaultMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultMode::Bitflip => "bitflip",
            FaultMode::Torn => "torn",
            FaultMode::Stale => "stale",
            FaultMode::Unreadable => "unreadable",
        })
    }
}

impl FromStr for FaultMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bitflip" => FaultMode::Bitflip,
            "torn" => FaultMode::Torn,
            "stale" => FaultMode::Stale,
            "unreadable" => FaultMode::Unreadable,
            _ => return Err(Error::Usage(format!("unknown fault mode `{s}`"))),
        })
    }
}

/// Half-open page range; a single page is `lo..lo+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    pub lo: u64,
    pub hi: u64,
    pub read_count: u64,
    pub mode: FaultMode,
}

impl FaultRule {
    pub fn single(page: PageId, read_count: u64, mode: FaultMode) -> Self {
        FaultRule {
            lo: page.0,
            hi: page.0 + 1,
            read_count,
            mode,
        }
    }

    fn covers(&self, page: PageId) -> bool {
        self.lo <= page.0 && page.0 < self.hi
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub seed: u64,
    pub rules: Vec<FaultRule>,
}

impl FaultPlan {
    pub fn new(seed: u64) -> Self {
        FaultPlan {
            seed,
            rules: Vec::new(),
        }
    }

    pub fn with_rule(mut self, rule: FaultRule) -> Self {
        self.rules.push(rule);
        self
    }

    /// Parses one directive; returns false for lines this grammar does not
    /// own so scenario files can embed fault plans.
    pub fn parse_line(&mut self, line: &str) -> Result<bool> {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("seed") => {
                self.seed = parse_num(it.next(), "seed")?;
                Ok(true)
            }
            Some("fault") => {
                let target = it
                    .next()
                    .ok_or_else(|| Error::Usage("fault: missing page".into()))?;
                let (lo, hi) = match target.split_once("..") {
                    Some((a, b)) => (parse_num(Some(a), "page")?, parse_num(Some(b), "page")?),
                    None => {
                        let p = parse_num(Some(target), "page")?;
                        (p, p + 1)
                    }
                };
                if hi <= lo {
                    return Err(Error::Usage(format!("fault: empty range {target}")));
                }
                let read_count = parse_num(it.next(), "read count")?;
                if read_count == 0 {
                    return Err(Error::Usage("fault: read count is 1-based".into()));
                }
                let mode = it
                    .next()
                    .ok_or_else(|| Error::Usage("fault: missing mode".into()))?
                    .parse()?;
                self.rules.push(FaultRule {
                    lo,
                    hi,
                    read_count,
                    mode,
                });
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut plan = FaultPlan::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if !plan.parse_line(line)? {
                return Err(Error::Usage(format!("line {}: unknown directive", n + 1)));
            }
        }
        Ok(plan)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("seed {}\n", self.seed);
        for r in &self.rules {
            if r.hi == r.lo + 1 {
                out += &format!("fault {} {} {}\n", r.lo, r.read_count, r.mode);
            } else {
                out += &format!("fault {}..{} {} {}\n", r.lo, r.hi, r.read_count, r.mode);
            }
        }
        out
    }
}

fn parse_num(s: Option<&str>, what: &str) -> Result<u64> {
    s.ok_or_else(|| Error::Usage(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::Usage(format!("bad {what}")))
}

/// What the injector did to one read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injected {
    None,
    Corrupted(FaultMode),
    Unreadable,
}

/// Applies a plan to the stream of physical page reads.
#[derive(Debug)]
pub struct FaultInjector {
    plan: FaultPlan,
    rng: ChaCha8Rng,
    reads: HashMap<PageId, u64>,
    fired: u64,
}

impl FaultInjector {
    pub fn new(plan: FaultPlan) -> Self {
        FaultInjector {
            rng: ChaCha8Rng::seed_from_u64(plan.seed),
            plan,
            reads: HashMap::new(),
            fired: 0,
        }
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    pub fn add_rule(&mut self, rule: FaultRule) {
        self.plan.rules.push(rule);
    }

    /// Faults that actually changed what a read returned.
    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn reads_of(&self, page: PageId) -> u64 {
        self.reads.get(&page).copied().unwrap_or(0)
    }

    /// Counts one physical read of `page` and corrupts `bytes` if a rule
    /// triggers. `previous` is the image written before the current one.
    pub fn on_read(&mut self, page: PageId, bytes: &mut [u8], previous: Option<&[u8]>) -> Injected {
        let n = self.reads.entry(page).or_insert(0);
        *n += 1;
        let n = *n;
        let Some(mode) = self
            .plan
            .rules
            .iter()
            .find(|r| r.read_count == n && r.covers(page))
            .map(|r| r.mode)
        else {
            return Injected::None;
        };
        let outcome = match mode {
            FaultMode::Unreadable => Injected::Unreadable,
            FaultMode::Bitflip => {
                let bit = self.rng.gen_range(0..bytes.len() * 8);
                bytes[bit / 8] ^= 1 << (bit % 8);
                Injected::Corrupted(mode)
            }
            FaultMode::Torn => {
                let half = bytes.len() / 2;
                let old_tail: Vec<u8> = match previous {
                    Some(prev) => prev[half..].to_vec(),
                    None => vec![0; bytes.len() - half],
                };
                if bytes[half..] == old_tail[..] {
                    Injected::None
                } else {
                    bytes[half..].copy_from_slice(&old_tail);
                    Injected::Corrupted(mode)
                }
            }
            FaultMode::Stale => match previous {
                Some(prev) if prev != bytes => {
                    bytes.copy_from_slice(prev);
                    Injected::Corrupted(mode)
                }
                _ => Injected::None,
            },
        };
        if outcome != Injected::None {
            self.fired += 1;
        }
        outcome
    }
}
