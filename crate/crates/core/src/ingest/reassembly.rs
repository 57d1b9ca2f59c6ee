//! IPv4 fragment reassembly keyed by (src, dst, id, protocol).

use std::collections::{HashMap, VecDeque};

use super::packet::Ipv4Packet;
use super::Timestamp;

/// Largest IPv4 payload a fragment group may describe.
const MAX_PAYLOAD: usize = 65_535 - 20;

pub const DEFAULT_HORIZON_SECS: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FragmentKey {
    pub src: u32,
    pub dst: u32,
    pub id: u16,
    pub protocol: u8,
}

#[derive(Debug, PartialEq, Eq)]
pub enum FragmentOutcome {
    /// Group still incomplete.
    Pending,
    Complete {
        key: FragmentKey,
        first_seen: Timestamp,
        payload: Vec<u8>,
    },
    /// The group just became unusable (conflicting overlap, bad extent).
    Poisoned,
}

struct Group {
    generation: u64,
    first_seen: Timestamp,
    data: Vec<u8>,
    /// Sorted, non-adjacent covered byte ranges.
    covered: Vec<(usize, usize)>,
    total: Option<usize>,
    poisoned: bool,
}

impl Group {
    fn complete(&self) -> bool {
        matches!(self.total, Some(t) if self.covered.len() == 1 && self.covered[0] == (0, t))
    }

    /// Returns false on a conflict.
    fn insert(&mut self, start: usize, bytes: &[u8], last: bool) -> bool {
        let end = start + bytes.len();
        if end > MAX_PAYLOAD {
            return false;
        }
        if last {
            if self.total.is_some_and(|t| t != end) {
                return false;
            }
            self.total = Some(end);
        }
        if self.total.is_some_and(|t| end > t) {
            return false;
        }
        for &(s, e) in &self.covered {
            let (lo, hi) = (s.max(start), e.min(end));
            if lo < hi && self.data[lo..hi] != bytes[lo - start..hi - start] {
                return false;
            }
        }
        if self.data.len() < end {
            self.data.resize(end, 0);
        }
        self.data[start..end].copy_from_slice(bytes);

        let mut merged = Vec::with_capacity(self.covered.len() + 1);
        let (mut ns, mut ne) = (start, end);
        for &(s, e) in &self.covered {
            if e < ns || s > ne {
                merged.push((s, e));
            } else {
                ns = ns.min(s);
                ne = ne.max(e);
            }
        }
        merged.push((ns, ne));
        merged.sort_unstable();
        self.covered = merged;
        true
    }
}

/// Fragment groups expire `horizon` after their first fragment, in capture time.
pub struct Reassembler {
    horizon: u64,
    groups: HashMap<FragmentKey, Group>,
    expiry: VecDeque<(Timestamp, FragmentKey, u64)>,
    next_generation: u64,
}

impl Reassembler {
    pub fn new(horizon_secs: u64) -> Self {
        Self {
            horizon: horizon_secs * 1_000_000,
            groups: HashMap::new(),
            expiry: VecDeque::new(),
            next_generation: 0,
        }
    }

    /// Number of fragment groups opened so far.
    pub fn groups_started(&self) -> u64 {
        self.next_generation
    }

    pub fn pending(&self) -> usize {
        self.groups.len()
    }

    pub fn push(&mut self, now: Timestamp, frag: &Ipv4Packet<'_>) -> FragmentOutcome {
        let key = FragmentKey {
            src: frag.src,
            dst: frag.dst,
            id: frag.id,
            protocol: frag.protocol,
        };
        let group = self.groups.entry(key).or_insert_with(|| {
            let generation = self.next_generation;
            self.next_generation += 1;
            self.expiry.push_back((now, key, generation));
            Group {
                generation,
                first_seen: now,
                data: Vec::new(),
                covered: Vec::new(),
                total: None,
                poisoned: false,
            }
        });
        if group.poisoned {
            return FragmentOutcome::Pending;
        }
        if !group.insert(frag.offset, frag.payload, !frag.more_fragments) {
            group.poisoned = true;
            group.data = Vec::new();
            return FragmentOutcome::Poisoned;
        }
        if group.complete() {
            let group = self.groups.remove(&key).expect("group present");
            return FragmentOutcome::Complete {
                key,
                first_seen: group.first_seen,
                payload: group.data,
            };
        }
        FragmentOutcome::Pending
    }

    /// Drops groups older than the horizon. Returns how many healthy
    /// (not already poisoned) groups were discarded.
    pub fn expire(&mut self, now: Timestamp) -> u64 {
        let mut timed_out = 0;
        while let Some(&(seen, key, generation)) = self.expiry.front() {
            if seen.as_micros() + self.horizon >= now.as_micros() {
                break;
            }
            self.expiry.pop_front();
            if let Some(g) = self.groups.get(&key) {
                if g.generation == generation {
                    if !g.poisoned {
                        timed_out += 1;
                    }
                    self.groups.remove(&key);
                }
            }
        }
        timed_out
    }

    /// Discards every pending group at end of input.
    pub fn drain(&mut self) -> u64 {
        let healthy = self.groups.values().filter(|g| !g.poisoned).count() as u64;
        self.groups.clear();
        self.expiry.clear();
        healthy
    }
}
