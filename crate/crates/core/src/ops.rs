//! Delivery semantics for Group and Sort streams, plus the windowed
//! combinators (join, select, aggregation) built on them.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::model::{DataUnit, Key, StreamOp};
use crate::partition::{bucket_of, BucketAllocation};

/// Sort direction of a `SortAsc`/`SortDesc` stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortDirection {
    Ascending,
    Descending,
}

impl SortDirection {
    pub fn of(op: StreamOp) -> Option<SortDirection> {
        match op {
            StreamOp::SortAsc => Some(SortDirection::Ascending),
            StreamOp::SortDesc => Some(SortDirection::Descending),
            _ => None,
        }
    }
}

/// Routing state of a Group stream for one window: every key maps to the
/// owner of its bucket under the window's allocation.
#[derive(Debug, Clone)]
pub struct GroupRoute {
    pub epoch: u32,
    owners: Vec<u32>,
}

impl GroupRoute {
    pub fn new(epoch: u32, allocation: &BucketAllocation) -> Self {
        GroupRoute {
            epoch,
            owners: allocation.owner_table(),
        }
    }

    pub fn from_table(epoch: u32, owners: Vec<u32>) -> Self {
        GroupRoute { epoch, owners }
    }

    pub fn bucket_count(&self) -> u32 {
        self.owners.len() as u32
    }

    pub fn owner_of_bucket(&self, bucket: u32) -> u32 {
        self.owners[bucket as usize]
    }

    /// True when `slot` owns the key's bucket under this route.
    pub fn owns_key(&self, key: Key, slot: u32) -> bool {
        self.owner_of_bucket(bucket_of(key, self.bucket_count()).0) == slot
    }
}

/// Receiver slot a unit of a Group stream is delivered to.
pub fn route_group(unit: &DataUnit, route: &GroupRoute) -> u32 {
    route.owner_of_bucket(bucket_of(unit.key, route.bucket_count()).0)
}

/// Result of one merge step over the incoming connections of a Sort stream.
#[derive(Debug, Clone, PartialEq)]
pub enum MergeStep {
    /// The extreme-key unit, with the connection it was taken from.
    Unit(DataUnit, usize),
    /// Some connection has neither a pending unit nor an end-of-window flag.
    NeedMoreInput,
    /// Every connection flagged end-of-window and all buffers are drained.
    WindowDone,
}

#[derive(Debug, Clone, Default)]
struct MergeSlot {
    pending: alloc::collections::VecDeque<DataUnit>,
    done: bool,
}

/// Merge of per-connection sorted runs for one window of a Sort stream.
///
/// A unit is emitted only when every connection either has a pending unit or
/// has flagged end-of-window, so the merge never emits out of order while a
/// silent sender could still contribute a more extreme key.
#[derive(Debug, Clone)]
pub struct SortMergeState {
    slots: Vec<MergeSlot>,
    direction: SortDirection,
}

impl SortMergeState {
    pub fn new(connections: usize, direction: SortDirection) -> Self {
        SortMergeState {
            slots: (0..connections).map(|_| MergeSlot::default()).collect(),
            direction,
        }
    }

    pub fn direction(&self) -> SortDirection {
        self.direction
    }

    pub fn push(&mut self, connection: usize, unit: DataUnit) {
        debug_assert!(!self.slots[connection].done, "push after end-of-window");
        self.slots[connection].pending.push_back(unit);
    }

    /// Marks a connection's end-of-window. A connection that is done no
    /// longer blocks the merge.
    pub fn mark_done(&mut self, connection: usize) {
        self.slots[connection].done = true;
    }

    /// Drops a connection from the merge entirely (its sender is gone).
    pub fn mark_closed(&mut self, connection: usize) {
        let slot = &mut self.slots[connection];
        slot.done = true;
        slot.pending.clear();
    }

    pub fn pending_total(&self) -> usize {
        self.slots.iter().map(|s| s.pending.len()).sum()
    }

    /// Resets per-window state, keeping the connection set.
    pub fn reset(&mut self) {
        for s in &mut self.slots {
            s.pending.clear();
            s.done = false;
        }
    }

    /// Removes and returns all buffered units as `(connection, unit)` pairs
    /// in connection order, preserving per-connection arrival order.
    pub fn drain_pending(&mut self) -> Vec<(usize, DataUnit)> {
        let mut out = Vec::new();
        for (i, slot) in self.slots.iter_mut().enumerate() {
            while let Some(u) = slot.pending.pop_front() {
                out.push((i, u));
            }
        }
        out
    }

    pub fn step(&mut self) -> MergeStep {
        let mut best: Option<(usize, Key)> = None;
        for (i, slot) in self.slots.iter().enumerate() {
            match slot.pending.front() {
                Some(u) => {
                    let better = match best {
                        None => true,
                        Some((_, k)) => match self.direction {
                            // Ties go to the lowest connection index.
                            SortDirection::Ascending => u.key < k,
                            SortDirection::Descending => u.key > k,
                        },
                    };
                    if better {
                        best = Some((i, u.key));
                    }
                }
                None if slot.done => {}
                None => return MergeStep::NeedMoreInput,
            }
        }
        match best {
            Some((i, _)) => {
                let unit = self.slots[i].pending.pop_front().expect("peeked");
                MergeStep::Unit(unit, i)
            }
            None => MergeStep::WindowDone,
        }
    }
}

/// Stable sort of one window's buffer by key; the multiset of units is
/// preserved and equal keys keep their arrival order.
pub fn local_sort_window(units: &mut [DataUnit], direction: SortDirection) {
    match direction {
        SortDirection::Ascending => units.sort_by(|a, b| a.key.cmp(&b.key)),
        SortDirection::Descending => units.sort_by(|a, b| b.key.cmp(&a.key)),
    }
}

/// Output of a window join before sequence assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedUnit {
    pub key: Key,
    /// Max of the contributing units' timestamps.
    pub timestamp: u64,
    /// Concatenation of payloads in input-stream order.
    pub payload: Vec<u8>,
}

/// Window join across fully collected inputs: one output per combination of
/// units sharing a key that is present in *every* input. Outputs are ordered
/// by key, then by input-major combination order.
pub fn join_window(inputs: &[Vec<DataUnit>]) -> Vec<JoinedUnit> {
    if inputs.len() < 2 {
        return Vec::new();
    }
    let mut by_key: Vec<BTreeMap<Key, Vec<&DataUnit>>> = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut m: BTreeMap<Key, Vec<&DataUnit>> = BTreeMap::new();
        for u in input {
            m.entry(u.key).or_default().push(u);
        }
        by_key.push(m);
    }
    let mut out = Vec::new();
    let first = &by_key[0];
    'keys: for (&key, _) in first.iter() {
        for m in &by_key[1..] {
            if !m.contains_key(&key) {
                continue 'keys;
            }
        }
        let groups: Vec<&Vec<&DataUnit>> = by_key.iter().map(|m| &m[&key]).collect();
        let mut idx = alloc::vec![0usize; groups.len()];
        loop {
            let mut payload = Vec::new();
            let mut ts = 0u64;
            for (g, &i) in groups.iter().zip(&idx) {
                payload.extend_from_slice(&g[i].payload);
                ts = ts.max(g[i].timestamp);
            }
            out.push(JoinedUnit {
                key,
                timestamp: ts,
                payload,
            });
            // Advance the input-major combination counter.
            let mut pos = groups.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < groups[pos].len() {
                    break;
                }
                idx[pos] = 0;
                if pos == 0 {
                    break;
                }
            }
            if idx.iter().all(|&i| i == 0) {
                break;
            }
        }
    }
    out
}

/// Select: emit a unit iff its key satisfies the predicate.
pub fn select_filter<F: Fn(Key) -> bool>(unit: &DataUnit, predicate: F) -> bool {
    predicate(unit.key)
}

/// Fold one window's units with an associative combine over an identity.
pub fn fold_window<T, F: Fn(T, &DataUnit) -> T>(units: &[DataUnit], identity: T, combine: F) -> T {
    units.iter().fold(identity, |acc, u| combine(acc, u))
}

/// Sums 8-byte big-endian payload integers; shorter payloads count as zero.
pub fn sum_payloads(units: &[DataUnit]) -> u64 {
    fold_window(units, 0u64, |acc, u| acc.wrapping_add(payload_value(u)))
}

/// Interprets a payload's first 8 bytes as a big-endian integer.
pub fn payload_value(unit: &DataUnit) -> u64 {
    match unit.payload.get(..8) {
        Some(b) => u64::from_be_bytes(b.try_into().unwrap()),
        None => 0,
    }
}

/// Comparison helper for emitting joined units in non-decreasing timestamp
/// order (send-side monotonicity), breaking ties by key.
pub fn emit_order(a: &JoinedUnit, b: &JoinedUnit) -> Ordering {
    a.timestamp.cmp(&b.timestamp).then(a.key.cmp(&b.key))
}
