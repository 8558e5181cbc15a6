//! Programmer-facing framework surface: the stage-function interface,
//! packet get/send, deterministic sequence-id derivation and downstream
//! duplicate suppression.
//!
//! A stage function is a [`StageLogic`]: the framework invokes `on_wake`
//! whenever packets arrive, flow-control credit frees up or a window
//! advances, which is the arrival-notification mechanism. Inside the wake
//! the logic drains its inputs with [`StageCtx::get_packet`] until
//! `NoneAvailable` and yields by returning; a send that would overrun flow
//! control does not fail, it parks the node until credits return. Handles
//! are plain indices into the stage's declared input/output lists.
//!
//! Contract on stage functions: deterministic over the same input sequence,
//! no state carried across windows (a window's data is its only state), and
//! outputs for window `w` emitted no later than the wake that consumed the
//! last `WindowBoundary(w)`.

pub mod builtins;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::hash::mix_words;
use crate::model::{DataUnit, Key, SequenceId, StreamOp, WindowIndex};

/// Result of a packet read on an input handle.
#[derive(Debug, Clone, PartialEq)]
pub enum GetPacket {
    /// The next unit, per the stream's delivery semantics (Group: arrival
    /// order within the colocation guarantee, Sort: merged key order).
    Unit(DataUnit),
    /// Nothing readable right now; yield and await the next wake.
    NoneAvailable,
    /// Returned exactly once per window after its last unit.
    WindowBoundary(WindowIndex),
}

/// Errors surfaced by [`StageCtx::send_packet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendError {
    /// Timestamps on one node's emissions to one stream must not decrease.
    TimestampRegression { last: u64, attempted: u64 },
    UnknownOutput { index: usize },
}

impl core::fmt::Display for SendError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SendError::TimestampRegression { last, attempted } => write!(
                f,
                "timestamp regression: {attempted} after {last} on the same stream"
            ),
            SendError::UnknownOutput { index } => write!(f, "no output stream #{index}"),
        }
    }
}

/// Node-side execution context handed to a stage function on every wake.
pub trait StageCtx {
    /// Index of this node within its stage.
    fn node_slot(&self) -> u32;
    /// Number of nodes in this stage.
    fn node_count(&self) -> u32;
    /// Window width `T` shared by the run.
    fn window_width(&self) -> u64;
    fn input_count(&self) -> usize;
    fn output_count(&self) -> usize;
    fn input_op(&self, input: usize) -> StreamOp;
    /// Next packet from an input, per its delivery semantics.
    fn get_packet(&mut self, input: usize) -> GetPacket;
    /// Emits a unit: assigns its sequence id, routes it per the stream's
    /// operation, and buffers it for recovery.
    fn send_packet(
        &mut self,
        output: usize,
        key: Key,
        timestamp: u64,
        payload: Vec<u8>,
    ) -> Result<(), SendError>;
    /// Stop reading the input's current window: remaining units are
    /// discarded here and senders are told to skip to the window end.
    fn cancel_window(&mut self, input: usize);
    /// True when this node is the current owner of the key's bucket on the
    /// given Group input (always true before any repartition, and for
    /// non-Group inputs). Stage functions consult this before emitting
    /// window aggregates so an abandoned node stays silent.
    fn owns_key(&self, input: usize, key: Key) -> bool;
    /// Records a unit as this node's accepted output for a window (sinks).
    fn record(&mut self, window: WindowIndex, unit: DataUnit);
}

/// A stage computation, driven by wakes.
pub trait StageLogic {
    fn on_wake(&mut self, ctx: &mut dyn StageCtx);
}

/// Derives the sequence id of an emitted unit from the producing stage, the
/// window, the key and the per-(key, window) emit ordinal.
///
/// The id is a pure mix of those words, so a replacement node that replays
/// the failed node's inputs reproduces its ids exactly and downstream
/// filters drop the duplicates. Stages whose inputs are not all key-located
/// (sources, Plain/Sort consumers) namespace the ordinal per node instead —
/// several of their nodes may legitimately emit the same key.
pub fn derive_sequence_id(stage: u32, window: u64, key: Key, ordinal: u64) -> SequenceId {
    SequenceId(mix_words(&[stage as u64, window, key.0, ordinal]))
}

/// Ordinal namespace offset for stages without the key-colocation guarantee.
pub const NODE_ORDINAL_BASE: u64 = 1 << 40;

/// Tracks per-(key, window) emit ordinals for one node.
#[derive(Debug, Default)]
pub struct EmitCounters {
    counters: BTreeMap<(u64, u64), u64>,
}

impl EmitCounters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Next ordinal for `(key, window)`; namespaced per node unless the
    /// stage is key-colocated.
    pub fn next(&mut self, window: u64, key: Key, node_slot: u32, key_colocated: bool) -> u64 {
        let n = self.counters.entry((window, key.0)).or_insert(0);
        let ordinal = *n;
        *n += 1;
        if key_colocated {
            ordinal
        } else {
            node_slot as u64 * NODE_ORDINAL_BASE + ordinal
        }
    }

    /// Drops counters for committed windows.
    pub fn release_window(&mut self, window: u64) {
        self.counters.retain(|&(w, _), _| w != window);
    }
}

/// Per-window seen-sequence filter: accepts a unit once, drops resends.
/// Bounded by window size; cleared when the receiver advances past the
/// window.
#[derive(Debug, Default)]
pub struct DuplicateFilter {
    seen: BTreeMap<u64, BTreeSet<u64>>,
}

impl DuplicateFilter {
    pub fn new() -> Self {
        Self::default()
    }

    /// True when the unit is new for its window (and marks it seen).
    pub fn accept(&mut self, window: u64, seq: SequenceId) -> bool {
        self.seen.entry(window).or_default().insert(seq.0)
    }

    pub fn release_window(&mut self, window: u64) {
        self.seen.remove(&window);
    }

    pub fn tracked_windows(&self) -> usize {
        self.seen.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_ids_are_node_independent() {
        // Same (stage, window, key, ordinal) on any node gives the same id.
        let a = derive_sequence_id(3, 7, Key(42), 0);
        let b = derive_sequence_id(3, 7, Key(42), 0);
        assert_eq!(a, b);
    }

    #[test]
    fn sequence_ids_distinguish_ordinals() {
        let a = derive_sequence_id(3, 7, Key(42), 0);
        let b = derive_sequence_id(3, 7, Key(42), 1);
        assert_ne!(a, b);
    }

    #[test]
    fn sequence_ids_have_no_collisions_at_scale() {
        // One million derivations across stages, windows, keys, ordinals.
        let mut seen = BTreeSet::new();
        for stage in 0..4u32 {
            for window in 0..5u64 {
                for key in 0..500u64 {
                    for ordinal in 0..100u64 {
                        seen.insert(derive_sequence_id(stage, window, Key(key), ordinal).0);
                    }
                }
            }
        }
        assert_eq!(seen.len(), 4 * 5 * 500 * 100);
    }

    #[test]
    fn emit_counters_reset_per_window() {
        let mut c = EmitCounters::new();
        assert_eq!(c.next(0, Key(5), 0, true), 0);
        assert_eq!(c.next(0, Key(5), 0, true), 1);
        assert_eq!(c.next(1, Key(5), 0, true), 0);
        c.release_window(0);
        assert_eq!(c.next(0, Key(5), 0, true), 0);
    }

    #[test]
    fn emit_counters_namespace_per_node_when_not_colocated() {
        let mut a = EmitCounters::new();
        let mut b = EmitCounters::new();
        let oa = a.next(0, Key(5), 0, false);
        let ob = b.next(0, Key(5), 1, false);
        assert_ne!(oa, ob);
        assert_ne!(
            derive_sequence_id(1, 0, Key(5), oa),
            derive_sequence_id(1, 0, Key(5), ob)
        );
    }

    #[test]
    fn duplicate_filter_accepts_once() {
        let mut f = DuplicateFilter::new();
        let seq = SequenceId(99);
        assert!(f.accept(0, seq));
        assert!(!f.accept(0, seq));
        // Other windows are independent.
        assert!(f.accept(1, seq));
        f.release_window(0);
        assert_eq!(f.tracked_windows(), 1);
        // After release, the window's set is gone (a late resend would be
        // re-accepted, which is why windows release only at commit).
        assert!(f.accept(0, seq));
    }

    #[test]
    fn duplicate_filter_is_idempotent_over_resends() {
        // Delivering a trace with arbitrary resends of already-delivered
        // units yields the same accepted multiset as the resend-free trace.
        let units: Vec<SequenceId> = (0..50).map(SequenceId).collect();
        let mut resent = Vec::new();
        for (i, &s) in units.iter().enumerate() {
            resent.push(s);
            if i % 3 == 0 {
                resent.push(s);
            }
            if i % 7 == 0 {
                resent.extend(units[..i].iter().copied());
            }
        }
        let mut clean = DuplicateFilter::new();
        let accepted_clean: Vec<u64> = units
            .iter()
            .filter(|s| clean.accept(0, **s))
            .map(|s| s.0)
            .collect();
        let mut noisy = DuplicateFilter::new();
        let accepted_noisy: Vec<u64> = resent
            .iter()
            .filter(|s| noisy.accept(0, **s))
            .map(|s| s.0)
            .collect();
        assert_eq!(accepted_clean, accepted_noisy);
    }
}
