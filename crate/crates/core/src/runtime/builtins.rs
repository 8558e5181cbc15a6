//! Stage functions shipped with the framework, registered by name in the
//! scenario config: identity, word-group-count, top-fraction-consumer,
//! window-join, window-sum.
//!
//! All of them follow the wake contract: drain inputs until `NoneAvailable`
//! and emit a window's results in the wake that consumed its last boundary.
//! Aggregating functions key collected state by the unit's own window and
//! emit when every input has delivered that window's boundary — a recovery
//! replay re-collects an old window and re-fires its boundary, so the
//! recovered keys are re-emitted the same way.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::model::{DataUnit, Key, SequenceId, StageFunction, WindowIndex};
use crate::ops::{emit_order, join_window, payload_value};

use super::{GetPacket, StageCtx, StageLogic};

/// Builds the stage logic registered under a function spec.
pub fn instantiate(function: &StageFunction) -> Box<dyn StageLogic> {
    match function {
        // Sources are driven by the generator, not by wakes.
        StageFunction::Generate => Box::new(Noop),
        StageFunction::Identity => Box::new(Identity::default()),
        StageFunction::WordGroupCount => Box::new(WordGroupCount::default()),
        StageFunction::TopFractionConsumer { take } => Box::new(TopFraction {
            take: *take,
            taken: Vec::new(),
        }),
        StageFunction::WindowJoin => Box::new(WindowJoin::default()),
        StageFunction::WindowSum => Box::new(WindowSum::default()),
    }
}

struct Noop;

impl StageLogic for Noop {
    fn on_wake(&mut self, _ctx: &mut dyn StageCtx) {}
}

/// Tracks which inputs have delivered a boundary per window; a window is
/// ripe for emission once every input has bounded it.
#[derive(Default)]
struct Boundaries {
    pending: BTreeMap<u64, BTreeSet<usize>>,
}

impl Boundaries {
    fn mark(&mut self, window: u64, input: usize) {
        self.pending.entry(window).or_default().insert(input);
    }

    /// Windows bounded on all `inputs` inputs, in ascending order.
    fn take_ripe(&mut self, inputs: usize) -> Vec<u64> {
        let ripe: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, seen)| seen.len() == inputs)
            .map(|(&w, _)| w)
            .collect();
        for w in &ripe {
            self.pending.remove(w);
        }
        ripe
    }
}

/// Forwards every unit to all outputs (normalizing timestamps to the unit's
/// window start); with no outputs it records accepted units as a sink.
#[derive(Default)]
struct Identity {
    last_ts: Vec<u64>,
}

impl StageLogic for Identity {
    fn on_wake(&mut self, ctx: &mut dyn StageCtx) {
        let width = ctx.window_width();
        if self.last_ts.len() != ctx.output_count() {
            self.last_ts = alloc::vec![0; ctx.output_count()];
        }
        for i in 0..ctx.input_count() {
            loop {
                match ctx.get_packet(i) {
                    GetPacket::Unit(u) => {
                        if ctx.output_count() == 0 {
                            let w = WindowIndex(u.timestamp / width);
                            ctx.record(w, u);
                        } else {
                            let base = (u.timestamp / width) * width;
                            for o in 0..ctx.output_count() {
                                let ts = base.max(self.last_ts[o]);
                                self.last_ts[o] = ts;
                                ctx.send_packet(o, u.key, ts, u.payload.clone())
                                    .expect("normalized timestamps are monotone");
                            }
                        }
                    }
                    GetPacket::WindowBoundary(_) => {}
                    GetPacket::NoneAvailable => break,
                }
            }
        }
    }
}

/// Per window, counts units per key; emits one `(key, count)` unit per key
/// this node still owns when the window closes.
#[derive(Default)]
struct WordGroupCount {
    counts: BTreeMap<u64, BTreeMap<Key, u64>>,
    boundaries: Boundaries,
}

impl StageLogic for WordGroupCount {
    fn on_wake(&mut self, ctx: &mut dyn StageCtx) {
        let width = ctx.window_width();
        let inputs = ctx.input_count();
        for i in 0..inputs {
            loop {
                match ctx.get_packet(i) {
                    GetPacket::Unit(u) => {
                        let w = u.timestamp / width;
                        *self.counts.entry(w).or_default().entry(u.key).or_insert(0) += 1;
                    }
                    GetPacket::WindowBoundary(w) => self.boundaries.mark(w.0, i),
                    GetPacket::NoneAvailable => break,
                }
            }
        }
        for w in self.boundaries.take_ripe(inputs) {
            let Some(keys) = self.counts.remove(&w) else {
                continue;
            };
            for (key, count) in keys {
                // An abandoned node no longer owns its keys and stays
                // silent; the surviving owner emits the full count.
                if !ctx.owns_key(0, key) {
                    continue;
                }
                let payload = count.to_be_bytes().to_vec();
                if ctx.output_count() == 0 {
                    ctx.record(
                        WindowIndex(w),
                        DataUnit {
                            key,
                            timestamp: w * width,
                            seq: SequenceId(0),
                            payload,
                        },
                    );
                } else {
                    for o in 0..ctx.output_count() {
                        ctx.send_packet(o, key, w * width, payload.clone())
                            .expect("window-aligned timestamps are monotone");
                    }
                }
            }
        }
    }
}

/// Consumes the first `take` units of each window, then cancels the rest.
struct TopFraction {
    take: u64,
    taken: Vec<u64>,
}

impl StageLogic for TopFraction {
    fn on_wake(&mut self, ctx: &mut dyn StageCtx) {
        let width = ctx.window_width();
        if self.taken.len() != ctx.input_count() {
            self.taken = alloc::vec![0; ctx.input_count()];
        }
        for i in 0..ctx.input_count() {
            loop {
                match ctx.get_packet(i) {
                    GetPacket::Unit(u) => {
                        let w = WindowIndex(u.timestamp / width);
                        ctx.record(w, u);
                        self.taken[i] += 1;
                        if self.taken[i] >= self.take {
                            ctx.cancel_window(i);
                        }
                    }
                    GetPacket::WindowBoundary(_) => self.taken[i] = 0,
                    GetPacket::NoneAvailable => break,
                }
            }
        }
    }
}

/// Joins all inputs on key per window: one output per combination of units
/// sharing a key present in every input, payloads concatenated.
#[derive(Default)]
struct WindowJoin {
    collected: BTreeMap<u64, Vec<Vec<DataUnit>>>,
    boundaries: Boundaries,
}

impl StageLogic for WindowJoin {
    fn on_wake(&mut self, ctx: &mut dyn StageCtx) {
        let width = ctx.window_width();
        let inputs = ctx.input_count();
        for i in 0..inputs {
            loop {
                match ctx.get_packet(i) {
                    GetPacket::Unit(u) => {
                        let w = u.timestamp / width;
                        self.collected
                            .entry(w)
                            .or_insert_with(|| alloc::vec![Vec::new(); inputs])
                            [i]
                            .push(u);
                    }
                    GetPacket::WindowBoundary(w) => self.boundaries.mark(w.0, i),
                    GetPacket::NoneAvailable => break,
                }
            }
        }
        for w in self.boundaries.take_ripe(inputs) {
            let Some(per_input) = self.collected.remove(&w) else {
                continue;
            };
            let mut joined = join_window(&per_input);
            joined.sort_by(emit_order);
            for j in joined {
                if !ctx.owns_key(0, j.key) {
                    continue;
                }
                if ctx.output_count() == 0 {
                    ctx.record(
                        WindowIndex(w),
                        DataUnit {
                            key: j.key,
                            timestamp: j.timestamp,
                            seq: SequenceId(0),
                            payload: j.payload,
                        },
                    );
                } else {
                    for o in 0..ctx.output_count() {
                        ctx.send_packet(o, j.key, j.timestamp, j.payload.clone())
                            .expect("join emissions sorted by timestamp");
                    }
                }
            }
        }
    }
}

/// Sums 8-byte big-endian payload values per window. With outputs, emits one
/// partial per window under the shared aggregation key so a Group stream
/// routes all partials to a single node; as a sink it records the final
/// total (the identity 0 for empty windows).
#[derive(Default)]
struct WindowSum {
    partial: BTreeMap<u64, u64>,
    boundaries: Boundaries,
}

/// All aggregation partials share this key.
pub const AGGREGATION_KEY: Key = Key(0);

impl StageLogic for WindowSum {
    fn on_wake(&mut self, ctx: &mut dyn StageCtx) {
        let width = ctx.window_width();
        let inputs = ctx.input_count();
        for i in 0..inputs {
            loop {
                match ctx.get_packet(i) {
                    GetPacket::Unit(u) => {
                        let w = u.timestamp / width;
                        let total = self.partial.entry(w).or_insert(0);
                        *total = total.wrapping_add(payload_value(&u));
                    }
                    GetPacket::WindowBoundary(w) => self.boundaries.mark(w.0, i),
                    GetPacket::NoneAvailable => break,
                }
            }
        }
        for w in self.boundaries.take_ripe(inputs) {
            let sum = self.partial.remove(&w).unwrap_or(0);
            if !ctx.owns_key(0, AGGREGATION_KEY) {
                continue;
            }
            let payload = sum.to_be_bytes().to_vec();
            if ctx.output_count() == 0 {
                ctx.record(
                    WindowIndex(w),
                    DataUnit {
                        key: AGGREGATION_KEY,
                        timestamp: w * width,
                        seq: SequenceId(0),
                        payload,
                    },
                );
            } else {
                for o in 0..ctx.output_count() {
                    ctx.send_packet(o, AGGREGATION_KEY, w * width, payload.clone())
                        .expect("window-aligned timestamps are monotone");
                }
            }
        }
    }
}
