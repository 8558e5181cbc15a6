//! Per-stream control processes and per-stage bucket routing.
//!
//! Each stream has a [`ControlProcess`] (all hosted on one control node): it
//! tracks window acks and commits, stream completion, and per-receiver
//! progress, declaring a receiver failed when its acked-progress rate stays
//! below `theta` times the median alive receiver's rate for
//! `suspect_intervals` consecutive report intervals — crashed and merely
//! overloaded nodes are deliberately not distinguished.
//!
//! Bucket split decisions for Group streams live in a [`GroupRouter`] per
//! *consuming stage*: all Group streams into one stage share one bucket
//! domain and owner table, so that units with equal keys from different
//! streams land on the same node (windowed joins depend on this). Window 0
//! is split from the senders' pre-send histograms; window `n+1` from the
//! distribution actually observed in window `n`. On a failure verdict the
//! router re-splits the failed node's spans among the survivors weighted by
//! their recent progress, and every member stream broadcasts the same new
//! table under a bumped epoch.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{StageId, StreamId, StreamOp};
use crate::partition::{
    allocate_buckets, repartition_on_failure, BucketAllocation, BucketHistogram, BucketSpan,
};

/// Which buffer a histogram report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramKind {
    /// The window-0 pre-send buffer (reported before any data flows).
    Presend,
    /// The full distribution of a finished window.
    Observed,
}

/// Per-(sender, receiver, stream, window) progress observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressReport {
    pub stream: StreamId,
    pub window: u64,
    pub sender_slot: u32,
    pub receiver_slot: u32,
    /// Cumulative data units pushed on the connection.
    pub units_sent: u64,
    /// Cumulative data units the receiver has consumed (flow-control acks).
    pub units_acked: u64,
    pub at_tick: u64,
}

/// Broadcast once per (stream, window) before that window's data flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDecision {
    pub stream: StreamId,
    pub window: u64,
    pub epoch: u32,
    pub allocation: BucketAllocation,
    /// True when a dead sender's histogram is missing and the split went
    /// ahead with partial sums.
    pub partial: bool,
}

/// Broadcast to all senders and receivers of a stream when a receiver is
/// declared failed. Issued at most once per (stream, receiver).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureVerdict {
    pub stream: StreamId,
    pub window: u64,
    pub failed_slot: u32,
    pub epoch: u32,
    /// New bucket routing for Group streams; `None` for Sort/Plain streams,
    /// whose senders re-spread the failed share round-robin.
    pub allocation: Option<BucketAllocation>,
}

/// Decisions a control process hands back to the simulator for delivery.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlAction {
    Verdict(FailureVerdict),
    /// All alive receivers acked the window: senders may release backups.
    Commit { stream: StreamId, window: u64 },
    /// Tell receivers a sender has finished the stream (its last window, or
    /// `None` when it produced nothing).
    SenderFinished {
        stream: StreamId,
        sender_slot: u32,
        last_window: Option<u64>,
    },
    /// No receivers remain; the stream cannot make progress.
    Unrecoverable { stream: StreamId },
}

/// Detection parameters (a snapshot of the scenario params).
#[derive(Debug, Clone, Copy)]
pub struct ControlConfig {
    pub theta: f64,
    pub suspect_intervals: u32,
}

#[derive(Debug, Default)]
struct WindowAcks {
    acks: BTreeSet<u32>,
    committed: bool,
}

#[derive(Debug, Default, Clone)]
struct ReceiverProgress {
    prev_acked: u64,
    low_streak: u32,
    recent_rates: Vec<u64>,
}

/// Control process for one stream: commits, completion, failure detection.
#[derive(Debug)]
pub struct ControlProcess {
    stream: StreamId,
    op: StreamOp,
    config: ControlConfig,
    alive_senders: BTreeSet<u32>,
    completed_senders: BTreeMap<u32, Option<u64>>,
    alive_receivers: BTreeSet<u32>,
    epoch: u32,
    windows: BTreeMap<u64, WindowAcks>,
    /// Per (sender, receiver) cumulative progress counters.
    progress: BTreeMap<(u32, u32), (u64, u64)>,
    receivers: BTreeMap<u32, ReceiverProgress>,
    verdicts_issued: BTreeSet<u32>,
    unrecoverable: bool,
}

impl ControlProcess {
    pub fn new(
        stream: StreamId,
        op: StreamOp,
        sender_count: u32,
        receiver_count: u32,
        config: ControlConfig,
    ) -> Self {
        ControlProcess {
            stream,
            op,
            config,
            alive_senders: (0..sender_count).collect(),
            completed_senders: BTreeMap::new(),
            alive_receivers: (0..receiver_count).collect(),
            epoch: 0,
            windows: BTreeMap::new(),
            progress: BTreeMap::new(),
            receivers: (0..receiver_count)
                .map(|r| (r, ReceiverProgress::default()))
                .collect(),
            verdicts_issued: BTreeSet::new(),
            unrecoverable: false,
        }
    }

    pub fn stream(&self) -> StreamId {
        self.stream
    }

    pub fn op(&self) -> StreamOp {
        self.op
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn alive_receivers(&self) -> &BTreeSet<u32> {
        &self.alive_receivers
    }

    pub fn is_unrecoverable(&self) -> bool {
        self.unrecoverable
    }

    /// Recent progress weights of the surviving receivers, for repartition.
    pub fn survivor_progress(&self) -> Vec<(u32, u64)> {
        self.alive_receivers
            .iter()
            .map(|&r| {
                let p = self
                    .receivers
                    .get(&r)
                    .map(|p| p.recent_rates.iter().sum::<u64>())
                    .unwrap_or(0);
                (r, p)
            })
            .collect()
    }

    /// Last window the stream will carry, as declared by finished senders.
    pub fn last_window(&self) -> Option<u64> {
        self.completed_senders.values().filter_map(|w| *w).max()
    }

    pub fn all_senders_finished(&self) -> bool {
        self.alive_senders
            .iter()
            .all(|s| self.completed_senders.contains_key(s))
    }

    /// True when no more commits or decisions can be pending.
    pub fn is_complete(&self) -> bool {
        if self.unrecoverable {
            return true;
        }
        if !self.all_senders_finished() {
            return false;
        }
        match self.last_window() {
            None => true,
            Some(last) => (0..=last).all(|w| {
                self.windows
                    .get(&w)
                    .map(|wc| wc.committed)
                    .unwrap_or(false)
            }),
        }
    }

    /// Handles a sender-side progress report.
    pub fn on_progress(&mut self, report: &ProgressReport) {
        self.progress.insert(
            (report.sender_slot, report.receiver_slot),
            (report.units_sent, report.units_acked),
        );
    }

    /// A receiver finished consuming a window of this stream.
    pub fn on_window_ack(&mut self, window: u64, receiver_slot: u32) -> Vec<ControlAction> {
        let wc = self.windows.entry(window).or_default();
        wc.acks.insert(receiver_slot);
        self.check_commits()
    }

    /// A sender declared the stream finished at `last_window`.
    pub fn on_sender_complete(
        &mut self,
        sender_slot: u32,
        last_window: Option<u64>,
    ) -> Vec<ControlAction> {
        self.completed_senders.insert(sender_slot, last_window);
        let mut actions = alloc::vec![ControlAction::SenderFinished {
            stream: self.stream,
            sender_slot,
            last_window,
        }];
        actions.extend(self.check_commits());
        actions
    }

    /// A sender node crashed.
    pub fn on_sender_closed(&mut self, sender_slot: u32) -> Vec<ControlAction> {
        self.alive_senders.remove(&sender_slot);
        self.check_commits()
    }

    /// Runs failure detection over the progress gathered since the previous
    /// interval. Call once per report interval.
    pub fn on_interval(&mut self, _now: u64) -> Vec<ControlAction> {
        if self.unrecoverable {
            return Vec::new();
        }
        let alive: Vec<u32> = self.alive_receivers.iter().copied().collect();
        let mut rates: Vec<(u32, u64, u64)> = Vec::with_capacity(alive.len());
        for &r in &alive {
            let mut sent = 0u64;
            let mut acked = 0u64;
            for (&(_, recv), &(s, a)) in &self.progress {
                if recv == r {
                    sent += s;
                    acked += a;
                }
            }
            let entry = self.receivers.entry(r).or_default();
            let rate = acked.saturating_sub(entry.prev_acked);
            entry.prev_acked = acked;
            entry.recent_rates.push(rate);
            let keep = self.config.suspect_intervals as usize;
            if entry.recent_rates.len() > keep {
                let drop = entry.recent_rates.len() - keep;
                entry.recent_rates.drain(..drop);
            }
            rates.push((r, rate, sent.saturating_sub(acked)));
        }
        let suspects = flag_suspects(&rates, self.config.theta);
        let mut actions = Vec::new();
        for &(r, _, _) in &rates {
            let streak = {
                let entry = self.receivers.entry(r).or_default();
                if suspects.contains(&r) {
                    entry.low_streak += 1;
                } else {
                    entry.low_streak = 0;
                }
                entry.low_streak
            };
            if streak >= self.config.suspect_intervals {
                actions.extend(self.mark_receiver_failed(r));
                if self.unrecoverable {
                    break;
                }
            }
        }
        actions
    }

    /// Declares a receiver failed (detection here, or mirrored from a
    /// sibling stream sharing the consumer stage). Idempotent.
    pub fn mark_receiver_failed(&mut self, failed: u32) -> Vec<ControlAction> {
        if self.unrecoverable || !self.verdicts_issued.insert(failed) {
            return Vec::new();
        }
        self.alive_receivers.remove(&failed);
        if self.alive_receivers.is_empty() {
            self.unrecoverable = true;
            return alloc::vec![ControlAction::Unrecoverable {
                stream: self.stream
            }];
        }
        self.epoch += 1;
        let window = self.lowest_uncommitted_window();
        let mut actions = alloc::vec![ControlAction::Verdict(FailureVerdict {
            stream: self.stream,
            window,
            failed_slot: failed,
            epoch: self.epoch,
            allocation: None,
        })];
        // The failed receiver no longer gates commits.
        actions.extend(self.check_commits());
        actions
    }

    fn lowest_uncommitted_window(&self) -> u64 {
        self.windows
            .iter()
            .find(|(_, wc)| !wc.committed)
            .map(|(&w, _)| w)
            .unwrap_or(0)
    }

    fn check_commits(&mut self) -> Vec<ControlAction> {
        let mut actions = Vec::new();
        let alive = &self.alive_receivers;
        let stream = self.stream;
        for (&w, wc) in self.windows.iter_mut() {
            if wc.committed {
                continue;
            }
            if !alive.is_empty() && alive.iter().all(|r| wc.acks.contains(r)) {
                wc.committed = true;
                actions.push(ControlAction::Commit { stream, window: w });
            }
        }
        actions
    }
}

/// Receivers whose rate is below `theta` times the median alive receiver's
/// rate while senders hold a backlog for them; a receiver making zero
/// progress against a backlog is suspect outright (a lone receiver is its
/// own median, so the relative rule alone could never flag it). `rates` is
/// `(slot, rate, backlog)`; the median is the upper median.
pub fn flag_suspects(rates: &[(u32, u64, u64)], theta: f64) -> Vec<u32> {
    if rates.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<u64> = rates.iter().map(|&(_, r, _)| r).collect();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2];
    rates
        .iter()
        .filter(|&&(_, rate, backlog)| {
            backlog > 0 && (rate == 0 || (rate as f64) < theta * median as f64)
        })
        .map(|&(slot, _, _)| slot)
        .collect()
}

#[derive(Debug, Default)]
struct RouterWindow {
    presend: BTreeMap<(StreamId, u32), Vec<u64>>,
    observed: BTreeMap<(StreamId, u32), Vec<u64>>,
    split_issued: bool,
    partial: bool,
}

#[derive(Debug)]
struct MemberSenders {
    alive: BTreeSet<u32>,
    completed: BTreeMap<u32, Option<u64>>,
    total: u32,
}

/// Splits issued by the router, one decision per member stream per window.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterSplit {
    pub window: u64,
    pub epoch: u32,
    pub allocation: BucketAllocation,
    pub partial: bool,
    pub streams: Vec<StreamId>,
}

/// Shared bucket domain of all Group streams feeding one consumer stage.
#[derive(Debug)]
pub struct GroupRouter {
    stage: StageId,
    members: Vec<StreamId>,
    bucket_count: u32,
    epoch: u32,
    windows: BTreeMap<u64, RouterWindow>,
    member_senders: BTreeMap<StreamId, MemberSenders>,
    current_allocation: Option<BucketAllocation>,
    current_histogram: Option<BucketHistogram>,
    failed: BTreeSet<u32>,
    alive_receivers: BTreeSet<u32>,
}

impl GroupRouter {
    pub fn new(
        stage: StageId,
        members: Vec<(StreamId, u32)>,
        receiver_count: u32,
        bucket_count: u32,
    ) -> Self {
        GroupRouter {
            stage,
            members: members.iter().map(|&(s, _)| s).collect(),
            bucket_count,
            epoch: 0,
            windows: BTreeMap::new(),
            member_senders: members
                .into_iter()
                .map(|(s, n)| {
                    (
                        s,
                        MemberSenders {
                            alive: (0..n).collect(),
                            completed: BTreeMap::new(),
                            total: n,
                        },
                    )
                })
                .collect(),
            current_allocation: None,
            current_histogram: None,
            failed: BTreeSet::new(),
            alive_receivers: (0..receiver_count).collect(),
        }
    }

    pub fn stage(&self) -> StageId {
        self.stage
    }

    pub fn members(&self) -> &[StreamId] {
        &self.members
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn bucket_count(&self) -> u32 {
        self.bucket_count
    }

    pub fn current_allocation(&self) -> Option<&BucketAllocation> {
        self.current_allocation.as_ref()
    }

    pub fn on_histogram(
        &mut self,
        stream: StreamId,
        window: u64,
        sender_slot: u32,
        kind: HistogramKind,
        counts: Vec<u64>,
    ) -> Vec<RouterSplit> {
        let wc = self.windows.entry(window).or_default();
        match kind {
            HistogramKind::Presend => {
                wc.presend.insert((stream, sender_slot), counts);
            }
            HistogramKind::Observed => {
                wc.observed.insert((stream, sender_slot), counts);
            }
        }
        self.check_pending_splits()
    }

    pub fn on_sender_complete(
        &mut self,
        stream: StreamId,
        sender_slot: u32,
        last_window: Option<u64>,
    ) -> Vec<RouterSplit> {
        if let Some(m) = self.member_senders.get_mut(&stream) {
            m.completed.insert(sender_slot, last_window);
        }
        self.check_pending_splits()
    }

    pub fn on_sender_closed(&mut self, stream: StreamId, sender_slot: u32) -> Vec<RouterSplit> {
        if let Some(m) = self.member_senders.get_mut(&stream) {
            m.alive.remove(&sender_slot);
        }
        self.check_pending_splits()
    }

    /// Repartitions after a receiver failure; survivors weighted by recent
    /// progress. Returns the epoch and new table shared by all members, or
    /// `None` when the node was already handled or nothing survives.
    pub fn on_receiver_failed(
        &mut self,
        failed: u32,
        survivors: &[(u32, u64)],
    ) -> Option<(u32, BucketAllocation)> {
        if !self.failed.insert(failed) {
            return None;
        }
        self.alive_receivers.remove(&failed);
        if self.alive_receivers.is_empty() {
            return None;
        }
        self.epoch += 1;
        let current = self.current_allocation.clone().unwrap_or_else(|| {
            // No split ever issued: the whole key space re-spreads.
            BucketAllocation::from_spans(
                alloc::vec![BucketSpan {
                    start: 0,
                    end: self.bucket_count,
                    owner: failed,
                }],
                self.bucket_count,
                0,
                1,
            )
        });
        let hist = self
            .current_histogram
            .clone()
            .unwrap_or_else(|| BucketHistogram::zeroed(self.bucket_count));
        let survivors: Vec<(u32, u64)> = survivors
            .iter()
            .copied()
            .filter(|&(s, _)| self.alive_receivers.contains(&s))
            .collect();
        let next = repartition_on_failure(&current, failed, &survivors, &hist).ok()?;
        self.current_allocation = Some(next.clone());
        Some((self.epoch, next))
    }

    fn hist_accounted(
        &self,
        reported: &BTreeMap<(StreamId, u32), Vec<u64>>,
        window: u64,
        stream: StreamId,
        sender: u32,
    ) -> bool {
        if reported.contains_key(&(stream, sender)) {
            return true;
        }
        match self
            .member_senders
            .get(&stream)
            .and_then(|m| m.completed.get(&sender))
        {
            Some(None) => true,
            Some(Some(last)) => *last < window,
            None => false,
        }
    }

    fn quorum(&self, reported: &BTreeMap<(StreamId, u32), Vec<u64>>, window: u64) -> bool {
        self.member_senders.iter().all(|(&stream, m)| {
            m.alive
                .iter()
                .all(|&s| self.hist_accounted(reported, window, stream, s))
        })
    }

    fn full_house(&self, reported: &BTreeMap<(StreamId, u32), Vec<u64>>, window: u64) -> bool {
        self.member_senders.iter().all(|(&stream, m)| {
            (0..m.total).all(|s| self.hist_accounted(reported, window, stream, s))
        })
    }

    fn all_senders_finished(&self) -> bool {
        self.member_senders
            .values()
            .all(|m| m.alive.iter().all(|s| m.completed.contains_key(s)))
    }

    fn last_window(&self) -> Option<u64> {
        self.member_senders
            .values()
            .flat_map(|m| m.completed.values().filter_map(|w| *w))
            .max()
    }

    fn split_issued_for(&self, window: u64) -> bool {
        self.windows
            .get(&window)
            .map(|wc| wc.split_issued)
            .unwrap_or(false)
    }

    fn check_pending_splits(&mut self) -> Vec<RouterSplit> {
        let mut out = Vec::new();
        loop {
            // (target window, source window, source is presend)
            let mut candidate: Option<(u64, u64, bool)> = None;
            for (&w, wc) in &self.windows {
                if w == 0 && !wc.split_issued && self.quorum(&wc.presend, 0) {
                    candidate = Some((0, 0, true));
                    break;
                }
                if !self.split_issued_for(w + 1) && self.quorum(&wc.observed, w) {
                    // Never chain past the final window of the stream set.
                    if self.all_senders_finished()
                        && self.last_window().map_or(true, |last| w + 1 > last)
                    {
                        continue;
                    }
                    candidate = Some((w + 1, w, false));
                    break;
                }
            }
            let Some((target, source, presend)) = candidate else {
                break;
            };
            let src = self.windows.get(&source).expect("candidate has entry");
            let partial = !self.full_house(
                if presend { &src.presend } else { &src.observed },
                source,
            );
            let hist = self.summed_histogram(source, presend);
            out.push(self.make_split(target, hist, partial));
        }
        out
    }

    fn summed_histogram(&self, window: u64, presend: bool) -> BucketHistogram {
        let mut hist = BucketHistogram::zeroed(self.bucket_count);
        if let Some(wc) = self.windows.get(&window) {
            let source = if presend { &wc.presend } else { &wc.observed };
            for counts in source.values() {
                for (i, c) in counts.iter().enumerate() {
                    if i < hist.len() {
                        hist.counts_mut()[i] += c;
                    }
                }
            }
        }
        hist
    }

    fn make_split(&mut self, window: u64, hist: BucketHistogram, partial: bool) -> RouterSplit {
        let alive: Vec<u32> = self.alive_receivers.iter().copied().collect();
        let (alloc, _) =
            allocate_buckets(&hist, alive.len() as u32).expect("receivers checked nonempty");
        let alloc = remap_owners(alloc, &alive);
        self.current_allocation = Some(alloc.clone());
        self.current_histogram = Some(hist);
        let wc = self.windows.entry(window).or_default();
        wc.split_issued = true;
        wc.partial = partial;
        RouterSplit {
            window,
            epoch: self.epoch,
            allocation: alloc,
            partial,
            streams: self.members.clone(),
        }
    }
}

/// Remaps a fresh allocation's positional owners onto actual receiver slots.
fn remap_owners(alloc: BucketAllocation, slots: &[u32]) -> BucketAllocation {
    let spans: Vec<BucketSpan> = alloc
        .spans()
        .iter()
        .map(|s| BucketSpan {
            start: s.start,
            end: s.end,
            owner: slots[s.owner as usize],
        })
        .collect();
    BucketAllocation::from_spans(
        spans,
        alloc.bucket_count(),
        alloc.cost_scaled(),
        alloc.scale_den(),
    )
}
