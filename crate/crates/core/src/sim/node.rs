//! Per-node runtime: input framing and delivery semantics, output window
//! state machines (pre-send buffering, sort-and-stream, recovery backups),
//! and the stage-function execution context.
//!
//! Input side: each connection is a FIFO of frames. Units are consumed by
//! their own window (taken from the timestamp); `WINDOW_END` markers drive
//! per-connection window regions and the stream-level window boundary. A
//! unit whose window the stream has already passed is a recovery replay and
//! is consumed immediately; a repeated `WINDOW_END` for a passed window
//! counts toward a replay boundary that fires once every open connection
//! has re-marked it, letting aggregating stages re-emit the recovered keys.
//!
//! Output side: Group windows buffer locally until the split decision
//! arrives, count per-bucket histograms, and keep every routed unit in a
//! backup buffer until the window commits; Sort windows buffer fully, sort
//! on close and stream out in order; Plain windows route round-robin as
//! they go. On a failure verdict the failed receiver's share is re-pushed
//! from the backups under the new routing, framed by an `EPOCH` marker and
//! re-sent `WINDOW_END` markers.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use crate::control::HistogramKind;
use crate::model::{DataUnit, Key, StageId, StreamId, StreamOp, WindowIndex};
use crate::ops::{local_sort_window, MergeStep, SortDirection, SortMergeState};
use crate::partition::bucket_of;
use crate::runtime::{
    derive_sequence_id, DuplicateFilter, EmitCounters, GetPacket, SendError, StageCtx, StageLogic,
};
use crate::scenario::RawUnit;
use crate::wire::Frame;

use super::report::ReportAcc;
use super::{CtlWire, Event, NodeMsg, RunEnv, SimCtx};

/// Pre-generated input of a source node.
#[derive(Debug)]
pub(crate) struct SourceState {
    pub units: Vec<RawUnit>,
    pub cursor: usize,
}

#[derive(Debug)]
pub(crate) struct InConn {
    pub conn: usize,
    pub frames: VecDeque<Frame>,
    /// Window of the next regular data unit on this connection, advanced by
    /// `WINDOW_END` markers.
    pub region: u64,
    /// Sender finished the stream after this window (`Some(None)`: sender
    /// carried no window at all).
    pub finished_after: Option<Option<u64>>,
    pub closed: bool,
}

impl InConn {
    fn done_for(&self, window: u64) -> bool {
        if self.region > window {
            return true;
        }
        if !self.frames.is_empty() {
            return false;
        }
        if self.closed {
            return true;
        }
        match self.finished_after {
            Some(None) => true,
            Some(Some(last)) => window > last,
            None => false,
        }
    }

    fn exhausted(&self) -> bool {
        self.frames.is_empty() && (self.closed || self.finished_after.is_some())
    }

    /// True when markers or a finish notice prove the window existed.
    fn confirms_window(&self, window: u64) -> bool {
        self.region > window
            || matches!(self.finished_after, Some(Some(last)) if last >= window)
            || !self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum InPoll {
    Unit(DataUnit),
    Boundary(u64),
    Idle,
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum DeliverOutcome {
    Queued { unit_window: Option<u64> },
    DuplicateDropped,
    Discarded { window: u64 },
}

#[derive(Debug)]
pub(crate) struct InState {
    pub stream: StreamId,
    pub op: StreamOp,
    pub conns: Vec<InConn>,
    pub window: u64,
    pub filter: DuplicateFilter,
    pub canceled: BTreeSet<u64>,
    pub merge: Option<SortMergeState>,
    /// Sort streams switch to arrival-order delivery after an epoch change;
    /// merged order cannot be maintained across a mid-window re-route.
    pub salvage_mode: bool,
    pub salvage: VecDeque<(usize, DataUnit)>,
    /// Latest bucket owner table, from failure verdicts.
    pub route: Option<Vec<u32>>,
    /// Re-marked passed windows per connection, for replay boundaries.
    pub replay_marks: BTreeMap<u64, BTreeSet<usize>>,
    pub complete: bool,
    pub boundary_acks: u64,
}

impl InState {
    pub fn new(stream: StreamId, op: StreamOp, conns: Vec<usize>) -> Self {
        let count = conns.len();
        InState {
            stream,
            op,
            conns: conns
                .into_iter()
                .map(|conn| InConn {
                    conn,
                    frames: VecDeque::new(),
                    region: 0,
                    finished_after: None,
                    closed: false,
                })
                .collect(),
            window: 0,
            filter: DuplicateFilter::new(),
            canceled: BTreeSet::new(),
            merge: SortDirection::of(op).map(|d| SortMergeState::new(count, d)),
            salvage_mode: false,
            salvage: VecDeque::new(),
            route: None,
            replay_marks: BTreeMap::new(),
            complete: false,
            boundary_acks: 0,
        }
    }

    /// Frame arrival: duplicate-filter and cancel-discard run here so the
    /// credit goes back immediately for frames the node will never read.
    pub fn deliver(&mut self, conn_pos: usize, frame: Frame, width: u64) -> DeliverOutcome {
        // A recovery replay can arrive after the stream finished; re-open it.
        self.complete = false;
        match frame {
            Frame::Unit(u) => {
                let w = u.timestamp / width;
                if self.canceled.contains(&w) {
                    return DeliverOutcome::Discarded { window: w };
                }
                if !self.filter.accept(w, u.seq) {
                    return DeliverOutcome::DuplicateDropped;
                }
                self.conns[conn_pos].frames.push_back(Frame::Unit(u));
                DeliverOutcome::Queued {
                    unit_window: Some(w),
                }
            }
            other => {
                self.conns[conn_pos].frames.push_back(other);
                DeliverOutcome::Queued { unit_window: None }
            }
        }
    }

    /// Consumes leading markers on every connection and feeds current-window
    /// units into the sort merge. Returns `(conn_pos, data)` credits to
    /// schedule.
    fn settle(&mut self, width: u64, credits: &mut Vec<(usize, bool)>) {
        loop {
            let mut progress = false;
            for ci in 0..self.conns.len() {
                loop {
                    let action = match self.conns[ci].frames.front() {
                        Some(Frame::WindowEnd { window }) => Some(Frame::WindowEnd {
                            window: *window,
                        }),
                        Some(Frame::Epoch { epoch }) => Some(Frame::Epoch { epoch: *epoch }),
                        Some(Frame::Unit(u)) => {
                            let uw = u.timestamp / width;
                            if self.op.is_sort() {
                                if uw < self.window && !self.salvage_mode {
                                    // Late replay on a sort stream without an
                                    // epoch marker (cascaded re-emission):
                                    // bypass the merge.
                                    let Some(Frame::Unit(u)) = self.conns[ci].frames.pop_front()
                                    else {
                                        unreachable!()
                                    };
                                    self.salvage.push_back((ci, u));
                                    progress = true;
                                    continue;
                                }
                                if !self.salvage_mode && uw == self.window {
                                    let Some(Frame::Unit(u)) = self.conns[ci].frames.pop_front()
                                    else {
                                        unreachable!()
                                    };
                                    self.merge
                                        .as_mut()
                                        .expect("sort stream has a merge")
                                        .push(ci, u);
                                    progress = true;
                                    continue;
                                }
                            }
                            None
                        }
                        None => None,
                    };
                    match action {
                        Some(Frame::WindowEnd { window }) => {
                            self.conns[ci].frames.pop_front();
                            credits.push((ci, false));
                            progress = true;
                            if window >= self.conns[ci].region {
                                debug_assert_eq!(window, self.conns[ci].region);
                                self.conns[ci].region = window + 1;
                            } else if window < self.window {
                                // A re-sent marker for a passed window.
                                self.replay_marks.entry(window).or_default().insert(ci);
                            }
                        }
                        Some(Frame::Epoch { .. }) => {
                            self.conns[ci].frames.pop_front();
                            credits.push((ci, false));
                            progress = true;
                            if self.op.is_sort() && !self.salvage_mode {
                                self.salvage_mode = true;
                                if let Some(m) = self.merge.as_mut() {
                                    for (c, u) in m.drain_pending() {
                                        self.salvage.push_back((c, u));
                                    }
                                }
                            }
                        }
                        _ => break,
                    }
                }
            }
            if !progress {
                break;
            }
        }
        if self.op.is_sort() && !self.salvage_mode {
            let window = self.window;
            let merge = self.merge.as_mut().expect("sort stream has a merge");
            for (ci, c) in self.conns.iter().enumerate() {
                if c.done_for(window) {
                    merge.mark_done(ci);
                }
            }
        }
    }

    /// Next readable item. `credits` receives `(conn_pos, is_data)` pairs
    /// the caller must turn into credit returns.
    pub fn poll(&mut self, width: u64, credits: &mut Vec<(usize, bool)>) -> InPoll {
        if self.complete {
            return InPoll::Complete;
        }
        self.settle(width, credits);

        // Replay boundary: every open connection re-marked a passed window.
        let fired = self.replay_marks.iter().find_map(|(&w, marked)| {
            if w >= self.window {
                return None;
            }
            let all = self
                .conns
                .iter()
                .enumerate()
                .all(|(ci, c)| c.closed || marked.contains(&ci));
            all.then_some(w)
        });
        if let Some(w) = fired {
            self.replay_marks.remove(&w);
            self.filter.release_window(w);
            self.boundary_acks += 1;
            return InPoll::Boundary(w);
        }

        if let Some((ci, u)) = self.salvage.pop_front() {
            credits.push((ci, true));
            return InPoll::Unit(u);
        }
        if self.op.is_sort() && !self.salvage_mode {
            match self.merge.as_mut().expect("sort merge").step() {
                MergeStep::Unit(u, ci) => {
                    credits.push((ci, true));
                    return InPoll::Unit(u);
                }
                MergeStep::NeedMoreInput => return InPoll::Idle,
                MergeStep::WindowDone => {}
            }
        } else {
            // Arrival-order delivery: any unit at or before the current
            // window is readable.
            for ci in 0..self.conns.len() {
                let readable = matches!(
                    self.conns[ci].frames.front(),
                    Some(Frame::Unit(u)) if u.timestamp / width <= self.window
                );
                if readable {
                    let Some(Frame::Unit(u)) = self.conns[ci].frames.pop_front() else {
                        unreachable!()
                    };
                    credits.push((ci, true));
                    return InPoll::Unit(u);
                }
            }
        }

        // No unit: window boundary or completion?
        let window = self.window;
        if self.conns.iter().all(|c| c.done_for(window)) {
            if self.conns.iter().any(|c| c.confirms_window(window)) {
                self.canceled.remove(&window);
                self.filter.release_window(window);
                self.replay_marks.retain(|&w, _| w > window);
                self.window += 1;
                if let Some(m) = self.merge.as_mut() {
                    m.reset();
                }
                self.salvage_mode = false;
                self.boundary_acks += 1;
                return InPoll::Boundary(window);
            }
            if self.conns.iter().all(|c| c.exhausted()) {
                self.complete = true;
                return InPoll::Complete;
            }
        }
        InPoll::Idle
    }

    /// Stops reading the current window: queued units are discarded (their
    /// credits returned) and future arrivals for it dropped on delivery.
    pub fn cancel_current(&mut self, width: u64, credits: &mut Vec<(usize, bool)>) -> u64 {
        let w = self.window;
        self.canceled.insert(w);
        for ci in 0..self.conns.len() {
            loop {
                let drop = matches!(
                    self.conns[ci].frames.front(),
                    Some(Frame::Unit(u)) if u.timestamp / width <= w
                );
                if !drop {
                    break;
                }
                self.conns[ci].frames.pop_front();
                credits.push((ci, true));
            }
        }
        if let Some(m) = self.merge.as_mut() {
            for (ci, _) in m.drain_pending() {
                credits.push((ci, true));
            }
        }
        while let Some((ci, _)) = self.salvage.pop_front() {
            credits.push((ci, true));
        }
        w
    }
}

#[derive(Debug, Default)]
pub(crate) struct OutWindow {
    pub hist: Vec<u64>,
    pub presend: Vec<DataUnit>,
    /// Backed-up routed units: (bucket, unit) on Group streams, otherwise
    /// (receiver slot, unit).
    pub backup: Vec<(u32, DataUnit)>,
    pub sort_buf: Vec<DataUnit>,
    pub closed: bool,
    pub flushed: bool,
    pub markers_sent: bool,
    pub presend_reported: bool,
    pub canceled: bool,
    /// Reopened by a post-close (recovery replay) emission; re-marked at the
    /// end of the wake.
    pub replay: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct RouteState {
    pub epoch: u32,
    pub owners: Vec<u32>,
}

#[derive(Debug)]
pub(crate) struct OutState {
    pub stream: StreamId,
    pub op: StreamOp,
    /// World connection index per receiver slot.
    pub conns: Vec<usize>,
    /// Receivers under a failure verdict: data is withheld, markers flow.
    pub excluded: BTreeSet<u32>,
    /// Receivers whose node died: nothing is pushed at all.
    pub closed_conns: BTreeSet<u32>,
    pub windows: BTreeMap<u64, OutWindow>,
    pub routes: BTreeMap<u64, RouteState>,
    pub committed: BTreeSet<u64>,
    pub outbox: Vec<VecDeque<(u64, Frame)>>,
    /// Data units assigned to each receiver slot so far (whether or not the
    /// transport could carry them); drives progress-report backlogs.
    pub routed: Vec<u64>,
    pub window_cursor: u64,
    pub last_ts: Option<u64>,
    pub rr: usize,
    pub bucket_count: u32,
    pub finished: bool,
}

impl OutState {
    pub fn new(stream: StreamId, op: StreamOp, conns: Vec<usize>, bucket_count: u32) -> Self {
        let n = conns.len();
        OutState {
            stream,
            op,
            conns,
            excluded: BTreeSet::new(),
            closed_conns: BTreeSet::new(),
            windows: BTreeMap::new(),
            routes: BTreeMap::new(),
            committed: BTreeSet::new(),
            outbox: (0..n).map(|_| VecDeque::new()).collect(),
            routed: alloc::vec![0; n],
            window_cursor: 0,
            last_ts: None,
            rr: 0,
            bucket_count,
            finished: false,
        }
    }

    pub fn outbox_len(&self) -> usize {
        self.outbox.iter().map(|q| q.len()).sum()
    }

    fn pushable(&self, slot: u32) -> bool {
        !self.closed_conns.contains(&slot)
    }

    fn enqueue_unit(&mut self, window: u64, slot: u32, unit: DataUnit) {
        if self.excluded.contains(&slot) {
            return;
        }
        self.routed[slot as usize] += 1;
        if self.pushable(slot) {
            self.outbox[slot as usize].push_back((window, Frame::Unit(unit)));
        }
    }

    fn enqueue_marker(&mut self, window: u64, frame: Frame) {
        for slot in 0..self.conns.len() as u32 {
            if self.pushable(slot) {
                self.outbox[slot as usize].push_back((window, frame.clone()));
            }
        }
    }

    fn next_rr_slot(&mut self) -> u32 {
        let n = self.conns.len();
        for _ in 0..n {
            let slot = (self.rr % n) as u32;
            self.rr = (self.rr + 1) % n;
            if !self.excluded.contains(&slot) {
                return slot;
            }
        }
        0
    }

    fn ensure_window(&mut self, w: u64) -> &mut OutWindow {
        let k = self.bucket_count as usize;
        self.windows.entry(w).or_insert_with(|| OutWindow {
            hist: alloc::vec![0; k],
            ..OutWindow::default()
        })
    }

    /// Routes a freshly emitted unit into window `w`.
    pub fn send(
        &mut self,
        unit: DataUnit,
        w: u64,
        sender_slot: u32,
        stream_idx: usize,
        presend_threshold: u64,
        cx: &mut SimCtx,
        env: &RunEnv,
    ) {
        if w >= self.window_cursor && w > 0 {
            self.close_through(w - 1, sender_slot, stream_idx, cx, env);
        }
        let replay = w < self.window_cursor;
        let committed = self.committed.contains(&w);
        let ow = self.ensure_window(w);
        if ow.canceled {
            return;
        }
        if replay {
            ow.replay = true;
        }
        match self.op {
            StreamOp::Group => {
                let bucket = bucket_of(unit.key, self.bucket_count).0;
                let route_slot = self.routes.get(&w).map(|r| r.owners[bucket as usize]);
                let ow = self.ensure_window(w);
                ow.hist[bucket as usize] += 1;
                if !committed {
                    ow.backup.push((bucket, unit.clone()));
                    cx.report.backup_add(stream_idx, 1);
                }
                match route_slot {
                    Some(slot) => self.enqueue_unit(w, slot, unit),
                    None => {
                        let ow = self.ensure_window(w);
                        ow.presend.push(unit);
                        if w == 0
                            && !ow.presend_reported
                            && ow.presend.len() as u64 >= presend_threshold
                        {
                            self.report_presend(w, sender_slot, cx, env);
                        }
                    }
                }
            }
            StreamOp::SortAsc | StreamOp::SortDesc => {
                if replay {
                    // Late re-emissions skip the sort path; order after
                    // recovery is arrival order.
                    let slot = self.next_rr_slot();
                    if !committed {
                        let ow = self.ensure_window(w);
                        ow.backup.push((slot, unit.clone()));
                        cx.report.backup_add(stream_idx, 1);
                    }
                    self.enqueue_unit(w, slot, unit);
                } else {
                    self.ensure_window(w).sort_buf.push(unit);
                }
            }
            StreamOp::Plain => {
                let slot = self.next_rr_slot();
                if !committed {
                    let ow = self.ensure_window(w);
                    ow.backup.push((slot, unit.clone()));
                    cx.report.backup_add(stream_idx, 1);
                }
                self.enqueue_unit(w, slot, unit);
            }
        }
    }

    fn report_presend(&mut self, w: u64, sender_slot: u32, cx: &mut SimCtx, env: &RunEnv) {
        let ow = self.ensure_window(w);
        if ow.presend_reported {
            return;
        }
        ow.presend_reported = true;
        let counts = ow.hist.clone();
        let stream = self.stream;
        cx.schedule(
            env.params.control_latency,
            Event::CtlMsg(CtlWire::Histogram {
                stream,
                window: w,
                sender_slot,
                kind: HistogramKind::Presend,
                counts,
            }),
        );
    }

    /// Closes every window up to and including `target`.
    pub fn close_through(
        &mut self,
        target: u64,
        sender_slot: u32,
        stream_idx: usize,
        cx: &mut SimCtx,
        env: &RunEnv,
    ) {
        while self.window_cursor <= target {
            let w = self.window_cursor;
            self.ensure_window(w).closed = true;
            if self.op == StreamOp::Group && w == 0 {
                self.report_presend(0, sender_slot, cx, env);
            }
            self.try_finish(w, sender_slot, stream_idx, cx, env);
            self.window_cursor = w + 1;
        }
        let floor_ts = self.window_cursor * env.window_width;
        if self.last_ts.map_or(true, |t| t < floor_ts) {
            self.last_ts = Some(floor_ts);
        }
    }

    /// Flushes and marks a closed window once its routing is known.
    pub fn try_finish(
        &mut self,
        w: u64,
        sender_slot: u32,
        stream_idx: usize,
        cx: &mut SimCtx,
        env: &RunEnv,
    ) {
        let Some(ow) = self.windows.get(&w) else {
            return;
        };
        if !ow.closed || ow.markers_sent {
            return;
        }
        let has_data = !ow.presend.is_empty() || !ow.sort_buf.is_empty();
        if self.op == StreamOp::Group
            && !ow.canceled
            && has_data
            && !self.routes.contains_key(&w)
        {
            return; // waiting for the split decision
        }
        // Flush buffered data.
        match self.op {
            StreamOp::Group => {
                let ow = self.windows.get_mut(&w).expect("checked");
                let pending: Vec<DataUnit> = if ow.canceled {
                    ow.presend.clear();
                    Vec::new()
                } else {
                    core::mem::take(&mut ow.presend)
                };
                ow.flushed = true;
                if let Some(route) = self.routes.get(&w).cloned() {
                    for unit in pending {
                        let bucket = bucket_of(unit.key, self.bucket_count).0;
                        self.enqueue_unit(w, route.owners[bucket as usize], unit);
                    }
                }
            }
            StreamOp::SortAsc | StreamOp::SortDesc => {
                let dir = SortDirection::of(self.op).expect("sort stream");
                let ow = self.windows.get_mut(&w).expect("checked");
                let mut buf = core::mem::take(&mut ow.sort_buf);
                let canceled = ow.canceled;
                ow.flushed = true;
                if !canceled {
                    local_sort_window(&mut buf, dir);
                    for unit in buf {
                        let slot = self.next_rr_slot();
                        let ow = self.windows.get_mut(&w).expect("checked");
                        ow.backup.push((slot, unit.clone()));
                        cx.report.backup_add(stream_idx, 1);
                        self.enqueue_unit(w, slot, unit);
                    }
                }
            }
            StreamOp::Plain => {}
        }
        // End-of-window markers on every open connection, then the observed
        // histogram so the next window's split can be decided.
        self.enqueue_marker(w, Frame::WindowEnd { window: w });
        let ow = self.windows.get_mut(&w).expect("checked");
        ow.markers_sent = true;
        if self.op == StreamOp::Group {
            let counts = ow.hist.clone();
            let stream = self.stream;
            cx.schedule(
                env.params.control_latency,
                Event::CtlMsg(CtlWire::Histogram {
                    stream,
                    window: w,
                    sender_slot,
                    kind: HistogramKind::Observed,
                    counts,
                }),
            );
        }
    }

    /// Applies a split decision: route the window and flush its buffer.
    pub fn on_split(
        &mut self,
        window: u64,
        epoch: u32,
        owners: Vec<u32>,
        sender_slot: u32,
        stream_idx: usize,
        cx: &mut SimCtx,
        env: &RunEnv,
    ) {
        self.routes.insert(window, RouteState { epoch, owners });
        if let Some(ow) = self.windows.get_mut(&window) {
            let pending = core::mem::take(&mut ow.presend);
            let canceled = ow.canceled;
            if let Some(route) = self.routes.get(&window).cloned() {
                if !canceled {
                    for unit in pending {
                        let bucket = bucket_of(unit.key, self.bucket_count).0;
                        self.enqueue_unit(window, route.owners[bucket as usize], unit);
                    }
                }
            }
            self.try_finish(window, sender_slot, stream_idx, cx, env);
        }
    }

    /// Applies a failure verdict: exclude the receiver, frame the epoch, and
    /// re-push the failed share of every uncommitted window from backup.
    pub fn on_verdict(
        &mut self,
        failed_slot: u32,
        epoch: u32,
        owners: Option<Vec<u32>>,
        cx: &mut SimCtx,
        stream_idx: usize,
    ) {
        let _ = (cx, stream_idx);
        self.excluded.insert(failed_slot);
        // Queued data for the failed receiver is withdrawn (it stays in the
        // backups); markers keep flowing so an abandoned node can finish.
        self.outbox[failed_slot as usize].retain(|(_, f)| !f.is_unit());
        let windows: Vec<u64> = self.windows.keys().copied().collect();
        let need_remark: Vec<u64> = windows
            .iter()
            .copied()
            .filter(|w| {
                self.windows
                    .get(w)
                    .map(|ow| ow.markers_sent)
                    .unwrap_or(false)
            })
            .collect();
        self.enqueue_marker_all_open(Frame::Epoch { epoch });
        match self.op {
            StreamOp::Group => {
                let Some(table) = owners else { return };
                for w in windows {
                    let Some(route) = self.routes.get_mut(&w) else {
                        continue; // still pre-split: nothing was sent
                    };
                    let old = core::mem::replace(&mut route.owners, table.clone());
                    route.epoch = epoch;
                    let resend: Vec<(u32, DataUnit)> = {
                        let ow = self.windows.get(&w).expect("listed");
                        if ow.canceled {
                            Vec::new()
                        } else {
                            ow.backup
                                .iter()
                                .filter(|(bucket, _)| old[*bucket as usize] == failed_slot)
                                .map(|(bucket, unit)| {
                                    (table[*bucket as usize], unit.clone())
                                })
                                .collect()
                        }
                    };
                    for (slot, unit) in resend {
                        self.enqueue_unit(w, slot, unit);
                    }
                }
            }
            StreamOp::SortAsc | StreamOp::SortDesc | StreamOp::Plain => {
                for w in windows {
                    let mut resend: Vec<(usize, u32)> = Vec::new();
                    {
                        let ow = self.windows.get(&w).expect("listed");
                        if ow.canceled {
                            continue;
                        }
                        for (i, (slot, _)) in ow.backup.iter().enumerate() {
                            if *slot == failed_slot {
                                resend.push((i, 0));
                            }
                        }
                    }
                    for (i, _) in &mut resend {
                        let new_slot = self.next_rr_slot();
                        let ow = self.windows.get_mut(&w).expect("listed");
                        ow.backup[*i].0 = new_slot;
                        let unit = ow.backup[*i].1.clone();
                        self.enqueue_unit(w, new_slot, unit);
                    }
                }
            }
        }
        // Re-mark windows whose end markers already went out so receivers
        // past them know the replay batch is complete.
        for w in need_remark {
            self.enqueue_marker(w, Frame::WindowEnd { window: w });
        }
    }

    fn enqueue_marker_all_open(&mut self, frame: Frame) {
        for slot in 0..self.conns.len() as u32 {
            if self.pushable(slot) {
                // Epoch markers are framing only; window tag 0 is unused.
                self.outbox[slot as usize].push_back((0, frame.clone()));
            }
        }
    }

    /// Receiver asked to skip the rest of a window.
    pub fn on_cancel(&mut self, window: u64) {
        let ow = self.ensure_window(window);
        ow.canceled = true;
        ow.presend.clear();
        ow.sort_buf.clear();
        for q in &mut self.outbox {
            q.retain(|(w, f)| *w != window || !f.is_unit());
        }
    }

    /// Commit: releases the window's recovery backup.
    pub fn on_commit(&mut self, window: u64, cx: &mut SimCtx, stream_idx: usize) -> u64 {
        self.committed.insert(window);
        let released = self
            .windows
            .remove(&window)
            .map(|ow| ow.backup.len() as u64)
            .unwrap_or(0);
        cx.report.backup_release(stream_idx, released);
        released
    }

    /// Closes reopened (replay) windows at the end of a wake: re-mark them
    /// so receivers past the window see the replay batch end.
    pub fn finish_replays(&mut self, cx: &mut SimCtx, stream_idx: usize) {
        let _ = (cx, stream_idx);
        let replays: Vec<u64> = self
            .windows
            .iter()
            .filter(|(_, ow)| ow.replay)
            .map(|(&w, _)| w)
            .collect();
        for w in replays {
            if let Some(ow) = self.windows.get_mut(&w) {
                ow.replay = false;
            }
            self.enqueue_marker(w, Frame::WindowEnd { window: w });
        }
    }

    /// A peer died: drop its queue entirely.
    pub fn on_peer_closed(&mut self, slot: u32) {
        self.closed_conns.insert(slot);
        self.outbox[slot as usize].clear();
    }

    /// Declares the stream finished; returns the last window carried.
    pub fn finalize(
        &mut self,
        sender_slot: u32,
        stream_idx: usize,
        cx: &mut SimCtx,
        env: &RunEnv,
    ) -> Option<u64> {
        if self.finished {
            return None;
        }
        self.finished = true;
        let last = self.windows.keys().copied().max();
        if let Some(last) = last {
            self.close_through(last, sender_slot, stream_idx, cx, env);
        }
        last
    }
}

/// One simulated node.
pub(crate) struct NodeRt {
    pub id: usize,
    pub stage: StageId,
    pub slot: u32,
    pub alive: bool,
    pub rate: u32,
    pub logic: alloc::boxed::Box<dyn StageLogic>,
    pub source: Option<SourceState>,
    pub ins: Vec<InState>,
    pub outs: Vec<OutState>,
    pub ordinals: EmitCounters,
    pub key_colocated: bool,
    pub budget_tick: u64,
    pub budget_used: u32,
    pub source_budget_used: u32,
    pub need_rewake: bool,
    pub wake_scheduled: Option<u64>,
    pub finalized: bool,
    /// Output streams that committed a window, for ordinal release.
    pub commit_counts: BTreeMap<u64, usize>,
}

impl NodeRt {
    pub fn reset_budget(&mut self, now: u64) {
        if self.budget_tick != now {
            self.budget_tick = now;
            self.budget_used = 0;
            self.source_budget_used = 0;
        }
    }

    pub fn input_floor(&self) -> Option<u64> {
        self.ins
            .iter()
            .map(|i| if i.complete { u64::MAX } else { i.window })
            .min()
    }

    pub fn all_inputs_complete(&self) -> bool {
        !self.ins.is_empty() && self.ins.iter().all(|i| i.complete)
    }
}

/// The `StageCtx` implementation: a view over one node plus the shared
/// simulator context, alive for the duration of a single wake.
pub(crate) struct NodeCtx<'a> {
    pub env: &'a RunEnv,
    pub cx: &'a mut SimCtx,
    pub node_id: usize,
    pub stage: StageId,
    pub slot: u32,
    pub node_count: u32,
    pub key_colocated: bool,
    pub rate: u32,
    pub budget_used: &'a mut u32,
    pub need_rewake: &'a mut bool,
    pub ins: &'a mut [InState],
    pub outs: &'a mut [OutState],
    pub ordinals: &'a mut EmitCounters,
}

impl NodeCtx<'_> {
    fn flush_credits(&mut self, input: usize, credits: Vec<(usize, bool)>) {
        let latency = self.env.params.link_latency;
        for (ci, data) in credits {
            let conn = self.ins[input].conns[ci].conn;
            self.cx
                .schedule(latency, Event::CreditReturn { conn, data });
        }
    }
}

impl StageCtx for NodeCtx<'_> {
    fn node_slot(&self) -> u32 {
        self.slot
    }

    fn node_count(&self) -> u32 {
        self.node_count
    }

    fn window_width(&self) -> u64 {
        self.env.window_width
    }

    fn input_count(&self) -> usize {
        self.ins.len()
    }

    fn output_count(&self) -> usize {
        self.outs.len()
    }

    fn input_op(&self, input: usize) -> StreamOp {
        self.ins[input].op
    }

    fn get_packet(&mut self, input: usize) -> GetPacket {
        if *self.budget_used >= self.rate {
            *self.need_rewake = true;
            return GetPacket::NoneAvailable;
        }
        let mut credits = Vec::new();
        let polled = self.ins[input].poll(self.env.window_width, &mut credits);
        self.flush_credits(input, credits);
        match polled {
            InPoll::Unit(u) => {
                *self.budget_used += 1;
                ReportAcc::bump(&mut self.cx.report.node_consumed, self.node_id, 1);
                GetPacket::Unit(u)
            }
            InPoll::Boundary(w) => {
                let stream = self.ins[input].stream;
                let slot = self.slot;
                self.cx.schedule(
                    self.env.params.control_latency,
                    Event::CtlMsg(CtlWire::WindowAck {
                        stream,
                        window: w,
                        receiver_slot: slot,
                    }),
                );
                let name = self.env.stream_name(stream);
                let tick = self.cx.now;
                self.cx.trace(|| super::report::TraceRecord::WindowAck {
                    tick,
                    stream: name,
                    window: w,
                    receiver_slot: slot,
                });
                GetPacket::WindowBoundary(WindowIndex(w))
            }
            InPoll::Idle | InPoll::Complete => GetPacket::NoneAvailable,
        }
    }

    fn send_packet(
        &mut self,
        output: usize,
        key: Key,
        timestamp: u64,
        payload: Vec<u8>,
    ) -> Result<(), SendError> {
        if output >= self.outs.len() {
            return Err(SendError::UnknownOutput { index: output });
        }
        let w = timestamp / self.env.window_width;
        {
            let out = &self.outs[output];
            if w >= out.window_cursor {
                if let Some(last) = out.last_ts {
                    if timestamp < last {
                        return Err(SendError::TimestampRegression {
                            last,
                            attempted: timestamp,
                        });
                    }
                }
            }
            // Sends below the cursor are recovery replays into reopened
            // windows and bypass the monotonicity check.
        }
        let ordinal = self
            .ordinals
            .next(w, key, self.slot, self.key_colocated);
        let seq = derive_sequence_id(self.stage.0, w, key, ordinal);
        let unit = DataUnit {
            key,
            timestamp,
            seq,
            payload,
        };
        let out = &mut self.outs[output];
        if w >= out.window_cursor {
            out.last_ts = Some(timestamp);
        }
        ReportAcc::bump(&mut self.cx.report.node_emitted, self.node_id, 1);
        let stream_idx = out.stream.0 as usize;
        let threshold = self.env.params.presend_threshold;
        let slot = self.slot;
        out.send(unit, w, slot, stream_idx, threshold, self.cx, self.env);
        Ok(())
    }

    fn cancel_window(&mut self, input: usize) {
        let stream = self.ins[input].stream;
        let window = self.ins[input].window;
        if self.ins[input].canceled.contains(&window) {
            return;
        }
        // Tell the senders first: their purge must be processed before any
        // credit returned by the local discard can fund another data push.
        let senders = self.env.stream_sender_nodes(stream);
        for node in senders {
            self.cx.schedule(
                self.env.params.link_latency,
                Event::NodeMsg {
                    node,
                    msg: NodeMsg::CancelWindow { stream, window },
                },
            );
        }
        let name = self.env.stream_name(stream);
        let tick = self.cx.now;
        let slot = self.slot;
        self.cx.trace(|| super::report::TraceRecord::CancelWindow {
            tick,
            stream: name,
            window,
            receiver_slot: slot,
        });
        let mut credits = Vec::new();
        let width = self.env.window_width;
        self.ins[input].cancel_current(width, &mut credits);
        for (ci, data) in &credits {
            if *data {
                let conn = self.ins[input].conns[*ci].conn;
                ReportAcc::bump(&mut self.cx.report.link_discarded, conn, 1);
            }
        }
        self.flush_credits(input, credits);
    }

    fn owns_key(&self, input: usize, key: Key) -> bool {
        let in_state = &self.ins[input];
        if in_state.op != StreamOp::Group {
            return true;
        }
        match &in_state.route {
            None => true,
            Some(owners) => {
                let bucket = bucket_of(key, owners.len() as u32).0;
                owners[bucket as usize] == self.slot
            }
        }
    }

    fn record(&mut self, window: WindowIndex, unit: DataUnit) {
        let stage = self.env.stage_name(self.stage);
        self.cx.captures.push(super::report::Capture {
            stage,
            slot: self.slot,
            window: window.0,
            unit,
        });
    }
}
