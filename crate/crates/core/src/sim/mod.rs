//! Deterministic discrete-event cluster simulator.
//!
//! Time is integer ticks. Every event carries a `(tick, ordinal)` key, the
//! ordinal assigned at scheduling time, so execution order — and therefore
//! the whole run — is a pure function of the scenario and seed. Nodes run
//! as cooperatively scheduled wakes inside the loop; connections model
//! transport with per-connection FIFO delivery and credit-based flow
//! control; control processes live on a control node reached by uncredited
//! control messages with their own latency.

mod net;
mod node;
pub mod report;

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::control::{
    ControlAction, ControlConfig, ControlProcess, GroupRouter, HistogramKind, ProgressReport,
};
use crate::model::{StageFunction, StageId, StreamId, StreamOp, Topology};
use crate::runtime::builtins;
use crate::runtime::{EmitCounters, StageCtx, StageLogic};
use crate::scenario::{FailureKind, Params, Scenario, ScenarioError};
use crate::wire::Frame;

use net::Conn;
use node::{DeliverOutcome, InState, NodeCtx, NodeRt, OutState, SourceState};
pub use report::{
    BufferStat, Capture, FrameInfo, LinkStat, NodeStat, Outcome, RecoveryEvent, SimReport,
    SpanDump, StreamWindowStat, TraceRecord,
};
use report::{ReportAcc, SplitAcc};

/// Options for a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record the full event trace (one record per event).
    pub collect_trace: bool,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: SimReport,
    pub trace: Vec<TraceRecord>,
    pub captures: Vec<Capture>,
}

/// Runs a scenario to completion (or tick budget) and reports.
pub fn run(scenario: &Scenario, options: RunOptions) -> Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    let mut world = World::build(scenario, options);
    world.run_loop();
    Ok(world.into_output())
}

/// Messages from the control node to data nodes (and receiver-to-sender
/// window cancels). Uncredited, delivered after the control latency.
#[derive(Debug, Clone)]
pub(crate) enum NodeMsg {
    Split {
        stream: StreamId,
        window: u64,
        epoch: u32,
        owners: Vec<u32>,
    },
    Verdict {
        stream: StreamId,
        failed_slot: u32,
        epoch: u32,
        owners: Option<Vec<u32>>,
    },
    Commit {
        stream: StreamId,
        window: u64,
    },
    SenderFinished {
        stream: StreamId,
        sender_slot: u32,
        last_window: Option<u64>,
    },
    CancelWindow {
        stream: StreamId,
        window: u64,
    },
}

/// Messages from data nodes to the control node.
#[derive(Debug, Clone)]
pub(crate) enum CtlWire {
    Histogram {
        stream: StreamId,
        window: u64,
        sender_slot: u32,
        kind: HistogramKind,
        counts: Vec<u64>,
    },
    Progress(ProgressReport),
    WindowAck {
        stream: StreamId,
        window: u64,
        receiver_slot: u32,
    },
    StreamComplete {
        stream: StreamId,
        sender_slot: u32,
        last_window: Option<u64>,
    },
    SenderClosed {
        stream: StreamId,
        sender_slot: u32,
    },
}

#[derive(Debug)]
pub(crate) enum Event {
    Wake(usize),
    Deliver { conn: usize, frame: Frame },
    CreditReturn { conn: usize, data: bool },
    PeerClosedAtSender { conn: usize },
    PeerClosedAtReceiver { conn: usize },
    NodeMsg { node: usize, msg: NodeMsg },
    CtlMsg(CtlWire),
    CtlTick,
    Fail(usize),
    Throttle { node: usize, rate: u32 },
}

/// Immutable run-wide data shared by all handlers.
pub(crate) struct RunEnv {
    pub topology: Topology,
    pub window_width: u64,
    pub params: Params,
    /// Bucket count per stream (Group streams only; 0 otherwise).
    pub stream_buckets: Vec<u32>,
    /// Node id -> (stage, slot).
    pub node_meta: Vec<(StageId, u32)>,
    /// Stage -> first node id.
    pub stage_base: Vec<usize>,
}

impl RunEnv {
    pub fn node_id(&self, stage: StageId, slot: u32) -> usize {
        self.stage_base[stage.0 as usize] + slot as usize
    }

    pub fn stream_name(&self, stream: StreamId) -> String {
        self.topology.stream(stream).name.clone()
    }

    pub fn stage_name(&self, stage: StageId) -> String {
        self.topology.stage(stage).name.clone()
    }

    pub fn node_name(&self, node: usize) -> String {
        let (stage, slot) = self.node_meta[node];
        let mut s = self.stage_name(stage);
        s.push('/');
        s.push_str(itoa(slot).as_str());
        s
    }

    pub fn stream_sender_nodes(&self, stream: StreamId) -> Vec<usize> {
        let decl = self.topology.stream(stream);
        let stage = self.topology.stage(decl.producer);
        (0..stage.node_count)
            .map(|slot| self.node_id(decl.producer, slot))
            .collect()
    }

    pub fn stream_receiver_nodes(&self, stream: StreamId) -> Vec<usize> {
        let decl = self.topology.stream(stream);
        let stage = self.topology.stage(decl.consumer);
        (0..stage.node_count)
            .map(|slot| self.node_id(decl.consumer, slot))
            .collect()
    }
}

fn itoa(v: u32) -> String {
    let mut s = String::new();
    core::fmt::write(&mut s, format_args!("{v}")).expect("write to string");
    s
}

/// Shared mutable simulator context: clock, queue, trace, counters.
pub(crate) struct SimCtx {
    pub now: u64,
    next_ordinal: u64,
    queue: BTreeMap<(u64, u64), Event>,
    trace_enabled: bool,
    trace_records: Vec<TraceRecord>,
    pub report: ReportAcc,
    pub captures: Vec<Capture>,
}

impl SimCtx {
    pub fn schedule(&mut self, delay: u64, event: Event) {
        let key = (self.now + delay, self.next_ordinal);
        self.next_ordinal += 1;
        self.queue.insert(key, event);
    }

    pub fn trace(&mut self, record: impl FnOnce() -> TraceRecord) {
        if self.trace_enabled {
            self.trace_records.push(record());
        }
    }
}

struct Placeholder;

impl StageLogic for Placeholder {
    fn on_wake(&mut self, _ctx: &mut dyn StageCtx) {}
}

pub(crate) struct World {
    env: RunEnv,
    cx: SimCtx,
    nodes: Vec<NodeRt>,
    conns: Vec<Conn>,
    /// Conn id -> (receiver node, input index, connection position).
    conn_in_pos: Vec<(usize, usize, usize)>,
    controls: Vec<ControlProcess>,
    routers: BTreeMap<u32, GroupRouter>,
    halted: Option<Outcome>,
}

impl World {
    fn build(scenario: &Scenario, options: RunOptions) -> World {
        let topo = scenario.topology.clone();
        let params = scenario.params.clone();

        let mut stage_base = Vec::with_capacity(topo.stages().len());
        let mut node_meta = Vec::new();
        for (si, stage) in topo.stages().iter().enumerate() {
            stage_base.push(node_meta.len());
            for slot in 0..stage.node_count {
                node_meta.push((StageId(si as u32), slot));
            }
        }

        let stream_buckets: Vec<u32> = topo
            .streams()
            .iter()
            .map(|s| {
                if s.op == StreamOp::Group {
                    params.bucket_multiplier * topo.stage(s.consumer).node_count
                } else {
                    0
                }
            })
            .collect();

        let env = RunEnv {
            topology: topo,
            window_width: scenario.window.width(),
            params,
            stream_buckets,
            node_meta,
            stage_base,
        };

        // Connections: one per (sender node, receiver node) per stream.
        let mut conns: Vec<Conn> = Vec::new();
        let mut conn_in_pos: Vec<(usize, usize, usize)> = Vec::new();
        // Per node: in/out states under construction.
        let mut node_ins: Vec<Vec<InState>> = (0..env.node_meta.len()).map(|_| Vec::new()).collect();
        let mut node_outs: Vec<Vec<OutState>> =
            (0..env.node_meta.len()).map(|_| Vec::new()).collect();

        for (idx, stream) in env.topology.streams().iter().enumerate() {
            let sid = StreamId(idx as u32);
            let senders = env.stream_sender_nodes(sid);
            let receivers = env.stream_receiver_nodes(sid);
            let k = env.stream_buckets[idx];
            // Receiver-side input states first so connection positions are
            // (sender slot) indexed.
            let mut per_receiver_conns: Vec<Vec<usize>> =
                (0..receivers.len()).map(|_| Vec::new()).collect();
            let mut per_sender_conns: Vec<Vec<usize>> =
                (0..senders.len()).map(|_| Vec::new()).collect();
            for (s_slot, &s_node) in senders.iter().enumerate() {
                for (r_slot, &r_node) in receivers.iter().enumerate() {
                    let conn_id = conns.len();
                    conns.push(Conn::new(
                        sid,
                        s_node,
                        r_node,
                        r_slot as u32,
                        env.params.credits,
                    ));
                    per_sender_conns[s_slot].push(conn_id);
                    per_receiver_conns[r_slot].push(conn_id);
                }
            }
            for (s_slot, &s_node) in senders.iter().enumerate() {
                node_outs[s_node].push(OutState::new(
                    sid,
                    stream.op,
                    core::mem::take(&mut per_sender_conns[s_slot]),
                    k,
                ));
            }
            for (r_slot, &r_node) in receivers.iter().enumerate() {
                let in_conns = core::mem::take(&mut per_receiver_conns[r_slot]);
                let in_idx = node_ins[r_node].len();
                for (pos, &conn_id) in in_conns.iter().enumerate() {
                    while conn_in_pos.len() <= conn_id {
                        conn_in_pos.push((0, 0, 0));
                    }
                    conn_in_pos[conn_id] = (r_node, in_idx, pos);
                }
                node_ins[r_node].push(InState::new(sid, stream.op, in_conns));
            }
        }

        // Nodes.
        let mut nodes: Vec<NodeRt> = Vec::with_capacity(env.node_meta.len());
        for (id, &(stage_id, slot)) in env.node_meta.iter().enumerate() {
            let stage = env.topology.stage(stage_id);
            let source = match stage.function {
                StageFunction::Generate => Some(SourceState {
                    units: crate::scenario::generate_units(scenario, stage_id, slot),
                    cursor: 0,
                }),
                _ => None,
            };
            nodes.push(NodeRt {
                id,
                stage: stage_id,
                slot,
                alive: true,
                rate: env.params.node_rate,
                logic: builtins::instantiate(&stage.function),
                source,
                ins: core::mem::take(&mut node_ins[id]),
                outs: core::mem::take(&mut node_outs[id]),
                ordinals: EmitCounters::new(),
                key_colocated: stage.key_colocated(&env.topology),
                budget_tick: u64::MAX,
                budget_used: 0,
                source_budget_used: 0,
                need_rewake: false,
                wake_scheduled: None,
                finalized: false,
                commit_counts: BTreeMap::new(),
            });
        }

        // Control processes (one per stream) and per-stage group routers.
        let config = ControlConfig {
            theta: env.params.theta,
            suspect_intervals: env.params.suspect_intervals,
        };
        let controls: Vec<ControlProcess> = env
            .topology
            .streams()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                ControlProcess::new(
                    StreamId(i as u32),
                    s.op,
                    env.topology.stage(s.producer).node_count,
                    env.topology.stage(s.consumer).node_count,
                    config,
                )
            })
            .collect();
        let mut routers: BTreeMap<u32, GroupRouter> = BTreeMap::new();
        for (si, stage) in env.topology.stages().iter().enumerate() {
            let members: Vec<(StreamId, u32)> = stage
                .inputs
                .iter()
                .filter(|&&s| env.topology.stream(s).op == StreamOp::Group)
                .map(|&s| {
                    let producer = env.topology.stream(s).producer;
                    (s, env.topology.stage(producer).node_count)
                })
                .collect();
            if !members.is_empty() {
                let k = env.stream_buckets[members[0].0 .0 as usize];
                routers.insert(
                    si as u32,
                    GroupRouter::new(StageId(si as u32), members, stage.node_count, k),
                );
            }
        }

        let mut cx = SimCtx {
            now: 0,
            next_ordinal: 0,
            queue: BTreeMap::new(),
            trace_enabled: options.collect_trace,
            trace_records: Vec::new(),
            report: ReportAcc::default(),
            captures: Vec::new(),
        };

        // Initial events: failure injections first (a node failed at tick t
        // does nothing at tick t), then source wakes and the report timer.
        for failure in &scenario.failures {
            let stage = env
                .topology
                .stage_by_name(&failure.stage)
                .expect("validated");
            let node = env.node_id(stage, failure.node);
            let event = match failure.kind {
                FailureKind::Crash => Event::Fail(node),
                FailureKind::Throttle { rate } => Event::Throttle { node, rate },
            };
            let key = (failure.at_tick, cx.next_ordinal);
            cx.next_ordinal += 1;
            cx.queue.insert(key, event);
        }
        for node in &mut nodes {
            if node.source.is_some() {
                node.wake_scheduled = Some(0);
                cx.schedule(0, Event::Wake(node.id));
            }
        }
        let key = (env.params.report_interval, cx.next_ordinal);
        cx.next_ordinal += 1;
        cx.queue.insert(key, Event::CtlTick);

        World {
            env,
            cx,
            nodes,
            conns,
            conn_in_pos,
            controls,
            routers,
            halted: None,
        }
    }

    fn run_loop(&mut self) {
        let max_ticks = self.env.params.max_ticks;
        loop {
            if self.halted.is_some() {
                break;
            }
            let Some((&(tick, _), _)) = self.cx.queue.first_key_value() else {
                break;
            };
            if tick > max_ticks {
                self.halted = Some(Outcome::TickBudgetExhausted);
                break;
            }
            let ((tick, _), event) = self.cx.queue.pop_first().expect("checked");
            self.cx.now = tick;
            self.dispatch(event);
        }
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::Wake(node) => self.handle_wake(node),
            Event::Deliver { conn, frame } => self.handle_deliver(conn, frame),
            Event::CreditReturn { conn, data } => self.handle_credit(conn, data),
            Event::PeerClosedAtSender { conn } => self.handle_peer_closed_sender(conn),
            Event::PeerClosedAtReceiver { conn } => self.handle_peer_closed_receiver(conn),
            Event::NodeMsg { node, msg } => self.handle_node_msg(node, msg),
            Event::CtlMsg(msg) => self.handle_ctl_msg(msg),
            Event::CtlTick => self.handle_ctl_tick(),
            Event::Fail(node) => self.handle_fail(node),
            Event::Throttle { node, rate } => self.handle_throttle(node, rate),
        }
    }

    fn schedule_wake(node: &mut NodeRt, cx: &mut SimCtx, delay: u64) {
        let target = cx.now + delay;
        if node.wake_scheduled == Some(target) {
            return;
        }
        node.wake_scheduled = Some(target);
        cx.schedule(delay, Event::Wake(node.id));
    }

    fn handle_wake(&mut self, node_id: usize) {
        let env = &self.env;
        let cx = &mut self.cx;
        let node = &mut self.nodes[node_id];
        if node.wake_scheduled == Some(cx.now) {
            node.wake_scheduled = None;
        }
        if !node.alive {
            return;
        }
        ReportAcc::bump(&mut cx.report.node_wakes, node_id, 1);
        node.reset_budget(cx.now);

        let gated = node
            .outs
            .iter()
            .any(|o| o.outbox_len() > o.conns.len() * env.params.credits as usize * 2);
        if !gated {
            if node.source.is_some() {
                drive_source(node, cx, env);
            } else if !node.ins.is_empty() {
                poll_logic(node, cx, env);
            }
        }
        if node.source.is_none() {
            if let Some(floor) = node.input_floor() {
                if floor > 0 && floor != u64::MAX {
                    for i in 0..node.outs.len() {
                        let stream_idx = node.outs[i].stream.0 as usize;
                        node.outs[i].close_through(floor - 1, node.slot, stream_idx, cx, env);
                    }
                }
            }
            if node.all_inputs_complete() && !node.finalized {
                finalize_outputs(node, cx, env);
            }
        }
        for i in 0..node.outs.len() {
            let stream_idx = node.outs[i].stream.0 as usize;
            node.outs[i].finish_replays(cx, stream_idx);
        }
        pump_node(node, &mut self.conns, cx, env);
        if node.need_rewake {
            node.need_rewake = false;
            Self::schedule_wake(node, cx, 1);
        }
    }

    fn handle_deliver(&mut self, conn_id: usize, frame: Frame) {
        let env = &self.env;
        let cx = &mut self.cx;
        let conn = &mut self.conns[conn_id];
        conn.delivered();
        let (recv_node, in_idx, conn_pos) = self.conn_in_pos[conn_id];
        let stream = conn.stream;
        let receiver_slot = conn.receiver_slot;
        let sender_node = conn.sender_node;
        let node = &mut self.nodes[recv_node];
        if !node.alive {
            if frame.is_unit() {
                ReportAcc::bump(&mut cx.report.link_dropped_dead, conn_id, 1);
                let tick = cx.now;
                cx.trace(|| TraceRecord::DroppedDead {
                    tick,
                    stream: env.stream_name(stream),
                    receiver: env.node_name(recv_node),
                });
            }
            return;
        }
        {
            let tick = cx.now;
            let info = frame_info(&frame, env.window_width);
            cx.trace(|| TraceRecord::Deliver {
                tick,
                stream: env.stream_name(stream),
                sender: env.node_name(sender_node),
                receiver: env.node_name(recv_node),
                frame: info,
            });
        }
        match node.ins[in_idx].deliver(conn_pos, frame, env.window_width) {
            DeliverOutcome::Queued { unit_window } => {
                if let Some(w) = unit_window {
                    ReportAcc::bump(&mut cx.report.link_delivered, conn_id, 1);
                    *cx.report
                        .accepted
                        .entry((stream.0 as usize, w, receiver_slot))
                        .or_insert(0) += 1;
                }
            }
            DeliverOutcome::DuplicateDropped => {
                ReportAcc::bump(&mut cx.report.link_dup_dropped, conn_id, 1);
                cx.schedule(
                    env.params.link_latency,
                    Event::CreditReturn {
                        conn: conn_id,
                        data: true,
                    },
                );
                let tick = cx.now;
                cx.trace(|| TraceRecord::DuplicateDropped {
                    tick,
                    stream: env.stream_name(stream),
                    receiver: env.node_name(recv_node),
                    seq: 0,
                });
            }
            DeliverOutcome::Discarded { window } => {
                ReportAcc::bump(&mut cx.report.link_discarded, conn_id, 1);
                cx.schedule(
                    env.params.link_latency,
                    Event::CreditReturn {
                        conn: conn_id,
                        data: true,
                    },
                );
                let tick = cx.now;
                cx.trace(|| TraceRecord::Discarded {
                    tick,
                    stream: env.stream_name(stream),
                    receiver: env.node_name(recv_node),
                    window,
                });
            }
        }
        Self::schedule_wake(node, cx, 0);
    }

    fn handle_credit(&mut self, conn_id: usize, data: bool) {
        let conn = &mut self.conns[conn_id];
        conn.restore_credit();
        if data {
            conn.data_acked += 1;
        }
        let sender = conn.sender_node;
        let node = &mut self.nodes[sender];
        if node.alive {
            Self::schedule_wake(node, &mut self.cx, 0);
        }
    }

    fn handle_peer_closed_sender(&mut self, conn_id: usize) {
        let conn = &self.conns[conn_id];
        let (sender, stream, slot) = (conn.sender_node, conn.stream, conn.receiver_slot);
        let node = &mut self.nodes[sender];
        if let Some(out) = node.outs.iter_mut().find(|o| o.stream == stream) {
            out.on_peer_closed(slot);
        }
        if node.alive {
            Self::schedule_wake(node, &mut self.cx, 0);
        }
    }

    fn handle_peer_closed_receiver(&mut self, conn_id: usize) {
        let (recv_node, in_idx, conn_pos) = self.conn_in_pos[conn_id];
        let node = &mut self.nodes[recv_node];
        node.ins[in_idx].conns[conn_pos].closed = true;
        if node.alive {
            Self::schedule_wake(node, &mut self.cx, 0);
        }
    }

    fn handle_node_msg(&mut self, node_id: usize, msg: NodeMsg) {
        let env = &self.env;
        let cx = &mut self.cx;
        let node = &mut self.nodes[node_id];
        if !node.alive {
            return;
        }
        match msg {
            NodeMsg::Split {
                stream,
                window,
                epoch,
                owners,
            } => {
                let slot = node.slot;
                if let Some(out) = node.outs.iter_mut().find(|o| o.stream == stream) {
                    let stream_idx = stream.0 as usize;
                    out.on_split(window, epoch, owners, slot, stream_idx, cx, env);
                }
            }
            NodeMsg::Verdict {
                stream,
                failed_slot,
                epoch,
                owners,
            } => {
                let stream_idx = stream.0 as usize;
                if let Some(out) = node.outs.iter_mut().find(|o| o.stream == stream) {
                    out.on_verdict(failed_slot, epoch, owners.clone(), cx, stream_idx);
                }
                if let Some(in_state) = node.ins.iter_mut().find(|i| i.stream == stream) {
                    if let Some(table) = owners {
                        in_state.route = Some(table);
                    }
                }
            }
            NodeMsg::Commit { stream, window } => {
                let stream_idx = stream.0 as usize;
                if let Some(out) = node.outs.iter_mut().find(|o| o.stream == stream) {
                    let released = out.on_commit(window, cx, stream_idx);
                    if released > 0 {
                        let tick = cx.now;
                        let sender = env.node_name(node_id);
                        cx.trace(|| TraceRecord::BufferRelease {
                            tick,
                            stream: env.stream_name(stream),
                            sender,
                            window,
                            units: released,
                        });
                    }
                    let n = node.commit_counts.entry(window).or_insert(0);
                    *n += 1;
                    if *n == node.outs.len() {
                        node.ordinals.release_window(window);
                        node.commit_counts.remove(&window);
                    }
                }
            }
            NodeMsg::SenderFinished {
                stream,
                sender_slot,
                last_window,
            } => {
                if let Some(in_state) = node.ins.iter_mut().find(|i| i.stream == stream) {
                    in_state.conns[sender_slot as usize].finished_after = Some(last_window);
                }
            }
            NodeMsg::CancelWindow { stream, window } => {
                if let Some(out) = node.outs.iter_mut().find(|o| o.stream == stream) {
                    out.on_cancel(window);
                }
            }
        }
        Self::schedule_wake(node, cx, 0);
    }

    fn handle_ctl_msg(&mut self, msg: CtlWire) {
        match msg {
            CtlWire::Histogram {
                stream,
                window,
                sender_slot,
                kind,
                counts,
            } => {
                let total: u64 = counts.iter().sum();
                let tick = self.cx.now;
                let name = self.env.stream_name(stream);
                self.cx.trace(|| TraceRecord::HistogramReport {
                    tick,
                    stream: name,
                    window,
                    sender_slot,
                    presend: kind == HistogramKind::Presend,
                    total,
                });
                let consumer = self.env.topology.stream(stream).consumer;
                if let Some(router) = self.routers.get_mut(&consumer.0) {
                    let splits = router.on_histogram(stream, window, sender_slot, kind, counts);
                    self.broadcast_splits(splits);
                }
            }
            CtlWire::Progress(report) => {
                let tick = self.cx.now;
                let name = self.env.stream_name(report.stream);
                let r = report.clone();
                self.cx.trace(|| TraceRecord::Progress {
                    tick,
                    stream: name,
                    window: r.window,
                    sender_slot: r.sender_slot,
                    receiver_slot: r.receiver_slot,
                    units_sent: r.units_sent,
                    units_acked: r.units_acked,
                });
                self.controls[report.stream.0 as usize].on_progress(&report);
            }
            CtlWire::WindowAck {
                stream,
                window,
                receiver_slot,
            } => {
                let actions =
                    self.controls[stream.0 as usize].on_window_ack(window, receiver_slot);
                self.process_actions(actions);
            }
            CtlWire::StreamComplete {
                stream,
                sender_slot,
                last_window,
            } => {
                let tick = self.cx.now;
                let name = self.env.stream_name(stream);
                self.cx.trace(|| TraceRecord::StreamComplete {
                    tick,
                    stream: name,
                    sender_slot,
                    last_window,
                });
                let actions =
                    self.controls[stream.0 as usize].on_sender_complete(sender_slot, last_window);
                self.process_actions(actions);
                let consumer = self.env.topology.stream(stream).consumer;
                if let Some(router) = self.routers.get_mut(&consumer.0) {
                    let splits = router.on_sender_complete(stream, sender_slot, last_window);
                    self.broadcast_splits(splits);
                }
            }
            CtlWire::SenderClosed {
                stream,
                sender_slot,
            } => {
                let actions = self.controls[stream.0 as usize].on_sender_closed(sender_slot);
                self.process_actions(actions);
                let consumer = self.env.topology.stream(stream).consumer;
                if let Some(router) = self.routers.get_mut(&consumer.0) {
                    let splits = router.on_sender_closed(stream, sender_slot);
                    self.broadcast_splits(splits);
                }
            }
        }
    }

    fn broadcast_splits(&mut self, splits: Vec<crate::control::RouterSplit>) {
        for split in splits {
            for &stream in &split.streams {
                let cost = split.allocation.cost();
                let spans: Vec<SpanDump> = split
                    .allocation
                    .spans()
                    .iter()
                    .map(|s| SpanDump {
                        start: s.start,
                        end: s.end,
                        owner: s.owner,
                    })
                    .collect();
                self.cx.report.splits.insert(
                    (stream.0 as usize, split.window),
                    SplitAcc {
                        epoch: split.epoch,
                        cost,
                        spans,
                        partial: split.partial,
                    },
                );
                let tick = self.cx.now;
                let name = self.env.stream_name(stream);
                let (window, epoch, partial) = (split.window, split.epoch, split.partial);
                self.cx.trace(|| TraceRecord::Split {
                    tick,
                    stream: name,
                    window,
                    epoch,
                    cost,
                    partial,
                });
                let owners = split.allocation.owner_table();
                for node in self.env.stream_sender_nodes(stream) {
                    self.cx.schedule(
                        self.env.params.control_latency,
                        Event::NodeMsg {
                            node,
                            msg: NodeMsg::Split {
                                stream,
                                window: split.window,
                                epoch: split.epoch,
                                owners: owners.clone(),
                            },
                        },
                    );
                }
            }
        }
    }

    fn process_actions(&mut self, actions: Vec<ControlAction>) {
        let mut work: Vec<ControlAction> = actions;
        while !work.is_empty() {
            let mut next: Vec<ControlAction> = Vec::new();
            for action in work {
                match action {
                    ControlAction::Verdict(v) => {
                        let stream = v.stream;
                        let op = self.controls[stream.0 as usize].op();
                        let mut owners: Option<Vec<u32>> = None;
                        let mut epoch = v.epoch;
                        if op == StreamOp::Group {
                            let consumer = self.env.topology.stream(stream).consumer;
                            let weights =
                                self.controls[stream.0 as usize].survivor_progress();
                            if let Some(router) = self.routers.get_mut(&consumer.0) {
                                if let Some((e, table)) =
                                    router.on_receiver_failed(v.failed_slot, &weights)
                                {
                                    owners = Some(table.owner_table());
                                    epoch = e;
                                    // Mirror the verdict onto sibling streams
                                    // sharing this consumer stage.
                                    let members: Vec<StreamId> =
                                        router.members().to_vec();
                                    for member in members {
                                        if member != stream {
                                            next.extend(
                                                self.controls[member.0 as usize]
                                                    .mark_receiver_failed(v.failed_slot),
                                            );
                                        }
                                    }
                                } else if let Some(router) =
                                    self.routers.get(&consumer.0)
                                {
                                    // Already handled via a sibling: reuse
                                    // the current table.
                                    owners = router
                                        .current_allocation()
                                        .map(|a| a.owner_table());
                                    epoch = router.epoch();
                                }
                            }
                        }
                        self.broadcast_verdict(stream, v.failed_slot, epoch, owners, v.window);
                    }
                    ControlAction::Commit { stream, window } => {
                        self.cx
                            .report
                            .commits
                            .insert((stream.0 as usize, window), self.cx.now);
                        let tick = self.cx.now;
                        let name = self.env.stream_name(stream);
                        self.cx.trace(|| TraceRecord::Commit {
                            tick,
                            stream: name,
                            window,
                        });
                        for node in self.env.stream_sender_nodes(stream) {
                            self.cx.schedule(
                                self.env.params.control_latency,
                                Event::NodeMsg {
                                    node,
                                    msg: NodeMsg::Commit { stream, window },
                                },
                            );
                        }
                    }
                    ControlAction::SenderFinished {
                        stream,
                        sender_slot,
                        last_window,
                    } => {
                        for node in self.env.stream_receiver_nodes(stream) {
                            self.cx.schedule(
                                self.env.params.control_latency,
                                Event::NodeMsg {
                                    node,
                                    msg: NodeMsg::SenderFinished {
                                        stream,
                                        sender_slot,
                                        last_window,
                                    },
                                },
                            );
                        }
                    }
                    ControlAction::Unrecoverable { stream } => {
                        let name = self.env.stream_name(stream);
                        let tick = self.cx.now;
                        {
                            let name = name.clone();
                            self.cx
                                .trace(|| TraceRecord::Unrecoverable { tick, stream: name });
                        }
                        self.halted = Some(Outcome::UnrecoverableStream { stream: name });
                    }
                }
            }
            work = next;
        }
    }

    fn broadcast_verdict(
        &mut self,
        stream: StreamId,
        failed_slot: u32,
        epoch: u32,
        owners: Option<Vec<u32>>,
        window: u64,
    ) {
        let consumer = self.env.topology.stream(stream).consumer;
        let failed_node = self.env.node_id(consumer, failed_slot);
        let overload = self.nodes[failed_node].alive;
        self.cx.report.recoveries.push(RecoveryEvent {
            tick: self.cx.now,
            stream: self.env.stream_name(stream),
            window,
            failed: self.env.node_name(failed_node),
            epoch,
            overload,
        });
        let tick = self.cx.now;
        let name = self.env.stream_name(stream);
        let failed_name = self.env.node_name(failed_node);
        self.cx.trace(|| TraceRecord::Verdict {
            tick,
            stream: name,
            window,
            failed: failed_name,
            epoch,
        });
        let mut targets = self.env.stream_sender_nodes(stream);
        targets.extend(self.env.stream_receiver_nodes(stream));
        for node in targets {
            self.cx.schedule(
                self.env.params.control_latency,
                Event::NodeMsg {
                    node,
                    msg: NodeMsg::Verdict {
                        stream,
                        failed_slot,
                        epoch,
                        owners: owners.clone(),
                    },
                },
            );
        }
    }

    fn handle_ctl_tick(&mut self) {
        if self.halted.is_some() {
            return;
        }
        // Detection first: it sees the progress reported last interval.
        for i in 0..self.controls.len() {
            let actions = self.controls[i].on_interval(self.cx.now);
            self.process_actions(actions);
        }
        // Fresh progress reports from every alive sender.
        for node in &self.nodes {
            if !node.alive {
                continue;
            }
            for out in &node.outs {
                if self.controls[out.stream.0 as usize].is_complete() {
                    continue;
                }
                for (slot, &conn_id) in out.conns.iter().enumerate() {
                    let conn = &self.conns[conn_id];
                    let report = ProgressReport {
                        stream: out.stream,
                        window: out.window_cursor,
                        sender_slot: node.slot,
                        receiver_slot: conn.receiver_slot,
                        units_sent: out.routed[slot],
                        units_acked: conn.data_acked,
                        at_tick: self.cx.now,
                    };
                    self.cx.schedule(
                        self.env.params.control_latency,
                        Event::CtlMsg(CtlWire::Progress(report)),
                    );
                }
            }
        }
        let all_complete = self.controls.iter().all(|c| c.is_complete());
        if !all_complete {
            self.cx
                .schedule(self.env.params.report_interval, Event::CtlTick);
        }
    }

    fn handle_fail(&mut self, node_id: usize) {
        let node = &mut self.nodes[node_id];
        if !node.alive {
            return;
        }
        node.alive = false;
        // Fail-stop: unprocessed input and unsent output are lost.
        for in_state in &mut node.ins {
            for c in &mut in_state.conns {
                c.frames.clear();
            }
        }
        for out in &mut node.outs {
            for q in &mut out.outbox {
                q.clear();
            }
            out.windows.clear();
        }
        let tick = self.cx.now;
        let name = self.env.node_name(node_id);
        self.cx.trace(|| TraceRecord::Fail { tick, node: name });
        // Connection teardown: the peer learns after one link latency.
        for (conn_id, conn) in self.conns.iter_mut().enumerate() {
            if conn.closed {
                continue;
            }
            if conn.sender_node == node_id {
                conn.closed = true;
                self.cx.schedule(
                    self.env.params.link_latency,
                    Event::PeerClosedAtReceiver { conn: conn_id },
                );
            } else if conn.receiver_node == node_id {
                conn.closed = true;
                self.cx.schedule(
                    self.env.params.link_latency,
                    Event::PeerClosedAtSender { conn: conn_id },
                );
            }
        }
        // The control node hears about dead senders for split quorums.
        let node = &self.nodes[node_id];
        for out in &node.outs {
            self.cx.schedule(
                self.env.params.control_latency,
                Event::CtlMsg(CtlWire::SenderClosed {
                    stream: out.stream,
                    sender_slot: node.slot,
                }),
            );
        }
    }

    fn handle_throttle(&mut self, node_id: usize, rate: u32) {
        let node = &mut self.nodes[node_id];
        node.rate = rate;
        let tick = self.cx.now;
        let name = self.env.node_name(node_id);
        self.cx
            .trace(|| TraceRecord::Throttle { tick, node: name, rate });
    }

    fn into_output(self) -> RunOutput {
        let World {
            env,
            cx,
            nodes,
            conns,
            controls,
            halted,
            ..
        } = self;
        let acc = cx.report;

        let links: Vec<LinkStat> = conns
            .iter()
            .enumerate()
            .map(|(i, c)| LinkStat {
                stream: env.stream_name(c.stream),
                sender: env.node_name(c.sender_node),
                receiver: env.node_name(c.receiver_node),
                units: acc.link_units.get(&i).copied().unwrap_or(0),
                markers: acc.link_markers.get(&i).copied().unwrap_or(0),
                bytes: acc.link_bytes.get(&i).copied().unwrap_or(0),
                delivered: acc.link_delivered.get(&i).copied().unwrap_or(0),
                dropped_dead: acc.link_dropped_dead.get(&i).copied().unwrap_or(0),
                duplicates_dropped: acc.link_dup_dropped.get(&i).copied().unwrap_or(0),
                discarded: acc.link_discarded.get(&i).copied().unwrap_or(0),
            })
            .collect();

        let node_stats: Vec<NodeStat> = nodes
            .iter()
            .map(|n| NodeStat {
                stage: env.stage_name(n.stage),
                slot: n.slot,
                consumed: acc.node_consumed.get(&n.id).copied().unwrap_or(0),
                emitted: acc.node_emitted.get(&n.id).copied().unwrap_or(0),
                wakes: acc.node_wakes.get(&n.id).copied().unwrap_or(0),
                alive_at_end: n.alive,
                rate_at_end: n.rate,
            })
            .collect();

        // One row per (stream, window) seen by any accounting source.
        let mut keys: alloc::collections::BTreeSet<(usize, u64)> =
            acc.splits.keys().copied().collect();
        keys.extend(acc.commits.keys().copied());
        keys.extend(acc.accepted.keys().map(|&(s, w, _)| (s, w)));
        let stream_windows: Vec<StreamWindowStat> = keys
            .into_iter()
            .map(|(s, w)| {
                let split = acc.splits.get(&(s, w));
                let receiver_units: Vec<(u32, u64)> = acc
                    .accepted
                    .range((s, w, 0)..=(s, w, u32::MAX))
                    .map(|(&(_, _, slot), &n)| (slot, n))
                    .collect();
                StreamWindowStat {
                    stream: env.stream_name(StreamId(s as u32)),
                    window: w,
                    epoch: split.map(|x| x.epoch).unwrap_or(0),
                    allocation_cost: split.map(|x| x.cost),
                    allocation: split.map(|x| x.spans.clone()).unwrap_or_default(),
                    partial_histogram: split.map(|x| x.partial).unwrap_or(false),
                    commit_tick: acc.commits.get(&(s, w)).copied(),
                    receiver_units,
                }
            })
            .collect();

        let buffers: Vec<BufferStat> = env
            .topology
            .streams()
            .iter()
            .enumerate()
            .map(|(i, s)| BufferStat {
                stream: s.name.clone(),
                peak_backup_units: acc.backup_peak.get(&i).copied().unwrap_or(0),
                final_backup_units: acc.backup_current.get(&i).copied().unwrap_or(0),
            })
            .collect();

        let outcome = halted.unwrap_or(Outcome::Completed);
        let _ = controls;
        RunOutput {
            report: SimReport {
                outcome,
                ticks: cx.now,
                links,
                nodes: node_stats,
                stream_windows,
                recoveries: acc.recoveries,
                buffers,
            },
            trace: cx.trace_records,
            captures: cx.captures,
        }
    }
}

fn gate_threshold(out: &OutState, params: &Params) -> usize {
    out.conns.len() * params.credits as usize * 2
}

fn frame_info(frame: &Frame, width: u64) -> FrameInfo {
    match frame {
        Frame::Unit(u) => FrameInfo::Unit {
            key: u.key.0,
            seq: u.seq.0,
            window: u.timestamp / width,
            bytes: frame.encoded_len() as u64,
        },
        Frame::WindowEnd { window } => FrameInfo::WindowEnd { window: *window },
        Frame::Epoch { epoch } => FrameInfo::Epoch { epoch: *epoch },
    }
}

fn poll_logic(node: &mut NodeRt, cx: &mut SimCtx, env: &RunEnv) {
    let mut logic: Box<dyn StageLogic> = core::mem::replace(&mut node.logic, Box::new(Placeholder));
    {
        let mut ctx = NodeCtx {
            env,
            cx,
            node_id: node.id,
            stage: node.stage,
            slot: node.slot,
            node_count: env.topology.stage(node.stage).node_count,
            key_colocated: node.key_colocated,
            rate: node.rate,
            budget_used: &mut node.budget_used,
            need_rewake: &mut node.need_rewake,
            ins: &mut node.ins,
            outs: &mut node.outs,
            ordinals: &mut node.ordinals,
        };
        logic.on_wake(&mut ctx);
    }
    node.logic = logic;
}

fn drive_source(node: &mut NodeRt, cx: &mut SimCtx, env: &RunEnv) {
    loop {
        let Some(src) = node.source.as_ref() else {
            return;
        };
        if src.cursor >= src.units.len() {
            break;
        }
        if node.source_budget_used >= env.params.source_rate {
            node.need_rewake = true;
            return;
        }
        let gated = node
            .outs
            .iter()
            .any(|o| o.outbox_len() > gate_threshold(o, &env.params));
        if gated {
            return; // credit returns will wake us
        }
        let (key, ts, payload) = {
            let src = node.source.as_mut().expect("checked");
            let u = src.units[src.cursor].clone();
            src.cursor += 1;
            u
        };
        node.source_budget_used += 1;
        let mut ctx = NodeCtx {
            env,
            cx,
            node_id: node.id,
            stage: node.stage,
            slot: node.slot,
            node_count: env.topology.stage(node.stage).node_count,
            key_colocated: node.key_colocated,
            rate: node.rate,
            budget_used: &mut node.budget_used,
            need_rewake: &mut node.need_rewake,
            ins: &mut node.ins,
            outs: &mut node.outs,
            ordinals: &mut node.ordinals,
        };
        for o in 0..ctx.outs.len() {
            ctx.send_packet(o, key, ts, payload.clone())
                .expect("generated timestamps are non-decreasing");
        }
    }
    if !node.finalized {
        finalize_outputs(node, cx, env);
    }
}

fn finalize_outputs(node: &mut NodeRt, cx: &mut SimCtx, env: &RunEnv) {
    node.finalized = true;
    for i in 0..node.outs.len() {
        let stream = node.outs[i].stream;
        let stream_idx = stream.0 as usize;
        let slot = node.slot;
        let last = node.outs[i].finalize(slot, stream_idx, cx, env);
        cx.schedule(
            env.params.control_latency,
            Event::CtlMsg(CtlWire::StreamComplete {
                stream,
                sender_slot: slot,
                last_window: last,
            }),
        );
    }
}

fn pump_node(node: &mut NodeRt, conns: &mut [Conn], cx: &mut SimCtx, env: &RunEnv) {
    if !node.alive {
        return;
    }
    for out in &mut node.outs {
        for slot in 0..out.conns.len() {
            let conn_id = out.conns[slot];
            let conn = &mut conns[conn_id];
            while conn.can_push() {
                let Some((_, frame)) = out.outbox[slot].pop_front() else {
                    break;
                };
                conn.take_credit();
                let bytes = frame.encoded_len() as u64;
                if frame.is_unit() {
                    conn.data_pushed += 1;
                    ReportAcc::bump(&mut cx.report.link_units, conn_id, 1);
                } else {
                    ReportAcc::bump(&mut cx.report.link_markers, conn_id, 1);
                }
                ReportAcc::bump(&mut cx.report.link_bytes, conn_id, bytes);
                let tick = cx.now;
                let info = frame_info(&frame, env.window_width);
                let (s, r) = (conn.sender_node, conn.receiver_node);
                let stream = conn.stream;
                cx.trace(|| TraceRecord::Push {
                    tick,
                    stream: env.stream_name(stream),
                    sender: env.node_name(s),
                    receiver: env.node_name(r),
                    frame: info,
                });
                cx.schedule(env.params.link_latency, Event::Deliver { conn: conn_id, frame });
            }
        }
    }
}
