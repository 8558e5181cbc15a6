//! Run reports, trace records and sink captures.
//!
//! A report is fully determined by (scenario, seed): every collection is
//! ordered, so serializing it twice yields identical bytes.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::Serialize;

use crate::model::DataUnit;

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// All sources exhausted and every stream committed its last window.
    Completed,
    /// The tick budget expired with work still pending.
    TickBudgetExhausted,
    /// A stream lost all of its receivers.
    UnrecoverableStream { stream: String },
}

/// Per-connection counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkStat {
    pub stream: String,
    pub sender: String,
    pub receiver: String,
    /// Data units pushed onto the connection (including resends).
    pub units: u64,
    /// Marker frames pushed (window ends, epoch changes).
    pub markers: u64,
    /// Exact wire bytes of all pushed frames.
    pub bytes: u64,
    /// Data units delivered to an alive receiver.
    pub delivered: u64,
    /// Data units that arrived after the receiver failed.
    pub dropped_dead: u64,
    /// Data units dropped by the receiver's duplicate filter.
    pub duplicates_dropped: u64,
    /// Data units discarded because the receiver canceled the window.
    pub discarded: u64,
}

/// Per-node counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeStat {
    pub stage: String,
    pub slot: u32,
    pub consumed: u64,
    pub emitted: u64,
    pub wakes: u64,
    pub alive_at_end: bool,
    pub rate_at_end: u32,
}

/// One contiguous bucket range and its owner, for allocation dumps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpanDump {
    pub start: u32,
    pub end: u32,
    pub owner: u32,
}

/// Per-(stream, window) outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamWindowStat {
    pub stream: String,
    pub window: u64,
    /// Routing epoch when the window's split was decided.
    pub epoch: u32,
    /// Achieved cost of the split (sum of squared deviations from target).
    pub allocation_cost: Option<f64>,
    pub allocation: Vec<SpanDump>,
    /// True when the split proceeded with a dead sender's histogram missing.
    pub partial_histogram: bool,
    pub commit_tick: Option<u64>,
    /// Accepted data units per receiver slot.
    pub receiver_units: Vec<(u32, u64)>,
}

/// A failure verdict as it happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryEvent {
    pub tick: u64,
    pub stream: String,
    pub window: u64,
    pub failed: String,
    pub epoch: u32,
    /// False for a crash, true when the node was alive but abandoned.
    pub overload: bool,
}

/// Sender-side recovery-buffer accounting for one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BufferStat {
    pub stream: String,
    pub peak_backup_units: u64,
    /// Zero once every window of the stream has committed.
    pub final_backup_units: u64,
}

/// The structured result of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub outcome: Outcome,
    pub ticks: u64,
    pub links: Vec<LinkStat>,
    pub nodes: Vec<NodeStat>,
    pub stream_windows: Vec<StreamWindowStat>,
    pub recoveries: Vec<RecoveryEvent>,
    pub buffers: Vec<BufferStat>,
}

impl SimReport {
    /// Total data units pushed on a stream across all connections.
    pub fn stream_units(&self, stream: &str) -> u64 {
        self.links
            .iter()
            .filter(|l| l.stream == stream)
            .map(|l| l.units)
            .sum()
    }

    /// Total marker frames pushed on a stream.
    pub fn stream_markers(&self, stream: &str) -> u64 {
        self.links
            .iter()
            .filter(|l| l.stream == stream)
            .map(|l| l.markers)
            .sum()
    }

    /// Accepted units per receiver slot for one (stream, window).
    pub fn receiver_loads(&self, stream: &str, window: u64) -> Vec<(u32, u64)> {
        self.stream_windows
            .iter()
            .find(|sw| sw.stream == stream && sw.window == window)
            .map(|sw| sw.receiver_units.clone())
            .unwrap_or_default()
    }
}

/// Frame summary carried by trace records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FrameInfo {
    Unit { key: u64, seq: u64, window: u64, bytes: u64 },
    WindowEnd { window: u64 },
    Epoch { epoch: u32 },
}

/// One simulator event, one line in the trace dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum TraceRecord {
    Push {
        tick: u64,
        stream: String,
        sender: String,
        receiver: String,
        #[serde(flatten)]
        frame: FrameInfo,
    },
    Deliver {
        tick: u64,
        stream: String,
        sender: String,
        receiver: String,
        #[serde(flatten)]
        frame: FrameInfo,
    },
    DuplicateDropped {
        tick: u64,
        stream: String,
        receiver: String,
        seq: u64,
    },
    Discarded {
        tick: u64,
        stream: String,
        receiver: String,
        window: u64,
    },
    DroppedDead {
        tick: u64,
        stream: String,
        receiver: String,
    },
    HistogramReport {
        tick: u64,
        stream: String,
        window: u64,
        sender_slot: u32,
        presend: bool,
        total: u64,
    },
    Progress {
        tick: u64,
        stream: String,
        window: u64,
        sender_slot: u32,
        receiver_slot: u32,
        units_sent: u64,
        units_acked: u64,
    },
    WindowAck {
        tick: u64,
        stream: String,
        window: u64,
        receiver_slot: u32,
    },
    StreamComplete {
        tick: u64,
        stream: String,
        sender_slot: u32,
        last_window: Option<u64>,
    },
    Split {
        tick: u64,
        stream: String,
        window: u64,
        epoch: u32,
        cost: f64,
        partial: bool,
    },
    Verdict {
        tick: u64,
        stream: String,
        window: u64,
        failed: String,
        epoch: u32,
    },
    Commit {
        tick: u64,
        stream: String,
        window: u64,
    },
    CancelWindow {
        tick: u64,
        stream: String,
        window: u64,
        receiver_slot: u32,
    },
    BufferRelease {
        tick: u64,
        stream: String,
        sender: String,
        window: u64,
        units: u64,
    },
    Fail {
        tick: u64,
        node: String,
    },
    Throttle {
        tick: u64,
        node: String,
        rate: u32,
    },
    Unrecoverable {
        tick: u64,
        stream: String,
    },
}

impl TraceRecord {
    pub fn tick(&self) -> u64 {
        match self {
            TraceRecord::Push { tick, .. }
            | TraceRecord::Deliver { tick, .. }
            | TraceRecord::DuplicateDropped { tick, .. }
            | TraceRecord::Discarded { tick, .. }
            | TraceRecord::DroppedDead { tick, .. }
            | TraceRecord::HistogramReport { tick, .. }
            | TraceRecord::Progress { tick, .. }
            | TraceRecord::WindowAck { tick, .. }
            | TraceRecord::StreamComplete { tick, .. }
            | TraceRecord::Split { tick, .. }
            | TraceRecord::Verdict { tick, .. }
            | TraceRecord::Commit { tick, .. }
            | TraceRecord::CancelWindow { tick, .. }
            | TraceRecord::BufferRelease { tick, .. }
            | TraceRecord::Fail { tick, .. }
            | TraceRecord::Throttle { tick, .. }
            | TraceRecord::Unrecoverable { tick, .. } => *tick,
        }
    }
}

/// A unit recorded by a sink stage function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Capture {
    pub stage: String,
    pub slot: u32,
    pub window: u64,
    pub unit: DataUnit,
}

/// Mutable counters the simulator fills in while running.
#[derive(Debug, Default)]
pub(crate) struct ReportAcc {
    pub link_units: BTreeMap<usize, u64>,
    pub link_markers: BTreeMap<usize, u64>,
    pub link_bytes: BTreeMap<usize, u64>,
    pub link_delivered: BTreeMap<usize, u64>,
    pub link_dropped_dead: BTreeMap<usize, u64>,
    pub link_dup_dropped: BTreeMap<usize, u64>,
    pub link_discarded: BTreeMap<usize, u64>,
    pub node_consumed: BTreeMap<usize, u64>,
    pub node_emitted: BTreeMap<usize, u64>,
    pub node_wakes: BTreeMap<usize, u64>,
    pub accepted: BTreeMap<(usize, u64, u32), u64>,
    pub splits: BTreeMap<(usize, u64), SplitAcc>,
    pub commits: BTreeMap<(usize, u64), u64>,
    pub recoveries: Vec<RecoveryEvent>,
    pub backup_current: BTreeMap<usize, u64>,
    pub backup_peak: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone)]
pub(crate) struct SplitAcc {
    pub epoch: u32,
    pub cost: f64,
    pub spans: Vec<SpanDump>,
    pub partial: bool,
}

impl ReportAcc {
    pub fn bump(map: &mut BTreeMap<usize, u64>, key: usize, by: u64) {
        *map.entry(key).or_insert(0) += by;
    }

    pub fn backup_add(&mut self, stream: usize, by: u64) {
        let cur = self.backup_current.entry(stream).or_insert(0);
        *cur += by;
        let peak = self.backup_peak.entry(stream).or_insert(0);
        if *cur > *peak {
            *peak = *cur;
        }
    }

    pub fn backup_release(&mut self, stream: usize, by: u64) {
        let cur = self.backup_current.entry(stream).or_insert(0);
        *cur = cur.saturating_sub(by);
    }
}
